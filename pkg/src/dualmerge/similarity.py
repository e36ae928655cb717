"""Unit-similarity matrices in activation space, weight space, and combined.

For a layer with D units per model, the full similarity matrix stacks both
models' units into 2D rows/columns: Pearson correlation of probe activations
on the activation side, cosine similarity of concatenated incoming/outgoing
weight vectors on the weight side. The combined matrix is a convex blend of
the two after per-matrix standardization, which makes the blend factor
comparable across the two spaces.

Values are kept in float64 so that Frobenius inner products against merge
matrices are bilinear to 1e-9.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ContractError
from .models import ActivationProbe, ModelState
from .tensor import cosine_rows, pearson_rows, zscore

SYMMETRY_TOL = 1e-6


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray  # [(N*D), (N*D)] float64, symmetric
    layer: int
    kind: str  # activation | weight | combined

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ContractError(f"similarity matrix must be square, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ContractError("similarity matrix has non-finite entries")
        if v.size and np.max(np.abs(v - v.T)) > SYMMETRY_TOL:
            raise ContractError("similarity matrix is not symmetric")

    def cross_block(self, n_models: int = 2) -> np.ndarray:
        """First-model rows vs second-model columns."""
        d = self.values.shape[0] // n_models
        return self.values[:d, d:2 * d]


@dataclass(frozen=True)
class WeightFeatures:
    """Stacked per-unit weight vectors [(N*D), R]; R = in + 1 (bias) + out."""

    z: np.ndarray
    layer: int


def activation_similarity(probes: list[ActivationProbe], layer: int) -> SimilarityMatrix:
    """Pearson correlation over all models' units of one layer."""
    if not probes:
        raise ContractError("need at least one probe")
    counts = {p.sample_count for p in probes}
    if len(counts) != 1:
        raise ContractError(f"probe sample counts differ: {sorted(counts)}")
    shapes = {p.layers[layer].shape[0] for p in probes}
    if len(shapes) != 1:
        raise ContractError("probe layer widths differ between models")
    stacked = np.concatenate([p.layers[layer] for p in probes], axis=0)
    values = pearson_rows(stacked, stacked)
    values = 0.5 * (values + values.T)  # exact symmetry against fp drift
    return SimilarityMatrix(values=values, layer=layer, kind="activation")


def _head_weight(m: ModelState) -> np.ndarray:
    return m.heads[m.sole_head()]["weight"]


def weight_features(models: list[ModelState], perms, layer: int) -> WeightFeatures:
    """Per-unit weight vectors expressed in the currently matched bases.

    For each model: the incoming weight rows with columns reordered by the
    previous layer's current permutation, the bias, and the outgoing weight
    columns reordered by the next layer's current permutation. Boundary
    layers use the raw (never permuted) input and head sides.
    """
    n_hidden = len(models[0].spec.hidden)
    if not 0 <= layer < n_hidden:
        raise ContractError(f"layer {layer} out of range")
    rows = []
    for idx, m in enumerate(models):
        w_in = m.params[f"layers.{layer}.weight"].astype(np.float64)
        bias = m.params[f"layers.{layer}.bias"].astype(np.float64)[:, None]
        if layer > 0:
            prev = perms.perm_for(f"layer{layer - 1}", idx)
            w_in = w_in[:, prev]
        if layer + 1 < n_hidden:
            w_out = models[idx].params[f"layers.{layer + 1}.weight"]
        else:
            w_out = _head_weight(m)
        w_out = w_out.astype(np.float64)
        nxt = perms.perm_for(f"layer{layer + 1}", idx)
        if nxt is not None:
            w_out = w_out[nxt, :]
        rows.append(np.concatenate([w_in, bias, w_out.T], axis=1))
    return WeightFeatures(z=np.concatenate(rows, axis=0), layer=layer)


def weight_similarity(z: WeightFeatures) -> SimilarityMatrix:
    values = cosine_rows(z.z, z.z)
    values = 0.5 * (values + values.T)
    return SimilarityMatrix(values=values, layer=z.layer, kind="weight")


def combine(ws: SimilarityMatrix, as_: SimilarityMatrix, alpha: float,
            standardize: bool = True) -> SimilarityMatrix:
    """Blend weight- and activation-space similarity: alpha toward weights.

    Each matrix is z-scored before blending unless ``standardize`` is off,
    since the two spaces' raw scales are not comparable.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    if ws.values.shape != as_.values.shape:
        raise ContractError("similarity matrices disagree in shape")
    w = zscore(ws.values) if standardize else ws.values.astype(np.float64)
    a = zscore(as_.values) if standardize else as_.values.astype(np.float64)
    return SimilarityMatrix(values=alpha * w + (1.0 - alpha) * a,
                            layer=ws.layer, kind="combined")


def to_csv_rows(sim: SimilarityMatrix) -> Iterable[str]:
    """``layer,i,j,value`` lines for offline inspection."""
    yield "layer,i,j,value"
    n = sim.values.shape[0]
    for i in range(n):
        for j in range(n):
            yield f"{sim.layer},{i},{j},{sim.values[i, j]!r}"
