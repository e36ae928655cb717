"""Whole-model unit matching pipelines.

Three modes, each in an exact-assignment ("align") and a greedy ("zip")
flavor:

* activation: solve every layer once on Pearson similarity of probe
  activations.
* weight: start from identity and iterate—re-deriving each layer's weight
  vectors from the neighbors' current permutations—until a fixed point.
* mudsc: initialize from the activation solution, then iterate on a cached
  blend ``C' <- alpha * C(weights) + (1 - alpha) * C'`` so both spaces
  constrain the match. ``fresh_activation`` re-blends against the original
  activation similarity every round instead of the decaying cache.

The first model's permutations stay identity; the returned arrays are
gather indices (slot j of the merged layer takes unit ``perm[j]``).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .assignment import Assignment, greedy_zip, group_align, group_zip, solve_lsa
from .errors import ContractError
from .models import ActivationProbe, ModelState, PermutationSpec, permutation_spec
from .similarity import (SimilarityMatrix, activation_similarity, combine,
                         weight_features, weight_similarity)
from .tensor import zscore

MODES = ("activation", "weight", "mudsc")
FLAVORS = ("align", "zip")


@dataclass(frozen=True)
class MatchConfig:
    alpha: float = 0.5
    flavor: str = "align"
    mode: str = "mudsc"
    max_rounds: int = 100
    tol: float = 1e-8
    seed: int = 0
    fresh_activation: bool = False
    standardize: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.flavor not in FLAVORS:
            raise ContractError(f"unknown flavor {self.flavor!r}")
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.max_rounds < 1:
            raise ContractError("max_rounds must be >= 1")


@dataclass
class PermutationSet:
    """Per-group, per-model permutation arrays (gather indices)."""

    groups: dict[str, list[np.ndarray]]

    @staticmethod
    def identity(pspec: PermutationSpec, n_models: int) -> "PermutationSet":
        return PermutationSet(groups={
            g.name: [np.arange(g.size, dtype=np.int64) for _ in range(n_models)]
            for g in pspec.groups})

    def perm_for(self, group: str, model_idx: int) -> np.ndarray | None:
        perms = self.groups.get(group)
        return None if perms is None else perms[model_idx]

    def set_perm(self, group: str, model_idx: int, perm: np.ndarray) -> None:
        self.groups[group][model_idx] = np.asarray(perm, dtype=np.int64)

    def copy(self) -> "PermutationSet":
        return PermutationSet(groups={
            name: [p.copy() for p in perms] for name, perms in self.groups.items()})

    def equals(self, other: "PermutationSet") -> bool:
        if self.groups.keys() != other.groups.keys():
            return False
        return all(
            all(np.array_equal(a, b) for a, b in zip(self.groups[k], other.groups[k]))
            for k in self.groups)

    def to_jsonable(self) -> dict:
        return {"groups": {name: [p.tolist() for p in perms]
                           for name, perms in sorted(self.groups.items())}}

    @staticmethod
    def from_jsonable(obj: dict) -> "PermutationSet":
        return PermutationSet(groups={
            name: [np.asarray(p, dtype=np.int64) for p in perms]
            for name, perms in obj["groups"].items()})


@dataclass
class MatchResult:
    perms: PermutationSet
    objective: float
    rounds: int
    trace: list[tuple[int, str, float]] = field(default_factory=list)

    def trace_csv(self) -> str:
        lines = ["round,layer_order_hash,objective"]
        lines += [f"{r},{h},{obj!r}" for r, h, obj in self.trace]
        return "\n".join(lines) + "\n"


def _order_hash(order: np.ndarray) -> str:
    return f"{zlib.crc32(','.join(map(str, order)).encode()):08x}"


def _check_pair(models: list[ModelState], probes: list[ActivationProbe] | None):
    if len(models) != 2:
        raise ContractError(f"matching supports exactly 2 models, got {len(models)}")
    if models[0].spec != models[1].spec:
        raise ContractError("models must share an architecture spec")
    if probes is not None:
        if len(probes) != 2:
            raise ContractError("need one probe per model")
        if probes[0].sample_count != probes[1].sample_count:
            raise ContractError("probes must come from the same batch")


def _solve_block(cross: np.ndarray, block: tuple[int, int] | None,
                 flavor: str) -> Assignment:
    """Dispatch one layer's cross-model block to the right solver."""
    if block is None:
        return solve_lsa(cross) if flavor == "align" else greedy_zip(cross)
    g, k = block
    if flavor == "align":
        ga = group_align(cross, g, k)
    else:
        grouping = group_align(cross, g, k).group_perm
        ga = group_zip(cross, g, k, grouping)
    return Assignment(perm=ga.to_unit_perm(), objective=ga.objective)


class _Matcher:
    """Shared state for one matching run over a fixed pair of models."""

    def __init__(self, models, probes, cfg: MatchConfig):
        self.models = models
        self.cfg = cfg
        self.pspec = permutation_spec(models[0].spec)
        self.groups = list(self.pspec.groups)
        self.perms = PermutationSet.identity(self.pspec, 2)
        self.act_sims: list[SimilarityMatrix] | None = None
        if probes is not None:
            self.act_sims = [activation_similarity(probes, g_idx)
                             for g_idx in range(len(self.groups))]
        # Per-layer cached combination matrix (mudsc) and last solve value.
        self.cache: list[np.ndarray | None] = [None] * len(self.groups)
        self.layer_obj = np.zeros(len(self.groups))

    def weight_matrix(self, layer: int) -> np.ndarray:
        z = weight_features(self.models, self.perms, layer)
        return weight_similarity(z).values

    def solve_layer(self, layer: int, matrix: np.ndarray) -> None:
        group = self.groups[layer]
        d = group.size
        cross = matrix[:d, d:2 * d]
        solved = _solve_block(cross, group.block, self.cfg.flavor)
        self.perms.set_perm(group.name, 1, solved.perm)
        self.layer_obj[layer] = solved.objective

    def eval_layer(self, layer: int, matrix: np.ndarray) -> float:
        """Objective of the current permutation under ``matrix``."""
        group = self.groups[layer]
        d = group.size
        cross = matrix[:d, d:2 * d]
        perm = self.perms.perm_for(group.name, 1)
        return float(cross[np.arange(d), perm].sum())

    def mudsc_matrix(self, layer: int) -> np.ndarray:
        """Next blend for one layer, updating the cache in place."""
        cfg = self.cfg
        w = SimilarityMatrix(values=self.weight_matrix(layer), layer=layer,
                             kind="weight")
        if cfg.fresh_activation:
            return combine(w, self.act_sims[layer], cfg.alpha,
                           standardize=cfg.standardize).values
        cached = self.cache[layer]
        w_term = zscore(w.values) if cfg.standardize else w.values
        blended = cfg.alpha * w_term + (1.0 - cfg.alpha) * cached
        self.cache[layer] = blended
        return blended


def _iterate(state: _Matcher, matrix_fn, init_objective: float,
             trace: list) -> MatchResult:
    """Round-robin layer re-solving with a monotone accepted trace.

    A round is one pass over the layers in seeded random order. The loop
    stops at a permutation fixed point (a pass that changes nothing) or when
    a pass improves the total matched similarity by less than ``tol``. A
    strictly regressing pass is rolled back, so the reported trace never
    decreases; only state-changing accepted passes append to it.
    """
    cfg = state.cfg
    rng = np.random.default_rng(cfg.seed)
    best = init_objective
    rounds = 0
    for round_idx in range(1, cfg.max_rounds + 1):
        order = rng.permutation(len(state.groups))
        before = state.perms.copy()
        before_obj = state.layer_obj.copy()
        for layer in order:
            state.solve_layer(int(layer), matrix_fn(int(layer)))
        rounds = round_idx
        if state.perms.equals(before):
            # Fixed point: the pass changed nothing worth recording.
            state.layer_obj = before_obj
            break
        total = float(state.layer_obj.sum())
        improvement = total - best
        if improvement < -1e-12:
            state.perms = before  # reject the regressing pass
            state.layer_obj = before_obj
            break
        trace.append((round_idx, _order_hash(order), total))
        best = total
        if improvement < cfg.tol:
            break
    return MatchResult(perms=state.perms, objective=best, rounds=rounds,
                       trace=trace)


def match_activation(models: list[ModelState], probes: list[ActivationProbe],
                     cfg: MatchConfig) -> MatchResult:
    """Single-pass matching on activation similarity alone."""
    _check_pair(models, probes)
    state = _Matcher(models, probes, cfg)
    for layer in range(len(state.groups)):
        state.solve_layer(layer, state.act_sims[layer].values)
    total = float(state.layer_obj.sum())
    trace = [(0, _order_hash(np.arange(len(state.groups))), total)]
    return MatchResult(perms=state.perms, objective=total, rounds=0, trace=trace)


def match_weight(models: list[ModelState], cfg: MatchConfig) -> MatchResult:
    """Iterative weight-space matching from identity."""
    _check_pair(models, None)
    state = _Matcher(models, None, cfg)
    state.layer_obj = np.array([state.eval_layer(l, state.weight_matrix(l))
                                for l in range(len(state.groups))])
    init = float(state.layer_obj.sum())
    trace = [(0, _order_hash(np.arange(len(state.groups))), init)]
    return _iterate(state, state.weight_matrix, init, trace)


def match_mudsc(models: list[ModelState], probes: list[ActivationProbe],
                cfg: MatchConfig) -> MatchResult:
    """Dual-space matching: activation init, then blended iterations."""
    _check_pair(models, probes)
    state = _Matcher(models, probes, cfg)
    for layer in range(len(state.groups)):
        base = state.act_sims[layer].values
        if cfg.standardize and not cfg.fresh_activation:
            base = zscore(base)
        state.cache[layer] = base.astype(np.float64)
        state.solve_layer(layer, base)
    init = float(state.layer_obj.sum())
    trace = [(0, _order_hash(np.arange(len(state.groups))), init)]
    return _iterate(state, state.mudsc_matrix, init, trace)


def match_models(models, probes, cfg: MatchConfig) -> MatchResult:
    """Mode dispatch used by the service layer."""
    if cfg.mode == "activation":
        return match_activation(models, probes, cfg)
    if cfg.mode == "weight":
        return match_weight(models, cfg)
    if cfg.mode == "mudsc":
        if probes is None:
            raise ContractError("mudsc matching needs activation probes")
        return match_mudsc(models, probes, cfg)
    raise ContractError(f"unknown mode {cfg.mode!r}")
