"""Toy architectures: construction, forward passes, training, permutation spec.

Models are MLP trunks with optional group-normalized hidden layers plus one
or more output heads. A head maps the last hidden layer into the shared
64-dimensional target-embedding space; freshly trained models carry exactly
one head (named after their task) and merged models carry one per parent.

Hidden units of the same layer can be freely permuted without changing the
network function, which is the symmetry every matcher in this package
exploits. Grouped layers additionally allow permuting whole groups and units
within a group.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import TaskDataset
from .errors import ContractError

NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1

HIDDEN_KINDS = ("linear", "linear_relu", "grouped_linear")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    groups: int = 1

    def __post_init__(self):
        if self.kind not in HIDDEN_KINDS + ("output_linear",):
            raise ContractError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ContractError("layer dimensions must be positive")
        if self.groups < 1 or self.out_dim % self.groups != 0:
            raise ContractError(
                f"groups={self.groups} does not divide out_dim={self.out_dim}")
        if self.kind != "grouped_linear" and self.groups != 1:
            raise ContractError("only grouped_linear layers may set groups")


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_dim: int
    output_dim: int

    def __post_init__(self):
        if not self.layers:
            raise ContractError("a model needs at least one layer")
        if self.layers[-1].kind != "output_linear":
            raise ContractError("the final layer must be output_linear")
        if any(l.kind == "output_linear" for l in self.layers[:-1]):
            raise ContractError("output_linear only allowed as the final layer")
        dims = [self.input_dim] + [l.out_dim for l in self.layers]
        for i, layer in enumerate(self.layers):
            if layer.in_dim != dims[i]:
                raise ContractError(
                    f"layer {i} expects in_dim={dims[i]}, got {layer.in_dim}")
        if self.output_dim != self.layers[-1].out_dim:
            raise ContractError("output_dim disagrees with the final layer")

    @property
    def hidden(self) -> tuple[LayerSpec, ...]:
        return self.layers[:-1]

    def to_jsonable(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "layers": [
                {"kind": l.kind, "in_dim": l.in_dim, "out_dim": l.out_dim,
                 "groups": l.groups}
                for l in self.layers
            ],
        }

    @staticmethod
    def from_jsonable(obj: dict) -> "ModelSpec":
        layers = tuple(LayerSpec(**entry) for entry in obj["layers"])
        return ModelSpec(layers=layers, input_dim=obj["input_dim"],
                         output_dim=obj["output_dim"])


def mlp_spec(dims: list[int], groups: list[int] | None = None) -> ModelSpec:
    """Chain of relu hidden layers ending in an output head layer.

    ``dims`` runs input → hidden… → output; ``groups[i] > 1`` turns hidden
    layer i into a grouped (group-normalized) layer.
    """
    if len(dims) < 2:
        raise ContractError("need at least input and output dims")
    groups = groups or [1] * (len(dims) - 2)
    layers = []
    for i in range(len(dims) - 2):
        g = groups[i]
        kind = "grouped_linear" if g > 1 else "linear_relu"
        layers.append(LayerSpec(kind, dims[i], dims[i + 1], g))
    layers.append(LayerSpec("output_linear", dims[-2], dims[-1]))
    return ModelSpec(tuple(layers), input_dim=dims[0], output_dim=dims[-1])


@dataclass(frozen=True)
class ActivationProbe:
    """Post-nonlinearity activations per hidden layer, each [D_l, S]."""

    layers: tuple[np.ndarray, ...]
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 2:
            raise ContractError("a probe needs at least 2 samples")
        for act in self.layers:
            if act.shape[1] != self.sample_count:
                raise ContractError("probe layer sample counts disagree")


@dataclass(frozen=True)
class ModelState:
    """Trunk parameters plus named output heads and optional norm statistics.

    Treated as immutable: every operation returns a new state. ``params``
    holds trunk tensors keyed ``layers.{i}.weight`` / ``.bias`` (grouped
    layers add ``.scale`` / ``.shift`` of length g), ``norm_stats`` holds
    ``layers.{i}.mean`` / ``.var``, and each head is ``{"weight", "bias"}``.
    """

    spec: ModelSpec
    params: dict[str, np.ndarray]
    heads: dict[str, dict[str, np.ndarray]]
    norm_stats: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, layer in enumerate(self.spec.hidden):
            w = self.params.get(f"layers.{i}.weight")
            b = self.params.get(f"layers.{i}.bias")
            if w is None or b is None:
                raise ContractError(f"missing parameters for layer {i}")
            if w.shape != (layer.out_dim, layer.in_dim) or b.shape != (layer.out_dim,):
                raise ContractError(f"layer {i} parameter shapes are wrong")
            if layer.kind == "grouped_linear":
                for name in ("scale", "shift"):
                    p = self.params.get(f"layers.{i}.{name}")
                    if p is None or p.shape != (layer.groups,):
                        raise ContractError(f"layer {i} missing per-group {name}")
        if not self.heads:
            raise ContractError("a model needs at least one head")
        out = self.spec.layers[-1]
        for name, head in self.heads.items():
            if head["weight"].shape != (out.out_dim, out.in_dim):
                raise ContractError(f"head {name!r} weight shape is wrong")
            if head["bias"].shape != (out.out_dim,):
                raise ContractError(f"head {name!r} bias shape is wrong")

    def sole_head(self) -> str:
        if len(self.heads) != 1:
            raise ContractError("model has multiple heads; name one explicitly")
        return next(iter(self.heads))

    def head_for(self, task_id: str) -> str:
        """Head trained for ``task_id``, falling back to a sole head."""
        if task_id in self.heads:
            return task_id
        return self.sole_head()


def _copy_tree(d: dict) -> dict:
    return {k: (dict(v) if isinstance(v, dict) else v.copy()) for k, v in d.items()}


def clone_state(m: ModelState) -> ModelState:
    heads = {k: {n: t.copy() for n, t in h.items()} for k, h in m.heads.items()}
    return ModelState(spec=m.spec, params=_copy_tree(m.params), heads=heads,
                      norm_stats=_copy_tree(m.norm_stats), meta=dict(m.meta))


def build_model(spec: ModelSpec, seed: int, head_id: str = "main") -> ModelState:
    """Kaiming-style fan-in scaled uniform init, deterministic per seed."""
    rng = np.random.default_rng(seed)

    def kaiming(out_dim: int, in_dim: int) -> np.ndarray:
        bound = np.sqrt(6.0 / in_dim)
        return rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(np.float32)

    params: dict[str, np.ndarray] = {}
    norm_stats: dict[str, np.ndarray] = {}
    for i, layer in enumerate(spec.hidden):
        params[f"layers.{i}.weight"] = kaiming(layer.out_dim, layer.in_dim)
        params[f"layers.{i}.bias"] = np.zeros(layer.out_dim, dtype=np.float32)
        if layer.kind == "grouped_linear":
            params[f"layers.{i}.scale"] = np.ones(layer.groups, dtype=np.float32)
            params[f"layers.{i}.shift"] = np.zeros(layer.groups, dtype=np.float32)
            norm_stats[f"layers.{i}.mean"] = np.zeros(layer.groups, dtype=np.float32)
            norm_stats[f"layers.{i}.var"] = np.ones(layer.groups, dtype=np.float32)
    out = spec.layers[-1]
    heads = {head_id: {
        "weight": kaiming(out.out_dim, out.in_dim),
        "bias": np.zeros(out.out_dim, dtype=np.float32),
    }}
    return ModelState(spec=spec, params=params, heads=heads,
                      norm_stats=norm_stats, meta={"seed": seed})


def _group_norm_eval(h: np.ndarray, layer: LayerSpec, scale, shift, mean, var):
    g, k = layer.groups, layer.out_dim // layer.groups
    hb = h.reshape(h.shape[0], g, k)
    normed = (hb - mean[None, :, None]) / np.sqrt(var[None, :, None] + NORM_EPS)
    return (normed * scale[None, :, None] + shift[None, :, None]).reshape(h.shape)


def _hidden_forward(m: ModelState, x: np.ndarray) -> list[np.ndarray]:
    """Eval-mode activations after each hidden layer, batch-major."""
    acts = []
    h = x
    for i, layer in enumerate(m.spec.hidden):
        h = h @ m.params[f"layers.{i}.weight"].T + m.params[f"layers.{i}.bias"]
        if layer.kind == "grouped_linear":
            h = _group_norm_eval(
                h, layer,
                m.params[f"layers.{i}.scale"], m.params[f"layers.{i}.shift"],
                m.norm_stats[f"layers.{i}.mean"], m.norm_stats[f"layers.{i}.var"])
            h = np.maximum(h, 0.0)
        elif layer.kind == "linear_relu":
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def head_output(m: ModelState, hidden: np.ndarray, head: str) -> np.ndarray:
    hw = m.heads[head]
    return hidden @ hw["weight"].T + hw["bias"]


def forward(m: ModelState, x: np.ndarray, capture: bool = False,
            head: str | None = None) -> tuple[np.ndarray, ActivationProbe | None]:
    """Deterministic eval-mode forward pass.

    With ``capture`` the returned probe holds every hidden layer's
    post-nonlinearity activations transposed to [D_l, batch].
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != m.spec.input_dim:
        raise ContractError(
            f"input shape {x.shape} does not match input_dim={m.spec.input_dim}")
    acts = _hidden_forward(m, x)
    hidden = acts[-1] if acts else x
    out = head_output(m, hidden, head if head is not None else m.sole_head())
    probe = None
    if capture:
        probe = ActivationProbe(
            layers=tuple(np.ascontiguousarray(a.T) for a in acts),
            sample_count=x.shape[0])
    return out, probe


# ---------------------------------------------------------------------------
# Permutation specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PermSite:
    param: str
    axis: int
    per_group: bool = False  # site indexed by group, not by unit


@dataclass(frozen=True)
class PermGroup:
    name: str
    size: int
    sites: tuple[PermSite, ...]
    block: tuple[int, int] | None = None  # (g, k) for grouped layers
    feeds_heads: bool = False             # last hidden layer permutes head inputs


@dataclass(frozen=True)
class PermutationSpec:
    groups: tuple[PermGroup, ...]

    def by_name(self) -> dict[str, PermGroup]:
        return {g.name: g for g in self.groups}


def permutation_spec(spec: ModelSpec) -> PermutationSpec:
    """One permutation group per hidden layer.

    Each group permutes the layer's output axis (weight rows, bias, and any
    per-group norm parameters) together with the input axis of whatever
    consumes it; the output heads' row axis is never permuted.
    """
    groups = []
    hidden = spec.hidden
    for i, layer in enumerate(hidden):
        sites = [PermSite(f"layers.{i}.weight", 0), PermSite(f"layers.{i}.bias", 0)]
        block = None
        if layer.kind == "grouped_linear":
            block = (layer.groups, layer.out_dim // layer.groups)
            for name in ("scale", "shift"):
                sites.append(PermSite(f"layers.{i}.{name}", 0, per_group=True))
            for name in ("mean", "var"):
                sites.append(PermSite(f"layers.{i}.{name}", 0, per_group=True))
        feeds_heads = i == len(hidden) - 1
        if not feeds_heads:
            sites.append(PermSite(f"layers.{i + 1}.weight", 1))
        groups.append(PermGroup(name=f"layer{i}", size=layer.out_dim,
                                sites=tuple(sites), block=block,
                                feeds_heads=feeds_heads))
    return PermutationSpec(groups=tuple(groups))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def cosine_embedding_loss(outputs: np.ndarray, targets: np.ndarray) -> float:
    """Mean of 1 - cos(output, target); zero-norm outputs score cos = 0."""
    o = outputs.astype(np.float64)
    t = targets.astype(np.float64)
    on = np.linalg.norm(o, axis=1)
    tn = np.linalg.norm(t, axis=1)
    denom = np.where((on < 1e-12) | (tn < 1e-12), 1.0, on * tn)
    cos = np.einsum("ij,ij->i", o, t) / denom
    cos[(on < 1e-12) | (tn < 1e-12)] = 0.0
    return float(np.mean(1.0 - cos))


def _loss_grad(outputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of the mean cosine-embedding loss w.r.t. the outputs."""
    o = outputs.astype(np.float64)
    t = targets.astype(np.float64)
    on = np.linalg.norm(o, axis=1, keepdims=True)
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    safe = np.maximum(on, 1e-8) * np.maximum(tn, 1e-8)
    o_hat = o / np.maximum(on, 1e-8)
    cos = np.einsum("ij,ij->i", o, t)[:, None] / safe
    grad = -(t / safe - cos * o_hat / np.maximum(on, 1e-8))
    return (grad / outputs.shape[0]).astype(np.float32)


def _train_forward(m: ModelState, params: dict, stats: dict, x: np.ndarray,
                   head: str):
    """Batch-stat forward keeping the caches backprop needs."""
    caches = []
    h = x
    for i, layer in enumerate(m.spec.hidden):
        w, b = params[f"layers.{i}.weight"], params[f"layers.{i}.bias"]
        pre = h @ w.T + b
        cache = {"x": h, "pre": pre}
        if layer.kind == "grouped_linear":
            g, k = layer.groups, layer.out_dim // layer.groups
            pb = pre.reshape(len(pre), g, k)
            mean = pb.mean(axis=(0, 2))
            var = pb.var(axis=(0, 2))
            stats[f"layers.{i}.mean"] = (
                (1 - NORM_MOMENTUM) * stats[f"layers.{i}.mean"]
                + NORM_MOMENTUM * mean).astype(np.float32)
            stats[f"layers.{i}.var"] = (
                (1 - NORM_MOMENTUM) * stats[f"layers.{i}.var"]
                + NORM_MOMENTUM * var).astype(np.float32)
            inv = 1.0 / np.sqrt(var + NORM_EPS)
            x_hat = (pb - mean[None, :, None]) * inv[None, :, None]
            scale = params[f"layers.{i}.scale"]
            shift = params[f"layers.{i}.shift"]
            out = (x_hat * scale[None, :, None] + shift[None, :, None])
            out = out.reshape(pre.shape)
            act = np.maximum(out, 0.0)
            cache.update(x_hat=x_hat, inv=inv, mask=out > 0)
        elif layer.kind == "linear_relu":
            act = np.maximum(pre, 0.0)
            cache["mask"] = pre > 0
        else:
            act = pre
        cache["act"] = act
        caches.append(cache)
        h = act
    hw = params[f"heads.{head}.weight"]
    hb = params[f"heads.{head}.bias"]
    out = h @ hw.T + hb
    return out, h, caches


def _train_backward(m: ModelState, params: dict, g_out: np.ndarray,
                    hidden: np.ndarray, caches: list, head: str) -> dict:
    grads = {}
    hw = params[f"heads.{head}.weight"]
    grads[f"heads.{head}.weight"] = g_out.T @ hidden
    grads[f"heads.{head}.bias"] = g_out.sum(axis=0)
    g = g_out @ hw
    for i in reversed(range(len(m.spec.hidden))):
        layer = m.spec.hidden[i]
        cache = caches[i]
        if layer.kind == "grouped_linear":
            g = g * cache["mask"]
            gk = layer.groups, layer.out_dim // layer.groups
            gb = g.reshape(len(g), *gk)
            x_hat, inv = cache["x_hat"], cache["inv"]
            scale = params[f"layers.{i}.scale"]
            grads[f"layers.{i}.scale"] = np.einsum("bgk,bgk->g", gb, x_hat
                                                   ).astype(np.float32)
            grads[f"layers.{i}.shift"] = gb.sum(axis=(0, 2)).astype(np.float32)
            dxhat = gb * scale[None, :, None]
            n = gb.shape[0] * gk[1]
            # batch-stat normalization backward, pooled over (batch, group units)
            dpre = (inv[None, :, None] / n) * (
                n * dxhat
                - dxhat.sum(axis=(0, 2), keepdims=True)
                - x_hat * np.einsum("bgk,bgk->g", dxhat, x_hat)[None, :, None])
            g = dpre.reshape(g.shape).astype(np.float32)
        elif layer.kind == "linear_relu":
            g = g * cache["mask"]
        w = params[f"layers.{i}.weight"]
        grads[f"layers.{i}.weight"] = g.T @ cache["x"]
        grads[f"layers.{i}.bias"] = g.sum(axis=0)
        g = g @ w
    return grads


def train(m: ModelState, data: TaskDataset, epochs: int, lr: float,
          batch: int, seed: int, momentum: float = 0.9,
          trainable: list[str] | None = None) -> ModelState:
    """SGD with momentum on the cosine-embedding loss, deterministic per seed.

    ``trainable`` restricts updates to parameters whose name starts with one
    of the given prefixes (heads are named ``heads.<id>.``); everything else
    stays frozen.
    """
    if len(data) == 0:
        raise ContractError("cannot train on an empty dataset")
    head = m.sole_head()
    params = {**_copy_tree(m.params),
              f"heads.{head}.weight": m.heads[head]["weight"].copy(),
              f"heads.{head}.bias": m.heads[head]["bias"].copy()}
    stats = _copy_tree(m.norm_stats)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(seed)

    def updatable(name: str) -> bool:
        return trainable is None or any(name.startswith(p) for p in trainable)

    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), batch):
            idx = order[start:start + batch]
            out, hidden, caches = _train_forward(m, params, stats,
                                                 data.inputs[idx], head)
            g_out = _loss_grad(out, data.targets[idx])
            grads = _train_backward(m, params, g_out, hidden, caches, head)
            for k, gv in grads.items():
                if not updatable(k):
                    continue
                velocity[k] = momentum * velocity[k] + gv.astype(np.float32)
                params[k] = (params[k] - lr * velocity[k]).astype(np.float32)

    heads = {head: {"weight": params.pop(f"heads.{head}.weight"),
                    "bias": params.pop(f"heads.{head}.bias")}}
    return ModelState(spec=m.spec, params=params, heads=heads,
                      norm_stats=stats, meta=dict(m.meta))


def reset_norm_stats(m: ModelState, probe_inputs: np.ndarray,
                     ) -> tuple[ModelState, bool]:
    """Recompute running normalization statistics from one probe sweep.

    Layers are processed in forward order with each layer normalized by the
    probe batch's own moments, so a second reset with the same probe is a
    no-op. Models without normalized layers are returned unchanged with a
    False flag.
    """
    if not any(l.kind == "grouped_linear" for l in m.spec.hidden):
        return m, False
    x = np.asarray(probe_inputs, dtype=np.float32)
    stats = _copy_tree(m.norm_stats)
    h = x
    for i, layer in enumerate(m.spec.hidden):
        h = h @ m.params[f"layers.{i}.weight"].T + m.params[f"layers.{i}.bias"]
        if layer.kind == "grouped_linear":
            g, k = layer.groups, layer.out_dim // layer.groups
            hb = h.reshape(len(h), g, k)
            mean = hb.mean(axis=(0, 2)).astype(np.float32)
            var = hb.var(axis=(0, 2)).astype(np.float32)
            stats[f"layers.{i}.mean"] = mean
            stats[f"layers.{i}.var"] = var
            h = _group_norm_eval(h, layer, m.params[f"layers.{i}.scale"],
                                 m.params[f"layers.{i}.shift"], mean, var)
            h = np.maximum(h, 0.0)
        elif layer.kind == "linear_relu":
            h = np.maximum(h, 0.0)
    return replace(m, norm_stats=stats), True
