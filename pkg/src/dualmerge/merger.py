"""Applying permutations to parameters and producing merged models.

A permutation array is a gather: slot ``j`` of the permuted layer takes the
original unit ``perm[j]``, with the consuming layer's input axis (or every
head's input axis, for the last hidden layer) gathered consistently so the
network function is unchanged. Merging permutes every model into the shared
basis and convex-combines the trunk; output heads are carried into the
merged model per task rather than averaged across tasks.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .matcher import PermutationSet
from .models import ModelState, PermutationSpec, clone_state, permutation_spec


def _check_bijection(perm: np.ndarray, size: int, name: str) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (size,) or not np.array_equal(np.sort(perm), np.arange(size)):
        raise ContractError(f"permutation for {name} is not a bijection of size {size}")
    return perm


def _group_level_perm(perm: np.ndarray, block: tuple[int, int], name: str) -> np.ndarray:
    """Extract the whole-group permutation implied by a unit permutation."""
    g, k = block
    blocks = perm.reshape(g, k)
    group_of = blocks // k
    if not np.all(group_of == group_of[:, :1]):
        raise ContractError(f"permutation for {name} does not respect its groups")
    gp = group_of[:, 0]
    if not np.array_equal(np.sort(gp), np.arange(g)):
        raise ContractError(f"group permutation for {name} is not a bijection")
    return gp


def apply_perms(m: ModelState, pspec: PermutationSpec,
                perms_for_model: dict[str, np.ndarray]) -> ModelState:
    """Permute every site of the spec consistently; the function is preserved."""
    out = clone_state(m)
    for group in pspec.groups:
        if group.name not in perms_for_model:
            raise ContractError(f"missing permutation for {group.name}")
        perm = _check_bijection(perms_for_model[group.name], group.size, group.name)
        gp = _group_level_perm(perm, group.block, group.name) if group.block else None
        for site in group.sites:
            index = gp if site.per_group else perm
            store = out.norm_stats if site.param in out.norm_stats else out.params
            store[site.param] = np.take(store[site.param], index, axis=site.axis)
        if group.feeds_heads:
            for head in out.heads.values():
                head["weight"] = np.take(head["weight"], perm, axis=1)
    return out


def _combine_tensors(tensors: list[np.ndarray], weights: np.ndarray) -> np.ndarray:
    acc = weights[0] * tensors[0].astype(np.float32)
    for w, t in zip(weights[1:], tensors[1:]):
        acc = acc + w * t.astype(np.float32)
    return acc.astype(np.float32)


def merge(models: list[ModelState], perms: PermutationSet,
          weights: list[float] | None = None) -> ModelState:
    """Permute all models into the common basis, then average the trunk.

    Heads are keyed by task: each model's heads ride into the merged model
    under their own names, and only same-named heads (self-merges) are
    averaged. ``weights`` defaults to uniform and must sum to 1.
    """
    if not models:
        raise ContractError("nothing to merge")
    spec = models[0].spec
    if any(m.spec != spec for m in models):
        raise ContractError("models must share an architecture spec")
    n = len(models)
    if weights is None:
        weights = [1.0 / n] * n
    if len(weights) != n:
        raise ContractError("need one mixing weight per model")
    w = np.asarray(weights, dtype=np.float64)
    if abs(w.sum() - 1.0) > 1e-9:
        raise ContractError(f"mixing weights sum to {w.sum()!r}, expected 1")

    pspec = permutation_spec(spec)
    aligned = [
        apply_perms(m, pspec, {g.name: perms.perm_for(g.name, i)
                               for g in pspec.groups})
        for i, m in enumerate(models)
    ]

    params = {k: _combine_tensors([a.params[k] for a in aligned], w)
              for k in aligned[0].params}
    norm_stats = {k: _combine_tensors([a.norm_stats[k] for a in aligned], w)
                  for k in aligned[0].norm_stats}

    heads: dict[str, dict[str, np.ndarray]] = {}
    for i, a in enumerate(aligned):
        for name, head in a.heads.items():
            if name in heads:
                prev_w, cur_w = heads[name]["_weight_sum"], float(w[i])
                total = prev_w + cur_w
                heads[name] = {
                    "weight": ((heads[name]["weight"] * prev_w
                                + head["weight"] * cur_w) / total).astype(np.float32),
                    "bias": ((heads[name]["bias"] * prev_w
                              + head["bias"] * cur_w) / total).astype(np.float32),
                    "_weight_sum": total,
                }
            else:
                heads[name] = {"weight": head["weight"], "bias": head["bias"],
                               "_weight_sum": float(w[i])}
    heads = {name: {"weight": h["weight"], "bias": h["bias"]}
             for name, h in heads.items()}

    meta = {"merged_from": [m.meta.get("model_id", m.meta.get("seed"))
                            for m in models]}
    return ModelState(spec=spec, params=params, heads=heads,
                      norm_stats=norm_stats, meta=meta)


def interpolate(a: ModelState, b_aligned: ModelState, lam: float) -> ModelState:
    """Parameter-wise (1 - lambda) * a + lambda * b for barrier scans.

    ``b_aligned`` must already live in ``a``'s basis and carry the same head
    names.
    """
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    if a.spec != b_aligned.spec:
        raise ContractError("models must share an architecture spec")
    if a.heads.keys() != b_aligned.heads.keys():
        raise ContractError("models must carry the same heads to interpolate")
    if lam == 0.0:
        return clone_state(a)
    if lam == 1.0:
        return clone_state(b_aligned)
    w = np.array([1.0 - lam, lam])
    params = {k: _combine_tensors([a.params[k], b_aligned.params[k]], w)
              for k in a.params}
    norm_stats = {k: _combine_tensors([a.norm_stats[k], b_aligned.norm_stats[k]], w)
                  for k in a.norm_stats}
    heads = {name: {
        "weight": _combine_tensors([a.heads[name]["weight"],
                                    b_aligned.heads[name]["weight"]], w),
        "bias": _combine_tensors([a.heads[name]["bias"],
                                  b_aligned.heads[name]["bias"]], w),
    } for name in a.heads}
    return ModelState(spec=a.spec, params=params, heads=heads,
                      norm_stats=norm_stats, meta={"interpolated": lam})
