"""Matching solvers: exact assignment, greedy zip, and group-structured variants.

Every solver works on a square cross-model similarity block where rows index
units of the first model and columns index units of the second, and returns a
bijection ``perm`` with ``perm[j]`` = second-model unit matched to first-model
unit ``j``. Tie-breaking is deterministic (lowest index wins) so repeated runs
produce identical merges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractError


@dataclass(frozen=True)
class Assignment:
    perm: np.ndarray  # int64, perm[j] = column matched to row j
    objective: float  # sum of matched similarities

    def __post_init__(self):
        p = np.sort(np.asarray(self.perm))
        if not np.array_equal(p, np.arange(len(p))):
            raise ContractError("assignment is not a bijection")


@dataclass(frozen=True)
class GroupAssignment:
    """Composable matching for a g-groups-of-k-units layer.

    ``group_perm[a]`` is the second-model group matched to first-model group
    ``a``; ``inner_perms[a][j]`` is the within-group unit (of that matched
    group) assigned to slot ``j`` of group ``a``.
    """

    group_perm: np.ndarray
    inner_perms: tuple
    objective: float

    def to_unit_perm(self) -> np.ndarray:
        g = len(self.group_perm)
        k = len(self.inner_perms[0])
        perm = np.empty(g * k, dtype=np.int64)
        for a in range(g):
            b = self.group_perm[a]
            perm[a * k:(a + 1) * k] = b * k + self.inner_perms[a]
        return perm


def _check_square(sim: np.ndarray) -> np.ndarray:
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ContractError(f"similarity block must be square, got {sim.shape}")
    if sim.size and not np.all(np.isfinite(sim)):
        raise ContractError("similarity block contains non-finite entries")
    return sim


def solve_lsa(sim: np.ndarray) -> Assignment:
    """Globally optimal maximum-similarity assignment (Hungarian method)."""
    sim = _check_square(sim)
    rows, cols = linear_sum_assignment(sim, maximize=True)
    perm = np.empty(sim.shape[0], dtype=np.int64)
    perm[rows] = cols
    return Assignment(perm=perm, objective=float(sim[rows, cols].sum()))


def greedy_zip(sim: np.ndarray) -> Assignment:
    """Greedy pairing: repeatedly take the best remaining (row, col) pair.

    Ties break toward the lowest row, then lowest column. The result is a
    bijection but generally scores below the exact assignment.
    """
    sim = _check_square(sim)
    n = sim.shape[0]
    work = sim.copy()
    perm = np.empty(n, dtype=np.int64)
    objective = 0.0
    for _ in range(n):
        flat = np.argmax(work)  # first occurrence = lowest (i, j)
        i, j = divmod(int(flat), n)
        perm[i] = j
        objective += sim[i, j]
        work[i, :] = -np.inf
        work[:, j] = -np.inf
    return Assignment(perm=perm, objective=float(objective))


def _split_blocks(sim: np.ndarray, g: int, k: int) -> np.ndarray:
    if g < 1 or k < 1 or sim.shape[0] != g * k:
        raise ContractError(
            f"block of size {sim.shape[0]} does not divide into {g} groups of {k}"
        )
    return sim.reshape(g, k, g, k).transpose(0, 2, 1, 3)  # [a, b, k, k]


def group_align(sim: np.ndarray, g: int, k: int) -> GroupAssignment:
    """Two-level exact matching for group-structured layers.

    Solves a k-by-k assignment inside every pair of groups, then matches the
    groups themselves on the mean matched similarity. The composition is the
    optimum over all permutations that map whole groups onto whole groups.
    """
    sim = _check_square(sim)
    blocks = _split_blocks(sim, g, k)
    pair_perm = np.empty((g, g, k), dtype=np.int64)
    pair_score = np.empty((g, g), dtype=np.float64)
    for a in range(g):
        for b in range(g):
            inner = solve_lsa(blocks[a, b])
            pair_perm[a, b] = inner.perm
            pair_score[a, b] = inner.objective / k
    outer = solve_lsa(pair_score)
    inner_perms = tuple(pair_perm[a, outer.perm[a]] for a in range(g))
    objective = float(pair_score[np.arange(g), outer.perm].sum() * k)
    return GroupAssignment(group_perm=outer.perm, inner_perms=inner_perms,
                           objective=objective)


def group_zip(sim: np.ndarray, g: int, k: int, grouping: np.ndarray) -> GroupAssignment:
    """Greedy within-group zip under an externally supplied group matching."""
    sim = _check_square(sim)
    blocks = _split_blocks(sim, g, k)
    grouping = np.asarray(grouping, dtype=np.int64)
    if not np.array_equal(np.sort(grouping), np.arange(g)):
        raise ContractError("grouping must be a bijection on groups")
    inner_perms = []
    objective = 0.0
    for a in range(g):
        inner = greedy_zip(blocks[a, grouping[a]])
        inner_perms.append(inner.perm)
        objective += inner.objective
    return GroupAssignment(group_perm=grouping, inner_perms=tuple(inner_perms),
                           objective=float(objective))
