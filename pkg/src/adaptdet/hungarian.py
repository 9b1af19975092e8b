"""Minimum-cost rectangular assignment (Kuhn-Munkres with potentials)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class AssignmentError(ValueError):
    pass


@dataclass(frozen=True)
class MatchResult:
    assignment: dict[int, int]
    cost: float

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        rows = np.array(sorted(self.assignment), dtype=np.int64)
        cols = np.array([self.assignment[r] for r in rows], dtype=np.int64)
        return rows, cols


def hungarian(cost) -> MatchResult:
    """Assign every row of a [G, K] cost matrix to a distinct column, G <= K.

    Shortest-augmenting-path form of Kuhn-Munkres: one row is inserted per
    phase and dual potentials keep reduced costs non-negative, giving
    O(G^2 K) time.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise AssignmentError(f"cost must be 2-D, got shape {c.shape}")
    n, m = c.shape
    if n > m:
        raise AssignmentError(f"more rows than columns ({n} > {m})")
    if not np.isfinite(c).all():
        raise AssignmentError("cost matrix has non-finite entries")
    if n == 0:
        return MatchResult({}, 0.0)

    rows = c.tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    # p[j]: row matched to column j (1-based, 0 = none); column 0 is a sentinel
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = rows[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - ui0 - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assignment = {p[j] - 1: j - 1 for j in range(1, m + 1) if p[j]}
    total = float(sum(c[r, k] for r, k in sorted(assignment.items())))
    return MatchResult(assignment, total)
