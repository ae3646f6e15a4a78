"""Minimum-cost bijective assignment: exact Hungarian and auction solvers.

The Hungarian solver is the Jonker-Volgenant shortest-augmenting-path
variant with dual potentials, O(n^3) with numpy-vectorized row scans. The
auction solver (forward auction with epsilon scaling) trades exactness for
speed on large problems; its optimality gap is bounded by n * epsilon_final,
which the caller controls through `rel_gap`.
"""

from __future__ import annotations

import numpy as np


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Exact minimum-cost assignment. Returns col[i] = column of row i."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n != m:
        raise ValueError("cost matrix must be square")
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.full(n + 1, n, dtype=np.int64)  # p[j] = row assigned to column j
    way = np.zeros(n + 1, dtype=np.int64)

    for i in range(n):
        p[n] = i
        j0 = n
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            j1 = -1
            cur = cost[i0, :] - u[i0] - v[:n]
            better = ~used[:n] & (cur < minv[:n])
            minv[:n] = np.where(better, cur, minv[:n])
            way[:n][better] = j0
            free = ~used[:n]
            if np.any(free):
                j1 = int(np.argmin(np.where(free, minv[:n], INF)))
                delta = minv[j1]
            else:
                j1 = n
                delta = 0.0
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == n:
                break
        while j0 != n:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    col = np.empty(n, dtype=np.int64)
    for j in range(n):
        col[p[j]] = j
    return col


def auction(cost: np.ndarray, rel_gap: float = 0.01) -> np.ndarray:
    """Approximate minimum-cost assignment by forward auction.

    Guarantees cost(assignment) <= optimum + n * eps_final; eps scaling stops
    once n * eps is below rel_gap times the running cost scale.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n != m:
        raise ValueError("cost matrix must be square")
    benefit = -cost  # auction maximizes
    scale = max(np.abs(benefit).max(), 1e-12)
    eps = scale * 0.25
    eps_final = rel_gap * scale / n
    prices = np.zeros(n)
    owner = np.full(n, -1, dtype=np.int64)
    assign = np.full(n, -1, dtype=np.int64)

    while True:
        owner[:] = -1
        assign[:] = -1
        unassigned = list(range(n))
        while unassigned:
            i = unassigned.pop()
            values = benefit[i] - prices
            j = int(np.argmax(values))
            best = values[j]
            values[j] = -np.inf
            second = values.max() if n > 1 else best - eps
            prices[j] += (best - second) + eps
            prev = owner[j]
            owner[j] = i
            assign[i] = j
            if prev >= 0:
                assign[prev] = -1
                unassigned.append(prev)
        if eps <= eps_final:
            break
        eps = max(eps * 0.25, eps_final)
    return assign


def exhaustive(cost: np.ndarray) -> np.ndarray:
    """Brute-force optimum by permutation enumeration (tiny n only)."""
    from itertools import permutations

    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if n > 9:
        raise ValueError("exhaustive solver limited to n <= 9")
    best, best_perm = np.inf, None
    rows = np.arange(n)
    for perm in permutations(range(n)):
        c = cost[rows, list(perm)].sum()
        if c < best:
            best, best_perm = c, perm
    return np.asarray(best_perm, dtype=np.int64)
