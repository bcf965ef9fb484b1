"""Square linear assignment via the Hungarian method (shortest augmenting paths).

O(n^3): one Dijkstra-like sweep with dual potentials per row.
"""

import numpy as np

from .errors import ValidationError


def hungarian_match(cost) -> np.ndarray:
    """Return perm minimizing sum(cost[j, perm[j]]) over all permutations."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValidationError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValidationError("cost matrix has NaN or infinite entries")
    if np.any(c < 0):
        raise ValidationError("cost matrix has negative entries")
    n = c.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)

    # 1-based bookkeeping; column 0 is a virtual start column
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)   # match[col] = row
    way = np.zeros(n + 1, dtype=np.int64)
    for row in range(1, n + 1):
        match[0] = row
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cols = np.flatnonzero(free) + 1
            reduced = c[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = reduced < minv[cols]
            minv[cols[better]] = reduced[better]
            way[cols[better]] = j0
            j1 = cols[np.argmin(minv[cols])]
            delta = minv[j1]
            u[match[used]] += delta
            v[used] -= delta
            minv[cols] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    perm[match[1:] - 1] = np.arange(n)
    return perm


def assignment_cost(cost, perm) -> float:
    c = np.asarray(cost)
    return float(c[np.arange(len(perm)), perm].sum())
