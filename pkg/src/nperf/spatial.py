"""Exact nearest-neighbour index over 3D point positions.

Backed by :class:`scipy.spatial.cKDTree` for candidate generation; every
distance reported here is recomputed as ``sqrt(sum((p - q)**2))`` and results
are ordered by ``(distance, index)`` so the output equals a brute-force scan,
including the order of exact ties.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

# relative slack used when asking the tree for candidates near a boundary
_SLACK = 1e-9


def _sq_dist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = points - q
    return np.einsum("...i,...i->...", diff, diff)


class PointIndex:
    """Read-only KNN / radius index.

    Parameters
    ----------
    positions : (N, D) array
        Point coordinates. ``N == 0`` is allowed.
    leafsize : int
        Tree leaf size; affects speed only.
    """

    def __init__(self, positions, leafsize: int = 16):
        pts = np.array(positions, dtype=np.float64, copy=True)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2:
            raise ValueError(f"positions must be (N, D), got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("positions must be finite")
        pts.flags.writeable = False
        self.positions = pts
        self.leafsize = leafsize
        self._tree = cKDTree(pts, leafsize=leafsize) if len(pts) else None

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    # ------------------------------------------------------------------
    # single queries

    def _finish(self, q, cand, k=None, limit_sq=None):
        cand = np.asarray(cand, dtype=np.int64)
        if cand.size == 0:
            return []
        d2 = _sq_dist(self.positions[cand], q)
        if limit_sq is not None:
            keep = d2 <= limit_sq
            cand, d2 = cand[keep], d2[keep]
        order = np.lexsort((cand, d2))
        if k is not None:
            order = order[:k]
        return [(int(cand[i]), float(np.sqrt(d2[i]))) for i in order]

    def knn(self, q, k: int, exclude=None) -> list[tuple[int, float]]:
        """Up to ``k`` nearest points not in ``exclude``, as ``(index, distance)``
        sorted by distance then index."""
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(q, dtype=np.float64)
        excl = set() if exclude is None else {int(i) for i in exclude}
        n = len(self)
        avail = n - sum(1 for i in excl if 0 <= i < n)
        if avail <= 0:
            return []
        k_eff = min(k, avail)
        m = min(n, k_eff + len(excl))
        _, idx = self._tree.query(q, k=m)
        idx = np.atleast_1d(idx)
        idx = idx[idx < n]
        if excl:
            idx = np.array([i for i in idx if int(i) not in excl], dtype=np.int64)
        # gather everything tied with (or ulp-close to) the k-th candidate
        d_k = np.sqrt(_sq_dist(self.positions[idx], q)).max() if len(idx) else 0.0
        r = d_k * (1 + _SLACK) + 1e-300
        cand = self._tree.query_ball_point(q, r)
        if excl:
            cand = [i for i in cand if i not in excl]
        return self._finish(q, cand, k=k_eff)

    def radius_query(self, q, r: float) -> list[tuple[int, float]]:
        """All points with distance <= ``r``, sorted by distance then index."""
        if not r > 0:
            raise ValueError("r must be > 0")
        q = np.asarray(q, dtype=np.float64)
        if len(self) == 0:
            return []
        if np.isinf(r):
            return self._finish(q, np.arange(len(self)))
        cand = self._tree.query_ball_point(q, r * (1 + _SLACK))
        return self._finish(q, cand, limit_sq=r * r)

    # ------------------------------------------------------------------
    # batched queries

    def knn_batch(self, queries, k: int, max_distance: float = np.inf):
        """Vectorised KNN for many queries.

        Returns ``(idx, dist)`` of shape ``(Q, k)``; missing slots hold index
        ``-1`` and distance ``inf``. Neighbours farther than ``max_distance``
        are dropped. Rows whose k-th and (k+1)-th candidates are within
        floating slack of each other are resolved with the exact single-query
        path, so ties follow the lowest-index rule.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        qs = np.asarray(queries, dtype=np.float64).reshape(-1, self.dim)
        nq = len(qs)
        out_i = np.full((nq, k), -1, dtype=np.int64)
        out_d = np.full((nq, k), np.inf)
        n = len(self)
        if n == 0 or nq == 0:
            return out_i, out_d
        m = min(n, k + 1)
        bound = max_distance * (1 + _SLACK) if np.isfinite(max_distance) else np.inf
        _, idx = self._tree.query(qs, k=m, distance_upper_bound=bound)
        idx = idx.reshape(nq, m)
        valid = idx < n
        safe = np.where(valid, idx, 0)
        d2 = _sq_dist(self.positions[safe], qs[:, None, :])
        d2 = np.where(valid, d2, np.inf)
        if np.isfinite(max_distance):
            lim = max_distance * max_distance
            drop = d2 > lim
            d2 = np.where(drop, np.inf, d2)
            safe = np.where(drop, -1, np.where(valid, safe, -1))
        else:
            safe = np.where(valid, safe, -1)
        order = np.lexsort((np.where(safe < 0, n, safe), d2), axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        safe = np.take_along_axis(safe, order, axis=1)

        kk = min(k, m)
        out_i[:, :kk] = safe[:, :kk]
        out_d[:, :kk] = np.sqrt(d2[:, :kk])
        if m > k:
            dk, dnext = d2[:, k - 1], d2[:, k]
            amb = np.isfinite(dnext) & (dnext <= dk * (1 + 4 * _SLACK))
            for row in np.flatnonzero(amb):
                res = self.radius_query(qs[row], np.sqrt(dk[row]) * (1 + 2 * _SLACK) + 1e-300)
                if np.isfinite(max_distance):
                    res = [(i, d) for i, d in res if d <= max_distance]
                res = res[:k]
                out_i[row] = -1
                out_d[row] = np.inf
                for j, (i, d) in enumerate(res):
                    out_i[row, j] = i
                    out_d[row, j] = d
        return out_i, out_d


def build(positions, leafsize: int = 16) -> PointIndex:
    return PointIndex(positions, leafsize=leafsize)


def brute_force_knn(positions, q, k, exclude=None):
    """Linear-scan reference used by tests and for tiny inputs."""
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, len(q))
    excl = set() if exclude is None else set(exclude)
    d2 = _sq_dist(pts, np.asarray(q, dtype=np.float64))
    ids = [i for i in range(len(pts)) if i not in excl]
    ids.sort(key=lambda i: (d2[i], i))
    return [(i, float(np.sqrt(d2[i]))) for i in ids[:k]]


def median_spacing(positions) -> float:
    """Median distance from each point to its nearest other point."""
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 2:
        raise ValueError("need at least 2 points to measure spacing")
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(np.median(d[:, 1]))
