"""Exact nearest-neighbour search over a static 3-D point set.

The tree is stored as flat arrays so the query loop can run under numba.  The
numpy path (``FORGE_NUMBA=0``) answers the same queries by chunked brute force,
which doubles as a reference implementation.
"""

from __future__ import annotations

import numpy as np

from ._accel import njit, prange, use_numba
from .errors import GeometryError
from .geom import as_points

LEAF_SIZE = 16
_STACK = 128


class KdTree:
    """Balanced kd-tree (median splits on the widest axis, bucketed leaves).

    Ties are resolved toward the lowest original point index.
    """

    def __init__(self, points, leaf_size: int = LEAF_SIZE):
        pts = as_points(points)
        if len(pts) == 0:
            raise GeometryError("cannot build a kd-tree on an empty point set")
        self.data = np.ascontiguousarray(pts)
        self.n = len(pts)
        self.leaf_size = max(1, int(leaf_size))
        self._build()

    def _build(self):
        perm = np.arange(self.n)
        start, end, dim, split, left, right = [], [], [], [], [], []

        def new_node(lo, hi):
            start.append(lo)
            end.append(hi)
            dim.append(-1)
            split.append(0.0)
            left.append(-1)
            right.append(-1)
            return len(start) - 1

        root = new_node(0, self.n)
        todo = [root]
        while todo:
            node = todo.pop()
            lo, hi = start[node], end[node]
            if hi - lo <= self.leaf_size:
                continue
            block = self.data[perm[lo:hi]]
            axis = int(np.argmax(block.max(axis=0) - block.min(axis=0)))
            mid = (hi - lo) // 2
            # stable ordering keeps the build deterministic under ties
            order = np.lexsort((perm[lo:hi], block[:, axis]))
            perm[lo:hi] = perm[lo:hi][order]
            dim[node] = axis
            split[node] = float(self.data[perm[lo + mid], axis])
            left[node] = new_node(lo, lo + mid)
            right[node] = new_node(lo + mid, hi)
            todo.extend((left[node], right[node]))

        self.perm = perm
        self.sorted_data = np.ascontiguousarray(self.data[perm])
        self.node_start = np.asarray(start, dtype=np.int64)
        self.node_end = np.asarray(end, dtype=np.int64)
        self.node_dim = np.asarray(dim, dtype=np.int64)
        self.node_split = np.asarray(split, dtype=np.float64)
        self.node_left = np.asarray(left, dtype=np.int64)
        self.node_right = np.asarray(right, dtype=np.int64)

    def __len__(self):
        return self.n

    def query(self, x, k: int = 1):
        """Return ``(distances, indices)``; shape ``(m,)`` for k=1 else ``(m, k)``."""
        q = as_points(x)
        k = int(k)
        if k < 1 or k > self.n:
            raise ValueError(f"k must be in [1, {self.n}]")
        if use_numba():
            d2 = np.empty((len(q), k))
            idx = np.empty((len(q), k), dtype=np.int64)
            _query_kernel(
                self.sorted_data, self.perm, self.node_start, self.node_end,
                self.node_dim, self.node_split, self.node_left, self.node_right,
                np.ascontiguousarray(q), k, d2, idx,
            )
        else:
            d2, idx = brute_force_knn(self.data, q, k)
        dist = np.sqrt(d2)
        if k == 1:
            return dist[:, 0], idx[:, 0]
        return dist, idx

    def nearest_distance(self, x) -> np.ndarray:
        return self.query(x)[0]


def nearest_distance(tree: KdTree, x):
    """Euclidean distance from each query to its nearest stored point.

    A single 3-vector gives a float; an ``(m, 3)`` array gives ``(m,)``.
    """
    arr = np.asarray(x, dtype=np.float64)
    d = tree.query(arr)[0]
    return float(d[0]) if arr.ndim == 1 else d


def brute_force_knn(data: np.ndarray, queries: np.ndarray, k: int = 1, chunk: int = 1024):
    """Squared distances and indices of the k nearest points, by exhaustive scan."""
    data = as_points(data)
    queries = as_points(queries)
    out_d = np.empty((len(queries), k))
    out_i = np.empty((len(queries), k), dtype=np.int64)
    dn = np.einsum("ij,ij->i", data, data)
    for s in range(0, len(queries), chunk):
        q = queries[s:s + chunk]
        d2 = dn[None, :] - 2.0 * (q @ data.T) + np.einsum("ij,ij->i", q, q)[:, None]
        kth = d2.min(axis=1) if k == 1 else np.partition(d2, k - 1, axis=1)[:, k - 1]
        # the expanded form loses digits; rescore every near-tie exactly
        slack = 1e-9 * (1.0 + np.abs(kth)) + 4e-15 * (dn.max() + np.abs(kth))
        rows, cols = np.nonzero(d2 <= (kth + slack)[:, None])
        exact = np.sum((data[cols] - q[rows]) ** 2, axis=1)
        order = np.lexsort((cols, exact, rows))
        rows, cols, exact = rows[order], cols[order], exact[order]
        first = np.searchsorted(rows, np.arange(len(q)))
        for j in range(k):
            out_d[s:s + len(q), j] = exact[first + j]
            out_i[s:s + len(q), j] = cols[first + j]
    return out_d, out_i


@njit(cache=True, parallel=True)
def _query_kernel(data, perm, nstart, nend, ndim, nsplit, nleft, nright, queries, k, out_d2, out_idx):
    m = queries.shape[0]
    for qi in prange(m):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        best_d = np.full(k, np.inf)
        best_i = np.full(k, -1, dtype=np.int64)
        stack_node = np.empty(_STACK, dtype=np.int64)
        stack_bound = np.empty(_STACK)
        top = 0
        stack_node[0] = 0
        stack_bound[0] = 0.0
        top = 1
        while top > 0:
            top -= 1
            node = stack_node[top]
            if stack_bound[top] > best_d[k - 1]:
                continue
            axis = ndim[node]
            if axis < 0:
                for j in range(nstart[node], nend[node]):
                    dx = data[j, 0] - qx
                    dy = data[j, 1] - qy
                    dz = data[j, 2] - qz
                    d2 = dx * dx + dy * dy + dz * dz
                    pid = perm[j]
                    if d2 < best_d[k - 1] or (d2 == best_d[k - 1] and pid < best_i[k - 1]):
                        # insertion into the sorted best list
                        pos = k - 1
                        while pos > 0 and (
                            d2 < best_d[pos - 1]
                            or (d2 == best_d[pos - 1] and pid < best_i[pos - 1])
                        ):
                            best_d[pos] = best_d[pos - 1]
                            best_i[pos] = best_i[pos - 1]
                            pos -= 1
                        best_d[pos] = d2
                        best_i[pos] = pid
                continue
            if axis == 0:
                diff = qx - nsplit[node]
            elif axis == 1:
                diff = qy - nsplit[node]
            else:
                diff = qz - nsplit[node]
            if diff < 0.0:
                near = nleft[node]
                far = nright[node]
            else:
                near = nright[node]
                far = nleft[node]
            # far side first so the near side is popped next
            stack_node[top] = far
            stack_bound[top] = diff * diff
            top += 1
            stack_node[top] = near
            stack_bound[top] = 0.0
            top += 1
        for j in range(k):
            out_d2[qi, j] = best_d[j]
            out_idx[qi, j] = best_i[j]
