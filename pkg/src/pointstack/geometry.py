"""Point-set kernels: sampling, grouping, affine normalization, permutations.

Sampling and grouping only read coordinates and return integer indices, so
they sit outside the differentiable graph.  All kernels accept either a
single cloud ``(N, 3)`` or a batch ``(B, N, 3)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor, custom_op, gather

AFFINE_EPS = 1e-5


@dataclass
class PointCloud:
    points: np.ndarray
    point_labels: Optional[np.ndarray] = None
    class_label: Optional[int] = None

    def __post_init__(self):
        pts = np.asarray(self.points)
        if not np.issubdtype(pts.dtype, np.floating):
            pts = pts.astype(np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ShapeError(f"point cloud must have shape (N>=1, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts
        if self.point_labels is not None:
            labels = np.asarray(self.point_labels, dtype=np.int64)
            if labels.shape != (pts.shape[0],):
                raise ShapeError(
                    f"point_labels length {labels.shape} does not match {pts.shape[0]} points"
                )
            self.point_labels = labels
        if self.class_label is not None:
            self.class_label = int(self.class_label)

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.point_labels, self.class_label)


@dataclass
class Permutation:
    """Row permutation stored as an index vector: ``out[i] = in[indices[i]]``."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or not np.array_equal(np.sort(idx), np.arange(idx.size)):
            raise ValueError("permutation indices must be a bijection over 0..N-1")
        self.indices = idx

    def __len__(self) -> int:
        return self.indices.size

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "Permutation":
        return cls(rng.permutation(n))

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.indices)
        inv[self.indices] = np.arange(self.indices.size)
        return Permutation(inv)

    def matrix(self, dtype=np.float64) -> np.ndarray:
        """Dense matrix P with ``P @ x == x[indices]``."""
        n = self.indices.size
        p = np.zeros((n, n), dtype=dtype)
        p[np.arange(n), self.indices] = 1
        return p


def apply_permutation(m, p: Permutation):
    """Permute rows of a tensor or array (axis -2 for batched inputs)."""
    data = m.data if isinstance(m, Tensor) else np.asarray(m)
    axis = 0 if data.ndim <= 2 else data.ndim - 2
    if data.shape[axis] != len(p):
        raise ShapeError(f"permutation of length {len(p)} cannot act on {data.shape[axis]} rows")
    if not isinstance(m, Tensor):
        return np.take(data, p.indices, axis=axis)
    if data.ndim == 2:
        return gather(m, p.indices)
    if data.ndim == 3:
        return gather(m, np.broadcast_to(p.indices, (data.shape[0], len(p))))
    raise ShapeError(f"cannot permute a tensor of shape {data.shape}")


def _as_batch(points: np.ndarray) -> tuple[np.ndarray, bool]:
    if isinstance(points, PointCloud):
        points = points.points
    pts = np.asarray(points)
    if pts.ndim == 2:
        return pts[None], True
    if pts.ndim != 3:
        raise ShapeError(f"expected (N, D) or (B, N, D) coordinates, got {pts.shape}")
    return pts, False


def farthest_point_sample(points, s: int) -> np.ndarray:
    """Greedy max-min subset selection with a deterministic start.

    The first keypoint is the point farthest from the centroid; each next one
    maximizes the distance to the already chosen set.  Ties go to the lowest
    index.  Returns ``(s,)`` indices, or ``(B, s)`` for batched input.
    """
    pts, single = _as_batch(points)
    b, n, _ = pts.shape
    if not 1 <= s <= n:
        raise ValueError(f"cannot sample {s} keypoints from {n} points")
    rows = np.arange(b)
    x, y, z = (np.ascontiguousarray(pts[..., j]) for j in range(3))
    cx, cy, cz = (v.mean(axis=1, keepdims=True) for v in (x, y, z))
    d = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2
    chosen = np.empty((b, s), dtype=np.int64)
    cur = np.argmax(d, axis=1)
    chosen[:, 0] = cur
    mind = np.full((b, n), np.inf)
    for i in range(1, s):
        px, py, pz = x[rows, cur][:, None], y[rows, cur][:, None], z[rows, cur][:, None]
        np.minimum(mind, (x - px) ** 2 + (y - py) ** 2 + (z - pz) ** 2, out=mind)
        cur = np.argmax(mind, axis=1)
        chosen[:, i] = cur
    return chosen[0] if single else chosen


@dataclass
class NeighborhoodGroups:
    keypoint_indices: np.ndarray
    neighbor_indices: np.ndarray
    offsets: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.neighbor_indices.shape[-1]


def knn_indices(parent, queries, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest parent points to every query point.

    Rows are ordered by (distance, index) ascending.
    """
    par, single = _as_batch(parent)
    qry, _ = _as_batch(queries)
    n = par.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"cannot take {k} neighbors from {n} points")
    d = _sq_dists(qry, par)
    out = _smallest_k(d, k)
    return out[0] if single else out


def _sq_dists(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Squared distances ``(B, M, N)`` between batched point sets, summed x, y, z in order."""
    d = (q[:, :, None, 0] - p[:, None, :, 0]) ** 2
    d += (q[:, :, None, 1] - p[:, None, :, 1]) ** 2
    d += (q[:, :, None, 2] - p[:, None, :, 2]) ** 2
    return d


def _smallest_k(d: np.ndarray, k: int) -> np.ndarray:
    """Per-row indices of the k smallest entries ordered by (value, index)."""
    n = d.shape[-1]
    if k == n:
        return np.argsort(d, axis=-1, kind="stable")
    kth = np.partition(d, k - 1, axis=-1)[..., k - 1 : k]
    less = d < kth
    tied = d == kth
    # among entries equal to the k-th value keep the lowest indices
    room = k - less.sum(-1, keepdims=True)
    keep = less | (tied & (np.cumsum(tied, axis=-1) <= room))
    cols = np.nonzero(keep.reshape(-1, n))[1].reshape(d.shape[:-1] + (k,))
    vals = np.take_along_axis(d, cols, -1)
    order = np.argsort(vals, axis=-1, kind="stable")
    return np.take_along_axis(cols, order, -1)


def knn_group(parent_points, keypoints, k: int) -> NeighborhoodGroups:
    """Group the ``k`` nearest parent points around each keypoint.

    ``keypoints`` is an index array into ``parent_points``.
    """
    par, single = _as_batch(parent_points)
    kp = np.asarray(keypoints, dtype=np.int64)
    kp_b = kp[None] if single else kp
    centers = np.take_along_axis(par, kp_b[..., None], axis=1)
    nbr = knn_indices(par, centers, k)
    return NeighborhoodGroups(kp, nbr[0] if single else nbr)


def geometric_affine(grouped: Tensor, anchor: Tensor, alpha: Tensor, beta: Tensor, eps: float = AFFINE_EPS) -> Tensor:
    """Normalize neighbor features by their keypoint-centered spread.

    ``out = alpha * (f - f_anchor) / (sigma + eps) + beta`` where ``sigma`` is
    the population standard deviation of all centered offsets of one sample
    (one scalar per batch element).  ``grouped`` is ``(S, K, C)`` or
    ``(B, S, K, C)``; ``anchor`` drops the ``K`` axis.
    """
    g, a = grouped.data, anchor.data
    if g.shape[:-2] != a.shape[:-1] or g.shape[-1] != a.shape[-1]:
        raise ShapeError(f"grouped {g.shape} and anchor {a.shape} do not agree")
    c = g.shape[-1]
    if alpha.data.size != c or beta.data.size != c:
        raise ShapeError(f"affine parameters must have {c} channels")
    batched = g.ndim == 4
    red = tuple(range(1, g.ndim)) if batched else None
    o = g - a[..., None, :]
    n = o[0].size if batched else o.size
    mu = o.mean(axis=red, keepdims=True)
    cen = o - mu
    sigma = np.sqrt((cen**2).mean(axis=red, keepdims=True))
    scale = 1.0 / (sigma + eps)
    al = alpha.data.reshape(-1)
    be = beta.data.reshape(-1)
    z = o * scale
    out = z * al + be

    def back(gout):
        gz = gout * al
        # d sigma / d o = (o - mean) / (n * sigma); zero when the spread vanishes
        safe = np.where(sigma > 0, sigma, 1.0)
        dsig = np.where(sigma > 0, cen / (n * safe), 0.0)
        s = -(gz * o).sum(axis=red, keepdims=True) * scale**2
        go = gz * scale + dsig * s
        ga = (gout * z).reshape(-1, c).sum(axis=0).reshape(alpha.shape)
        gb = gout.reshape(-1, c).sum(axis=0).reshape(beta.shape)
        return go.astype(g.dtype, copy=False), (-go.sum(axis=-2)).astype(a.dtype, copy=False), ga, gb

    return custom_op(out.astype(g.dtype, copy=False), (grouped, anchor, alpha, beta), back)


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt((diff**2).sum(-1))
