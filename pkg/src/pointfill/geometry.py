"""Point-set kernels: farthest point sampling, neighbor queries, grouping.

All operations are pure functions over immutable inputs and use brute-force
O(N*M) distance computation; at the sizes this toolkit targets (N <= 4096)
that is both fast enough and trivially correct.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError

DUMMY_INDEX = -1


@dataclass
class PointCloud:
    """Ordered set of 3D points with optional per-point features and labels.

    points: (N, 3) float64 coordinates
    features: optional (N, d) float64 matrix
    labels: optional (N,) values in {-1, +1} marking mirror provenance
    """

    points: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise DimensionError(f"points must be (N, 3), got {self.points.shape}")
        if self.points.shape[0] < 1:
            raise ArgumentError("a point cloud needs at least one point")
        if not np.isfinite(self.points).all():
            raise ArgumentError("point coordinates must be finite")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != self.points.shape[0]:
                raise DimensionError(
                    f"features must be (N, d) with N={self.points.shape[0]}, "
                    f"got {self.features.shape}"
                )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
            if self.labels.shape[0] != self.points.shape[0]:
                raise DimensionError("labels must have one entry per point")
            if not np.isin(self.labels, (-1.0, 1.0)).all():
                raise ArgumentError("labels must be -1 or +1")

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class NeighborTable:
    """Fixed-K neighbor slots per center; index -1 marks a dummy slot.

    indices: (M, K) int64 into the source set, -1 for dummies
    dummy_mask: (M, K) bool, True where the slot is a dummy
    """

    indices: np.ndarray
    dummy_mask: np.ndarray

    @property
    def center_count(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    @property
    def real_mask(self) -> np.ndarray:
        return ~self.dummy_mask


def sq_dists(a: np.ndarray, b: np.ndarray, exact: bool = False) -> np.ndarray:
    """All-pairs squared Euclidean distances, shape (len(a), len(b)).

    The default uses the |a|^2 + |b|^2 - 2ab expansion (one BLAS call);
    exact=True computes coordinate differences directly so that coincident
    points give a squared distance of exactly zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if exact:
        diff = a[:, None, :] - b[None, :, :]
        return (diff * diff).sum(axis=-1)
    d = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def farthest_point_sample(points: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min subsampling of m indices.

    The seed is the lexicographically smallest coordinate triple (ties fall
    back to the lowest index); each later pick maximizes the distance to the
    already-selected set, again breaking ties toward the lowest index.  Both
    rules make the selection independent of the input ordering for clouds of
    pairwise-distinct points.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not (1 <= m <= n):
        raise ArgumentError(f"farthest_point_sample: m={m} outside 1..{n}")
    selected = np.empty(m, dtype=np.int64)
    # lexsort is stable: equal triples keep their original (lowest-first) order
    selected[0] = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))[0]
    if m == 1:
        return selected
    if n <= 1024:
        dmat = sq_dists(points, points)
        dist = dmat[selected[0]].copy()
        for i in range(1, m):
            selected[i] = int(np.argmax(dist))
            np.minimum(dist, dmat[selected[i]], out=dist)
    else:
        diff = points - points[selected[0]]
        dist = (diff * diff).sum(axis=1)
        for i in range(1, m):
            selected[i] = int(np.argmax(dist))
            diff = points - points[selected[i]]
            np.minimum(dist, (diff * diff).sum(axis=1), out=dist)
    return selected


def ball_query(
    sources: np.ndarray,
    centers: np.ndarray,
    radius: float,
    k: int,
    rng: np.random.Generator,
) -> NeighborTable:
    """Fixed-K radius neighborhoods with dummy padding.

    Every source within `radius` of a center is a candidate.  Centers with
    more than k candidates draw a uniform k-subset from `rng` (candidates are
    first put in distance order so the draw is independent of the source
    ordering); centers with fewer get dummy slots padded at the end.
    """
    if radius <= 0.0:
        raise ArgumentError(f"ball_query: radius must be positive, got {radius}")
    if k < 1:
        raise ArgumentError(f"ball_query: k must be >= 1, got {k}")
    sources = np.asarray(sources, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    n = sources.shape[0]
    d2 = sq_dists(centers, sources)
    within = d2 <= radius * radius
    counts = within.sum(axis=1)

    kk = min(k, n)
    masked = np.where(within, d2, np.inf)
    part = np.argpartition(masked, kk - 1, axis=1)[:, :kk] if kk < n else (
        np.broadcast_to(np.arange(n), (centers.shape[0], n)).copy()
    )
    part_d = np.take_along_axis(masked, part, axis=1)
    order = np.argsort(part_d, axis=1, kind="stable")
    idx = np.take_along_axis(part, order, axis=1)

    m = centers.shape[0]
    indices = np.full((m, k), DUMMY_INDEX, dtype=np.int64)
    real = np.arange(k)[None, :] < np.minimum(counts, k)[:, None]
    indices[:, :kk] = np.where(real[:, :kk], idx, DUMMY_INDEX)

    for i in np.nonzero(counts > k)[0]:
        cand = np.nonzero(within[i])[0]
        cand = cand[np.argsort(d2[i, cand], kind="stable")]
        keep = rng.choice(counts[i], size=k, replace=False)
        keep.sort()
        indices[i] = cand[keep]
    return NeighborTable(indices=indices, dummy_mask=~real)


def knn_query(sources: np.ndarray, centers: np.ndarray, k: int) -> NeighborTable:
    """Exact k nearest neighbors, ties broken toward the lower source index."""
    sources = np.asarray(sources, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    n = sources.shape[0]
    if k > n:
        raise ArgumentError(f"knn_query: k={k} exceeds {n} sources")
    d2 = sq_dists(centers, sources)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return NeighborTable(
        indices=idx.astype(np.int64),
        dummy_mask=np.zeros(idx.shape, dtype=bool),
    )


def group(
    features: np.ndarray,
    table: NeighborTable,
    center_positions: np.ndarray,
    source_positions: np.ndarray,
) -> np.ndarray:
    """Assemble the grouped neighborhood matrix.

    Input:
        features: (N, d) per-source feature matrix
        table: neighbor table with M centers and K slots
        center_positions: (M, 3); source_positions: (N, 3)
    Return:
        (M, K, d+3); each real slot carries (source feature || source - center),
        dummy slots are all-zero rows.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != source_positions.shape[0]:
        raise DimensionError("group: features and source positions disagree on N")
    if table.indices.max(initial=-1) >= features.shape[0]:
        raise AssertionError("group: neighbor index out of range")
    real = table.real_mask
    safe = np.where(real, table.indices, 0)
    mask3 = real[:, :, None]
    grouped_feat = np.where(mask3, features[safe], 0.0)
    offsets = np.where(mask3, source_positions[safe] - center_positions[:, None, :], 0.0)
    return np.concatenate([grouped_feat, offsets], axis=-1)


def three_interpolate(
    coarse_positions: np.ndarray,
    coarse_features: np.ndarray,
    fine_positions: np.ndarray,
) -> np.ndarray:
    """Inverse-squared-distance interpolation over the 3 nearest coarse points.

    f(x) = sum_k w_k f(y_k) / sum_k w_k with w_k = 1 / |y_k - x|^2; a fine
    point coincident with a coarse point copies that feature.  Kept as a
    comparison baseline: the weights depend only on relative distances to the
    3 neighbors, so a fine point moving on the perpendicular axis through a
    neighbor triangle keeps the same interpolated feature.
    """
    coarse_positions = np.asarray(coarse_positions, dtype=np.float64)
    if coarse_positions.shape[0] < 3:
        raise ArgumentError("three_interpolate needs at least 3 coarse points")
    d2 = sq_dists(fine_positions, coarse_positions, exact=True)
    nn = np.argsort(d2, axis=1, kind="stable")[:, :3]
    nd = np.take_along_axis(d2, nn, axis=1)
    out = np.empty((fine_positions.shape[0], coarse_features.shape[1]))
    coincident = nd[:, 0] == 0.0
    with np.errstate(divide="ignore"):
        w = np.divide(1.0, nd)
    for j in np.nonzero(coincident)[0]:
        out[j] = coarse_features[nn[j, 0]]
    rest = ~coincident
    if rest.any():
        wr = w[rest]
        out[rest] = (wr[:, :, None] * coarse_features[nn[rest]]).sum(axis=1) / wr.sum(
            axis=1, keepdims=True
        )
    return out
