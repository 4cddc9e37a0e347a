"""Geometric primitives shared by the dataset, network and inference code.

Everything here is a pure function of its inputs (plus an explicit seed where
randomness is involved), so it is safe to call from many workers at once.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

PATCH_SIZE = 512
NORMAL_TOL = 1e-6


def bbox_diagonal(points: np.ndarray) -> float:
    """Length of the axis-aligned bounding-box diagonal."""
    points = np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


@dataclass
class PointCloud:
    """Positions with optional unit normals.

    ``diag`` is derived from the positions and kept as a plain attribute so
    callers can read the model scale without recomputing it.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    diag: float = field(init=False)

    def __post_init__(self) -> None:
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
            raise ValueError(f"points must have shape (N, 3) with N >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        self.points = pts
        if self.normals is not None:
            nrm = np.ascontiguousarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError(f"normals shape {nrm.shape} does not match points {pts.shape}")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > NORMAL_TOL):
                raise ValueError("normals must be unit vectors")
            self.normals = nrm
        self.diag = bbox_diagonal(pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return PointCloud(self.points, normals)

    def translated(self, t) -> "PointCloud":
        return PointCloud(self.points + np.asarray(t, dtype=np.float64), self.normals)


@dataclass(frozen=True)
class PatchFrame:
    translation: np.ndarray  # p_i, model units
    scale: float  # r, model units


@dataclass
class Patch:
    """Fixed-size neighborhood of one point, in the center's local frame.

    Rows are ordered center first, then the other in-radius points by
    ascending source index, then padding.  Padded rows sit at the origin and
    carry the center's raw normal.
    """

    center_index: int
    points: np.ndarray  # (M, 3), local frame
    normals: np.ndarray  # (M, 3)
    radius: float
    center: np.ndarray  # p_i in model units
    pad_count: int
    source_indices: np.ndarray  # (M - pad_count,) indices into the source cloud

    @property
    def frame(self) -> PatchFrame:
        return PatchFrame(self.center, self.radius)

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def real_count(self) -> int:
        return self.size - self.pad_count

    @property
    def real_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        mask[: self.real_count] = True
        return mask


def _sorted_by_distance(points: np.ndarray, query: np.ndarray, candidates: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    diff = points[candidates] - query
    d2 = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((candidates, d2))
    return candidates[order], d2[order]


def knn_indices(points, queries, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points to each query.

    Rows are sorted by ascending Euclidean distance with ties broken by
    ascending index, so a query that coincides with a data point lists that
    point first.  The k-d tree only proposes candidates; the final ordering
    is always made on exactly computed squared distances, which keeps the
    result identical to an exhaustive sort.
    """
    points = np.asarray(points, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    n = len(points)
    if k < 1 or k > n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if not (np.all(np.isfinite(points)) and np.all(np.isfinite(queries))):
        raise ValueError("coordinates must be finite")

    if n <= 256:
        diff = queries[:, None, :] - points[None, :, :]
        d2 = np.einsum("qnj,qnj->qn", diff, diff)
        idx = np.broadcast_to(np.arange(n), d2.shape)
        order = np.lexsort((idx, d2), axis=-1)
        return order[:, :k].astype(np.int64)

    tree = cKDTree(points)
    dist, _ = tree.query(queries, k=k)
    dist = np.asarray(dist).reshape(len(queries), k)
    out = np.empty((len(queries), k), dtype=np.int64)
    for q, query in enumerate(queries):
        # every point at distance <= the k-th distance, with slack for rounding
        reach = dist[q, -1] * (1.0 + 1e-9) + 1e-300
        cand = np.asarray(tree.query_ball_point(query, reach), dtype=np.int64)
        if len(cand) < k:
            cand = np.arange(n)
        ordered, _ = _sorted_by_distance(points, query, cand)
        out[q] = ordered[:k]
    return out


def estimate_normals_pca(cloud: PointCloud, k: int = 16) -> Tuple[np.ndarray, np.ndarray]:
    """Unoriented PCA normals from k-nearest-neighbor covariances.

    Each normal is the eigenvector of the smallest covariance eigenvalue.
    Its sign is chosen so that ``n . (p - centroid) >= 0``; when that dot
    product vanishes the first nonzero component is made positive.

    Returns
    -------
    normals : (N, 3) unit vectors
    degenerate : (N,) bool, True where the neighborhood covariance has rank < 2
    """
    if k < 3:
        raise ValueError(f"k must be >= 3, got {k}")
    pts = cloud.points
    k = min(k, len(pts))
    idx = knn_indices(pts, pts, k)
    nbrs = pts[idx]
    centroid = nbrs.mean(axis=1)
    centered = nbrs - centroid[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()

    scale = np.maximum(evals[:, 2], 0.0)
    degenerate = evals[:, 1] <= 1e-12 * scale + 1e-300
    identical = scale <= 1e-300
    normals[identical] = (0.0, 0.0, 1.0)

    offset = pts - centroid
    dots = np.einsum("ij,ij->i", normals, offset)
    tol = 1e-9 * np.sqrt(scale)
    flip = dots < -tol
    normals[flip] *= -1.0
    ambiguous = (np.abs(dots) <= tol) & ~identical
    for i in np.flatnonzero(ambiguous):
        nz = np.flatnonzero(np.abs(normals[i]) > 1e-12)
        if len(nz) and normals[i, nz[0]] < 0:
            normals[i] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    if np.any(degenerate):
        logger.debug("%d degenerate PCA neighborhoods", int(degenerate.sum()))
    return normals, degenerate


def patch_rng(seed: int, center_index: int) -> np.random.Generator:
    """Per-center generator so patch sampling does not depend on visit order."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(center_index)])


def extract_patch(
    cloud: PointCloud,
    center_index: int,
    r: float,
    M: int = PATCH_SIZE,
    seed: int = 0,
    tree: Optional[cKDTree] = None,
) -> Patch:
    """Collect the points strictly within ``r`` of the center and normalize.

    More than ``M`` points are subsampled uniformly (the center is always
    kept); fewer are padded with origin rows.
    """
    if r <= 0:
        raise ValueError(f"patch radius must be positive, got {r}")
    if cloud.normals is None:
        raise ValueError("extract_patch needs raw normals on the cloud")
    n = len(cloud)
    if not 0 <= center_index < n:
        raise IndexError(f"center index {center_index} out of range for {n} points")
    pts = cloud.points
    p_i = pts[center_index]

    if tree is None:
        tree = cKDTree(pts)
    cand = np.asarray(tree.query_ball_point(p_i, r * (1.0 + 1e-9)), dtype=np.int64)
    diff = pts[cand] - p_i
    inside = cand[np.einsum("ij,ij->i", diff, diff) < r * r]
    others = np.sort(inside[inside != center_index])

    if len(others) + 1 > M:
        rng = patch_rng(seed, center_index)
        others = np.sort(rng.choice(others, size=M - 1, replace=False))
    rows = np.concatenate([[center_index], others]).astype(np.int64)

    pad = M - len(rows)
    local = np.zeros((M, 3))
    local[: len(rows)] = (pts[rows] - p_i) / r
    normals = np.empty((M, 3))
    normals[: len(rows)] = cloud.normals[rows]
    normals[len(rows):] = cloud.normals[center_index]
    return Patch(
        center_index=int(center_index),
        points=local,
        normals=normals,
        radius=float(r),
        center=p_i.copy(),
        pad_count=int(pad),
        source_indices=rows,
    )


def normalize(frame: PatchFrame, point) -> np.ndarray:
    return (np.asarray(point, dtype=np.float64) - frame.translation) / frame.scale


def denormalize(frame: PatchFrame, local_point) -> np.ndarray:
    """Map a local-frame point back to model units."""
    return np.asarray(local_point, dtype=np.float64) * frame.scale + frame.translation
