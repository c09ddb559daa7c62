"""Point containers, exact kNN queries, sampling and patch extraction.

Clouds are plain ``(N, 3)`` float64 arrays; row order is identity. Every
spatial query breaks distance ties by ascending point index, so results are
reproducible and comparable against brute-force scans.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


def as_cloud(points) -> np.ndarray:
    """Validate and return an ``(N, 3)`` float64 array with N >= 1."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) point array, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError("point cloud must contain at least one point")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point cloud contains non-finite coordinates")
    return arr


def sq_dists(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared distances from every row of ``points`` to ``q``.

    Summed as ``dx*dx + dy*dy + dz*dz`` left to right; the brute-force
    oracles in the tests use the same order, so results compare bit-exactly.
    """
    d = points - q
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


@dataclass(frozen=True)
class NormalizationTransform:
    """Maps ``p -> (p - center) / scale``."""

    center: np.ndarray
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("normalization scale must be positive")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.center

    def __str__(self) -> str:
        c = self.center
        return f"center=({c[0]:.9g}, {c[1]:.9g}, {c[2]:.9g}) scale={self.scale:.9g}"


def normalize_unit_sphere(cloud) -> tuple[np.ndarray, NormalizationTransform]:
    """Center on the centroid and scale the farthest point to radius 1.

    A fully degenerate cloud (all points identical) gets scale 1.
    """
    pts = as_cloud(cloud)
    center = pts.mean(axis=0)
    radius = float(np.sqrt(sq_dists(pts, center).max()))
    scale = radius if radius > 0 else 1.0
    tf = NormalizationTransform(center=center, scale=scale)
    return tf.apply(pts), tf


class SpatialIndex:
    """Immutable kNN index over a snapshot of a cloud.

    A k-d tree proposes candidates; the final ranking is recomputed from
    exact squared distances with index tie-breaking, so answers match a
    linear scan exactly.
    """

    def __init__(self, cloud):
        self.points = as_cloud(cloud).copy()
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return self.points.shape[0]

    def knn(self, q, k: int) -> np.ndarray:
        n = len(self)
        if k < 1 or k > n:
            raise ValueError(f"k must be in [1, {n}], got {k}")
        q = np.asarray(q, dtype=np.float64).reshape(3)
        dist, _ = self._tree.query(q, k=k)
        kth = float(np.max(dist))
        # Widen the ball so every point tied with the k-th one is a candidate.
        cand = np.asarray(self._tree.query_ball_point(q, kth * (1 + 1e-9) + 1e-300), dtype=np.int64)
        if cand.size < k:  # numerical guard, never expected
            cand = np.arange(n)
        d2 = sq_dists(self.points[cand], q)
        order = np.lexsort((cand, d2))[:k]
        return cand[order]

    def knn_batch(self, queries: np.ndarray, k: int) -> np.ndarray:
        """Row-wise ``knn`` for an ``(M, 3)`` array of queries."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self)
        if k < 1 or k > n:
            raise ValueError(f"k must be in [1, {n}], got {k}")
        if queries.shape[0] == 0:
            return np.zeros((0, k), dtype=np.int64)
        # One extra candidate exposes boundary ties; rows with a tie fall back.
        kk = min(k + 1, n)
        _, idx = self._tree.query(queries, k=kk)
        idx = np.asarray(idx, dtype=np.int64).reshape(queries.shape[0], kk)
        diff = self.points[idx] - queries[:, None, :]
        d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
        out = np.empty((queries.shape[0], k), dtype=np.int64)
        for r in range(queries.shape[0]):
            order = np.lexsort((idx[r], d2[r]))
            if kk > k and d2[r, order[k]] <= d2[r, order[k - 1]] * (1 + 1e-9):
                out[r] = self.knn(queries[r], k)
            else:
                out[r] = idx[r, order[:k]]
        return out

    def nearest(self, q) -> int:
        return int(self.knn(q, 1)[0])

    def nearest_batch(self, queries: np.ndarray) -> np.ndarray:
        """Nearest point index for each query row (ties to lowest index)."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self)
        if n == 1:
            return np.zeros(queries.shape[0], dtype=np.int64)
        _, idx = self._tree.query(queries, k=2)
        idx = np.asarray(idx, dtype=np.int64)
        d0 = _row_sq(self.points[idx[:, 0]] - queries)
        d1 = _row_sq(self.points[idx[:, 1]] - queries)
        best = np.where((d1 < d0) | ((d1 == d0) & (idx[:, 1] < idx[:, 0])), idx[:, 1], idx[:, 0])
        # Rows where the second candidate is (nearly) tied may hide a third.
        suspect = np.nonzero(np.abs(d1 - d0) <= 1e-9 * np.maximum(d0, d1))[0]
        for r in suspect:
            best[r] = self.knn(queries[r], 1)[0]
        return best


def _row_sq(d: np.ndarray) -> np.ndarray:
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def knn_query(index: SpatialIndex, q, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points to ``q``, nearest first."""
    return index.knn(q, k)


def nearest_point(index: SpatialIndex, q) -> int:
    return index.nearest(q)


def farthest_point_sample(cloud, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lowest index."""
    pts = as_cloud(cloud)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"m must be in [1, {n}], got {m}")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range")
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start
    min_d2 = sq_dists(pts, pts[start])
    min_d2[start] = -1.0
    for s in range(1, m):
        nxt = int(np.argmax(min_d2))  # argmax returns the first maximum
        selected[s] = nxt
        np.minimum(min_d2, sq_dists(pts, pts[nxt]), out=min_d2)
        min_d2[selected[: s + 1]] = -1.0
    return selected


@dataclass(frozen=True)
class Patch:
    indices: np.ndarray
    seed: int
    transform: NormalizationTransform


def extract_patches(cloud, patch_size: int = 1000, coverage_ratio: float = 3.0) -> list[Patch]:
    """Split a cloud into overlapping kNN patches around FPS seeds.

    The seed count is ``max(1, ceil(coverage_ratio * N / patch_size))``; if
    the patches leave a point uncovered the ratio is raised until every
    index belongs to some patch.
    """
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    pts = as_cloud(cloud)
    n = pts.shape[0]
    size = min(patch_size, n)
    index = SpatialIndex(pts)
    ratio = float(coverage_ratio)
    while True:
        n_seeds = min(n, max(1, math.ceil(ratio * n / patch_size)))
        seeds = farthest_point_sample(pts, n_seeds, start=0)
        groups = index.knn_batch(pts[seeds], size)
        covered = np.zeros(n, dtype=bool)
        for g in groups:
            covered[g] = True
        if covered.all() or n_seeds == n:
            break
        ratio *= 1.5
    patches = []
    for seed, g in zip(seeds, groups):
        _, tf = normalize_unit_sphere(pts[g])
        patches.append(Patch(indices=g, seed=int(seed), transform=tf))
    return patches


def read_xyz(path) -> np.ndarray:
    """Parse an XYZ file: three reals per line, '#' comments and blanks skipped."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no points")
    return as_cloud(rows)


def format_rows(rows: np.ndarray, digits: int = 6) -> str:
    fmt = " ".join([f"%.{digits}g"] * rows.shape[1])
    return "".join(fmt % tuple(r) + "\n" for r in rows)


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_xyz(path, cloud) -> None:
    atomic_write_text(path, format_rows(as_cloud(cloud)))
