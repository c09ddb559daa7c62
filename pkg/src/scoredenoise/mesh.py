"""Triangle meshes: OBJ I/O, surface sampling and exact point-to-mesh distance."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import as_cloud, atomic_write_text, sq_dists
from .noise import make_rng


class MeshError(ValueError):
    """Malformed or invalid mesh input."""


def _dot(u, v):
    return u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1] + u[..., 2] * v[..., 2]


def _triangle_area2(a, b, c) -> np.ndarray:
    """Twice the triangle area, for broadcastable vertex arrays."""
    return np.linalg.norm(np.cross(b - a, c - a), axis=-1)


def _is_degenerate(a, b, c) -> np.ndarray:
    edges = np.stack([_dot(b - a, b - a), _dot(c - b, c - b), _dot(a - c, a - c)], axis=-1)
    longest = edges.max(axis=-1)
    return _triangle_area2(a, b, c) <= 1e-12 * longest


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        t = np.asarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or not np.all(np.isfinite(v)):
            raise MeshError("vertices must be a finite (V, 3) array")
        if t.ndim != 2 or t.shape[1] != 3 or t.shape[0] == 0:
            raise MeshError("triangles must be a non-empty (T, 3) index array")
        if t.min() < 0 or t.max() >= v.shape[0]:
            raise MeshError("triangle index out of vertex bounds")
        bad = np.nonzero(_is_degenerate(v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]))[0]
        if bad.size:
            raise MeshError(f"degenerate (zero-area) triangles: {bad.tolist()[:10]}")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v, t = self.vertices, self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def areas(self) -> np.ndarray:
        return 0.5 * _triangle_area2(*self.corners)

    def transformed(self, tf) -> "TriangleMesh":
        """Copy with vertices mapped through a NormalizationTransform."""
        return TriangleMesh(tf.apply(self.vertices), self.triangles)


def load_mesh(path) -> TriangleMesh:
    """Read the 'v' and 'f' records of an OBJ file (1-based, fan-triangulated)."""
    verts: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    face_lines: list[int] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    verts.append([float(p) for p in parts[1:4]])
                except ValueError:
                    raise MeshError(f"{path}:{lineno}: bad vertex coordinate") from None
            elif parts[0] == "f":
                if len(parts) < 4:
                    raise MeshError(f"{path}:{lineno}: face needs at least 3 vertices")
                idx = []
                for tok in parts[1:]:
                    try:
                        i = int(tok.split("/")[0])
                    except ValueError:
                        raise MeshError(f"{path}:{lineno}: bad face index {tok!r}") from None
                    i = i - 1 if i > 0 else len(verts) + i
                    if not 0 <= i < len(verts):
                        raise MeshError(f"{path}:{lineno}: face index {tok} out of bounds")
                    idx.append(i)
                for j in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[j], idx[j + 1]))
                    face_lines.append(lineno)
    if not faces:
        raise MeshError(f"{path}: no faces")
    v = np.asarray(verts, dtype=np.float64)
    t = np.asarray(faces, dtype=np.int64)
    bad = np.nonzero(_is_degenerate(v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]))[0]
    if bad.size:
        where = ", ".join(f"face {int(b)} (line {face_lines[b]})" for b in bad[:10])
        raise MeshError(f"{path}: degenerate triangles: {where}")
    return TriangleMesh(v, t)


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = ["v %.9g %.9g %.9g\n" % tuple(p) for p in mesh.vertices]
    lines += ["f %d %d %d\n" % tuple(f + 1) for f in mesh.triangles]
    atomic_write_text(path, "".join(lines))


# -- primitive shapes -------------------------------------------------------

def make_cube(half_extent: float = 0.5) -> TriangleMesh:
    h = half_extent
    v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)], dtype=np.float64)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(v, np.array(tris))


def make_icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriangleMesh(np.array(verts) * radius, np.array(f))


def make_uv_sphere(n_lat: int = 24, n_lon: int = 48, radius: float = 1.0) -> TriangleMesh:
    verts = [[0.0, 0.0, radius]]
    for i in range(1, n_lat):
        th = math.pi * i / n_lat
        for j in range(n_lon):
            ph = 2 * math.pi * j / n_lon
            verts.append([radius * math.sin(th) * math.cos(ph), radius * math.sin(th) * math.sin(ph), radius * math.cos(th)])
    verts.append([0.0, 0.0, -radius])
    south = len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    tris = [(0, ring(1, j), ring(1, j + 1)) for j in range(n_lon)]
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b, c, d = ring(i, j), ring(i + 1, j), ring(i + 1, j + 1), ring(i, j + 1)
            tris += [(a, b, c), (a, c, d)]
    tris += [(south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)) for j in range(n_lon)]
    return TriangleMesh(np.array(verts), np.array(tris))


def make_grid_plane(n: int = 1, size: float = 1.0) -> TriangleMesh:
    """Square ``[0, size]^2`` in the z=0 plane split into ``2 n^2`` triangles."""
    xs = np.linspace(0.0, size, n + 1)
    v = np.array([[x, y, 0.0] for y in xs for x in xs])
    tris = []
    for r in range(n):
        for c in range(n):
            a = r * (n + 1) + c
            tris += [(a, a + 1, a + n + 2), (a, a + n + 2, a + n + 1)]
    return TriangleMesh(v, np.array(tris))


# -- sampling ---------------------------------------------------------------

@dataclass(frozen=True)
class SamplingConfig:
    target_count: int
    oversample_factor: float = 4.0
    method: str = "poisson-disk"

    def __post_init__(self):
        if self.target_count < 1:
            raise ValueError("target_count must be >= 1")
        if self.oversample_factor < 1:
            raise ValueError("oversample_factor must be >= 1")
        if self.method not in ("uniform-area", "poisson-disk"):
            raise ValueError(f"unknown sampling method {self.method!r}")


def sample_uniform(mesh: TriangleMesh, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted triangle choice, uniform barycentric position inside it.

    Returns the points and the triangle each was drawn from.
    """
    areas = mesh.areas()
    cdf = np.cumsum(areas)
    cdf /= cdf[-1]
    tri = np.searchsorted(cdf, rng.random(count), side="right")
    tri = np.minimum(tri, len(areas) - 1)
    u = rng.random(count)
    v = rng.random(count)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    a, b, c = (x[tri] for x in mesh.corners)
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return pts, tri


def _nearest_alive(tree, pts, alive, i):
    """Nearest live neighbour of point ``i`` (ties: lowest index)."""
    n = len(pts)
    k = 8
    while True:
        kk = min(k, n)
        dist, idx = tree.query(pts[i], k=kk)
        idx = np.atleast_1d(idx)
        keep = (idx != i) & alive[idx]
        if keep.any():
            cand = idx[keep]
            d2 = sq_dists(pts[cand], pts[i])
            j = np.lexsort((cand, d2))[0]
            # A tie with the farthest queried candidate could hide an unqueried one.
            if kk == n or d2[j] < float(np.max(dist)) ** 2 * (1 - 1e-9):
                return int(cand[j]), float(d2[j])
        elif kk == n:
            return -1, math.inf
        k *= 4


class _NeighbourCache:
    """Each point's nearest neighbours, sorted by exact (distance, index).

    ``nearest(i)`` returns the first live cached neighbour when it provably
    beats every uncached point, and asks the kd-tree otherwise.
    """

    def __init__(self, tree, pts: np.ndarray, alive: np.ndarray, k: int = 16):
        n = len(pts)
        kk = min(k + 1, n)
        dist, idx = tree.query(pts, k=kk)
        dist, idx = dist.reshape(n, kk), idx.reshape(n, kk)
        diff = pts[idx] - pts[:, None, :]
        d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
        order = np.lexsort((idx, d2), axis=1)
        self.idx = np.take_along_axis(idx, order, axis=1).tolist()
        self.d2 = np.take_along_axis(d2, order, axis=1).tolist()
        self.bound = (1 - 1e-9) * dist.max(axis=1) ** 2
        self.complete = kk == n
        self.tree, self.pts, self.alive = tree, pts, alive

    def nearest(self, i: int) -> tuple[int, float]:
        alive = self.alive
        for j, dj in zip(self.idx[i], self.d2[i]):
            if j != i and alive[j]:
                if self.complete or dj < self.bound[i]:
                    return j, dj
                break
        return _nearest_alive(self.tree, self.pts, alive, i)


def eliminate_samples(points: np.ndarray, target: int) -> np.ndarray:
    """Greedy sample elimination down to ``target`` points.

    Repeatedly drops the point whose nearest remaining neighbour is closest
    (ties: lowest index). Returns the surviving indices in ascending order.
    """
    pts = as_cloud(points)
    n = len(pts)
    if target >= n:
        return np.arange(n)
    tree = cKDTree(pts)
    alive = np.ones(n, dtype=bool)
    cache = _NeighbourCache(tree, pts, alive)
    nn = [0] * n
    nd = [0.0] * n
    owners: list[list[int]] = [[] for _ in range(n)]
    for i in range(n):
        j, d = cache.nearest(i)
        nn[i], nd[i] = j, d
        owners[j].append(i)
    heap = list(zip(nd, range(n)))
    heapq.heapify(heap)
    remaining = n
    while remaining > target:
        d, i = heapq.heappop(heap)
        if not alive[i] or d != nd[i]:
            continue
        alive[i] = False
        remaining -= 1
        for p in owners[i]:
            if alive[p] and nn[p] == i:
                j, dj = cache.nearest(p)
                nn[p], nd[p] = j, dj
                owners[j].append(p)
                heapq.heappush(heap, (dj, p))
        owners[i] = []
    return np.nonzero(alive)[0]


def sample_surface(mesh: TriangleMesh, cfg: SamplingConfig, seed: int) -> np.ndarray:
    rng = make_rng(seed, 101)
    if cfg.method == "uniform-area":
        return sample_uniform(mesh, cfg.target_count, rng)[0]
    pool = math.ceil(cfg.target_count * cfg.oversample_factor)
    pts, _ = sample_uniform(mesh, pool, rng)
    keep = eliminate_samples(pts, cfg.target_count)
    return pts[keep]


# -- distances --------------------------------------------------------------

def closest_point_sq(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Squared distance from points ``p`` to triangles ``(a, b, c)``, row-wise.

    Voronoi-region classification of the closest feature (vertex, edge or
    face interior); all inputs are broadcast ``(..., 3)`` arrays.
    """
    p, a, b, c = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (p, a, b, c)))
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    bp = p - b
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    cp = p - c
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    out = np.empty(p.shape[:-1] + (3,))
    done = np.zeros(p.shape[:-1], dtype=bool)

    def assign(mask, value):
        m = mask & ~done
        out[m] = value[m] if np.ndim(value) == out.ndim else value
        done[m] = True

    assign((d1 <= 0) & (d2 <= 0), a)
    assign((d3 >= 0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        assign(m, a + (d1 / (d1 - d3))[..., None] * ab)
        assign((d6 >= 0) & (d5 <= d6), c)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        assign(m, a + (d2 / (d2 - d6))[..., None] * ac)
        e1, e2 = d4 - d3, d5 - d6
        m = (va <= 0) & (e1 >= 0) & (e2 >= 0)
        assign(m, b + (e1 / (e1 + e2))[..., None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        inner = a + (vb * denom)[..., None] * ab + (vc * denom)[..., None] * ac
    assign(np.ones_like(done), inner)
    d = p - out
    return _dot(d, d)


def point_to_triangle_sq(q, a, b, c) -> float:
    a, b, c = (np.asarray(x, dtype=np.float64).reshape(3) for x in (a, b, c))
    if _is_degenerate(a, b, c):
        raise ValueError("degenerate triangle")
    return float(closest_point_sq(np.asarray(q, dtype=np.float64).reshape(3), a, b, c))


class MeshDistance:
    """Accelerated exact point-to-mesh squared distance.

    A k-d tree over triangle centroids gives an upper bound per query; only
    triangles whose bounding sphere can beat that bound are evaluated. Since
    the true minimum is always among the evaluated set, the result equals
    the exhaustive scan bit for bit.
    """

    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh
        self.a, self.b, self.c = mesh.corners
        self.centroids = (self.a + self.b + self.c) / 3.0
        r = np.stack([np.linalg.norm(x - self.centroids, axis=1) for x in (self.a, self.b, self.c)], axis=1)
        self.max_radius = float(r.max()) * (1 + 1e-9) + 1e-12
        self._tree = cKDTree(self.centroids)

    def exhaustive(self, q) -> float:
        q = np.asarray(q, dtype=np.float64).reshape(3)
        return float(closest_point_sq(q, self.a, self.b, self.c).min())

    def query(self, queries) -> np.ndarray:
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        ntri = len(self.centroids)
        if ntri <= 64:
            return np.array([self.exhaustive(q) for q in queries])
        k = min(8, ntri)
        _, near = self._tree.query(queries, k=k)
        near = near.reshape(len(queries), k)
        ub = closest_point_sq(queries[:, None, :], self.a[near], self.b[near], self.c[near]).min(axis=1)
        radii = np.sqrt(ub) * (1 + 1e-9) + self.max_radius
        cand = self._tree.query_ball_point(queries, radii)
        out = np.empty(len(queries))
        for i, ids in enumerate(cand):
            ids = np.asarray(ids, dtype=np.int64)
            out[i] = closest_point_sq(queries[i], self.a[ids], self.b[ids], self.c[ids]).min()
        return out


def point_to_mesh_sq(q, mesh: TriangleMesh) -> float:
    return float(MeshDistance(mesh).query(q)[0])
