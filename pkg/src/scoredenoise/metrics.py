"""Chamfer and point-to-mesh distances, reported x10^4 like the benchmark tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import SpatialIndex, as_cloud, normalize_unit_sphere
from .mesh import MeshDistance, TriangleMesh

REPORT_SCALE = 1e4


def _nn_sq(src: np.ndarray, dst_index: SpatialIndex) -> np.ndarray:
    nn = dst_index.points[dst_index.nearest_batch(src)]
    d = src - nn
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def chamfer_distance(x, y) -> float:
    """Mean squared NN distance X->Y plus the same Y->X."""
    try:
        a, b = as_cloud(x), as_cloud(y)
    except ValueError as exc:
        raise ValueError(f"chamfer distance needs two non-empty clouds: {exc}") from None
    ab = math.fsum(_nn_sq(a, SpatialIndex(b))) / len(a)
    ba = math.fsum(_nn_sq(b, SpatialIndex(a))) / len(b)
    # Sum in a fixed order so the result is symmetric bit for bit.
    return ab + ba if ab <= ba else ba + ab


def point_to_mesh(x, mesh: TriangleMesh) -> float:
    """Mean squared distance from each point to the mesh surface (one-sided)."""
    pts = as_cloud(x)
    return math.fsum(MeshDistance(mesh).query(pts)) / len(pts)


@dataclass
class EvalReport:
    cd_raw: float
    p2m_raw: float | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def cd_scaled(self) -> float:
        return self.cd_raw * REPORT_SCALE

    @property
    def p2m_scaled(self) -> float | None:
        return None if self.p2m_raw is None else self.p2m_raw * REPORT_SCALE

    def rows(self) -> list[tuple[str, str]]:
        out = [(k, str(v)) for k, v in self.metadata.items()]
        out.append(("cd", f"{self.cd_scaled:.3f}"))
        if self.p2m_raw is not None:
            out.append(("p2m", f"{self.p2m_scaled:.3f}"))
        return out

    def to_csv(self) -> str:
        rows = self.rows()
        return ",".join(k for k, _ in rows) + "\n" + ",".join(v for _, v in rows) + "\n"

    def to_table(self) -> str:
        rows = self.rows()
        widths = [max(len(k), len(v)) for k, v in rows]
        head = "  ".join(k.rjust(w) for (k, _), w in zip(rows, widths))
        body = "  ".join(v.rjust(w) for (_, v), w in zip(rows, widths))
        return head + "\n" + body + "\n"


def evaluate(denoised, clean, mesh: TriangleMesh | None = None, **metadata) -> EvalReport:
    """Normalize the denoised cloud into the unit sphere, then score it.

    ``clean`` and ``mesh`` must already be in the unit-sphere frame. P2M is
    omitted when no mesh is given.
    """
    pred, _ = normalize_unit_sphere(denoised)
    cd = chamfer_distance(pred, clean)
    p2m = point_to_mesh(pred, mesh) if mesh is not None else None
    return EvalReport(cd_raw=cd, p2m_raw=p2m, metadata=dict(metadata))
