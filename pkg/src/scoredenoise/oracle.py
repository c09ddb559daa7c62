"""Closed-form score fields of clean surfaces convolved with Gaussian noise.

``EmpiricalConvolvedModel`` puts a Gaussian of width sigma on every clean
point, giving an exact log-density and score for data; ``PlaneGaussianModel``
is the same construction for the infinite plane z = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import as_cloud

# Softmax terms this many log-units below the largest are dropped by
# ``LocalEmpiricalScore``; e^-50 is far under double-precision resolution.
TRUNCATION_LOGIT = 50.0


@dataclass(frozen=True)
class EmpiricalConvolvedModel:
    support: np.ndarray
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "support", as_cloud(self.support))
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class PlaneGaussianModel:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


def _logits(model: EmpiricalConvolvedModel, x: np.ndarray) -> np.ndarray:
    d = x[:, None, :] - model.support[None, :, :]
    d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
    return -d2 / (2.0 * model.sigma ** 2)


def empirical_log_density(model: EmpiricalConvolvedModel, x) -> np.ndarray | float:
    """``log sum_j exp(-|x - y_j|^2 / (2 sigma^2))`` with max-shift stabilization."""
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    z = _logits(model, pts.reshape(-1, 3))
    zmax = z.max(axis=1, keepdims=True)
    out = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    return float(out[0]) if single else out


def empirical_score(model: EmpiricalConvolvedModel, x) -> np.ndarray:
    """Gradient of the log density: softmax-weighted ``(y_j - x) / sigma^2``."""
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    q = pts.reshape(-1, 3)
    z = _logits(model, q)
    w = np.exp(z - z.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    out = (w @ model.support - q) / model.sigma ** 2
    return out[0] if single else out


class LocalEmpiricalScore:
    """``empirical_score`` restricted to the ``k`` nearest support points.

    A query uses the truncated sum only when every dropped term has a logit at
    least ``TRUNCATION_LOGIT`` below the nearest one; otherwise it falls back
    to the full sum. Results match the full score to rounding.
    """

    def __init__(self, model: EmpiricalConvolvedModel, k: int = 64):
        self.model = model
        self.k = min(k, len(model.support))
        self.tree = cKDTree(model.support)

    def __call__(self, x) -> np.ndarray:
        q = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        m = self.model
        if self.k == len(m.support):
            return empirical_score(m, q)
        dist, idx = self.tree.query(q, k=self.k)
        gap = (dist[:, -1] ** 2 - dist[:, 0] ** 2) / (2.0 * m.sigma ** 2)
        ok = gap >= TRUNCATION_LOGIT
        out = np.empty_like(q)
        if ok.any():
            nb = m.support[idx[ok]]
            d = q[ok, None, :] - nb
            z = -(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]) / (2.0 * m.sigma ** 2)
            w = np.exp(z - z.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            out[ok] = (np.einsum("qk,qkd->qd", w, nb) - q[ok]) / m.sigma ** 2
        if not ok.all():
            out[~ok] = empirical_score(m, q[~ok])
        return out


def plane_score(model: PlaneGaussianModel, x) -> np.ndarray:
    pts = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(pts)
    out[..., 2] = -pts[..., 2] / model.sigma ** 2
    return out


def normalized_plane_score(model: PlaneGaussianModel, x) -> np.ndarray:
    """Plane score times sigma^2: the offset to the plane, ``(0, 0, -z)``."""
    pts = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(pts)
    out[..., 2] = -pts[..., 2]
    return out
