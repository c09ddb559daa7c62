"""Noise models and reproducible random streams.

All randomness flows through :func:`make_rng`: a Philox-4x64 counter-based
generator keyed by a ``SeedSequence`` over ``(seed, *stream)``. Distinct
stream tags give independent, reproducible sub-streams without sharing a
mutable generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import as_cloud

KINDS = ("gaussian", "anisotropic", "laplace", "uniform", "discrete", "unidirectional")


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class NoiseModel:
    """A perturbation distribution, parameterized in the unit-sphere frame.

    ``params`` per kind:
      gaussian        sigma
      anisotropic     cov (3x3 symmetric PSD)
      laplace         b (per-axis scale)
      uniform         r (ball radius)
      discrete        offsets (K x 3), probs (K,)
      unidirectional  direction (unit 3-vector), sigma
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        k, p = self.kind, self.params
        if k not in KINDS:
            raise ValueError(f"unknown noise kind {k!r}")
        if k in ("gaussian", "unidirectional") and not p.get("sigma", -1) >= 0:
            raise ValueError("sigma must be >= 0")
        if k == "laplace" and not p.get("b", -1) >= 0:
            raise ValueError("laplace scale b must be >= 0")
        if k == "uniform" and not p.get("r", -1) >= 0:
            raise ValueError("uniform ball radius r must be >= 0")
        if k == "anisotropic":
            cov = np.asarray(p.get("cov"), dtype=np.float64)
            if cov.shape != (3, 3) or not np.allclose(cov, cov.T, atol=1e-12):
                raise ValueError("covariance must be a symmetric 3x3 matrix")
            if np.linalg.eigvalsh(cov).min() < -1e-12:
                raise ValueError("covariance must be positive semi-definite")
        if k == "discrete":
            offsets = np.asarray(p.get("offsets"), dtype=np.float64)
            probs = np.asarray(p.get("probs"), dtype=np.float64)
            if offsets.ndim != 2 or offsets.shape[1] != 3 or probs.shape != (offsets.shape[0],):
                raise ValueError("discrete noise needs K offsets and K probabilities")
            if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
                raise ValueError("discrete probabilities must be non-negative and sum to 1")
        if k == "unidirectional":
            d = np.asarray(p.get("direction"), dtype=np.float64)
            if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-9:
                raise ValueError("unidirectional direction must be a unit vector")

    @classmethod
    def gaussian(cls, sigma: float) -> "NoiseModel":
        return cls("gaussian", {"sigma": float(sigma)})

    def __str__(self) -> str:
        return format_noise(self)


def parse_noise(spec: str) -> NoiseModel:
    """Parse ``kind:args``, e.g. ``gaussian:0.02`` or ``laplace:0.01``.

    anisotropic takes 9 row-major covariance entries; discrete takes
    ``dx,dy,dz,p`` groups separated by ``;``; unidirectional takes
    ``dx,dy,dz,sigma`` (direction is normalized).
    """
    kind, sep, rest = spec.strip().partition(":")
    kind = kind.strip().lower()
    if not sep:
        raise ValueError(f"noise model {spec!r} must look like kind:args")
    try:
        if kind == "gaussian":
            return NoiseModel.gaussian(float(rest))
        if kind == "laplace":
            return NoiseModel("laplace", {"b": float(rest)})
        if kind == "uniform":
            return NoiseModel("uniform", {"r": float(rest)})
        if kind == "anisotropic":
            vals = [float(v) for v in rest.split(",")]
            if len(vals) != 9:
                raise ValueError("anisotropic noise needs 9 covariance entries")
            return NoiseModel("anisotropic", {"cov": np.array(vals).reshape(3, 3)})
        if kind == "discrete":
            groups = [[float(v) for v in g.split(",")] for g in rest.split(";") if g.strip()]
            if not groups or any(len(g) != 4 for g in groups):
                raise ValueError("discrete noise needs dx,dy,dz,p groups")
            arr = np.array(groups)
            return NoiseModel("discrete", {"offsets": arr[:, :3], "probs": arr[:, 3]})
        if kind == "unidirectional":
            vals = [float(v) for v in rest.split(",")]
            if len(vals) != 4:
                raise ValueError("unidirectional noise needs dx,dy,dz,sigma")
            d = np.array(vals[:3])
            n = np.linalg.norm(d)
            if n == 0:
                raise ValueError("unidirectional direction must be non-zero")
            return NoiseModel("unidirectional", {"direction": d / n, "sigma": vals[3]})
    except ValueError as exc:
        raise ValueError(f"bad noise model {spec!r}: {exc}") from None
    raise ValueError(f"unknown noise kind {kind!r}")


def format_noise(model: NoiseModel) -> str:
    p = model.params
    if model.kind == "gaussian":
        return f"gaussian:{p['sigma']:g}"
    if model.kind == "laplace":
        return f"laplace:{p['b']:g}"
    if model.kind == "uniform":
        return f"uniform:{p['r']:g}"
    if model.kind == "anisotropic":
        return "anisotropic:" + ",".join(f"{v:g}" for v in np.asarray(p["cov"]).ravel())
    if model.kind == "discrete":
        return "discrete:" + ";".join(
            ",".join(f"{v:g}" for v in (*o, q)) for o, q in zip(p["offsets"], p["probs"])
        )
    return "unidirectional:" + ",".join(f"{v:g}" for v in (*p["direction"], p["sigma"]))


def sample_noise(model: NoiseModel, count: int, seed: int) -> np.ndarray:
    """Draw ``count`` i.i.d. offsets, shape ``(count, 3)``."""
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = make_rng(seed, 7)
    p = model.params
    kind = model.kind
    if kind == "gaussian":
        return rng.standard_normal((count, 3)) * p["sigma"]
    if kind == "anisotropic":
        w, v = np.linalg.eigh(np.asarray(p["cov"], dtype=np.float64))
        root = v * np.sqrt(np.clip(w, 0.0, None))
        return rng.standard_normal((count, 3)) @ root.T
    if kind == "laplace":
        return rng.laplace(0.0, 1.0, (count, 3)) * p["b"]
    if kind == "uniform":
        d = rng.standard_normal((count, 3))
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        radius = p["r"] * rng.random((count, 1)) ** (1.0 / 3.0)
        return d / norms * radius
    if kind == "discrete":
        offsets = np.asarray(p["offsets"], dtype=np.float64)
        cdf = np.cumsum(np.asarray(p["probs"], dtype=np.float64))
        pick = np.minimum(np.searchsorted(cdf, rng.random(count) * cdf[-1], side="right"), len(cdf) - 1)
        return offsets[pick].copy()
    # unidirectional
    mag = rng.standard_normal(count) * p["sigma"]
    return mag[:, None] * np.asarray(p["direction"], dtype=np.float64)[None, :]


def perturb(cloud, model: NoiseModel, seed: int) -> np.ndarray:
    """``x_i = y_i + n_i`` with ``n_i`` the i-th draw of ``sample_noise``."""
    pts = as_cloud(cloud)
    return pts + sample_noise(model, pts.shape[0], seed)
