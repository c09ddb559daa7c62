"""Gradient-ascent denoising with ensemble score fields.

Each patch is denoised in its own unit-sphere frame. Features are computed
once from the noisy patch and frozen; only the query positions move. A
point's final position comes from the patch, among those containing it,
whose seed is nearest (ties: lowest patch id).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import NormalizationTransform, SpatialIndex, as_cloud, extract_patches, normalize_unit_sphere, sq_dists
from .network import NetworkConfig, extract_features, score_first_layer, score_from_projection
from .noise import NoiseModel, sample_noise
from .oracle import EmpiricalConvolvedModel, LocalEmpiricalScore

MODES = ("gradient_ascent", "direct_displacement")


class NumericalFailure(RuntimeError):
    def __init__(self, message: str, point: int | None = None, step: int | None = None, patch: int | None = None):
        super().__init__(message)
        self.point, self.step, self.patch = point, step, patch


@dataclass(frozen=True)
class StepSchedule:
    """Geometric step sizes ``alpha_t = alpha1 * gamma**(t-1)``, t = 1..steps."""

    alpha1: float = 0.2
    gamma: float = 0.95
    steps: int = 30

    def __post_init__(self):
        if not 0 < self.alpha1 < 1:
            raise ValueError("alpha1 must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]; the schedule may not increase")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def alphas(self) -> np.ndarray:
        return self.alpha1 * self.gamma ** np.arange(self.steps, dtype=np.float64)


@dataclass(frozen=True)
class DenoiseConfig:
    K: int = 4
    schedule: StepSchedule = field(default_factory=StepSchedule)
    patch_size: int = 1000
    coverage: float = 3.0
    mode: str = "gradient_ascent"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


class ScoreField:
    """Ensemble score over a patch whose anchors sit at ``positions``.

    Subclasses implement ``local(x, anchors)``, the per-anchor score
    ``S_j(x)`` for paired rows.
    """

    def __init__(self, positions: np.ndarray, K: int):
        self.positions = np.asarray(positions, dtype=np.float64)
        if not 1 <= K <= len(self.positions):
            raise ValueError(f"ensemble size K={K} must be in [1, {len(self.positions)}]")
        self.K = K
        # Resolved once at the original positions and reused for every step.
        self.neighbors = SpatialIndex(self.positions).knn_batch(self.positions, K)

    def local(self, x: np.ndarray, anchors: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        """``E_i(x_i)`` for anchors ``rows`` (default all), one row of ``x`` each."""
        nbrs = self.neighbors if rows is None else self.neighbors[rows]
        n, k = nbrs.shape
        rep = np.repeat(np.asarray(x, dtype=np.float64), k, axis=0)
        s = self.local(rep, nbrs.ravel())
        return s.reshape(n, k, 3).mean(axis=1)


def ensemble_score(x, i: int, field: ScoreField) -> np.ndarray:
    """``E_i(x) = (1/K) sum_{j in kNN(x_i)} S_j(x)``."""
    nbrs = field.neighbors[i]
    rep = np.repeat(np.asarray(x, dtype=np.float64).reshape(1, 3), len(nbrs), axis=0)
    return field.local(rep, nbrs).mean(axis=0)


class NetworkField(ScoreField):
    def __init__(self, positions, params: np.ndarray, net_cfg: NetworkConfig, K: int):
        super().__init__(positions, K)
        self.params, self.net_cfg = params, net_cfg
        self.features = extract_features(self.positions, params, net_cfg)
        self._proj = score_first_layer(self.features, params, net_cfg)

    def local(self, x, anchors):
        rel = x - self.positions[anchors]
        return score_from_projection(rel, self._proj[anchors], self.params, self.net_cfg)


class GlobalField(ScoreField):
    """A position-only field (oracles); every anchor sees the same value."""

    def __init__(self, positions, fn, K: int = 1):
        super().__init__(positions, K)
        self.fn = fn

    def local(self, x, anchors):
        return self.fn(x)

    def __call__(self, x, rows=None):
        return self.fn(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class NetworkModel:
    params: np.ndarray
    net_cfg: NetworkConfig

    def field_for(self, patch_points: np.ndarray, to_patch: NormalizationTransform, K: int) -> ScoreField:
        return NetworkField(patch_points, self.params, self.net_cfg, K)

    @property
    def min_points(self) -> int:
        return self.net_cfg.graph_k + 1


@dataclass(frozen=True)
class EmpiricalOracleModel:
    """Stand-in for the network: the empirical convolved score of a clean cloud.

    ``support`` and ``sigma`` are given in the input cloud's own frame. The
    score is rescaled by sigma^2 so its magnitude tracks the distance to the
    support, like the trained network's target.
    """

    support: np.ndarray
    sigma: float

    def field_for(self, patch_points, to_patch: NormalizationTransform, K: int) -> ScoreField:
        sup = to_patch.apply(self.support)
        s = self.sigma / to_patch.scale
        # Support far outside the patch carries no softmax weight.
        reach = float(np.sqrt(sq_dists(patch_points, np.zeros(3)).max())) + 12.0 * s
        sup = sup[np.sqrt(sq_dists(sup, np.zeros(3))) <= reach]
        score = LocalEmpiricalScore(EmpiricalConvolvedModel(sup, s))
        return GlobalField(patch_points, lambda x: s * s * score(x), K=1)

    min_points = 1


def gradient_ascent(points, field: ScoreField, schedule: StepSchedule, rows: np.ndarray | None = None) -> np.ndarray:
    """``x^(t) = x^(t-1) + alpha_t E(x^(t-1))`` for all points in lockstep.

    With ``rows``, only those anchors are advanced and ``points`` holds
    their starting positions. Each trajectory depends on its own anchor
    alone, so the result rows are the same as for a full run.
    """
    x = np.array(points, dtype=np.float64)
    for t, alpha in enumerate(schedule.alphas(), start=1):
        step = field(x, rows)
        bad = ~np.all(np.isfinite(step), axis=1)
        if bad.any():
            i = int(np.nonzero(bad)[0][0])
            raise NumericalFailure(f"non-finite update for point {i} at step {t}", point=i, step=t)
        x = x + alpha * step
    return x


def direct_displacement(points, field: ScoreField, rows: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    step = field(x, rows)
    bad = ~np.all(np.isfinite(step), axis=1)
    if bad.any():
        i = int(np.nonzero(bad)[0][0])
        raise NumericalFailure(f"non-finite update for point {i}", point=i, step=1)
    return x + step


def _owners(pts: np.ndarray, patches) -> np.ndarray:
    best = np.full(len(pts), np.inf)
    owner = np.full(len(pts), -1, dtype=np.int64)
    for pid, patch in enumerate(patches):
        d2 = sq_dists(pts[patch.indices], pts[patch.seed])
        take = d2 < best[patch.indices]
        best[patch.indices[take]] = d2[take]
        owner[patch.indices[take]] = pid
    return owner


def denoise_displacement(cloud, model, cfg: DenoiseConfig) -> np.ndarray:
    """Per-point displacement that ``denoise_cloud`` adds to the input.

    Depends only on the cloud's shape relative to its centroid.
    """
    pts = as_cloud(cloud)
    if len(pts) < model.min_points:
        raise ValueError(f"cloud has {len(pts)} points; need at least {model.min_points}")
    unit, tf = normalize_unit_sphere(pts)
    patches = extract_patches(unit, cfg.patch_size, cfg.coverage)
    owner = _owners(unit, patches)
    disp = np.zeros_like(unit)
    for pid, patch in enumerate(patches):
        mine = np.nonzero(owner[patch.indices] == pid)[0]
        if mine.size == 0:
            continue
        local = patch.transform.apply(unit[patch.indices])
        # The field sees the patch frame; the model maps its own data into it.
        to_patch = NormalizationTransform(tf.center + tf.scale * patch.transform.center,
                                          tf.scale * patch.transform.scale)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                field = model.field_for(local, to_patch, cfg.K)
                if cfg.mode == "gradient_ascent":
                    moved = gradient_ascent(local[mine], field, cfg.schedule, mine)
                else:
                    moved = direct_displacement(local[mine], field, mine)
        except NumericalFailure as exc:
            point = None if exc.point is None else int(patch.indices[mine[exc.point]])
            raise NumericalFailure(f"patch {pid}: {exc}", point=point, step=exc.step, patch=pid) from exc
        except ValueError as exc:
            raise ValueError(f"patch {pid}: {exc}") from exc
        disp[patch.indices[mine]] = (moved - local[mine]) * patch.transform.scale
    return disp * tf.scale


def denoise_cloud(cloud, model, cfg: DenoiseConfig) -> np.ndarray:
    pts = as_cloud(cloud)
    return pts + denoise_displacement(pts, model, cfg)


def upsample_via_denoise(cloud, r: int, sigma: float, model, cfg: DenoiseConfig, seed: int) -> np.ndarray:
    """Stack ``r`` Gaussian-jittered copies of the cloud, then denoise them.

    ``sigma`` is relative to the cloud's bounding-sphere radius.
    """
    pts = as_cloud(cloud)
    if r < 1:
        raise ValueError("r must be >= 1")
    return denoise_cloud(jitter_copies(pts, r, sigma, seed), model, cfg)


def jitter_copies(cloud, r: int, sigma: float, seed: int) -> np.ndarray:
    pts = as_cloud(cloud)
    _, tf = normalize_unit_sphere(pts)
    noise = sample_noise(NoiseModel.gaussian(sigma), r * len(pts), seed) * tf.scale
    return np.tile(pts, (r, 1)) + noise
