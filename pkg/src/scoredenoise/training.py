"""Score-matching training: nearest-clean-point targets and the Adam loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import SpatialIndex, as_cloud, atomic_write_text, extract_patches, normalize_unit_sphere
from .network import NetworkConfig, ScoreTape, init_params
from .noise import NoiseModel, make_rng, sample_noise

log = logging.getLogger(__name__)

LOSS_VARIANTS = ("neighborhood", "point-only")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    sigma_min: float = 0.005
    sigma_max: float = 0.02
    neighborhood_samples: int = 8
    # Neighbourhood std as a multiple of the corruption sigma of the pair.
    neighborhood_scale: float = 1.0
    anchors_per_patch: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 2000
    loss: str = "neighborhood"

    def __post_init__(self):
        if not 0 < self.sigma_min <= self.sigma_max <= 0.1:
            raise ValueError("need 0 < sigma_min <= sigma_max <= 0.1")
        if self.neighborhood_samples < 1:
            raise ValueError("neighborhood_samples must be >= 1")
        if self.anchors_per_patch < 1:
            raise ValueError("anchors_per_patch must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.loss not in LOSS_VARIANTS:
            raise ValueError(f"loss must be one of {LOSS_VARIANTS}")


@dataclass
class TrainingPair:
    """Clean and noisy versions of one patch, in the noisy patch's frame."""

    clean: np.ndarray
    noisy: np.ndarray
    sigma: float
    clean_index: SpatialIndex = field(repr=False, default=None)

    def __post_init__(self):
        if self.clean.shape != self.noisy.shape:
            raise ValueError("clean and noisy patches must have the same shape")
        if self.clean_index is None:
            self.clean_index = SpatialIndex(self.clean)


def make_pair(clean_patch: np.ndarray, sigma: float, seed: int) -> TrainingPair:
    """Corrupt a clean patch (unit-sphere cloud frame) and re-frame both copies.

    The patch frame is taken from the noisy points, exactly as at inference.
    """
    clean = as_cloud(clean_patch)
    noisy = clean + sample_noise(NoiseModel.gaussian(sigma), clean.shape[0], seed)
    noisy_n, tf = normalize_unit_sphere(noisy)
    return TrainingPair(clean=tf.apply(clean), noisy=noisy_n, sigma=sigma / tf.scale)


def ground_truth_score(x, clean_index: SpatialIndex) -> np.ndarray:
    """``NN(x, Y) - x`` for one point or a batch of points."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return clean_index.points[clean_index.nearest(x)] - x
    return clean_index.points[clean_index.nearest_batch(x)] - x


def sample_neighborhood(center, std: float, m: int, seed: int) -> np.ndarray:
    """``m`` isotropic Gaussian draws around ``center``."""
    if std < 0 or m < 1:
        raise ValueError("need std >= 0 and m >= 1")
    c = np.asarray(center, dtype=np.float64).reshape(3)
    return c + make_rng(seed, 23).standard_normal((m, 3)) * std


def score_matching_loss(targets: np.ndarray, preds: np.ndarray, groups: np.ndarray) -> float:
    """Mean over anchors of each anchor's mean squared error.

    ``groups[s]`` is the anchor slot of sample ``s``.
    """
    err = np.sum((np.asarray(targets) - np.asarray(preds)) ** 2, axis=1)
    groups = np.asarray(groups)
    n_groups = int(groups.max()) + 1
    counts = np.bincount(groups, minlength=n_groups)
    per = np.bincount(groups, weights=err, minlength=n_groups)
    used = counts > 0
    return float(np.mean(per[used] / counts[used]))


def _sample_queries(pair: TrainingPair, cfg: TrainConfig, seed: int):
    n = pair.noisy.shape[0]
    rng = make_rng(seed, 31)
    anchors = np.sort(rng.choice(n, size=min(cfg.anchors_per_patch, n), replace=False))
    if cfg.loss == "point-only":
        m, std = 1, 0.0
    else:
        m, std = cfg.neighborhood_samples, cfg.neighborhood_scale * pair.sigma
    noise = rng.standard_normal((anchors.size, m, 3)) * std
    x = (pair.noisy[anchors][:, None, :] + noise).reshape(-1, 3)
    slot = np.repeat(np.arange(anchors.size), m)
    return anchors, slot, x


def patch_loss_and_grad(pair: TrainingPair, params: np.ndarray, net_cfg: NetworkConfig, cfg: TrainConfig, seed: int,
                        need_grad: bool = True):
    anchors, slot, x = _sample_queries(pair, cfg, seed)
    target = ground_truth_score(x, pair.clean_index)
    tape = ScoreTape(pair.noisy, params, net_cfg)
    pred = tape.score(x, anchors[slot])
    loss = score_matching_loss(target, pred, slot)
    if not need_grad:
        return loss, None
    counts = np.bincount(slot)
    # d/dpred of mean_a mean_{s in a} |t - p|^2
    dpred = -2.0 * (target - pred) / (counts[slot] * counts.size)[:, None]
    return loss, tape.backward([dpred])


def patch_loss(pair: TrainingPair, params: np.ndarray, net_cfg: NetworkConfig, cfg: TrainConfig, seed: int) -> float:
    return patch_loss_and_grad(pair, params, net_cfg, cfg, seed, need_grad=False)[0]


class Adam:
    def __init__(self, size: int, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def patches_from_clouds(clouds, patch_size: int = 1000, coverage_ratio: float = 3.0) -> list[np.ndarray]:
    """Unit-sphere normalize each clean cloud and cut it into point patches."""
    out = []
    for cloud in clouds:
        pts, _ = normalize_unit_sphere(cloud)
        out += [pts[p.indices] for p in extract_patches(pts, patch_size, coverage_ratio)]
    return out


def train(dataset, cfg: TrainConfig, net_cfg: NetworkConfig, seed: int, params: np.ndarray | None = None,
          log_every: int = 100):
    """Run ``cfg.iterations`` Adam steps, one patch per step.

    Returns ``(params, history)``; ``history[s]`` is the loss at step ``s+1``.
    Parameters are returned rounded to float32 so they survive a checkpoint
    round trip unchanged.
    """
    dataset = [as_cloud(p) for p in dataset]
    if not dataset:
        raise ValueError("training needs at least one patch")
    params = init_params(net_cfg, seed) if params is None else np.array(params, dtype=np.float64)
    opt = Adam(params.size, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    history = []
    for step in range(1, cfg.iterations + 1):
        rng = make_rng(seed, 41, step)
        patch = dataset[int(rng.integers(len(dataset)))]
        sigma = float(rng.uniform(cfg.sigma_min, cfg.sigma_max))
        pair = make_pair(patch, sigma, int(rng.integers(2**63)))
        # Overflow is caught by the finiteness check below.
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = patch_loss_and_grad(pair, params, net_cfg, cfg, int(rng.integers(2**63)))
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDiverged(step, loss)
        params = opt.step(params, grad)
        history.append(loss)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.6g", step, float(np.mean(history[-log_every:])))
    return params.astype(np.float32).astype(np.float64), history


def write_loss_csv(path, history) -> None:
    atomic_write_text(path, "step,loss\n" + "".join(f"{i},{v:.9g}\n" for i, v in enumerate(history, start=1)))
