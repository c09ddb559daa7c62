"""Score estimation network with a hand-written reverse pass.

The feature extractor is a stack of dynamic edge-convolution blocks. Each
block builds a kNN graph (self included) in its input space, applies one
shared linear map to ``[h_i, h_j - h_i]`` for every edge, and max-pools over
the neighbours followed by a ReLU. Block outputs are concatenated into the
per-point feature ``h_i``.

The score head is an MLP on ``[x - x_i, h_i]`` with ReLU hidden layers and
a linear 3-d output. The output layer is zero at initialization, so an
untrained network predicts a zero field.

Parameters live in one flat float64 vector. Layout, in order::

    block{b}.weight  (2*d_in, width_b)    row-major, b = 0..len(block_widths)-1
    block{b}.bias    (width_b,)
    score{l}.weight  (fan_in, fan_out)    l = 0..len(score_hidden)
    score{l}.bias    (fan_out,)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import atomic_write_bytes
from .noise import make_rng

CHECKPOINT_MAGIC = b"SDNZ1\n"


@dataclass(frozen=True)
class NetworkConfig:
    graph_k: int = 16
    block_widths: tuple[int, ...] = (32, 64, 128)
    score_hidden: tuple[int, ...] = (128, 64)

    def __post_init__(self):
        object.__setattr__(self, "block_widths", tuple(int(w) for w in self.block_widths))
        object.__setattr__(self, "score_hidden", tuple(int(w) for w in self.score_hidden))
        if self.graph_k < 1:
            raise ValueError("graph_k must be >= 1")
        if not self.block_widths or min(self.block_widths) < 1:
            raise ValueError("block_widths must be a non-empty list of positive widths")
        if self.score_hidden and min(self.score_hidden) < 1:
            raise ValueError("score_hidden widths must be positive")

    @property
    def feature_dim(self) -> int:
        return sum(self.block_widths)


def param_layout(cfg: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    layout = []
    d_in = 3
    for b, w in enumerate(cfg.block_widths):
        layout += [(f"block{b}.weight", (2 * d_in, w)), (f"block{b}.bias", (w,))]
        d_in = w
    dims = [3 + cfg.feature_dim, *cfg.score_hidden, 3]
    for l in range(len(dims) - 1):
        layout += [(f"score{l}.weight", (dims[l], dims[l + 1])), (f"score{l}.bias", (dims[l + 1],))]
    return layout


def param_count(cfg: NetworkConfig) -> int:
    return sum(math.prod(shape) for _, shape in param_layout(cfg))


def unflatten(cfg: NetworkConfig, flat: np.ndarray) -> dict[str, np.ndarray]:
    """Named views into ``flat`` (no copies)."""
    flat = np.asarray(flat)
    if flat.shape != (param_count(cfg),):
        raise ValueError(f"expected {param_count(cfg)} parameters, got {flat.shape}")
    out, off = {}, 0
    for name, shape in param_layout(cfg):
        n = math.prod(shape)
        out[name] = flat[off:off + n].reshape(shape)
        off += n
    return out


def flatten(cfg: NetworkConfig, named: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(named[name], dtype=np.float64).ravel() for name, _ in param_layout(cfg)])


def init_params(cfg: NetworkConfig, seed: int) -> np.ndarray:
    """He-uniform weights, zero biases, zero output layer.

    Values are rounded to float32 so a checkpoint round trip is lossless.
    """
    rng = make_rng(seed, 11)
    flat = np.zeros(param_count(cfg))
    p = unflatten(cfg, flat)
    last = f"score{len(cfg.score_hidden)}.weight"
    for name, shape in param_layout(cfg):
        if name.endswith(".weight") and name != last:
            bound = math.sqrt(6.0 / shape[0])
            p[name][...] = rng.uniform(-bound, bound, size=shape)
    return flat.astype(np.float32).astype(np.float64)


# -- feature extraction -----------------------------------------------------

def knn_graph(h: np.ndarray, k: int) -> np.ndarray:
    """k nearest rows of ``h`` for every row, self included.

    Ties go to the lower index; each row of the result is sorted by
    neighbour index (the max-pool tie-break relies on that order).
    """
    n = h.shape[0]
    sq = np.einsum("ij,ij->i", h, h)
    d = h @ h.T
    d *= -2.0
    d += sq[:, None]
    d += sq[None, :]
    np.fill_diagonal(d, -np.inf)
    kk = min(k + 1, n)
    cand = np.argpartition(d, kk - 1, axis=1)[:, :kk]
    vals = np.take_along_axis(d, cand, axis=1)
    order = np.lexsort((cand, vals), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    vals = np.take_along_axis(vals, order, axis=1)
    out = cand[:, :k]
    if kk > k:
        # A tie at the boundary may hide an equally near, lower index.
        for r in np.nonzero(vals[:, k] == vals[:, k - 1])[0]:
            out[r] = np.argsort(d[r], kind="stable")[:k]
    return np.sort(out, axis=1)


@dataclass
class _BlockCache:
    h_in: np.ndarray
    idx: np.ndarray
    argmax: np.ndarray
    active: np.ndarray


def _block_forward(h: np.ndarray, w: np.ndarray, b: np.ndarray, k: int):
    d = h.shape[1]
    idx = knn_graph(h, k)
    w_top, w_bot = w[:d], w[d:]
    # [h_i, h_j - h_i] @ W == h_i @ (W_top - W_bot) + h_j @ W_bot
    a = h @ (w_top - w_bot) + b
    nb = h @ w_bot
    # Running max over neighbours; strict '>' keeps the lowest-index winner.
    zmax = a + nb[idx[:, 0]]
    arg = np.zeros(zmax.shape, dtype=np.int64)
    for j in range(1, idx.shape[1]):
        zj = a + nb[idx[:, j]]
        win = zj > zmax
        zmax = np.where(win, zj, zmax)
        arg[win] = j
    active = zmax > 0
    return np.where(active, zmax, 0.0), _BlockCache(h, idx, arg, active)


def _block_backward(dout: np.ndarray, cache: _BlockCache, w: np.ndarray):
    h, idx = cache.h_in, cache.idx
    n, d = h.shape
    width = dout.shape[1]
    dz = np.where(cache.active, dout, 0.0)
    # Row of the winning neighbour for every (point, channel).
    src = idx[np.arange(n)[:, None], cache.argmax]
    flat = (src * width + np.arange(width)[None, :]).ravel()
    dnb = np.bincount(flat, weights=dz.ravel(), minlength=n * width).reshape(n, width)
    w_top, w_bot = w[:d], w[d:]
    g_diff = h.T @ dz
    g_bot = h.T @ dnb - g_diff
    dw = np.concatenate([g_diff, g_bot], axis=0)
    db = dz.sum(axis=0)
    dh = dz @ (w_top - w_bot).T + dnb @ w_bot.T
    return dw, db, dh


def extract_features(points: np.ndarray, params: np.ndarray, cfg: NetworkConfig, return_cache: bool = False):
    """Per-point features ``(N, feature_dim)`` for a normalized patch."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n <= cfg.graph_k:
        raise ValueError(f"patch has {n} points; need more than graph_k={cfg.graph_k}")
    p = unflatten(cfg, params)
    h = pts
    outs, caches = [], []
    for bidx in range(len(cfg.block_widths)):
        h, c = _block_forward(h, p[f"block{bidx}.weight"], p[f"block{bidx}.bias"], cfg.graph_k)
        outs.append(h)
        caches.append(c)
    feats = np.concatenate(outs, axis=1)
    return (feats, caches) if return_cache else feats


# -- score head -------------------------------------------------------------

def _head_layers(cfg: NetworkConfig, p: dict) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(p[f"score{l}.weight"], p[f"score{l}.bias"]) for l in range(len(cfg.score_hidden) + 1)]


def score_first_layer(features: np.ndarray, params: np.ndarray, cfg: NetworkConfig) -> np.ndarray:
    """Feature half of the first head layer plus bias, per anchor.

    Features are fixed during denoising, so this can be computed once and
    reused for every query.
    """
    w0, b0 = _head_layers(cfg, unflatten(cfg, params))[0]
    return features @ w0[3:] + b0


def score_from_projection(rel: np.ndarray, proj: np.ndarray, params: np.ndarray, cfg: NetworkConfig) -> np.ndarray:
    """Head output given ``x - x_i`` and the anchor's precomputed projection."""
    layers = _head_layers(cfg, unflatten(cfg, params))
    w0 = layers[0][0]
    a = rel @ w0[:3] + proj
    for w, b in layers[1:]:
        a = np.maximum(a, 0.0) @ w + b
    return a


def score_batch(x, anchors, features, positions, params, cfg: NetworkConfig) -> np.ndarray:
    """``S_i(x) = MLP([x - x_i, h_i])`` for paired rows of ``x`` and ``anchors``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1)
    rel = x - positions[anchors]
    proj = score_first_layer(features[anchors], params, cfg)
    return score_from_projection(rel, proj, params, cfg)


def score(x, i: int, features, positions, params, cfg: NetworkConfig) -> np.ndarray:
    return score_batch(np.asarray(x).reshape(1, 3), [i], features, positions, params, cfg)[0]


# -- reverse mode -----------------------------------------------------------

class ScoreTape:
    """Forward pass over one patch, recorded for reverse-mode replay.

    Build the tape, evaluate ``score`` any number of times, then call
    ``backward`` with the loss gradients of each recorded output (same order).
    Graph connectivity and max-pool winners are treated as constants.
    """

    def __init__(self, points: np.ndarray, params: np.ndarray, cfg: NetworkConfig):
        self.cfg = cfg
        self.params = params
        self.positions = np.asarray(points, dtype=np.float64)
        self.features, self._blocks = extract_features(self.positions, params, cfg, return_cache=True)
        self._calls = []

    def score(self, x: np.ndarray, anchors: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        anchors = np.asarray(anchors, dtype=np.int64).reshape(-1)
        layers = _head_layers(self.cfg, unflatten(self.cfg, self.params))
        u = np.concatenate([x - self.positions[anchors], self.features[anchors]], axis=1)
        acts = [u]
        a = u
        for l, (w, b) in enumerate(layers):
            a = a @ w + b
            if l < len(layers) - 1:
                a = np.maximum(a, 0.0)
            acts.append(a)
        self._calls.append((anchors, acts))
        return a

    def backward(self, douts) -> np.ndarray:
        cfg = self.cfg
        p = unflatten(cfg, self.params)
        grads = {name: np.zeros(shape) for name, shape in param_layout(cfg)}
        layers = _head_layers(cfg, p)
        nl = len(layers)
        dfeat = np.zeros_like(self.features)
        if len(douts) != len(self._calls):
            raise ValueError("one output gradient is needed per recorded score call")
        for (anchors, acts), dout in zip(self._calls, douts):
            g = np.asarray(dout, dtype=np.float64)
            for l in range(nl - 1, -1, -1):
                w, _ = layers[l]
                grads[f"score{l}.weight"] += acts[l].T @ g
                grads[f"score{l}.bias"] += g.sum(axis=0)
                g = g @ w.T
                if l > 0:
                    g = g * (acts[l] > 0)
            np.add.at(dfeat, anchors, g[:, 3:])
        offs = np.cumsum([0, *cfg.block_widths])
        carry = None
        for bidx in range(len(cfg.block_widths) - 1, -1, -1):
            d = dfeat[:, offs[bidx]:offs[bidx + 1]]
            if carry is not None:
                d = d + carry
            dw, db, carry = _block_backward(d, self._blocks[bidx], p[f"block{bidx}.weight"])
            grads[f"block{bidx}.weight"] += dw
            grads[f"block{bidx}.bias"] += db
        return flatten(cfg, grads)


def backward(tape: ScoreTape, douts) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. all parameters, in layout order."""
    return tape.backward(douts)


# -- checkpoints ------------------------------------------------------------

def _fmt_ints(v) -> str:
    return ",".join(str(int(x)) for x in v)


def save_checkpoint(path, params: np.ndarray, cfg: NetworkConfig, meta: dict | None = None) -> None:
    """``SDNZ1`` magic, ``key=value`` lines, blank line, float32 LE params."""
    header = {
        "graph_k": str(cfg.graph_k),
        "block_widths": _fmt_ints(cfg.block_widths),
        "score_hidden": _fmt_ints(cfg.score_hidden),
        "param_count": str(param_count(cfg)),
    }
    for k, v in (meta or {}).items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise ValueError(f"invalid checkpoint metadata entry {k!r}")
        header.setdefault(k, str(v))
    text = "".join(f"{k}={v}\n" for k, v in header.items()) + "\n"
    body = np.asarray(params, dtype="<f4").tobytes()
    atomic_write_bytes(path, CHECKPOINT_MAGIC + text.encode("utf-8") + body)


def load_checkpoint(path) -> tuple[np.ndarray, NetworkConfig, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an SDNZ1 checkpoint")
    end = data.find(b"\n\n", len(CHECKPOINT_MAGIC) - 1)
    if end < 0:
        raise ValueError(f"{path}: truncated checkpoint header")
    meta = {}
    for line in data[len(CHECKPOINT_MAGIC):end].decode("utf-8").splitlines():
        if line:
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}: malformed header line {line!r}")
            meta[key] = value
    try:
        cfg = NetworkConfig(
            graph_k=int(meta["graph_k"]),
            block_widths=tuple(int(x) for x in meta["block_widths"].split(",")),
            score_hidden=tuple(int(x) for x in meta["score_hidden"].split(",") if x),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing header key {exc}") from None
    body = data[end + 2:]
    n = param_count(cfg)
    if len(body) != 4 * n:
        raise ValueError(f"{path}: expected {n} float32 parameters, found {len(body) / 4:g}")
    params = np.frombuffer(body, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(params)):
        raise ValueError(f"{path}: non-finite parameters")
    return params, cfg, meta

