"""Command-line entry point: ``scoredenoise <command> [options]``.

Exit codes: 0 success, 2 input error, 3 training divergence, 4 numeric
failure during inference, 5 evaluation frame mismatch.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .denoise import (DenoiseConfig, NetworkModel, NumericalFailure, StepSchedule, denoise_cloud, ensemble_score,
                      upsample_via_denoise)
from .geometry import (SpatialIndex, atomic_write_text, extract_patches, format_rows, normalize_unit_sphere, read_xyz,
                       sq_dists, write_xyz)
from .mesh import MeshDistance, SamplingConfig, load_mesh, sample_surface, write_obj
from .metrics import evaluate
from .network import NetworkConfig, load_checkpoint, save_checkpoint
from .noise import format_noise, parse_noise, perturb
from .oracle import PlaneGaussianModel, plane_score
from .training import TrainConfig, TrainingDiverged, patches_from_clouds, train, write_loss_csv

log = logging.getLogger("scoredenoise")

EXIT_INPUT, EXIT_DIVERGED, EXIT_NUMERIC, EXIT_MISMATCH = 2, 3, 4, 5


class InputError(Exception):
    pass


class FrameMismatch(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


# Every key a config file may set, with its parser.
CONFIG_SCHEMA = {
    "seed": int,
    # data synthesis
    "count": int,
    "noise": str,
    "method": str,
    "oversample_factor": float,
    # network
    "graph_k": int,
    "block_widths": _int_list,
    "score_hidden": _int_list,
    # training
    "iterations": int,
    "lr": float,
    "sigma_min": float,
    "sigma_max": float,
    "neighborhood_samples": int,
    "neighborhood_scale": float,
    "anchors_per_patch": int,
    "loss": str,
    # denoising
    "K": int,
    "alpha1": float,
    "gamma": float,
    "steps": int,
    "patch_size": int,
    "coverage": float,
    "mode": str,
    # upsampling
    "ratio": int,
    "sigma": float,
}


def parse_config(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            raise InputError(f"{source}:{lineno}: sections are not supported (flat key = value only)")
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise InputError(f"{source}:{lineno}: expected key = value")
        if key not in CONFIG_SCHEMA:
            raise InputError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = CONFIG_SCHEMA[key](value)
        except ValueError as exc:
            raise InputError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return out


def _settings(args) -> dict:
    """Config file values overlaid with any explicitly given flags."""
    merged = {}
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read config: {exc}") from None
        merged.update(parse_config(text, str(args.config)))
    for key in CONFIG_SCHEMA:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


def _net_cfg(s: dict) -> NetworkConfig:
    d = NetworkConfig()
    return NetworkConfig(graph_k=s.get("graph_k", d.graph_k), block_widths=s.get("block_widths", d.block_widths),
                         score_hidden=s.get("score_hidden", d.score_hidden))


def _train_cfg(s: dict) -> TrainConfig:
    keys = ("iterations", "lr", "sigma_min", "sigma_max", "neighborhood_samples", "neighborhood_scale",
            "anchors_per_patch", "loss")
    return TrainConfig(**{k: s[k] for k in keys if k in s})


def _denoise_cfg(s: dict) -> DenoiseConfig:
    d = DenoiseConfig()
    sched = StepSchedule(alpha1=s.get("alpha1", d.schedule.alpha1), gamma=s.get("gamma", d.schedule.gamma),
                         steps=s.get("steps", d.schedule.steps))
    mode = {"ascent": "gradient_ascent", "direct": "direct_displacement"}.get(s.get("mode"), s.get("mode", d.mode))
    return DenoiseConfig(K=s.get("K", d.K), schedule=sched, patch_size=s.get("patch_size", d.patch_size),
                         coverage=s.get("coverage", d.coverage), mode=mode)


def _read_cloud(path) -> np.ndarray:
    try:
        return read_xyz(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None


def _load_model(path) -> tuple[NetworkModel, dict]:
    try:
        params, cfg, meta = load_checkpoint(path)
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from None
    return NetworkModel(params, cfg), meta


# -- commands ---------------------------------------------------------------

def cmd_make_data(args) -> int:
    s = _settings(args)
    mesh = load_mesh(args.mesh)
    count = s.get("count", 10000)
    seed = s.get("seed", 0)
    noise = parse_noise(s.get("noise", "gaussian:0.01"))
    cfg = SamplingConfig(count, oversample_factor=s.get("oversample_factor", 4.0), method=s.get("method", "poisson-disk"))
    clean = sample_surface(mesh, cfg, seed)
    clean_n, tf = normalize_unit_sphere(clean)
    noisy = perturb(clean_n, noise, seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = args.name or Path(args.mesh).stem
    write_xyz(out / f"{name}_clean.xyz", clean_n)
    write_xyz(out / f"{name}_noisy.xyz", noisy)
    write_obj(out / f"{name}_mesh.obj", mesh.transformed(tf))
    print(f"normalization {tf}")
    print(f"noise {format_noise(noise)}")
    return 0


def cmd_train(args) -> int:
    s = _settings(args)
    files = sorted(Path(args.data_dir).glob("*_clean.xyz"))
    if not files:
        raise InputError(f"no *_clean.xyz files in {args.data_dir}")
    net_cfg = _net_cfg(s)
    tcfg = _train_cfg(s)
    seed = s.get("seed", 0)
    patches = patches_from_clouds([_read_cloud(f) for f in files], s.get("patch_size", 1000), s.get("coverage", 3.0))
    log.info("training on %d patches from %d clouds", len(patches), len(files))
    params, history = train(patches, tcfg, net_cfg, seed)
    meta = {
        "loss": tcfg.loss,
        "iterations": tcfg.iterations,
        "seed": seed,
        "sigma_range": f"{tcfg.sigma_min:g},{tcfg.sigma_max:g}",
        "neighborhood_samples": tcfg.neighborhood_samples,
        "anchors_per_patch": tcfg.anchors_per_patch,
        "lr": f"{tcfg.lr:g}",
    }
    save_checkpoint(args.out, params, net_cfg, meta)
    write_loss_csv(args.loss_csv or f"{args.out}.loss.csv", history)
    return 0


def cmd_denoise(args) -> int:
    s = _settings(args)
    cfg = _denoise_cfg(s)
    model, _ = _load_model(args.checkpoint)
    cloud = _read_cloud(args.input)
    out = denoise_cloud(cloud, model, cfg)
    write_xyz(args.output, out)
    if args.error_dump:
        if not args.mesh:
            raise InputError("--error-dump needs --mesh")
        err = np.sqrt(MeshDistance(load_mesh(args.mesh)).query(out))
        atomic_write_text(args.error_dump, format_rows(np.column_stack([out, err])))
    return 0


def _check_frame(clean: np.ndarray, mesh=None, tol: float = 1e-3) -> None:
    c = clean.mean(axis=0)
    r = math.sqrt(float(sq_dists(clean, c).max()))
    if np.linalg.norm(c) > tol or abs(r - 1.0) > tol:
        raise FrameMismatch(f"clean cloud is not in the unit-sphere frame (centroid norm {np.linalg.norm(c):.3g}, "
                            f"radius {r:.6g})")
    if mesh is not None:
        probe = clean[:: max(1, len(clean) // 200)]
        gap = float(MeshDistance(mesh).query(probe).max())
        if gap > tol ** 2:
            raise FrameMismatch(f"clean cloud does not lie on the mesh (max squared gap {gap:.3g})")


def cmd_evaluate(args) -> int:
    denoised = _read_cloud(args.denoised)
    clean = _read_cloud(args.clean)
    mesh = load_mesh(args.mesh) if args.mesh else None
    _check_frame(clean, mesh)
    meta = {"shape": args.shape_id or Path(args.clean).stem, "noise": args.noise_label or "", "points": len(denoised)}
    report = evaluate(denoised, clean, mesh, **meta)
    text = report.to_csv() if args.format == "csv" else report.to_table()
    sys.stdout.write(text)
    if args.output:
        atomic_write_text(args.output, text)
    return 0


def cmd_upsample(args) -> int:
    s = _settings(args)
    cfg = _denoise_cfg(s)
    model, _ = _load_model(args.checkpoint)
    cloud = _read_cloud(args.input)
    out = upsample_via_denoise(cloud, s.get("ratio", 4), s.get("sigma", 0.05), model, cfg, s.get("seed", 0))
    write_xyz(args.output, out)
    return 0


def probe_grid(n: int, extent: float) -> np.ndarray:
    ax = np.linspace(-extent, extent, n)
    return np.array([[x, y, z] for z in ax for y in ax for x in ax], dtype=np.float64)


def network_field_samples(cloud: np.ndarray, model: NetworkModel, cfg: DenoiseConfig, probes: np.ndarray) -> np.ndarray:
    """Ensemble scores at probe points, in the cloud's unit-sphere frame.

    Each probe uses the patch with the nearest seed and, within it, the
    anchor nearest to the probe.
    """
    unit, _ = normalize_unit_sphere(cloud)
    patches = extract_patches(unit, cfg.patch_size, cfg.coverage)
    seeds = unit[[p.seed for p in patches]]
    which = np.array([int(np.lexsort((np.arange(len(seeds)), sq_dists(seeds, q)))[0]) for q in probes])
    out = np.zeros_like(probes)
    for pid in np.unique(which):
        patch = patches[pid]
        local = patch.transform.apply(unit[patch.indices])
        field = model.field_for(local, None, cfg.K)
        q_local = patch.transform.apply(probes[which == pid])
        anchors = SpatialIndex(local).nearest_batch(q_local)
        vals = np.array([ensemble_score(q, int(a), field) for q, a in zip(q_local, anchors)])
        out[which == pid] = vals * patch.transform.scale
    return out


def cmd_score_field(args) -> int:
    s = _settings(args)
    probes = probe_grid(args.grid_n, args.extent)
    if args.plane_oracle:
        vec = plane_score(PlaneGaussianModel(s.get("sigma", 0.02)), probes)
    else:
        if not (args.checkpoint and args.input):
            raise InputError("score-field needs --plane-oracle or both --checkpoint and --input")
        model, _ = _load_model(args.checkpoint)
        vec = network_field_samples(_read_cloud(args.input), model, _denoise_cfg(s), probes)
    atomic_write_text(args.output, format_rows(np.column_stack([probes, vec])))
    return 0


# -- parser -----------------------------------------------------------------

def _add_denoise_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["ascent", "direct"], help="gradient ascent (default) or one direct displacement")
    p.add_argument("--K", type=int, help="ensemble size (default 4)")
    p.add_argument("--alpha1", type=float, help="first step size, in (0, 1) (default 0.2)")
    p.add_argument("--gamma", type=float, help="step decay per iteration, in (0, 1] (default 0.95)")
    p.add_argument("--steps", type=int, help="number of ascent steps, >= 1 (default 30)")
    p.add_argument("--patch-size", dest="patch_size", type=int, help="points per patch (default 1000)")
    p.add_argument("--coverage", type=float, help="patch coverage ratio (default 3.0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scoredenoise", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="sample a mesh into clean/noisy XYZ files")
    p.add_argument("--mesh", required=True, help="input OBJ mesh")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--name", help="output file prefix (default: mesh file stem)")
    p.add_argument("--count", type=int, help="points to sample (default 10000)")
    p.add_argument("--noise", help="noise model, e.g. gaussian:0.02 (default gaussian:0.01)")
    p.add_argument("--method", choices=["poisson-disk", "uniform-area"], help="surface sampler (default poisson-disk)")
    p.add_argument("--oversample-factor", dest="oversample_factor", type=float, help="poisson-disk pool factor (default 4)")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train the score network on *_clean.xyz files")
    p.add_argument("--data-dir", dest="data_dir", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv", dest="loss_csv", help="loss history CSV (default: <out>.loss.csv)")
    p.add_argument("--loss", choices=["neighborhood", "point-only"], help="training objective (default neighborhood)")
    p.add_argument("--iterations", type=int, help="optimizer steps (default 2000)")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-3)")
    p.add_argument("--graph-k", dest="graph_k", type=int, help="feature graph neighbours (default 16)")
    p.add_argument("--block-widths", dest="block_widths", type=_int_list, help="comma list (default 32,64,128)")
    p.add_argument("--score-hidden", dest="score_hidden", type=_int_list, help="comma list (default 128,64)")
    p.add_argument("--patch-size", dest="patch_size", type=int, help="points per patch (default 1000)")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise an XYZ cloud with a checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--error-dump", dest="error_dump", help="write 'x y z err' with err = distance to --mesh")
    p.add_argument("--mesh", help="reference mesh for --error-dump")
    _add_denoise_flags(p)
    p.add_argument("--config")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("evaluate", help="CD / P2M (x10^4) of a denoised cloud")
    p.add_argument("--denoised", required=True)
    p.add_argument("--clean", required=True, help="clean cloud in the unit-sphere frame")
    p.add_argument("--mesh", help="clean mesh in the same frame (enables P2M)")
    p.add_argument("--format", choices=["csv", "table"], default="csv")
    p.add_argument("--shape-id", dest="shape_id")
    p.add_argument("--noise-label", dest="noise_label")
    p.add_argument("--output", help="also write the report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("upsample", help="upsample by jittering r copies and denoising")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--ratio", type=int, help="copies r (default 4)")
    p.add_argument("--sigma", type=float, help="jitter std, fraction of bounding radius (default 0.05)")
    p.add_argument("--seed", type=int)
    _add_denoise_flags(p)
    p.add_argument("--config")
    p.set_defaults(func=cmd_upsample)

    p = sub.add_parser("score-field", help="dump 'x y z sx sy sz' samples of a score field")
    p.add_argument("--output", required=True)
    p.add_argument("--plane-oracle", dest="plane_oracle", action="store_true", help="use the exact z=0 plane score")
    p.add_argument("--sigma", type=float, help="plane oracle noise std (default 0.02)")
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="cloud whose learned field is sampled")
    p.add_argument("--grid-n", dest="grid_n", type=int, default=9, help="probes per axis (default 9)")
    p.add_argument("--extent", type=float, default=1.0, help="grid half-width (default 1.0)")
    p.add_argument("--K", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_score_field)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NumericalFailure as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FrameMismatch as exc:
        print(f"error: frame mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (InputError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
