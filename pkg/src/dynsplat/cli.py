"""Command line: synth, run, render, eval, selftest.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .anchors import load_map
from .dataio import TUM_FR1, DataError, associate, export_tum, load_tum, read_calibration, read_rgb, read_trajectory
from .evaluation import RankDeficient, ate_from_stamped
from .geometry import Camera
from .losses import EmptyEvaluationRegion, masked_psnr, psnr
from .pipeline import PipelineConfig, run_parallel
from .synthetic import SynthConfig, synth_generate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
SYNTH_LEAF_SIZE = 0.25  # the bundled synthetic room is a few meters across

log = logging.getLogger("dynsplat")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --config files -----------------------------------------------------------------------

_ALIASES = {"iters": "n_iters", "leaf-size": "leaf_size"}


def _coerce(text: str, typ):
    text = text.strip()
    if typ in (bool, "bool"):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {text!r}")
    try:
        if typ in (int, "int"):
            return int(text)
        if typ in (float, "float"):
            return float(text)
    except ValueError:
        raise UsageError(f"bad value {text!r}") from None
    return text


def read_overrides(path) -> dict:
    """``key=value`` lines keyed by PipelineConfig field or flag name; ``#`` starts a comment."""
    types = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = _ALIASES.get(key, key).replace("-", "_")
            if key not in types:
                raise UsageError(f"{path}:{n}: unknown setting {key!r}")
            out[key] = _coerce(val, types[key])
    return out


# subcommands ------------------------------------------------------------------------

def _load_sequence(args):
    if args.format == "synth" and not args.dataset:
        return synth_generate(SynthConfig(seed=args.seed))
    if not args.dataset:
        raise UsageError("--dataset is required for --format tum")
    return load_tum(args.dataset, args.features, args.masks)


def _pipeline_config(args) -> PipelineConfig:
    leaf = args.leaf_size
    if leaf is None:
        leaf = SYNTH_LEAF_SIZE if args.format == "synth" else PipelineConfig.leaf_size
    kw = dict(mode=args.mode, deterministic=args.deterministic, seed=args.seed, leaf_size=leaf)
    if args.iters is not None:
        kw["n_iters"] = args.iters
    if args.config:
        kw.update(read_overrides(args.config))
    try:
        return PipelineConfig(**kw)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def cmd_run(args) -> int:
    from .report import save_run

    cfg = _pipeline_config(args)
    seq = _load_sequence(args)
    log.info("sequence %s: %d frames (%d dropped)", seq.name, len(seq), seq.dropped)
    result = run_parallel(seq, cfg)
    report = save_run(args.out, seq, result, plots=not args.no_plots)
    for key in ("frames", "keyframes", "ate_cm", "mean_psnr", "mean_masked_psnr", "mask_iou_mean", "anchors",
                "gaussians"):
        v = report[key]
        print(f"{key}: {v:.4f}" if isinstance(v, float) else f"{key}: {v}")
    if result.error:
        print(f"error: {result.error}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = SynthConfig(seed=args.seed, n_frames=args.frames)
    if args.static:
        cfg = dataclasses.replace(cfg, dynamic=None)
    seq = synth_generate(cfg)
    export_tum(seq, args.out)
    print(f"wrote {len(seq)} frames to {args.out}")
    return EXIT_OK


def _camera_for(dataset) -> Camera:
    if dataset and (Path(dataset) / "calibration.txt").is_file():
        return read_calibration(Path(dataset) / "calibration.txt")
    return Camera(**TUM_FR1)


def cmd_render(args) -> int:
    from .report import render_views

    octree, decoders, _ = load_map(args.map)
    stamps, poses = read_trajectory(args.est)
    if not poses:
        raise DataError(f"{args.est}: no poses")
    cfg = PipelineConfig()
    n = render_views(octree, decoders, _camera_for(args.dataset), stamps, poses, args.out, cfg.prune_threshold,
                     cfg.render_settings)
    print(f"rendered {n} views to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    est_t, est_p = read_trajectory(args.est)
    gt_t, gt_p = read_trajectory(args.gt)
    try:
        ate = ate_from_stamped(est_t, est_p, gt_t, gt_p)
    except (RankDeficient, ValueError) as e:
        raise DataError(f"cannot evaluate trajectory: {e}") from None
    print(f"ATE {ate:.3f} cm")
    if args.renders:
        if not args.dataset:
            raise UsageError("--renders needs --dataset")
        seq = load_tum(args.dataset)
        rdir = Path(args.renders) / "rgb"
        files = sorted(rdir.glob("*.png"))
        stamps = [float(f.stem) for f in files]
        pairs = associate(stamps, [f.timestamp for f in seq.frames])
        ps, mps = [], []
        for i, j in pairs:
            img = read_rgb(files[i])
            frame = seq.frames[j]
            ref = frame.gt_static_rgb if frame.gt_static_rgb is not None else frame.rgb
            ps.append(psnr(img, frame.rgb))
            if frame.gt_dynamic is not None:
                try:
                    mps.append(masked_psnr(img, ref, frame.gt_dynamic))
                except EmptyEvaluationRegion:
                    pass
        if not ps:
            raise DataError("no rendered views match the dataset timestamps")
        print(f"PSNR {np.mean(ps):.3f} dB over {len(ps)} views")
        if mps:
            print(f"masked PSNR {np.mean([m for m in mps if math.isfinite(m)] or [math.inf]):.3f} dB")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    checks = run_all(quick=args.quick)
    for c in checks:
        print(c.line())
    return EXIT_OK if all(c.ok for c in checks) else EXIT_RUNTIME


# entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dynsplat", description="Dynamic-scene RGB-D mapping with anchor-based Gaussian splatting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write the synthetic dataset in TUM layout")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=SynthConfig.n_frames)
    s.add_argument("--static", action="store_true", help="omit the moving box")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("run", help="track and map a sequence")
    r.add_argument("--dataset")
    r.add_argument("--format", choices=("tum", "synth"), default="tum")
    r.add_argument("--features", help="directory of UPFT feature files (default DATASET/features)")
    r.add_argument("--masks", help="directory of instance-mask PNGs (default DATASET/instances)")
    r.add_argument("--out", required=True)
    r.add_argument("--mode", choices=("gt", "photometric"), default="gt")
    r.add_argument("--deterministic", action="store_true", help="single thread, bit-reproducible")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--iters", type=int, help="mapping iterations per keyframe")
    r.add_argument("--leaf-size", type=float, help="anchor voxel size in meters")
    r.add_argument("--config", help="key=value file overriding flags")
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=cmd_run)

    d = sub.add_parser("render", help="render a saved map along a trajectory")
    d.add_argument("--map", required=True)
    d.add_argument("--est", required=True, help="trajectory file with the poses to render")
    d.add_argument("--dataset", help="dataset whose calibration.txt gives the camera")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="ATE and image metrics from files")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--dataset")
    e.add_argument("--renders", help="output directory of the render command")
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("selftest", help="oracle and gradient checks")
    t.add_argument("--quick", action="store_true")
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"dynsplat: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError) as e:
        print(f"dynsplat: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 - mapped to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"dynsplat: failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
