"""Per-frame metrics, the run report and the output directory layout of a run."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .anchors import decode, map_to_bytes
from .dataio import Sequence, write_depth, write_gray, write_rgb, write_trajectory
from .evaluation import ate_rmse
from .losses import EmptyEvaluationRegion, masked_psnr, psnr, ssim
from .pipeline import RunResult, render_map, temporal_position
from .plotting import plot_masks, plot_metrics, plot_trajectory
from .render import render_gaussians
from .uncertainty import iou

CSV_FIELDS = ("index", "timestamp", "keyframe", "psnr", "masked_psnr", "ssim", "iou", "mask_fraction",
              "snapshot_version", "track_time")


def _masked(render, ref, mask) -> float:
    try:
        return masked_psnr(render, ref, mask)
    except EmptyEvaluationRegion:
        return math.nan


def frame_metrics(seq: Sequence, result: RunResult) -> list[dict]:
    """Render the final map at every estimated pose and score it.

    Masked PSNR compares against the ground-truth static render outside the
    ground-truth dynamic mask when the sequence carries them, and otherwise
    against the observed frame outside the estimated mask.
    """
    state = result.state
    n = len(seq)
    rows = []
    for fr, frame in zip(result.frames, seq.frames):
        out = render_map(state, fr.pose, temporal_position(fr.index, n))
        color = np.clip(out.color, 0.0, 1.0)
        mask = fr.eval_mask
        if frame.gt_dynamic is not None and frame.gt_static_rgb is not None:
            mp = _masked(color, frame.gt_static_rgb, frame.gt_dynamic)
        elif frame.gt_dynamic is not None:
            mp = _masked(color, frame.rgb, frame.gt_dynamic)
        else:
            mp = _masked(color, frame.rgb, mask)
        rows.append({
            "index": fr.index,
            "timestamp": fr.timestamp,
            "keyframe": fr.keyframe,
            "psnr": psnr(color, frame.rgb),
            "masked_psnr": mp,
            "ssim": ssim(color, frame.rgb),
            "iou": iou(mask, frame.gt_dynamic) if frame.gt_dynamic is not None else math.nan,
            "mask_fraction": float(mask.mean()),
            "snapshot_version": fr.snapshot_version,
            "track_time": fr.track_time,
        })
    return rows


def _finite_mean(vals) -> float:
    v = [x for x in vals if math.isfinite(x)]
    return float(np.mean(v)) if v else math.nan


def mask_iou_summary(seq: Sequence, result: RunResult, min_coverage: float = 0.02) -> tuple[float, float, int]:
    """(mean, min, count) of mask IoU over frames whose GT dynamic mask covers at least ``min_coverage``."""
    vals = [iou(fr.eval_mask, f.gt_dynamic) for fr, f in zip(result.frames, seq.frames)
            if f.gt_dynamic is not None and f.gt_dynamic.mean() >= min_coverage]
    if not vals:
        return math.nan, math.nan, 0
    return float(np.mean(vals)), float(np.min(vals)), len(vals)


def run_report(seq: Sequence, result: RunResult, rows: list[dict] | None = None) -> dict:
    rows = frame_metrics(seq, result) if rows is None else rows
    state = result.state
    gt = [(fr.pose, f.gt_pose) for fr, f in zip(result.frames, seq.frames) if f.gt_pose is not None]
    ate = ate_rmse([a for a, _ in gt], [b for _, b in gt]) if len(gt) >= 3 else math.nan
    iou_mean, iou_min, iou_n = mask_iou_summary(seq, result)
    snap = result.snapshot
    return {
        "sequence": seq.name,
        "frames": len(result.frames),
        "keyframes": sum(fr.keyframe for fr in result.frames),
        "mode": state.cfg.mode,
        "ate_cm": ate,
        "mean_psnr": _finite_mean(r["psnr"] for r in rows),
        "mean_masked_psnr": _finite_mean(r["masked_psnr"] for r in rows),
        "mean_ssim": _finite_mean(r["ssim"] for r in rows),
        "mask_iou_mean": iou_mean,
        "mask_iou_min": iou_min,
        "mask_iou_frames": iou_n,
        "anchors": len(state.octree),
        "anchors_removed": state.removed,
        "gaussians": len(snap) if snap is not None else 0,
        "gaussian_history": [h["gaussians"] for h in state.history if "gaussians" in h],
        "flagged_keyframes": list(state.flagged),
        "map_bytes": len(map_to_bytes(state.octree, state.decoders, [state.f_m, state.f_u])),
        "timings_s": {k: round(v, 3) for k, v in result.timings.items()},
        "error": result.error,
    }


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_json_safe(v) for v in x]
    return x


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in CSV_FIELDS})


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_json_safe(report), fh, indent=2)
        fh.write("\n")


def save_run(out_dir, seq: Sequence, result: RunResult, plots: bool = True) -> dict:
    """Write trajectory, map, metrics CSV, report and figures; returns the report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = result.state
    write_trajectory(out / "trajectory.txt", result.stamps, result.poses)
    with open(out / "map.upmap", "wb") as fh:
        fh.write(map_to_bytes(state.octree, state.decoders, [state.f_m, state.f_u]))
    rows = frame_metrics(seq, result)
    write_metrics_csv(out / "metrics.csv", rows)
    report = run_report(seq, result, rows)
    write_report(out / "report.json", report)
    masks = out / "masks"
    masks.mkdir(exist_ok=True)
    for fr in result.frames:
        write_gray(masks / f"{fr.timestamp:.6f}.png", fr.eval_mask)
    if plots:
        est = np.array([p.translation for p in result.poses])
        gt = [f.gt_pose.translation for f in seq.frames if f.gt_pose is not None]
        plot_trajectory(out / "trajectory.png", est, np.array(gt) if gt else None)
        plot_metrics(out / "metrics.png", rows)
        picks = sorted({0, len(seq) // 2, len(seq) - 1})
        plot_mask_panels = [(f"frame {i}", seq.frames[i].rgb, result.frames[i].eval_mask, seq.frames[i].gt_dynamic)
                            for i in picks]
        plot_masks(out / "masks.png", plot_mask_panels)
    return report


def render_views(octree, decoders, cam, stamps, poses, out_dir, p_threshold: float, settings) -> int:
    """Render a stored map at each pose into ``out_dir/rgb`` and ``out_dir/depth``."""
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    n = len(poses)
    for i, (t, pose) in enumerate(zip(stamps, poses)):
        gs = decode(octree, decoders, pose, cam, temporal_position(i, n), p_threshold)
        r = render_gaussians(gs, pose, cam, settings)
        depth = np.divide(r.depth, r.trans, out=np.zeros_like(r.depth), where=r.trans > 1e-6)
        write_rgb(out / "rgb" / f"{t:.6f}.png", np.clip(r.color, 0, 1))
        write_depth(out / "depth" / f"{t:.6f}.png", depth, cam.depth_scale)
    return n
