"""Frames, sequences and the on-disk formats: TUM RGB-D layout, UPFT feature files, mask PNGs."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera, Pose

ASSOC_WINDOW = 0.02
TUM_FR1 = dict(fx=517.3, fy=516.5, cx=318.6, cy=255.3, width=640, height=480, depth_scale=5000.0)


class DataError(RuntimeError):
    """Dataset missing, malformed or unusable."""


@dataclass
class Frame:
    index: int
    timestamp: float
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    features: np.ndarray | None = None  # (h, w, N_h)
    instances: list[np.ndarray] | None = None
    gt_pose: Pose | None = None
    gt_dynamic: np.ndarray | None = None
    gt_static_rgb: np.ndarray | None = None


@dataclass
class Sequence:
    camera: Camera
    frames: list[Frame]
    name: str = ""
    dropped: int = 0

    def __post_init__(self):
        if not self.frames:
            raise DataError("empty sequence")
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DataError("timestamps are not strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)


# feature files --------------------------------------------------------------------

def write_features(path, feat: np.ndarray) -> None:
    """UPFT: magic, little-endian u32 H, W, C, then f32 data channel-last."""
    feat = np.asarray(feat)
    H, W, C = feat.shape
    with open(path, "wb") as fh:
        fh.write(b"UPFT")
        fh.write(struct.pack("<III", H, W, C))
        fh.write(np.ascontiguousarray(feat, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != b"UPFT":
        raise DataError(f"{path}: not a UPFT feature file")
    H, W, C = struct.unpack_from("<III", data, 4)
    if len(data) != 16 + 4 * H * W * C:
        raise DataError(f"{path}: truncated feature file")
    return np.frombuffer(data, "<f4", H * W * C, 16).astype(np.float64).reshape(H, W, C)


# images ---------------------------------------------------------------------------

def write_rgb(path, rgb: np.ndarray) -> None:
    Image.fromarray(to_uint8(rgb), mode="RGB").save(path)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def read_rgb(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_depth(path, depth: np.ndarray, depth_scale: float) -> None:
    raw = np.clip(np.rint(np.asarray(depth) * depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def read_depth(path, depth_scale: float) -> np.ndarray:
    raw = np.asarray(Image.open(path))
    return raw.astype(np.float64) / depth_scale


def write_gray(path, img: np.ndarray) -> None:
    """8-bit grayscale; floats are taken as [0, 1], bools as 0/255."""
    a = np.asarray(img)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    elif a.dtype != np.uint8:
        a = to_uint8(a)
    Image.fromarray(a, mode="L").save(path)


def read_gray(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"))


def instances_to_png(path, instances: list[np.ndarray], shape) -> None:
    label = np.zeros(shape, dtype=np.uint8)
    for i, inst in enumerate(instances):
        label[np.asarray(inst, bool)] = i + 1
    Image.fromarray(label, mode="L").save(path)


def read_instances(path) -> list[np.ndarray]:
    """One boolean mask per distinct nonzero gray level, in ascending level order."""
    label = read_gray(path)
    return [label == lv for lv in np.unique(label) if lv != 0]


# TUM layout -------------------------------------------------------------------------

def _read_list(path) -> list[tuple[float, list[str]]]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            out.append((float(parts[0]), parts[1:]))
    return out


def associate(first: list[float], second: list[float], max_difference: float = ASSOC_WINDOW) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp pairing within ``max_difference`` (index pairs, sorted)."""
    cands = sorted(
        (abs(a - b), i, j)
        for i, a in enumerate(first)
        for j, b in enumerate(second)
        if abs(a - b) < max_difference
    )
    used_i, used_j, pairs = set(), set(), []
    for _, i, j in cands:
        if i not in used_i and j not in used_j:
            used_i.add(i)
            used_j.add(j)
            pairs.append((i, j))
    return sorted(pairs)


def read_calibration(path) -> Camera:
    vals = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.split("=", 1)
                vals[k.strip()] = float(v)
    return Camera(vals["fx"], vals["fy"], vals["cx"], vals["cy"], int(vals["width"]), int(vals["height"]),
                  vals.get("depth_scale", 5000.0))


def write_calibration(path, cam: Camera) -> None:
    with open(path, "w") as fh:
        for k in ("fx", "fy", "cx", "cy", "width", "height", "depth_scale"):
            v = getattr(cam, k)
            fh.write(f"{k}={v!r}\n")


def read_trajectory(path) -> tuple[np.ndarray, list[Pose]]:
    stamps, poses = [], []
    for t, vals in _read_list(path):
        x = [float(v) for v in vals[:7]]
        stamps.append(t)
        poses.append(Pose(np.array(x[3:7]) / np.linalg.norm(x[3:7]), np.array(x[:3])))
    return np.array(stamps), poses


def format_pose_line(t: float, pose: Pose) -> str:
    tx, ty, tz = pose.translation
    qx, qy, qz, qw = pose.rotation
    return f"{t:.6f} {tx:.9f} {ty:.9f} {tz:.9f} {qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}"


def write_trajectory(path, stamps, poses) -> None:
    with open(path, "w") as fh:
        for t, p in zip(stamps, poses):
            fh.write(format_pose_line(t, p) + "\n")


def load_tum(directory, features_dir=None, masks_dir=None) -> Sequence:
    """Read a TUM RGB-D style directory.

    RGB and depth are paired by nearest timestamp within 0.02 s; unpaired RGB
    frames are dropped and counted in ``Sequence.dropped``.  Optional extras
    are looked up by the RGB file stem: ``features/<stem>.upft``,
    ``instances/<stem>.png``, ``dynamic/<stem>.png`` and ``static/<stem>.png``.
    Camera intrinsics come from ``calibration.txt`` when present, else the
    freiburg1 defaults.
    """
    d = Path(directory)
    for name in ("rgb.txt", "depth.txt"):
        if not (d / name).is_file():
            raise DataError(f"missing {d / name}")
    cam = read_calibration(d / "calibration.txt") if (d / "calibration.txt").is_file() else Camera(**TUM_FR1)
    rgb_list = _read_list(d / "rgb.txt")
    depth_list = _read_list(d / "depth.txt")
    pairs = associate([t for t, _ in rgb_list], [t for t, _ in depth_list])
    if not pairs:
        raise DataError("no rgb/depth associations")
    gt = None
    if (d / "groundtruth.txt").is_file():
        gt_stamps, gt_poses = read_trajectory(d / "groundtruth.txt")
        gt = (list(gt_stamps), gt_poses)
    feat_dir = Path(features_dir) if features_dir else d / "features"
    inst_dir = Path(masks_dir) if masks_dir else d / "instances"
    frames = []
    for n, (i, j) in enumerate(pairs):
        t, (rgb_file,) = rgb_list[i][0], rgb_list[i][1][:1]
        depth_file = depth_list[j][1][0]
        stem = Path(rgb_file).stem
        frame = Frame(n, t, read_rgb(d / rgb_file), read_depth(d / depth_file, cam.depth_scale))
        if frame.rgb.shape[:2] != cam.shape or frame.depth.shape != cam.shape:
            raise DataError(f"{rgb_file}: image size does not match calibration")
        if (feat_dir / f"{stem}.upft").is_file():
            frame.features = read_features(feat_dir / f"{stem}.upft")
        if (inst_dir / f"{stem}.png").is_file():
            frame.instances = read_instances(inst_dir / f"{stem}.png")
        if (d / "dynamic" / f"{stem}.png").is_file():
            frame.gt_dynamic = read_gray(d / "dynamic" / f"{stem}.png") > 0
        if (d / "static" / f"{stem}.png").is_file():
            frame.gt_static_rgb = read_rgb(d / "static" / f"{stem}.png")
        if gt is not None:
            match = associate([t], gt[0])
            if match:
                frame.gt_pose = gt[1][match[0][1]]
        frames.append(frame)
    return Sequence(cam, frames, d.name, len(rgb_list) - len(pairs))


def export_tum(seq: Sequence, directory) -> None:
    """Write a sequence in the layout :func:`load_tum` reads."""
    d = Path(directory)
    for sub in ("rgb", "depth", "features", "instances", "dynamic", "static"):
        os.makedirs(d / sub, exist_ok=True)
    cam = seq.camera
    write_calibration(d / "calibration.txt", cam)
    with open(d / "rgb.txt", "w") as frgb, open(d / "depth.txt", "w") as fdep:
        frgb.write("# timestamp filename\n")
        fdep.write("# timestamp filename\n")
        for f in seq.frames:
            stem = f"{f.timestamp:.6f}"
            write_rgb(d / "rgb" / f"{stem}.png", f.rgb)
            write_depth(d / "depth" / f"{stem}.png", f.depth, cam.depth_scale)
            frgb.write(f"{stem} rgb/{stem}.png\n")
            fdep.write(f"{stem} depth/{stem}.png\n")
            if f.features is not None:
                write_features(d / "features" / f"{stem}.upft", f.features)
            if f.instances is not None:
                instances_to_png(d / "instances" / f"{stem}.png", f.instances, cam.shape)
            if f.gt_dynamic is not None:
                write_gray(d / "dynamic" / f"{stem}.png", f.gt_dynamic)
            if f.gt_static_rgb is not None:
                write_rgb(d / "static" / f"{stem}.png", f.gt_static_rgb)
    if all(f.gt_pose is not None for f in seq.frames):
        write_trajectory(d / "groundtruth.txt", [f.timestamp for f in seq.frames], [f.gt_pose for f in seq.frames])
