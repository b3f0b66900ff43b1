"""Ray-cast synthetic RGB-D sequences with ground-truth poses, dynamic masks and features.

The renderer here is a plain ray caster over boxes and spheres and shares no
code with the splatting renderer, so it can serve as an independent oracle.
World axes follow the camera convention: x right, y down, z forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dataio import Frame, Sequence
from .geometry import Camera, Pose, rot_to_quat

LIGHT = np.array([0.3, -1.0, -0.6]) / np.linalg.norm([0.3, -1.0, -0.6])
AMBIENT = 0.7


@dataclass(frozen=True)
class Primitive:
    kind: str  # "box" (size = half extents) or "sphere" (size = (radius,))
    center: tuple[float, float, float]
    size: tuple[float, ...]
    color: tuple[float, float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)  # m per frame
    segmented: bool = True  # reported by the instance segmenter

    def __post_init__(self):
        if self.kind not in ("box", "sphere"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if min(self.size) <= 0:
            raise ValueError("primitive size must be positive")

    def at(self, frame: int) -> "Primitive":
        c = tuple(np.add(self.center, np.multiply(self.velocity, frame)).tolist())
        return replace(self, center=c)

    @property
    def moving(self) -> bool:
        return any(v != 0.0 for v in self.velocity)


def default_static() -> tuple[Primitive, ...]:
    return (
        Primitive("box", (0.0, 1.0, 2.5), (4.0, 0.05, 3.5), (0.55, 0.5, 0.42), segmented=False),  # floor
        Primitive("box", (0.0, 0.0, 4.6), (4.0, 2.0, 0.05), (0.78, 0.74, 0.66), segmented=False),  # back wall
        Primitive("box", (-0.8, 0.65, 3.3), (0.3, 0.3, 0.3), (0.72, 0.32, 0.25)),
        Primitive("sphere", (0.9, 0.6, 3.6), (0.35,), (0.25, 0.42, 0.72)),
    )


def default_dynamic() -> Primitive:
    return Primitive("box", (-0.65, 0.05, 1.7), (0.22, 0.22, 0.22), (0.3, 0.68, 0.32), velocity=(0.045, 0.0, 0.0))


@dataclass(frozen=True)
class SynthConfig:
    width: int = 64
    height: int = 48
    focal: float = 56.0
    n_frames: int = 30
    radius: float = 2.5  # camera circle radius
    arc_deg: float = 20.0  # total swept angle
    center: tuple[float, float, float] = (0.0, 0.3, 2.5)
    static: tuple[Primitive, ...] = field(default_factory=default_static)
    dynamic: Primitive | None = field(default_factory=default_dynamic)
    feat_dim: int = 32
    feat_downsample: int = 1
    color_noise: float = 0.005
    depth_noise: float = 0.0
    feat_noise: float = 0.05
    supersample: int = 3
    fps: float = 30.0
    t0: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.width % self.feat_downsample or self.height % self.feat_downsample:
            raise ValueError("image size must be divisible by feat_downsample")
        if self.n_frames < 1 or self.supersample < 1:
            raise ValueError("need at least one frame and one sample per pixel")

    @property
    def camera(self) -> Camera:
        return Camera(self.focal, self.focal, self.width / 2, self.height / 2, self.width, self.height)

    @property
    def primitives(self) -> list[Primitive]:
        return list(self.static) + ([self.dynamic] if self.dynamic is not None else [])


def camera_pose(cfg: SynthConfig, i: int) -> Pose:
    """Pose on the circle around ``cfg.center``, looking at it."""
    frac = 0.5 if cfg.n_frames == 1 else i / (cfg.n_frames - 1)
    th = np.radians(cfg.arc_deg) * (frac - 0.5)
    c = np.asarray(cfg.center, dtype=np.float64)
    fwd = np.array([np.sin(th), 0.0, np.cos(th)])
    right = np.array([np.cos(th), 0.0, -np.sin(th)])
    R = np.stack([right, [0.0, 1.0, 0.0], fwd], axis=1)
    return Pose(rot_to_quat(R), c - cfg.radius * fwd)


def _hit_box(o, d, prim):
    lo = np.asarray(prim.center) - np.asarray(prim.size)
    hi = np.asarray(prim.center) + np.asarray(prim.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.fmin(t1, t2)
    tmax = np.fmax(t1, t2)
    tnear = tmin.max(axis=1)
    tfar = tmax.min(axis=1)
    hit = (tnear <= tfar) & (tnear > 1e-6)
    axis = tmin.argmax(axis=1)
    n = np.zeros_like(d)
    rows = np.arange(d.shape[0])
    n[rows, axis] = -np.sign(d[rows, axis])
    return np.where(hit, tnear, np.inf), n


def _hit_sphere(o, d, prim):
    c = np.asarray(prim.center)
    r = prim.size[0]
    oc = o - c
    a = (d * d).sum(1)
    b = 2.0 * (d * oc).sum(1)
    cc = (oc * oc).sum() - r * r
    disc = b * b - 4 * a * cc
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = (-b - sq) / (2 * a)
    hit = (disc >= 0) & (t > 1e-6)
    t = np.where(hit, t, np.inf)
    p = o + d * np.where(hit, t, 0.0)[:, None]
    return t, (p - c) / r


def cast(prims: list[Primitive], pose: Pose, cam: Camera, px: np.ndarray, py: np.ndarray):
    """Trace rays through image points (px, py); returns (z, color, object id).

    Ray directions have unit camera-z, so the hit parameter is the depth.
    Object ids index ``prims`` from 1; 0 means no hit.
    """
    dc = np.stack([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, np.ones_like(px)], axis=1)
    d = dc @ pose.R.T
    o = pose.translation
    best = np.full(px.shape, np.inf)
    color = np.zeros(px.shape + (3,))
    ident = np.zeros(px.shape, dtype=np.int64)
    for k, prim in enumerate(prims):
        t, n = (_hit_box if prim.kind == "box" else _hit_sphere)(o, d, prim)
        closer = t < best
        if not closer.any():
            continue
        shade = AMBIENT + (1 - AMBIENT) * np.maximum(n[closer] @ LIGHT, 0.0)
        best[closer] = t[closer]
        color[closer] = np.asarray(prim.color) * shade[:, None]
        ident[closer] = k + 1
    z = np.where(np.isfinite(best), best, 0.0)
    return z, color, ident


def embeddings(n_objects: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Row k is the unit feature of object id k (row 0 for misses)."""
    A = rng.normal(size=(dim, max(n_objects, 1)))
    if n_objects <= dim:
        Q, _ = np.linalg.qr(A)
        E = Q[:, :n_objects].T
    else:
        E = A.T
    return E / np.linalg.norm(E, axis=1, keepdims=True)


def render_view(prims, pose: Pose, cam: Camera, ss: int, emb: np.ndarray | None = None):
    """Supersampled color, center-sample depth and id, and averaged features."""
    H, W = cam.height, cam.width
    offs = (np.arange(ss) + 0.5) / ss
    cy, cx = np.meshgrid(offs, offs, indexing="ij")
    vv, uu = np.mgrid[0:H, 0:W]
    px = (uu[..., None, None] + cx).reshape(-1)
    py = (vv[..., None, None] + cy).reshape(-1)
    z, color, ident = cast(prims, pose, cam, px, py)
    S = ss * ss
    color = color.reshape(H, W, S, 3).mean(axis=2)
    mid = (ss // 2) * ss + ss // 2 if ss % 2 else 0
    z = z.reshape(H, W, S)[..., mid]
    ids = ident.reshape(H, W, S)
    center_id = ids[..., mid]
    feat = None
    if emb is not None:
        feat = emb[ids].mean(axis=2)
    return color, z, center_id, feat


def synth_generate(cfg: SynthConfig = SynthConfig()) -> Sequence:
    """Generate a sequence; identical configs give identical arrays.

    RGB is quantized to 8 bits, depth to 1/depth_scale meters and features to
    float32, so an export/load round trip is exact.
    """
    rng = np.random.default_rng(cfg.seed)
    cam = cfg.camera
    prims = cfg.primitives
    emb = embeddings(len(prims) + 1, cfg.feat_dim, rng)
    dyn_id = len(prims) if cfg.dynamic is not None else -1
    f = cfg.feat_downsample
    frames = []
    for i in range(cfg.n_frames):
        pose = camera_pose(cfg, i)
        placed = [p.at(i) for p in prims]
        rgb, z, ids, feat = render_view(placed, pose, cam, cfg.supersample, emb)
        rgb = rgb + rng.normal(0.0, cfg.color_noise, rgb.shape) if cfg.color_noise else rgb
        rgb = np.clip(np.rint(rgb * 255.0), 0, 255) / 255.0
        if cfg.depth_noise:
            z = np.where(z > 0, z + rng.normal(0.0, cfg.depth_noise, z.shape), 0.0)
        z = np.clip(np.rint(z * cam.depth_scale), 0, 65535) / cam.depth_scale
        low = feat.reshape(cfg.height // f, f, cfg.width // f, f, cfg.feat_dim).mean(axis=(1, 3))
        low = low + rng.normal(0.0, cfg.feat_noise, low.shape)
        low = low.astype(np.float32).astype(np.float64)
        moving = cfg.dynamic is not None and cfg.dynamic.moving
        gt_dyn = (ids == dyn_id) if moving else np.zeros(cam.shape, dtype=bool)
        instances = [ids == k + 1 for k, p in enumerate(prims) if p.segmented and (ids == k + 1).any()]
        static_rgb, _, _, _ = render_view([p.at(i) for p in cfg.static], pose, cam, cfg.supersample)
        static_rgb = np.clip(np.rint(static_rgb * 255.0), 0, 255) / 255.0
        frames.append(Frame(i, round(cfg.t0 + i / cfg.fps, 6), rgb, z, low, instances, pose, gt_dyn, static_rgb))
    return Sequence(cam, frames, "synthetic")
