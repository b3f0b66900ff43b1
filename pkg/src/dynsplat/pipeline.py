"""Tracking and mapping.

The tracker turns each frame into a pose and a motion mask using the latest
map snapshot.  Selected frames become keyframes; the mapper grows anchors
from their static pixels, optimizes the map, trains the uncertainty head,
updates anchor motion probabilities and prunes.  The two sides only share a
bounded keyframe queue and an immutable snapshot reference.
"""

from __future__ import annotations

import copy
import logging
import math
import queue
import threading
import time
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .anchors import (
    DecoderSet,
    Octree,
    decode,
    decode_backward,
    grow,
    observe_anchors,
    prune,
    prune_mask,
)
from .dataio import Frame, Sequence
from .geometry import Camera, GaussianSet, Pose, pose_distance
from .losses import LossWeights, geo_map, lift_features, total_loss
from .nn import AdamState, Diverged, Mlp, lifting_mlp, mlp_adam_step, uncertainty_mlp
from .render import RenderOutput, RenderSettings, prepare, render, render_backward, render_gaussians
from .uncertainty import (
    GATE_THRESHOLD,
    ResidualMap,
    bilinear_upsample,
    iou_refine,
    motion_mask,
    predict_uncertainty,
    residual_map,
    solve_sigma,
    uncertainty_head_grads,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "gt"  # or "photometric"
    deterministic: bool = True
    seed: int = 0
    # keyframes
    kf_translation: float = 0.05
    kf_rotation_deg: float = 5.0
    kf_every: int = 5
    queue_size: int = 8
    # tracker
    track_iters: int = 20
    fd_step: float = 1e-3
    precondition: str = "gauss-newton"  # or "none"
    gd_step: float = 0.01
    armijo: float = 1e-4
    max_backtracks: int = 12
    literal_gate: bool = False
    iou_tau: float = 0.3
    # map
    leaf_size: float = 0.1
    max_depth: int = 10
    k: int = 8
    feat_dim: int = 32
    n_low: int = 16
    grow_stride: int = 2
    n_iters: int = 50
    final_iters: int = 0
    replay: bool = True
    p_hit: float = 0.7
    p_miss: float = 0.4
    p_prior: float = 0.5
    prune_threshold: float = 0.85
    prune: bool = True
    literal_mask: bool = False
    # optimizer
    lr: float = 1e-2  # decoders and F_m
    lr_feature: float = 0.1  # anchor features
    lr_offset: float = 1e-2
    lr_fu: float = 1e-2
    # loss weights
    lam: float = 0.8
    lam1: float = 0.6
    lam2: float = 1.0
    lam3: float = 0.4
    lam4: float = 0.01
    lam5: float = 0.01
    # renderer
    skip_alpha: float = 1.0 / 255.0
    stop_trans: float = 1e-4
    cutoff: float = 3.0
    workers: int = 1

    def __post_init__(self):
        if self.mode not in ("gt", "photometric"):
            raise ValueError(f"unknown tracking mode {self.mode!r}")
        if self.precondition not in ("gauss-newton", "none"):
            raise ValueError(f"unknown preconditioner {self.precondition!r}")
        if self.queue_size < 1 or self.kf_every < 1:
            raise ValueError("queue_size and kf_every must be positive")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lam, self.lam1, self.lam2, self.lam3, self.lam4, self.lam5)

    @property
    def render_settings(self) -> RenderSettings:
        return RenderSettings(self.skip_alpha, self.stop_trans, self.cutoff, workers=self.workers)

    def replace(self, **kw) -> "PipelineConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return PipelineConfig(**vals)


@dataclass
class Keyframe:
    frame: Frame
    pose: Pose
    mask: np.ndarray  # tracker motion mask, True = dynamic
    t: float  # normalized position in the sequence
    seq: int = 0
    refined_mask: np.ndarray | None = None
    flagged: bool = False
    features_up: np.ndarray | None = None

    def __post_init__(self):
        if self.mask.shape != self.frame.depth.shape:
            raise ValueError("keyframe mask does not match the frame")

    @property
    def best_mask(self) -> np.ndarray:
        # union: pixels either mask calls dynamic stay out of the loss and count as dynamic evidence
        return self.mask if self.refined_mask is None else self.mask | self.refined_mask


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _frozen_mlp(m: Mlp | None) -> Mlp | None:
    if m is None:
        return None
    c = m.copy()
    for p in c.params():
        p.setflags(write=False)
    return c


@dataclass(frozen=True)
class MapSnapshot:
    """Decoded Gaussians plus the heads the tracker needs, never mutated after creation."""

    gaussians: GaussianSet
    version: int
    frame_index: int
    f_m: Mlp | None = None
    f_u: Mlp | None = None
    n_anchors: int = 0

    @classmethod
    def create(cls, gaussians: GaussianSet, version: int, frame_index: int, f_m=None, f_u=None, n_anchors=0):
        gs = GaussianSet(*(_freeze(getattr(gaussians, n)) for n in ("mu", "opacity", "color", "scale", "rot", "feat")))
        return cls(gs, version, frame_index, _frozen_mlp(f_m), _frozen_mlp(f_u), n_anchors)

    def __len__(self) -> int:
        return len(self.gaussians)


# tracking ---------------------------------------------------------------------------

def keyframe_select(pose: Pose, last_kf_pose: Pose | None, frame_index: int, cfg: PipelineConfig = PipelineConfig()) -> bool:
    if frame_index == 0 or last_kf_pose is None:
        return True
    if frame_index % cfg.kf_every == 0:
        return True
    dt, dr = pose_distance(pose, last_kf_pose)
    return dt > cfg.kf_translation or dr > math.radians(cfg.kf_rotation_deg)


def upsampled_features(frame: Frame, cam: Camera) -> np.ndarray | None:
    if frame.features is None:
        return None
    return bilinear_upsample(frame.features, cam.height, cam.width)


def _snapshot_residual(frame: Frame, snapshot: MapSnapshot, pose: Pose, cam: Camera, F_up, cfg) -> ResidualMap:
    out = render_gaussians(snapshot.gaussians, pose, cam, cfg.render_settings)
    lifted = None
    if F_up is not None and snapshot.f_m is not None and out.feat.shape[-1] == snapshot.f_m.in_dim:
        lifted = lift_features(out.feat, snapshot.f_m)
        if lifted.shape != F_up.shape:
            lifted = None
    return residual_map(out, frame.rgb, frame.depth, F_up if lifted is not None else None, lifted,
                        literal_gate=cfg.literal_gate)


def refine_pose(frame: Frame, snapshot: MapSnapshot, init: Pose, cam: Camera, cfg: PipelineConfig = PipelineConfig(),
                static: np.ndarray | None = None) -> Pose:
    """Descend the static-masked geometric loss over the 6 tangent coordinates.

    Gradients are central differences of the loss under right perturbations
    of the pose.  With the Gauss-Newton preconditioner the step direction is
    solved against J^T J, where J holds central differences of the
    least-squares part of the residual; otherwise it is the plain negative
    gradient.  Either way a backtracking line search picks the step length.
    """
    w = cfg.weights
    settings = cfg.render_settings
    if static is None:
        out0 = render_gaussians(snapshot.gaussians, init, cam, settings)
        static = out0.trans >= GATE_THRESHOLD
    n = int(static.sum())
    if n == 0:
        return init
    pw = static / n
    valid = (frame.depth > 0) & static
    sq_c = np.sqrt(w.lam1 * w.lam * pw)[static][:, None]
    sq_d = np.sqrt(w.lam2 * pw)[valid]

    def evaluate(pose: Pose):
        out = render_gaussians(snapshot.gaussians, pose, cam, settings)
        L = float((geo_map(out.color, out.depth, frame.rgb, frame.depth, w) * pw).sum())
        r = np.concatenate([((out.color - frame.rgb)[static] * sq_c).ravel(), (out.depth - frame.depth)[valid] * sq_d])
        return L, r

    h = cfg.fd_step
    pose = init
    f0, _ = evaluate(pose)
    for _ in range(cfg.track_iters):
        g = np.zeros(6)
        J = []
        for i in range(6):
            e = np.zeros(6)
            e[i] = h
            fp, rp = evaluate(pose.perturb(e))
            fm, rm = evaluate(pose.perturb(-e))
            g[i] = (fp - fm) / (2 * h)
            J.append((rp - rm) / (2 * h))
        if not np.all(np.isfinite(g)) or np.linalg.norm(g) == 0:
            break
        if cfg.precondition == "gauss-newton":
            J = np.stack(J, axis=1)
            H = 2.0 * J.T @ J
            H += 1e-6 * np.trace(H) / 6 * np.eye(6)
            d = -np.linalg.solve(H, g)
            a = 1.0
        else:
            d = -g
            a = cfg.gd_step / np.linalg.norm(g)
        slope = float(g @ d)
        if slope >= 0:
            d, slope = -g, -float(g @ g)
            a = cfg.gd_step / np.linalg.norm(g)
        accepted = False
        for _ in range(cfg.max_backtracks):
            cand = pose.perturb(a * d)
            fc, _ = evaluate(cand)
            if fc <= f0 + cfg.armijo * a * slope:
                accepted = True
                break
            a *= 0.5
        if not accepted:
            break
        pose, f0 = cand, fc
        if np.linalg.norm(a * d) < 1e-7:
            break
    return pose


def tracker_step(frame: Frame, snapshot: MapSnapshot | None, prev_pose: Pose | None, mode: str = "gt", *,
                 cam: Camera, prev_prev_pose: Pose | None = None, cfg: PipelineConfig = PipelineConfig(),
                 F_up: np.ndarray | None = None) -> tuple[Pose, np.ndarray, ResidualMap]:
    """Estimate the frame pose and its motion mask against ``snapshot``.

    Without a usable snapshot the mask is the instances-only seed
    ``iou_refine(empty, instances)`` and the residual is zero.
    """
    if F_up is None:
        F_up = upsampled_features(frame, cam)
    empty = snapshot is None or len(snapshot) == 0
    if mode == "gt":
        if frame.gt_pose is None:
            raise ValueError(f"frame {frame.index} has no ground-truth pose")
        pose = frame.gt_pose
    elif mode == "photometric":
        if prev_pose is None:
            pose = frame.gt_pose if frame.gt_pose is not None else Pose.identity()
        else:
            pose = prev_pose if prev_prev_pose is None else prev_pose @ (prev_prev_pose.inverse() @ prev_pose)
            if empty:
                warnings.warn("empty map snapshot: using constant-velocity pose", RuntimeWarning, stacklevel=2)
            else:
                rm0 = _snapshot_residual(frame, snapshot, pose, cam, F_up, cfg)
                static = ~motion_mask(solve_sigma(rm0.R)) & rm0.gate
                pose = refine_pose(frame, snapshot, pose, cam, cfg, static)
    else:
        raise ValueError(f"unknown tracking mode {mode!r}")
    if empty:
        z = np.zeros(cam.shape)
        rm = ResidualMap(z, z, z, z, np.zeros(cam.shape, dtype=bool))
        return pose, iou_refine(np.zeros(cam.shape, dtype=bool), frame.instances, cfg.iou_tau), rm
    rm = _snapshot_residual(frame, snapshot, pose, cam, F_up, cfg)
    mask = iou_refine(motion_mask(solve_sigma(rm.R)), frame.instances, cfg.iou_tau)
    return pose, mask, rm


def refined_mask(F_up: np.ndarray | None, f_u: Mlp | None, instances, tau: float = 0.3) -> np.ndarray | None:
    """Motion mask from the learned uncertainty head, then instance refinement."""
    if F_up is None or f_u is None or F_up.shape[-1] != f_u.in_dim:
        return None
    return iou_refine(motion_mask(predict_uncertainty(F_up, f_u)), instances, tau)


# mapping ----------------------------------------------------------------------------

@dataclass
class MapperState:
    cam: Camera
    cfg: PipelineConfig
    octree: Octree
    decoders: DecoderSet
    f_m: Mlp
    f_u: Mlp
    rng: np.random.Generator
    adam: dict[str, AdamState] = field(default_factory=dict)
    version: int = 0
    keyframes: list[Keyframe] = field(default_factory=list)
    flagged: list[int] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    removed: int = 0
    fu_trained: bool = False

    @classmethod
    def create(cls, cam: Camera, cfg: PipelineConfig, n_high: int, origin=None) -> "MapperState":
        rng = np.random.default_rng(cfg.seed)
        octree = Octree(cfg.leaf_size, cfg.max_depth, origin, cfg.k, cfg.feat_dim)
        decoders = DecoderSet.create(cfg.feat_dim, cfg.k, cfg.n_low, rng)
        f_m = lifting_mlp(cfg.n_low, n_high, rng)
        f_u = uncertainty_mlp(n_high, rng)
        adam = {"anchors": AdamState(), "F_m": AdamState(cfg.lr), "F_u": AdamState(cfg.lr_fu)}
        for m in decoders.mlps:
            adam[m.name] = AdamState(cfg.lr)
        return cls(cam, cfg, octree, decoders, f_m, f_u, rng, adam)

    @property
    def mlps(self) -> list[Mlp]:
        return self.decoders.mlps + [self.f_m, self.f_u]

    def n_gaussians(self) -> int:
        return int(prune_mask(self.octree, self.cfg.prune_threshold).sum()) * self.cfg.k


def _anchor_step(state: MapperState, grads) -> None:
    st = state.adam["anchors"]
    oc = state.octree
    params = [oc.features, oc.offsets]
    gr = [grads.features, grads.offsets]
    for g in gr:
        if not np.all(np.isfinite(g)):
            raise Diverged("diverged")
    st.ensure(params)
    st.step += 1
    for p, g, m, v, lr in zip(params, gr, st.m, st.v, (state.cfg.lr_feature, state.cfg.lr_offset)):
        m *= st.beta1
        m += (1 - st.beta1) * g
        v *= st.beta2
        v += (1 - st.beta2) * g * g
        p -= lr * (m / (1 - st.beta1**st.step)) / (np.sqrt(v / (1 - st.beta2**st.step)) + st.eps)


def map_iteration(state: MapperState, kf: Keyframe, train_fu: bool = True) -> dict:
    """One optimization step of the map on ``kf`` and, separately, of F_u."""
    cfg, cam = state.cfg, state.cam
    settings = cfg.render_settings
    gs, cache = decode(state.octree, state.decoders, kf.pose, cam, kf.t, cfg.prune_threshold, return_cache=True)
    pg = prepare(gs, kf.pose, cam, settings.cutoff)
    out = render(pg, cam, settings)
    mask = kf.best_mask
    static = mask if cfg.literal_mask else ~mask
    F = kf.features_up
    tl = total_loss(out, kf.frame.rgb, kf.frame.depth, F, static, gs.scale, cfg.weights, state.f_m)
    if not math.isfinite(tl.value):
        raise Diverged("diverged")
    gg = render_backward(pg, cam, tl.grad_color, tl.grad_depth, None, tl.grad_feat_low, settings)
    gg.scale = gg.scale + tl.grad_scale
    ag = decode_backward(state.octree, state.decoders, cache, gg)
    _anchor_step(state, ag)
    for m, grads in zip(state.decoders.mlps, ag.decoders):
        mlp_adam_step(state.adam[m.name], m, grads)
    if F is not None:
        mlp_adam_step(state.adam["F_m"], state.f_m, tl.grad_f_m)
    lu = float("nan")
    if train_fu and F is not None:
        rm = residual_map(out, kf.frame.rgb, kf.frame.depth, F, tl.lifted, literal_gate=cfg.literal_gate)
        if rm.gate.any():
            lu, g_fu = uncertainty_head_grads(F, rm.R, state.f_u, cfg.lam3, pixel_mask=rm.gate)
            mlp_adam_step(state.adam["F_u"], state.f_u, g_fu)
            state.fu_trained = True
    return {"loss": tl.value, "geo": tl.geo, "feat": tl.feat, "scale": tl.scale, "l_u": lu, "gaussians": len(gs)}


def _checkpoint(state: MapperState):
    return (state.octree.copy(), [m.copy() for m in state.mlps], copy.deepcopy(state.adam))


def _restore(state: MapperState, ck) -> None:
    octree, mlps, adam = ck
    state.octree.select_from(octree)
    for dst, src in zip(state.mlps, mlps):
        for p, q in zip(dst.params(), src.params()):
            p[...] = q
        dst.version += 1
    state.adam = adam


def optimize(state: MapperState, kf: Keyframe, n_iters: int) -> list[dict]:
    """Run ``n_iters`` steps, alternating the new keyframe with replayed ones.

    On divergence the batch is abandoned, the parameters from before it are
    restored and the keyframe is flagged.
    """
    ck = _checkpoint(state)
    stats = []
    past = state.keyframes[:-1]
    try:
        for it in range(n_iters):
            target = kf
            if state.cfg.replay and past and it % 2 == 1:
                target = past[int(state.rng.integers(len(past)))]
            stats.append(map_iteration(state, target))
    except (Diverged, FloatingPointError) as e:
        log.warning("mapping diverged on frame %d: %s", kf.frame.index, e)
        _restore(state, ck)
        kf.flagged = True
        state.flagged.append(kf.frame.index)
    return stats


def publish(state: MapperState, kf: Keyframe) -> MapSnapshot:
    gs = decode(state.octree, state.decoders, kf.pose, state.cam, kf.t, state.cfg.prune_threshold, cull=False)
    return MapSnapshot.create(gs, state.version, kf.frame.index, state.f_m, state.f_u if state.fu_trained else None,
                              len(state.octree))


def render_map(state: MapperState, pose: Pose, t: float) -> RenderOutput:
    gs = decode(state.octree, state.decoders, pose, state.cam, t, state.cfg.prune_threshold)
    return render_gaussians(gs, pose, state.cam, state.cfg.render_settings)


def mapper_step(kf: Keyframe, state: MapperState) -> tuple[MapperState, MapSnapshot]:
    """grow -> optimize -> refine mask -> observe -> prune -> publish."""
    if kf.mask is None:
        raise ValueError("keyframe has no motion mask")
    cfg, cam, frame = state.cfg, state.cam, kf.frame
    if kf.features_up is None:
        kf.features_up = upsampled_features(frame, cam)
    # grow where the learned head sees static content: the tracker's mask also flags
    # unmapped holes, which would otherwise never be filled
    prior = refined_mask(kf.features_up, state.f_u if state.fu_trained else None, frame.instances, cfg.iou_tau)
    static = ~(kf.mask if prior is None else prior) & (frame.depth > 0)
    added = grow(state.octree, frame.depth, kf.pose, cam, static, cfg.grow_stride, frame.index, state.rng)
    if added:
        st = state.adam["anchors"]
        st.append_rows(0, added)
        st.append_rows(1, added)
    state.keyframes.append(kf)
    # the tracker's mask describes disagreement with the map as it was before this update,
    # so dynamic evidence goes to the surfaces that map showed
    before = render_map(state, kf.pose, kf.t).median
    stats = optimize(state, kf, cfg.n_iters)
    refined = refined_mask(kf.features_up, state.f_u if state.fu_trained else None, frame.instances, cfg.iou_tau)
    kf.refined_mask = kf.mask.copy() if refined is None else refined
    observed = observe_anchors(state.octree, kf.pose, cam, kf.best_mask, before, frame.depth,
                               cfg.p_hit, cfg.p_miss, cfg.p_prior)
    removed = 0
    if cfg.prune:
        keep = prune_mask(state.octree, cfg.prune_threshold)
        _, removed = prune(state.octree, cfg.prune_threshold)
        if removed:
            rows = np.nonzero(keep)[0]
            st = state.adam["anchors"]
            st.select_rows(0, rows)
            st.select_rows(1, rows)
    state.removed += removed
    state.version += 1
    last = stats[-1] if stats else {}
    state.history.append({"frame": frame.index, "added": added, "removed": removed, "observed": observed,
                          "anchors": len(state.octree), "flagged": kf.flagged, **last})
    return state, publish(state, kf)


def final_refine(state: MapperState, n_iters: int) -> None:
    """Extra optimization over randomly chosen keyframes after the sequence ends."""
    if not state.keyframes or n_iters <= 0:
        return
    ck = _checkpoint(state)
    try:
        for _ in range(n_iters):
            kf = state.keyframes[int(state.rng.integers(len(state.keyframes)))]
            map_iteration(state, kf, train_fu=False)
    except (Diverged, FloatingPointError) as e:
        log.warning("final refinement diverged: %s", e)
        _restore(state, ck)


# orchestration ----------------------------------------------------------------------

@dataclass
class FrameResult:
    index: int
    timestamp: float
    pose: Pose
    mask: np.ndarray  # tracker mask
    refined: np.ndarray | None  # mask from the learned head, if available
    keyframe: bool
    snapshot_version: int
    track_time: float

    @property
    def eval_mask(self) -> np.ndarray:
        return self.mask if self.refined is None else self.refined


@dataclass
class RunResult:
    frames: list[FrameResult]
    state: MapperState
    snapshot: MapSnapshot | None
    timings: dict
    error: str | None = None

    @property
    def stamps(self) -> list[float]:
        return [f.timestamp for f in self.frames]

    @property
    def poses(self) -> list[Pose]:
        return [f.pose for f in self.frames]


def temporal_position(index: int, n_frames: int) -> float:
    """Normalized sequence position fed to the temporal encoding."""
    return index / n_frames


class _Tracker:
    def __init__(self, seq: Sequence, cfg: PipelineConfig):
        self.seq = seq
        self.cfg = cfg
        self.cam = seq.camera
        self.prev: Pose | None = None
        self.prev_prev: Pose | None = None
        self.last_kf: Pose | None = None
        self.n_kf = 0

    def t_of(self, i: int) -> float:
        return temporal_position(i, len(self.seq))

    def step(self, frame: Frame, snapshot: MapSnapshot | None) -> tuple[FrameResult, Keyframe | None]:
        t0 = time.perf_counter()
        F_up = upsampled_features(frame, self.cam)
        pose, mask, _ = tracker_step(frame, snapshot, self.prev, self.cfg.mode, cam=self.cam,
                                     prev_prev_pose=self.prev_prev, cfg=self.cfg, F_up=F_up)
        refined = None
        if snapshot is not None:
            refined = refined_mask(F_up, snapshot.f_u, frame.instances, self.cfg.iou_tau)
        if frame.index == 0 and refined is None:
            refined = mask
        self.prev_prev, self.prev = self.prev, pose
        is_kf = keyframe_select(pose, self.last_kf, frame.index, self.cfg)
        kf = None
        if is_kf:
            kf = Keyframe(frame, pose, mask, self.t_of(frame.index), self.n_kf, features_up=F_up)
            self.n_kf += 1
            self.last_kf = pose
        elapsed = time.perf_counter() - t0
        version = snapshot.version if snapshot is not None else 0
        return FrameResult(frame.index, frame.timestamp, pose, mask, refined, is_kf, version, elapsed), kf


def _n_high(seq: Sequence, cfg: PipelineConfig) -> int:
    for f in seq.frames:
        if f.features is not None:
            return f.features.shape[-1]
    return cfg.feat_dim


def _finish(state: MapperState, frames: list[FrameResult], snapshot, timings, error=None) -> RunResult:
    t0 = time.perf_counter()
    final_refine(state, state.cfg.final_iters)
    if state.cfg.final_iters > 0 and state.keyframes:
        snapshot = publish(state, state.keyframes[-1])
    timings["final"] = time.perf_counter() - t0
    by_index = {kf.frame.index: kf for kf in state.keyframes}
    for fr in frames:
        kf = by_index.get(fr.index)
        if kf is not None and kf.refined_mask is not None:
            fr.refined = kf.refined_mask
    return RunResult(frames, state, snapshot, timings, error)


def run_sequential(seq: Sequence, cfg: PipelineConfig, state: MapperState | None = None) -> RunResult:
    """Single-threaded interleaving: track a frame, map it fully if it is a keyframe."""
    state = state or MapperState.create(seq.camera, cfg, _n_high(seq, cfg))
    tracker = _Tracker(seq, cfg)
    snapshot = None
    frames = []
    timings = {"track": 0.0, "map": 0.0}
    error = None
    for frame in seq.frames:
        fr, kf = tracker.step(frame, snapshot)
        timings["track"] += fr.track_time
        frames.append(fr)
        if kf is not None:
            t0 = time.perf_counter()
            try:
                state, snapshot = mapper_step(kf, state)
            except Exception as e:  # noqa: BLE001 - reported, partial outputs kept
                error = f"mapper failed on frame {frame.index}: {e}"
                log.error(error)
                break
            finally:
                timings["map"] += time.perf_counter() - t0
    return _finish(state, frames, snapshot, timings, error)


class _SnapshotBox:
    """Holds the current snapshot; readers and the writer swap a single reference."""

    def __init__(self):
        self.value: MapSnapshot | None = None


def run_parallel(seq: Sequence, cfg: PipelineConfig = PipelineConfig()) -> RunResult:
    """Run tracking and mapping, concurrently unless ``cfg.deterministic``.

    In concurrent mode the tracker thread pushes keyframes into a bounded
    queue (blocking when it is full) and always tracks against whatever
    snapshot the mapper published last.  A mapper failure stops both sides
    and returns what was produced so far.
    """
    if cfg.deterministic:
        return run_sequential(seq, cfg)
    state = MapperState.create(seq.camera, cfg, _n_high(seq, cfg))
    q: queue.Queue = queue.Queue(maxsize=cfg.queue_size)
    box = _SnapshotBox()
    failed = threading.Event()
    errors: list[str] = []
    frames: list[FrameResult] = []
    timings = {"track": 0.0, "map": 0.0}
    received: list[int] = []

    def put(item) -> bool:
        while not failed.is_set():
            try:
                q.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def track_loop():
        tracker = _Tracker(seq, cfg)
        for frame in seq.frames:
            if failed.is_set():
                break
            fr, kf = tracker.step(frame, box.value)
            timings["track"] += fr.track_time
            frames.append(fr)
            if kf is not None and not put(kf):
                break
        put(None)

    def map_loop():
        nonlocal state
        while True:
            kf = q.get()
            if kf is None:
                return
            received.append(kf.seq)
            t0 = time.perf_counter()
            try:
                state, snap = mapper_step(kf, state)
            except Exception as e:  # noqa: BLE001
                errors.append(f"mapper failed on frame {kf.frame.index}: {e}")
                failed.set()
                return
            finally:
                timings["map"] += time.perf_counter() - t0
            box.value = snap

    threads = [threading.Thread(target=track_loop, name="tracker"), threading.Thread(target=map_loop, name="mapper")]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if received != list(range(len(received))):
        errors.append("keyframe sequence numbers are not contiguous")
    return _finish(state, frames, box.value, timings, "; ".join(errors) or None)
