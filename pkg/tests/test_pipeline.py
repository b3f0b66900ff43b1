import dataclasses
import math
import threading

import numpy as np
import pytest

from dynsplat import pipeline
from dynsplat.dataio import write_trajectory
from dynsplat.evaluation import ate_rmse
from dynsplat.geometry import Pose
from dynsplat.pipeline import (
    Keyframe,
    MapperState,
    PipelineConfig,
    keyframe_select,
    map_iteration,
    mapper_step,
    publish,
    run_parallel,
    run_sequential,
    temporal_position,
    tracker_step,
    upsampled_features,
)
from dynsplat.anchors import grow
from dynsplat.render import render_gaussians
from dynsplat.synthetic import SynthConfig, synth_generate
from dynsplat.uncertainty import box_filter3

TINY = SynthConfig(width=32, height=24, focal=28.0, n_frames=6, supersample=1, feat_dim=8)
FAST = PipelineConfig(leaf_size=0.25, n_iters=4, feat_dim=8, n_low=4)


@pytest.fixture(scope="module")
def tiny_seq():
    return synth_generate(TINY)


def keyframe_of(frame, cam, mask=None, t=0.0):
    mask = np.zeros(cam.shape, bool) if mask is None else mask
    return Keyframe(frame, frame.gt_pose, mask, t, features_up=upsampled_features(frame, cam))


def test_keyframe_select_examples():
    p = Pose.identity()
    assert keyframe_select(p, None, 0)
    assert keyframe_select(p, p, 0)
    assert not keyframe_select(p, p, 3)
    assert keyframe_select(p, p, 5)
    assert keyframe_select(p.perturb([0.06, 0, 0, 0, 0, 0]), p, 3)
    assert not keyframe_select(p.perturb([0.04, 0, 0, 0, 0, 0]), p, 3)
    assert keyframe_select(p.perturb([0, 0, 0, 0, math.radians(6), 0]), p, 3)


def test_temporal_position():
    assert temporal_position(0, 30) == 0.0
    assert temporal_position(15, 30) == 0.5
    assert 0 <= temporal_position(29, 30) < 1


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(mode="orb")
    with pytest.raises(ValueError):
        PipelineConfig(queue_size=0)
    assert PipelineConfig().replace(n_iters=3).n_iters == 3
    assert PipelineConfig().queue_size == 8


def test_tracker_gt_mode_and_errors(tiny_seq):
    f = tiny_seq.frames[2]
    pose, mask, rm = tracker_step(f, None, None, "gt", cam=tiny_seq.camera)
    assert pose is f.gt_pose
    assert not rm.R.any()
    with pytest.raises(ValueError):
        tracker_step(f, None, None, "orb", cam=tiny_seq.camera)
    bare = dataclasses.replace(f, gt_pose=None)
    with pytest.raises(ValueError):
        tracker_step(bare, None, None, "gt", cam=tiny_seq.camera)


def test_tracker_empty_snapshot_extrapolates(tiny_seq):
    f = tiny_seq.frames[2]
    a = Pose.identity()
    b = a.perturb([0.01, 0, 0, 0, 0, 0])
    with pytest.warns(RuntimeWarning, match="empty map snapshot"):
        pose, _, _ = tracker_step(f, None, b, "photometric", cam=tiny_seq.camera, prev_prev_pose=a)
    np.testing.assert_allclose(pose.translation, [0.02, 0, 0], atol=1e-12)


def test_frame_identical_to_render_gives_empty_mask(tiny_seq):
    cam = tiny_seq.camera
    state = MapperState.create(cam, FAST, TINY.feat_dim)
    f = tiny_seq.frames[0]
    grow(state.octree, f.depth, f.gt_pose, cam, f.depth > 0, 1, 0, state.rng)
    snap = publish(state, keyframe_of(f, cam))
    out = render_gaussians(snap.gaussians, f.gt_pose, cam, FAST.render_settings)
    same = dataclasses.replace(f, rgb=out.color, depth=out.depth, features=None, instances=None)
    _, mask, rm = tracker_step(same, snap, None, "gt", cam=cam, cfg=FAST)
    # only the smoothing of the observed depth separates them
    assert not rm.color.any()
    np.testing.assert_allclose(rm.depth, np.abs(out.depth - box_filter3(out.depth)) * rm.gate, atol=1e-12)
    assert not mask.any()


def test_all_dynamic_keyframe_does_not_grow(tiny_seq):
    cam = tiny_seq.camera
    state = MapperState.create(cam, FAST, TINY.feat_dim)
    kf = keyframe_of(tiny_seq.frames[0], cam, np.ones(cam.shape, bool))
    state, snap = mapper_step(kf, state)
    assert len(state.octree) == 0 and state.history[-1]["added"] == 0
    assert snap.version == 1 and kf.refined_mask is not None


def test_mapper_step_grows_and_versions(tiny_seq):
    cam = tiny_seq.camera
    state = MapperState.create(cam, FAST, TINY.feat_dim)
    state, s1 = mapper_step(keyframe_of(tiny_seq.frames[0], cam), state)
    assert len(state.octree) > 0 and len(s1) == len(state.octree) * FAST.k
    state, s2 = mapper_step(keyframe_of(tiny_seq.frames[1], cam, t=0.2), state)
    assert (s1.version, s2.version) == (1, 2)


def test_snapshot_is_immutable(tiny_seq):
    cam = tiny_seq.camera
    state = MapperState.create(cam, FAST, TINY.feat_dim)
    state, s1 = mapper_step(keyframe_of(tiny_seq.frames[0], cam), state)
    before = {n: getattr(s1.gaussians, n).copy() for n in ("mu", "opacity", "color", "scale")}
    with pytest.raises(ValueError):
        s1.gaussians.mu[0, 0] = 1.0
    with pytest.raises(ValueError):
        s1.f_m.params()[0][0, 0] = 1.0
    with pytest.raises(dataclasses.FrozenInstanceError):
        s1.version = 7
    state, _ = mapper_step(keyframe_of(tiny_seq.frames[1], cam, t=0.2), state)
    for n, v in before.items():
        np.testing.assert_array_equal(getattr(s1.gaussians, n), v)


def test_divergence_restores_and_flags(tiny_seq):
    cam = tiny_seq.camera
    state = MapperState.create(cam, FAST, TINY.feat_dim)
    state, _ = mapper_step(keyframe_of(tiny_seq.frames[0], cam), state)
    feats = state.octree.features.copy()
    bad = dataclasses.replace(tiny_seq.frames[1], rgb=np.full_like(tiny_seq.frames[1].rgb, np.nan))
    kf = keyframe_of(bad, cam, t=0.2)
    stats = pipeline.optimize(state, kf, 3)
    assert kf.flagged and state.flagged == [1] and stats == []
    np.testing.assert_array_equal(state.octree.features, feats)


def seeded_state(seq, seed):
    f = seq.frames[0]
    cfg = PipelineConfig(leaf_size=0.25, replay=False, seed=seed)
    state = MapperState.create(seq.camera, cfg, SynthConfig.feat_dim)
    grow(state.octree, f.depth, f.gt_pose, seq.camera, f.depth > 0, cfg.grow_stride, 0, state.rng)
    return state, keyframe_of(f, seq.camera)


@pytest.fixture(scope="module")
def one_static_frame():
    return synth_generate(SynthConfig(dynamic=None, n_frames=1))


def test_mapping_descends_on_static_keyframe(one_static_frame):
    for seed in range(3):
        state, kf = seeded_state(one_static_frame, seed)
        losses = [map_iteration(state, kf, train_fu=False)["loss"] for _ in range(50)]
        assert losses[-1] < 0.01 * losses[0]
        assert min(losses[-10:]) == pytest.approx(losses[-1], rel=0.05)


@pytest.mark.xfail(reason="Adam is not a descent method: seed 0 overshoots once, +0.024 at step 9", strict=False)
def test_mapping_loss_monotone_over_50_iterations(one_static_frame):
    state, kf = seeded_state(one_static_frame, 0)
    losses = [map_iteration(state, kf, train_fu=False)["loss"] for _ in range(50)]
    assert np.diff(losses).max() <= 1e-6


def test_static_gt_run_recovers_trajectory(static_run, tmp_path):
    seq, _, result = static_run
    assert result.error is None and len(result.frames) == 10
    assert all(fr.pose is f.gt_pose for fr, f in zip(result.frames, seq.frames))
    assert ate_rmse(result.poses, [f.gt_pose for f in seq.frames]) == 0.0
    write_trajectory(tmp_path / "a.txt", result.stamps, result.poses)
    write_trajectory(tmp_path / "b.txt", [f.timestamp for f in seq.frames], [f.gt_pose for f in seq.frames])
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_static_run_masks_stay_small(static_run):
    seq, _, result = static_run
    assert np.mean([fr.eval_mask.mean() for fr in result.frames]) < 0.05


def test_deterministic_runs_identical(tiny_seq, tmp_path):
    cfg = FAST.replace(n_iters=3)
    a = run_sequential(tiny_seq, cfg)
    b = run_sequential(tiny_seq, cfg)
    write_trajectory(tmp_path / "a", a.stamps, a.poses)
    write_trajectory(tmp_path / "b", b.stamps, b.poses)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert len(a.snapshot) == len(b.snapshot)
    np.testing.assert_array_equal(a.state.octree.features, b.state.octree.features)
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa.eval_mask, fb.eval_mask)


def test_parallel_mode_matches_keyframes(tiny_seq):
    cfg = FAST.replace(n_iters=3, deterministic=False)
    par = run_parallel(tiny_seq, cfg)
    seq_ = run_sequential(tiny_seq, cfg.replace(deterministic=True))
    assert par.error is None
    assert [f.keyframe for f in par.frames] == [f.keyframe for f in seq_.frames]
    assert len(par.state.keyframes) == sum(f.keyframe for f in par.frames)
    assert [kf.seq for kf in par.state.keyframes] == list(range(len(par.state.keyframes)))


def test_parallel_mapper_failure_shuts_down(tiny_seq, monkeypatch):
    real = pipeline.mapper_step
    calls = []

    def flaky(kf, state):
        calls.append(threading.current_thread().name)
        if len(calls) == 2:
            raise RuntimeError("boom")
        return real(kf, state)

    monkeypatch.setattr(pipeline, "mapper_step", flaky)
    res = run_parallel(tiny_seq, FAST.replace(n_iters=2, deterministic=False))
    assert res.error and "boom" in res.error
    assert calls and set(calls) == {"mapper"}
    assert len(res.state.keyframes) == 1


def test_sequential_mapper_failure_keeps_partial_output(tiny_seq, monkeypatch):
    def broken(kf, state):
        raise RuntimeError("boom")

    monkeypatch.setattr(pipeline, "mapper_step", broken)
    res = run_sequential(tiny_seq, FAST)
    assert "boom" in res.error and len(res.frames) == 1
