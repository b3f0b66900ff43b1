import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynsplat.anchors import (
    DecoderSet,
    Octree,
    OutsideOctree,
    SaturatedProbability,
    bayes_update,
    bayes_update_product,
    decode,
    grow,
    load_map,
    logit,
    map_from_bytes,
    map_to_bytes,
    morton,
    observe_anchors,
    prune,
    save_map,
    voxel_key,
)
from dynsplat.geometry import Camera, Pose

CAM = Camera(20.0, 20.0, 8.0, 6.0, 16, 12)
probs = st.floats(0.01, 0.99)


def test_voxel_key_examples():
    assert voxel_key([0.1, 0.1, 0.1], 3) == morton(np.array([[0, 0, 0]]), 3)[0] == 0
    assert voxel_key([7.9, 0.1, 0.1], 3) == morton(np.array([[7, 0, 0]]), 3)[0]
    assert voxel_key([2.1, 3.2, 5.3], 3) == voxel_key([2.9, 3.7, 5.01], 3)
    assert voxel_key([2.1, 3.2, 5.3], 3) != voxel_key([3.1, 3.2, 5.3], 3)
    with pytest.raises(OutsideOctree, match="outside octree"):
        voxel_key([8.0, 0, 0], 3)


@given(st.lists(st.integers(0, 7), min_size=3, max_size=3), st.lists(st.integers(0, 7), min_size=3, max_size=3))
def test_morton_is_injective(a, b):
    ka, kb = morton(np.array([a]), 3)[0], morton(np.array([b]), 3)[0]
    assert (ka == kb) == (a == b)


def test_bayes_examples():
    assert bayes_update(0.5, 0.7, 0.5) == pytest.approx(0.7, abs=1e-12)
    assert bayes_update(0.6, 0.7, 0.5) == pytest.approx(7 / 9, abs=1e-12)
    assert bayes_update(0.37, 0.5, 0.5) == pytest.approx(0.37, abs=1e-12)
    assert bayes_update(0.37, 0.2, 0.2) == pytest.approx(0.37, abs=1e-12)


@pytest.mark.parametrize("args", [(0.0, 0.5), (0.5, 1.0), (0.5, 0.5, 0.0)])
def test_bayes_saturated(args):
    with pytest.raises(SaturatedProbability, match="saturated probability"):
        bayes_update(*args)


def test_bayes_clamps():
    p = 0.5
    for _ in range(100):
        p = bayes_update(p, 0.99)
    assert p == pytest.approx(1 - 1e-6)


@given(probs, probs, probs)
def test_bayes_associative(p0, z1, z2):
    seq = bayes_update(bayes_update(p0, z1), z2)
    L = logit(p0) + logit(z1) + logit(z2)
    assert abs(seq - 1 / (1 + math.exp(-L))) < 1e-12
    assert abs(seq - bayes_update(bayes_update(p0, z2), z1)) < 1e-12


@given(probs, probs)
def test_bayes_literal_form_agrees(p0, z):
    assert abs(bayes_update(p0, z) - bayes_update_product(p0, z)) < 1e-12


def one_anchor_tree(z=2.0, leaf=0.1):
    tree = Octree(leaf_size=leaf, max_depth=8, k=4, feat_dim=6)
    depth = np.zeros(CAM.shape)
    depth[6, 8] = z
    static = np.ones(CAM.shape, bool)
    grow(tree, depth, Pose(), CAM, static, stride=1)
    return tree


def test_grow_single_pixel_one_anchor_at_leaf_center():
    tree = one_anchor_tree()
    assert len(tree) == 1
    assert np.allclose(tree.centers[0], tree.leaf_center(np.array([0.025, 0.025, 2.0]))[0])
    assert tree.p_dyn[0] == 0.5


def test_grow_all_dynamic_adds_nothing():
    tree = Octree(0.1, 8, k=4, feat_dim=6)
    assert grow(tree, np.full(CAM.shape, 2.0), Pose(), CAM, np.zeros(CAM.shape, bool)) == 0
    assert len(tree) == 0


def test_grow_idempotent():
    tree = Octree(0.1, 8, k=4, feat_dim=6)
    depth = np.full(CAM.shape, 2.0)
    static = np.ones(CAM.shape, bool)
    n = grow(tree, depth, Pose(), CAM, static)
    assert n > 0
    assert grow(tree, depth, Pose(), CAM, static) == 0
    assert len(tree) == n and len(set(tree.keys.tolist())) == n


def observe(tree, dynamic, pose=Pose()):
    mask = np.full(CAM.shape, dynamic)
    rendered = np.zeros(CAM.shape)
    rendered[6, 8] = 2.0
    return observe_anchors(tree, pose, CAM, mask, rendered)


def test_observe_behind_camera_untouched():
    tree = one_anchor_tree()
    flipped = Pose([0, 1, 0, 0], [0, 0, 0])
    assert observe(tree, True, flipped) == 0
    assert tree.p_dyn[0] == 0.5


def test_observe_three_hits():
    tree = one_anchor_tree()
    for _ in range(3):
        assert observe(tree, True) == 1
    assert tree.log_odds[0] == pytest.approx(3 * math.log(7 / 3))
    assert tree.p_dyn[0] == pytest.approx(0.927, abs=1e-3)


def test_observe_depth_gate():
    tree = one_anchor_tree()
    z = tree.centers[0, 2]
    assert observe_anchors(tree, Pose(), CAM, np.ones(CAM.shape, bool), np.full(CAM.shape, z + 0.29)) == 1
    rendered = np.full(CAM.shape, z + 0.31)
    assert observe_anchors(tree, Pose(), CAM, np.ones(CAM.shape, bool), rendered) == 0


def test_observe_alternating_symmetric_returns_to_prior():
    tree = one_anchor_tree()
    mask_dyn, mask_static = np.ones(CAM.shape, bool), np.zeros(CAM.shape, bool)
    rendered = np.full(CAM.shape, 2.0)
    for _ in range(5):
        observe_anchors(tree, Pose(), CAM, mask_dyn, rendered, p_hit=0.7, p_miss=0.3)
        observe_anchors(tree, Pose(), CAM, mask_static, rendered, p_hit=0.7, p_miss=0.3)
    assert abs(tree.log_odds[0]) < 1e-12


def test_observe_free_space_counts_as_hit():
    tree = one_anchor_tree()
    rendered = np.full(CAM.shape, 2.0)
    through = np.full(CAM.shape, 3.0)
    observe_anchors(tree, Pose(), CAM, np.zeros(CAM.shape, bool), rendered, through)
    assert tree.p_dyn[0] == pytest.approx(0.7)
    occluded = np.full(CAM.shape, 1.0)
    observe_anchors(tree, Pose(), CAM, np.ones(CAM.shape, bool), rendered, occluded)
    assert tree.p_dyn[0] == pytest.approx(0.7)


def test_prune_examples():
    tree = Octree(0.1, 8, k=4, feat_dim=6)
    grow(tree, np.full(CAM.shape, 2.0), Pose(), CAM, np.ones(CAM.shape, bool))
    n = len(tree)
    assert prune(tree, 0.85)[1] == 0
    tree.log_odds[0] = logit(0.93)
    before = tree.n_parameters()
    assert prune(tree, 0.85)[1] == 1
    assert len(tree) == n - 1 and tree.n_parameters() < before
    assert prune(tree, 0.85)[1] == 0
    assert all(tree.contains(k) for k in tree.keys)


def test_decode_counts_and_threshold():
    dec = DecoderSet.create(feat_dim=6, k=4, n_low=5, rng=np.random.default_rng(0))
    empty = Octree(0.1, 8, k=4, feat_dim=6)
    assert len(decode(empty, dec, Pose(), CAM, 0.0)) == 0
    tree = one_anchor_tree()
    gs = decode(tree, dec, Pose(), CAM, 0.0)
    assert len(gs) == 4 and gs.feat.shape == (4, 5)
    assert np.allclose(np.linalg.norm(gs.rot, axis=1), 1)
    assert np.all(gs.scale > 0) and np.all((gs.opacity > 0) & (gs.opacity < 1))
    assert np.allclose(gs.mu, tree.centers[0] + tree.offsets[0] * tree.leaf_size)
    tree.log_odds[0] = logit(0.9)
    assert len(decode(tree, dec, Pose(), CAM, 0.0)) == 0


def test_decode_depends_on_time():
    dec = DecoderSet.create(feat_dim=6, k=4, n_low=5, rng=np.random.default_rng(0))
    tree = one_anchor_tree()
    a = decode(tree, dec, Pose(), CAM, 0.1).color
    b = decode(tree, dec, Pose(), CAM, 0.6).color
    assert np.abs(a - b).max() > 1e-6


def test_decode_dimension_mismatch():
    dec = DecoderSet.create(feat_dim=8, k=4, n_low=5)
    with pytest.raises(ValueError):
        decode(one_anchor_tree(), dec, Pose(), CAM, 0.0)
    with pytest.raises(ValueError):
        DecoderSet(dec.f_a, dec.f_a, dec.f_s, dec.f_q, dec.f_d, 4, 5)


@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=30))
def test_pruned_anchors_never_decode(ps):
    tree = Octree(0.1, 8, k=2, feat_dim=3)
    grow(tree, np.full(CAM.shape, 2.0), Pose(), CAM, np.ones(CAM.shape, bool), stride=1)
    n = min(len(tree), len(ps))
    tree.log_odds[:n] = logit(np.array(ps[:n]))
    dynamic = tree.centers[tree.p_dyn > 0.85]
    prune(tree, 0.85)
    dec = DecoderSet.create(feat_dim=3, k=2, n_low=2)
    gs = decode(tree, dec, Pose(), CAM, 0.0, cull=False)
    assert len(gs) == 2 * len(tree)
    centers = gs.mu.reshape(-1, 2, 3) - tree.offsets * tree.leaf_size
    for c in dynamic:
        assert not np.any(np.all(np.isclose(centers, c), axis=-1))


def test_map_file_round_trip(tmp_path):
    tree = Octree(0.1, 8, k=4, feat_dim=6)
    grow(tree, np.full(CAM.shape, 2.0), Pose(), CAM, np.ones(CAM.shape, bool), frame_index=3)
    tree.log_odds[:] = np.linspace(-1, 1, len(tree))
    dec = DecoderSet.create(feat_dim=6, k=4, n_low=5)
    n = save_map(tmp_path / "m.upmap", tree, dec)
    assert (tmp_path / "m.upmap").read_bytes()[:5] == b"UPMAP"
    back, dec2, extra = load_map(tmp_path / "m.upmap")
    assert n == len(map_to_bytes(tree, dec)) and extra == []
    assert np.array_equal(back.keys, tree.keys) and np.array_equal(back.log_odds, tree.log_odds)
    assert np.array_equal(back.created_at, tree.created_at)
    assert np.allclose(back.features, tree.features, atol=1e-6)
    a = decode(tree, dec, Pose(), CAM, 0.2)
    b = decode(back, dec2, Pose(), CAM, 0.2)
    assert np.allclose(a.color, b.color, atol=1e-5)
    with pytest.raises(ValueError):
        map_from_bytes(b"NOPE")
