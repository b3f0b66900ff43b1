import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from dynsplat.evaluation import RankDeficient, ate_from_stamped, ate_rmse, umeyama_align


def cloud(rng, n=50):
    return rng.uniform(-2, 2, (n, 3))


def test_identity_alignment(rng):
    X = cloud(rng)
    R, t, s = umeyama_align(X, X)
    assert np.array_equal(R, np.eye(3)) and not t.any() and s == 1.0
    assert ate_rmse(X, X) == 0.0


def test_translation_offset(rng):
    X = cloud(rng)
    R, t, _ = umeyama_align(X + [1, 2, 3], X)
    np.testing.assert_allclose(t, [-1, -2, -3], atol=1e-12)
    assert ate_rmse(X + [1, 2, 3], X) < 1e-9


def test_rotation_recovered(rng):
    X = cloud(rng)
    Rz = Rotation.from_euler("z", 30, degrees=True).as_matrix()
    R, t, _ = umeyama_align(X @ Rz.T, X)
    np.testing.assert_allclose(R, Rz.T, atol=1e-12)
    resid = (X @ Rz.T) @ R.T + t - X
    assert np.abs(resid).max() < 1e-9


def test_scale_alignment(rng):
    X = cloud(rng)
    R, t, s = umeyama_align(0.5 * X, X, with_scale=True)
    assert s == pytest.approx(2.0)
    assert ate_rmse(0.5 * X, X, with_scale=True) < 1e-9


def test_degenerate_inputs(rng):
    with pytest.raises(RankDeficient, match="rank deficient"):
        umeyama_align(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(RankDeficient, match="rank deficient"):
        umeyama_align(line, line)
    with pytest.raises(ValueError):
        ate_rmse(np.zeros((2, 3)), np.zeros((2, 3)))


def test_single_outlier():
    rng = np.random.default_rng(5)
    gt = cloud(rng, 100)
    est = gt.copy()
    est[17, 0] += 0.10
    # alignment absorbs a little of the outlier, so slightly under 1 cm
    assert ate_rmse(est, gt) == pytest.approx(1.0, abs=0.02)


def test_isotropic_noise():
    rng = np.random.default_rng(9)
    gt = cloud(rng, 1000)
    est = gt + rng.normal(0, 0.01, gt.shape)
    assert ate_rmse(est, gt) == pytest.approx(np.sqrt(3), abs=0.1)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_rigid_invariance_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    gt = cloud(rng, 20)
    est = gt + rng.normal(0, 0.05, gt.shape)
    base = ate_rmse(est, gt)
    R = Rotation.random(random_state=seed).as_matrix()
    moved = est @ R.T + rng.normal(size=3)
    assert abs(ate_rmse(moved, gt) - base) < 1e-9
    assert abs(ate_rmse(gt, est) - base) < 1e-9


def test_stamped_association(rng):
    gt = cloud(rng, 10)
    stamps = np.arange(10) * 0.1
    est = gt.copy()
    est[3] += 0.2
    # one estimated pose without a ground-truth partner is ignored
    e_st = np.append(stamps + 0.004, 5.0)
    e_p = np.vstack([est, [[9, 9, 9]]])
    assert ate_from_stamped(e_st, e_p, stamps, gt) == pytest.approx(ate_rmse(est, gt))
