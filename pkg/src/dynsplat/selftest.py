"""Quick oracle and gradient checks behind ``dynsplat selftest``."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .anchors import DecoderSet, Octree, bayes_update, bayes_update_product, decode, decode_backward, decoder_inputs
from .evaluation import ate_rmse
from .geometry import Camera, GaussianSet, Pose
from .losses import LossWeights, feature_loss, geo_loss, lift_features, ssim, total_loss
from .nn import (
    attribute_decoder,
    backward,
    feature_decoder,
    forward,
    grad_check,
    lifting_mlp,
    uncertainty_mlp,
)
from .render import EXACT, RenderOutput, blend_residual_product, prepare, render, render_backward, render_oracle_image
from .uncertainty import motion_mask, solve_sigma, tracking_objective, uncertainty_head_grads, uncertainty_loss

GRAD_TOL = 1e-4


@dataclass
class Check:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f} s)"


def random_scene(rng: np.random.Generator, max_gaussians: int = 64, feat_dim: int = 4, min_size: int = 8,
                 max_size: int = 32) -> tuple[GaussianSet, Camera]:
    W = int(rng.integers(min_size, max_size + 1))
    H = int(rng.integers(min_size, max_size + 1))
    f = 1.2 * W
    cam = Camera(f, f, W / 2, H / 2, W, H)
    n = int(rng.integers(1, max_gaussians + 1))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    gs = GaussianSet(
        rng.uniform([-1.0, -1.0, 1.5], [1.0, 1.0, 4.0], size=(n, 3)),
        rng.uniform(0.0, 0.99, n),
        rng.uniform(0.0, 1.0, (n, 3)),
        rng.uniform(0.02, 0.5, (n, 3)),
        q,
        rng.normal(size=(n, feat_dim)),
    )
    return gs, cam


def check_oracle(n_scenes: int = 200, seed: int = 0) -> tuple[Check, Check]:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst, ident = 0.0, 0.0
    for _ in range(n_scenes):
        gs, cam = random_scene(rng)
        pg = prepare(gs, Pose(), cam, cutoff=None)
        out = render(pg, cam, EXACT)
        ref = render_oracle_image(gs, Pose(), cam)
        worst = max(worst, *(float(np.abs(a - b).max()) for a, b in
                             ((out.color, ref.color), (out.depth, ref.depth), (out.trans, ref.trans), (out.feat, ref.feat))))
        ident = max(ident, float(np.abs(out.trans + blend_residual_product(pg, cam) - 1.0).max()))
    dt = time.perf_counter() - t0
    return (Check("renderer vs oracle", worst < 1e-6, f"max abs diff {worst:.2e} over {n_scenes} scenes", dt),
            Check("blending identity", ident < 1e-9, f"max |T + prod(1 - sigma) - 1| = {ident:.2e}", 0.0))


def mlp_makers():
    """Constructors for the seven networks at reduced widths, keyed by name."""
    return {
        "F_c": lambda r: attribute_decoder(9, 24, "sigmoid", r, name="F_c"),
        "F_a": lambda r: attribute_decoder(9, 8, "sigmoid", r, name="F_a"),
        "F_s": lambda r: attribute_decoder(9, 24, "softplus", r, name="F_s"),
        "F_q": lambda r: attribute_decoder(9, 32, "none", r, name="F_q"),
        "F_d": lambda r: feature_decoder(9, 8, 4, r),
        "F_m": lambda r: lifting_mlp(4, 6, r, hidden=16),
        "F_u": lambda r: uncertainty_mlp(6, r, hidden=16),
    }


KINK_MARGIN = 1e-3


def kink_margin(m, x) -> float:
    """Smallest |pre-activation| over the ReLU layers of ``m`` at input ``x``.

    Central differences straddle a ReLU kink when a pre-activation lies
    within about h of zero; gradient checks only sample points clear of that.
    """
    _, cache = forward(m, x)
    vals = [np.abs(z).min() for z, layer in zip(cache.pre, m.layers) if layer.act == "relu" and z.size]
    return float(min(vals)) if vals else np.inf


def _clear_input(m, rng, shape, scale=1.0, tries=200):
    for _ in range(tries):
        x = rng.normal(0.0, scale, shape)
        if kink_margin(m, x) > KINK_MARGIN:
            return x
    raise RuntimeError("could not sample a point away from ReLU kinks")


def mlp_gradient_error(make, rng: np.random.Generator, n_coords: int = 6) -> float:
    m = make(rng)
    for p in m.params():
        p += rng.normal(0.0, 0.1, p.shape)  # move biases off zero
    x = _clear_input(m, rng, (5, m.in_dim))
    w = rng.normal(size=(5, m.out_dim))

    def f(params):
        y, cache = forward(m, x)
        grads, gx = backward(m, cache, w)
        return float((y * w).sum()), grads

    return grad_check(f, m.params(), n_coords=n_coords, rng=rng)


def check_mlp_gradients(n_points: int = 3, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = max(mlp_gradient_error(make, rng) for make in mlp_makers().values() for _ in range(n_points))
    return Check("MLP gradients", worst < GRAD_TOL, f"max relative error {worst:.2e}", time.perf_counter() - t0)


# loss gradients ---------------------------------------------------------------------

def _image_pair(rng, H=8, W=8):
    a = rng.uniform(0.05, 0.95, (H, W, 3))
    b = np.clip(a + rng.normal(0.0, 0.2, a.shape), 0.0, 1.0)
    return a, b


def ssim_gradient_error(rng) -> float:
    a, b = _image_pair(rng)

    def f(ps):
        val, g = ssim(ps[0], b, with_grad=True)
        return val, [g]

    return grad_check(f, [a], n_coords=12, rng=rng)


def geo_gradient_error(rng) -> float:
    color, rgb = _image_pair(rng)
    depth = rng.uniform(1.0, 3.0, rgb.shape[:2])
    depth[rng.random(depth.shape) < 0.2] = 0.0
    depth_r = depth + rng.normal(0.0, 0.1, depth.shape)

    def f(ps):
        out = RenderOutput(ps[0], ps[1], np.ones(depth.shape), np.zeros(depth.shape + (0,)))
        g = geo_loss(out, rgb, depth)
        return g.value, [g.grad_color, g.grad_depth]

    return grad_check(f, [color, depth_r], n_coords=12, rng=rng)


def feature_gradient_error(rng) -> float:
    """L_d through the lifting network: w.r.t. rendered features and F_m."""
    f_m = lifting_mlp(4, 6, rng, hidden=16)
    F_low = _clear_input(f_m, rng, (6, 6, 4))
    F = rng.normal(size=(6, 6, 6))

    def f(ps):
        lifted, cache = lift_features(ps[0], f_m, return_cache=True)
        val, _, g_hat = feature_loss(F, lifted)
        g_params, g_low = backward(f_m, cache, g_hat)
        return val, [g_low] + g_params

    return grad_check(f, [F_low] + f_m.params(), n_coords=8, rng=rng)


def uncertainty_gradient_error(rng) -> float:
    """L_u w.r.t. sigma and w.r.t. the head parameters."""
    R = rng.uniform(0.0, 1.0, (6, 6))
    sigma = rng.uniform(0.2, 2.0, (6, 6))
    e1 = grad_check(lambda ps: (uncertainty_loss(R, ps[0])[0], [uncertainty_loss(R, ps[0])[1] / R.size]), [sigma],
                    n_coords=12, rng=rng)
    f_u = uncertainty_mlp(6, rng, hidden=16)
    F = _clear_input(f_u, rng, (6, 6, 6))
    keep = rng.random((6, 6)) < 0.7
    e2 = grad_check(lambda ps: uncertainty_head_grads(F, R, f_u, 0.4, keep), f_u.params(), n_coords=8, rng=rng)
    return max(e1, e2)


def total_gradient_error(rng) -> float:
    """Masked total loss w.r.t. render buffers, scales and F_m."""
    H, W = 8, 8
    color, rgb = _image_pair(rng, H, W)
    depth = rng.uniform(1.0, 3.0, (H, W))
    depth_r = depth + rng.normal(0.0, 0.1, depth.shape)
    f_m = lifting_mlp(4, 6, rng, hidden=16)
    feat = _clear_input(f_m, rng, (H, W, 4))
    F = rng.normal(size=(H, W, 6))
    static = rng.random((H, W)) < 0.7
    scales = rng.uniform(0.01, 0.2, (10, 3))
    w = LossWeights()

    def f(ps):
        out = RenderOutput(ps[0], ps[1], np.ones((H, W)), ps[2])
        tl = total_loss(out, rgb, depth, F, static, ps[3], w, f_m)
        return tl.value, [tl.grad_color, tl.grad_depth, tl.grad_feat_low, tl.grad_scale] + tl.grad_f_m

    return grad_check(f, [color, depth_r, feat, scales] + f_m.params(), n_coords=8, rng=rng)


def small_map(rng, k: int = 2, feat_dim: int = 4, n_low: int = 3, n_anchors: int = 4):
    """A handful of anchors in front of an 8x8 camera, with random decoders."""
    cam = Camera(8.0, 8.0, 4.0, 4.0, 8, 8)
    tree = Octree(0.25, 6, k=k, feat_dim=feat_dim)
    pts = np.column_stack([rng.uniform(-0.5, 0.5, n_anchors), rng.uniform(-0.5, 0.5, n_anchors),
                           rng.uniform(1.5, 2.5, n_anchors)])
    keys = tree.key_of(pts)
    _, first = np.unique(keys, return_index=True)
    keys, pts = keys[first], pts[first]
    tree.add(keys, tree.leaf_center(pts), rng.normal(0.0, 1.0, (keys.size, feat_dim)),
             rng.uniform(-0.5, 0.5, (keys.size, k, 3)), 0)
    dec = DecoderSet.create(feat_dim, k, n_low, rng, hidden=8)
    for m in dec.mlps:
        for p in m.params():
            p += rng.normal(0.0, 0.1, p.shape)
    return cam, tree, dec


def chain_gradient_error(rng) -> float:
    """Total loss through renderer and decoders to anchor features, offsets and decoder weights."""
    pose, t, w = Pose(), 0.3, LossWeights()
    for _ in range(200):
        cam, tree, dec = small_map(rng)
        f_m = lifting_mlp(dec.n_low, 6, rng, hidden=8)
        for p in f_m.params():
            p += rng.normal(0.0, 0.1, p.shape)
        x = decoder_inputs(tree, np.arange(len(tree)), pose.center(), t)
        feat = render(prepare(decode(tree, dec, pose, cam, t, cull=False), pose, cam, cutoff=None), cam, EXACT).feat
        if min(kink_margin(m, x) for m in dec.mlps) > KINK_MARGIN and kink_margin(f_m, feat) > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not sample a point away from ReLU kinks")
    H, W = cam.shape
    rgb = rng.uniform(0.0, 1.0, (H, W, 3))
    depth = rng.uniform(1.0, 3.0, (H, W))
    F = rng.normal(size=(H, W, 6))
    static = rng.random((H, W)) < 0.8

    def f(ps):
        gs, cache = decode(tree, dec, pose, cam, t, return_cache=True, cull=False)
        pg = prepare(gs, pose, cam, cutoff=None)
        out = render(pg, cam, EXACT)
        tl = total_loss(out, rgb, depth, F, static, gs.scale, w, f_m)
        gg = render_backward(pg, cam, tl.grad_color, tl.grad_depth, None, tl.grad_feat_low, EXACT)
        gg.scale = gg.scale + tl.grad_scale
        ag = decode_backward(tree, dec, cache, gg)
        return tl.value, [ag.features, ag.offsets] + [g for gl in ag.decoders for g in gl]

    params = [tree.features, tree.offsets] + [p for m in dec.mlps for p in m.params()]

    def bump(ps):
        for m in dec.mlps:
            m.version += 1  # parameters change in place between evaluations
        return f(ps)

    # the long chain carries about 1e-11 of round-off into each difference quotient, so
    # gradients below 1e-6 are compared in absolute terms
    return grad_check(bump, params, n_coords=4, rng=rng, floor=1e-6)


LOSS_CHECKS = {
    "SSIM": ssim_gradient_error,
    "L_g": geo_gradient_error,
    "L_d": feature_gradient_error,
    "L_u": uncertainty_gradient_error,
    "total L": total_gradient_error,
    "total L through renderer and decoders": chain_gradient_error,
}


def check_loss_gradients(n_points: int = 3, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    for name, fn in LOSS_CHECKS.items():
        t0 = time.perf_counter()
        worst = max(fn(rng) for _ in range(n_points))
        out.append(Check(f"{name} gradient", worst < GRAD_TOL, f"max relative error {worst:.2e}",
                         time.perf_counter() - t0))
    return out


def check_estimator(n: int = 1000, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    R = rng.uniform(0.0, 2.0, n)
    s = solve_sigma(R)
    grid = np.arange(1, 401) * 0.01
    best_grid = tracking_objective(R[:, None], grid[None, :]).min(axis=1)
    ok_min = bool(np.all(tracking_objective(R, s) <= best_grid + 1e-12))
    ok_mask = bool(np.array_equal(motion_mask(s), R > 0.25))
    return Check("closed-form uncertainty", ok_min and ok_mask,
                 f"minimum {'ok' if ok_min else 'violated'}, mask {'ok' if ok_mask else 'mismatch'}",
                 time.perf_counter() - t0)


def check_bayes(n: int = 1000, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.01, 0.99, (n, 3))
    a = bayes_update(bayes_update(p[:, 0], p[:, 1]), p[:, 2])
    b = bayes_update(bayes_update(p[:, 0], p[:, 2]), p[:, 1])
    lit = np.abs(bayes_update_product(p[:, 0], p[:, 1]) - bayes_update(p[:, 0], p[:, 1])).max()
    worked = abs(bayes_update(0.5, 0.7) - 0.7) + abs(bayes_update(0.6, 0.7) - 7 / 9)
    err = max(float(np.abs(a - b).max()), float(lit), worked)
    return Check("bayes update", err < 1e-12, f"max deviation {err:.2e}")


def check_ate(seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    gt = np.cumsum(rng.normal(0.0, 0.05, (1000, 3)), axis=0)
    noisy = ate_rmse(gt + rng.normal(0.0, 0.01, gt.shape), gt)
    ident = ate_rmse(gt, gt)
    ok = abs(noisy - math.sqrt(3.0)) < 0.1 and ident == 0.0
    return Check("ATE harness", ok, f"noise case {noisy:.3f} cm, identity {ident:.3g} cm")


def run_all(quick: bool = False) -> list[Check]:
    n = 40 if quick else 200
    checks = list(check_oracle(n))
    checks.append(check_mlp_gradients(1 if quick else 3))
    checks += check_loss_gradients(1 if quick else 3)
    checks += [check_estimator(), check_bayes(), check_ate()]
    return checks
