"""Multi-modal residuals, per-pixel uncertainty and motion masks.

Two uncertainty estimators live here.  The tracker uses a closed-form one:
minimizing 1/2 (R / s^2 + log s) per pixel gives s = sqrt(2 R), so no training
is involved.  The mapper trains a small head on the observed features with
the Gaussian negative log-likelihood R / (2 s^2) + lam3 log s.

Motion masks use True for dynamic pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Mlp, backward, forward

SIGMA_FLOOR = 1e-3
GATE_THRESHOLD = 0.1
RESIDUAL_WEIGHTS = (0.25, 0.7, 0.1)


@dataclass
class ResidualMap:
    R: np.ndarray
    color: np.ndarray
    depth: np.ndarray
    feature: np.ndarray
    gate: np.ndarray
    weights: tuple[float, float, float] = RESIDUAL_WEIGHTS


def box_filter3(depth: np.ndarray, zero_invalid: bool = True) -> np.ndarray:
    """3x3 mean with replicate padding.

    With ``zero_invalid`` the zeros are left out of each mean; a pixel whose
    whole neighborhood is invalid stays 0.
    """
    d = np.asarray(depth, dtype=np.float64)
    H, W = d.shape
    p = np.pad(d, 1, mode="edge")
    valid = (p > 0).astype(np.float64) if zero_invalid else np.ones_like(p)
    total = np.zeros((H, W))
    count = np.zeros((H, W))
    for dy in range(3):
        for dx in range(3):
            total += (p * valid)[dy : dy + H, dx : dx + W]
            count += valid[dy : dy + H, dx : dx + W]
    return np.divide(total, count, out=np.zeros((H, W)), where=count > 0)


def bilinear_upsample(feat: np.ndarray, H: int, W: int) -> np.ndarray:
    """Half-pixel-centered bilinear resampling of an (h, w, C) map to (H, W, C)."""
    f = np.asarray(feat, dtype=np.float64)
    squeeze = f.ndim == 2
    if squeeze:
        f = f[..., None]
    h, w = f.shape[:2]
    if (h, w) == (H, W):
        return f[..., 0].copy() if squeeze else f.copy()

    def axis(n_out, n_in):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, wy = axis(H, h)
    x0, x1, wx = axis(W, w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = f[y0][:, x0] * (1 - wx) + f[y0][:, x1] * wx
    bot = f[y1][:, x0] * (1 - wx) + f[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out[..., 0] if squeeze else out


def cosine_deficit(F: np.ndarray, G: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    dot = (F * G).sum(axis=-1)
    nf = np.maximum(np.linalg.norm(F, axis=-1), eps)
    ng = np.maximum(np.linalg.norm(G, axis=-1), eps)
    return 1.0 - dot / (nf * ng)


def residual_map(render, rgb: np.ndarray, depth: np.ndarray, features: np.ndarray | None,
                 lifted: np.ndarray | None, weights=RESIDUAL_WEIGHTS, literal_gate: bool = False) -> ResidualMap:
    """Gated weighted sum of color, smoothed-depth and capped feature-cosine residuals.

    ``features`` must already be at image resolution.  The gate keeps pixels
    whose accumulated alpha is at least 0.1; ``literal_gate`` flips it to keep
    pixels below 0.1 instead.
    """
    H, W = depth.shape
    if render.color.shape[:2] != (H, W) or rgb.shape[:2] != (H, W):
        raise ValueError("residual buffers have mismatched dimensions")
    w1, w2, w3 = weights
    color = np.abs(render.color - rgb).mean(axis=-1)
    smoothed = box_filter3(depth)
    depth_term = np.where(depth > 0, np.abs(render.depth - smoothed), 0.0)
    if features is not None and lifted is not None:
        if features.shape != lifted.shape:
            raise ValueError("feature maps have mismatched dimensions")
        feature = np.minimum(1.0, cosine_deficit(features, lifted))
    else:
        feature = np.zeros((H, W))
    gate = render.trans < GATE_THRESHOLD if literal_gate else render.trans >= GATE_THRESHOLD
    R = np.maximum(gate * (w1 * color + w2 * depth_term + w3 * feature), 0.0)
    return ResidualMap(R, color, depth_term, feature, gate, tuple(weights))


def solve_sigma(R) -> np.ndarray:
    """Per-pixel minimizer sqrt(2 R) of the training-free objective, floored."""
    R = np.asarray(R, dtype=np.float64)
    if np.any(R < 0):
        raise ValueError("residuals must be non-negative")
    return np.maximum(np.sqrt(2.0 * R), SIGMA_FLOOR)


def tracking_objective(R, sigma) -> np.ndarray:
    """Per-pixel 1/2 (R / sigma^2 + log sigma)."""
    return 0.5 * (np.asarray(R) / np.asarray(sigma) ** 2 + np.log(sigma))


_SQRT_HALF = np.sqrt(0.5)


def motion_mask(sigma) -> np.ndarray:
    """Dynamic where 2 sigma^2 > 1.

    Written as sigma > sqrt(1/2): sqrt is correctly rounded and monotone, so for
    sigma = sqrt(2 R) this is exactly R > 0.25, which squaring would not be.
    """
    return np.asarray(sigma) > _SQRT_HALF


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def iou_refine(mask: np.ndarray, instances, tau: float = 0.3) -> np.ndarray:
    """Union in every instance overlapping the mask with IoU above ``tau``."""
    out = np.array(mask, dtype=bool, copy=True)
    for inst in instances or ():
        inst = np.asarray(inst, dtype=bool)
        if inst.shape != out.shape:
            raise ValueError("instance mask has wrong dimensions")
        if iou(inst, mask) > tau:
            out |= inst
    return out


def predict_uncertainty(features: np.ndarray, f_u: Mlp, return_cache: bool = False):
    """Per-pixel sigma = F_u(F) + floor; the head ends in a softplus so sigma > 0."""
    if features.shape[-1] != f_u.in_dim:
        raise ValueError("feature channels do not match the uncertainty head")
    out, cache = forward(f_u, features)
    sigma = out[..., 0] + SIGMA_FLOOR
    return (sigma, cache) if return_cache else sigma


def uncertainty_loss(R, sigma, lam3: float = 0.4):
    """Mean of R / (2 sigma^2) + lam3 log sigma and the per-pixel d/dsigma.

    R is a constant here; nothing flows back into the residual.
    """
    R = np.asarray(R, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    per_pixel = R / (2.0 * sigma**2) + lam3 * np.log(sigma)
    grad = -R / sigma**3 + lam3 / sigma
    return float(per_pixel.mean()), grad


def uncertainty_head_grads(features: np.ndarray, R: np.ndarray, f_u: Mlp, lam3: float = 0.4,
                           pixel_mask: np.ndarray | None = None):
    """L_u and its gradients w.r.t. the uncertainty head parameters."""
    if pixel_mask is not None:
        features = features[pixel_mask]
        R = R[pixel_mask]
    sigma, cache = predict_uncertainty(features, f_u, return_cache=True)
    loss, g = uncertainty_loss(R, sigma, lam3)
    grads, _ = backward(f_u, cache, (g / g.size)[..., None])
    return loss, grads
