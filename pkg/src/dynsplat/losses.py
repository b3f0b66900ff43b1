"""Mapping losses with analytic gradients, and image metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .nn import Mlp, backward, forward

C1 = 0.01**2
C2 = 0.03**2
PSNR_INF = math.inf


class EmptyEvaluationRegion(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.8  # L2 vs SSIM mix
    lam1: float = 0.6  # photometric
    lam2: float = 1.0  # depth
    lam3: float = 0.4  # uncertainty regularizer
    lam4: float = 0.01  # distillation
    lam5: float = 0.01  # mean scale

    def __post_init__(self):
        vals = (self.lam, self.lam1, self.lam2, self.lam3, self.lam4, self.lam5)
        if min(vals) < 0 or self.lam > 1:
            raise ValueError("loss weights must be non-negative with lam in [0, 1]")


def _gauss_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _blur(x: np.ndarray) -> np.ndarray:
    # zero padding; the kernel is symmetric so this operator is its own adjoint
    y = correlate1d(x, _KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(y, _KERNEL, axis=1, mode="constant", cval=0.0)


def _ssim_parts(a, b):
    mu_a, mu_b = _blur(a), _blur(b)
    e_aa, e_bb, e_ab = _blur(a * a), _blur(b * b), _blur(a * b)
    A1 = 2 * mu_a * mu_b + C1
    A2 = 2 * (e_ab - mu_a * mu_b) + C2
    B1 = mu_a**2 + mu_b**2 + C1
    B2 = (e_aa - mu_a**2) + (e_bb - mu_b**2) + C2
    S = A1 * A2 / (B1 * B2)
    return S, (mu_a, mu_b, A1, A2, B1, B2)


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel, per-channel SSIM (11x11 Gaussian window, sigma 1.5)."""
    return _ssim_parts(np.asarray(a, float), np.asarray(b, float))[0]


def ssim_map_backward(a, b, weight) -> np.ndarray:
    """Gradient of sum(weight * ssim_map(a, b)) w.r.t. ``a``."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    S, (mu_a, mu_b, A1, A2, B1, B2) = _ssim_parts(a, b)
    d = B1 * B2
    dA1 = weight * A2 / d
    dA2 = weight * A1 / d
    dB1 = -weight * S / B1
    dB2 = -weight * S / B2
    g_mu = dA1 * 2 * mu_b - dA2 * 2 * mu_b + dB1 * 2 * mu_a - dB2 * 2 * mu_a
    g_eab = 2 * dA2
    g_eaa = dB2
    return _blur(g_mu) + 2 * a * _blur(g_eaa) + b * _blur(g_eab)


def ssim(a, b, with_grad: bool = False):
    """Mean SSIM over channels and pixels; optionally its gradient w.r.t. ``a``."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError("ssim inputs have different shapes")
    S = ssim_map(a, b)
    val = float(S.mean())
    if not with_grad:
        return val
    return val, ssim_map_backward(a, b, np.full(S.shape, 1.0 / S.size))


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    return PSNR_INF if mse == 0 else 10.0 * math.log10(1.0 / mse)


def masked_psnr(a, b, dynamic_mask) -> float:
    """PSNR over pixels outside ``dynamic_mask``."""
    static = ~np.asarray(dynamic_mask, dtype=bool)
    if not static.any():
        raise EmptyEvaluationRegion("empty evaluation region")
    diff = (np.asarray(a, float) - np.asarray(b, float))[static]
    mse = float(np.mean(diff**2))
    return PSNR_INF if mse == 0 else 10.0 * math.log10(1.0 / mse)


@dataclass
class GeoLoss:
    value: float
    per_pixel: np.ndarray
    grad_color: np.ndarray
    grad_depth: np.ndarray


def geo_map(color, depth_r, rgb, depth, w: LossWeights = LossWeights()) -> np.ndarray:
    """Per-pixel geometric loss without gradients."""
    dc = color - rgb
    dd = np.where(depth > 0, depth_r - depth, 0.0)
    S = ssim_map(color, rgb)
    return w.lam1 * (w.lam * (dc**2).sum(-1) + (1 - w.lam) * (1 - S.mean(-1))) + w.lam2 * dd**2


def _geo_terms(color, depth_r, rgb, depth, w: LossWeights, pixel_weight):
    """Per-pixel geometric loss and gradients of sum(pixel_weight * map)."""
    dc = color - rgb
    dd = np.where(depth > 0, depth_r - depth, 0.0)
    per_pixel = geo_map(color, depth_r, rgb, depth, w)
    pw = pixel_weight
    g_color = 2 * w.lam1 * w.lam * dc * pw[..., None]
    ssim_w = np.repeat((-w.lam1 * (1 - w.lam) / 3.0 * pw)[..., None], 3, axis=-1)
    g_color = g_color + ssim_map_backward(color, rgb, ssim_w)
    g_depth = 2 * w.lam2 * dd * pw
    return per_pixel, g_color, g_depth


def geo_loss(render, rgb, depth, weights: LossWeights = LossWeights()) -> GeoLoss:
    """Mean over pixels of lam1 (lam |dC|^2 + (1-lam)(1-SSIM)) + lam2 dD^2.

    Pixels with zero observed depth get no depth term.
    """
    if render.color.shape != rgb.shape or render.depth.shape != depth.shape:
        raise ValueError("render and frame dimensions differ")
    pw = np.full(depth.shape, 1.0 / depth.size)
    per_pixel, gc, gd = _geo_terms(render.color, render.depth, rgb, depth, weights, pw)
    return GeoLoss(float(per_pixel.mean()), per_pixel, gc, gd)


def feature_loss(F, F_hat, eps: float = 1e-8, pixel_weight=None):
    """Mean per-pixel cosine deficit 1 - cos(F, F_hat) and its gradient w.r.t. F_hat.

    Returns ``(value, per_pixel, grad)``.  With ``pixel_weight`` the value is
    the weighted sum instead of the mean.
    """
    F = np.asarray(F, float)
    G = np.asarray(F_hat, float)
    if F.shape != G.shape:
        raise ValueError("feature maps differ in shape")
    nf = np.maximum(np.linalg.norm(F, axis=-1), eps)[..., None]
    ng = np.maximum(np.linalg.norm(G, axis=-1), eps)[..., None]
    cos = (F * G).sum(-1, keepdims=True) / (nf * ng)
    per_pixel = 1.0 - cos[..., 0]
    if pixel_weight is None:
        pixel_weight = np.full(per_pixel.shape, 1.0 / per_pixel.size)
    grad = -(F / (nf * ng) - cos * G / ng**2) * pixel_weight[..., None]
    return float((per_pixel * pixel_weight).sum()), per_pixel, grad


def lift_features(F_low, f_m: Mlp, return_cache: bool = False):
    """Per-pixel lifting of rendered low-dimensional features to the backbone width."""
    if F_low.shape[-1] != f_m.in_dim:
        raise ValueError("rendered feature width does not match the lifting network")
    out, cache = forward(f_m, F_low)
    return (out, cache) if return_cache else out


@dataclass
class TotalLoss:
    value: float
    geo: float
    feat: float
    scale: float
    grad_color: np.ndarray
    grad_depth: np.ndarray
    grad_feat_low: np.ndarray
    grad_scale: np.ndarray
    grad_f_m: list[np.ndarray]
    grad_f_u: list[np.ndarray] = field(default_factory=list)
    lifted: np.ndarray | None = None


def total_loss(render, rgb, depth, F, static_mask, scales, weights: LossWeights, f_m: Mlp,
               f_u: Mlp | None = None) -> TotalLoss:
    """Masked mapping loss M (L_g + lam4 L_d) + lam5 * mean scale.

    ``static_mask`` is True for pixels that take part.  Per-pixel terms are
    averaged over those pixels.  The uncertainty head is never reached from
    this loss; if ``f_u`` is passed its gradient is returned as exact zeros.
    """
    mask = np.asarray(static_mask, dtype=bool)
    n_in = int(mask.sum())
    pw = mask / n_in if n_in else np.zeros(mask.shape)
    per_geo, g_color, g_depth = _geo_terms(render.color, render.depth, rgb, depth, weights, pw)
    geo = float((per_geo * pw).sum())
    g_low = np.zeros_like(render.feat)
    g_fm = [np.zeros_like(p) for p in f_m.params()]
    feat_val = 0.0
    lifted = None
    if F is not None:
        lifted, cache = lift_features(render.feat, f_m, return_cache=True)
        feat_val, _, g_hat = feature_loss(F, lifted, pixel_weight=pw)
        g_fm, g_low = backward(f_m, cache, weights.lam4 * g_hat)
    scales = np.asarray(scales, float)
    scale_val = float(scales.mean()) if scales.size else 0.0
    g_scale = np.full(scales.shape, weights.lam5 / scales.size) if scales.size else np.zeros(scales.shape)
    value = geo + weights.lam4 * feat_val + weights.lam5 * scale_val
    g_fu = [np.zeros_like(p) for p in f_u.params()] if f_u is not None else []
    return TotalLoss(value, geo, feat_val, scale_val, g_color, g_depth, g_low, g_scale, g_fm, g_fu, lifted)
