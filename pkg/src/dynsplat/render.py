"""Forward splat rasterization, its reverse pass, and a brute-force per-pixel oracle.

The rendered depth is alpha-weighted and not normalized by the accumulated
opacity.  The ``trans`` buffer is the accumulated alpha sum_i sigma_i prod_j<i (1 - sigma_j),
so a fully covered pixel reads 1.  ``median`` is the depth of the first splat
at which the accumulated alpha reaches one half (0 where it never does).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    COV2D_DILATION,
    Z_NEAR,
    BehindCamera,
    Camera,
    Gaussian,
    GaussianSet,
    Pose,
    project_cov,
    project_point,
    quats_to_rots,
    quats_to_rots_grad,
    world_cov,
    world_covs,
)


class ContractViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class RenderSettings:
    skip_alpha: float = 1.0 / 255.0
    stop_trans: float = 1e-4
    cutoff: float | None = 3.0  # footprint radius in stddevs; None disables culling
    tile: int = 8
    workers: int = 1


PRODUCTION = RenderSettings()
EXACT = RenderSettings(skip_alpha=0.0, stop_trans=0.0, cutoff=None)


@dataclass
class ProjectedGaussians:
    """Screen-space Gaussians in front-to-back order (one row per splat)."""

    index: np.ndarray  # source ids
    mean2d: np.ndarray  # (n, 2) pixels
    cov2d: np.ndarray  # (n, 2, 2)
    conic: np.ndarray  # (n, 3) = (a, b, c) of the inverse covariance [[a, b], [b, c]]
    z: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    feat: np.ndarray
    radius: np.ndarray
    # kept for the reverse pass
    p_cam: np.ndarray = field(repr=False, default=None)
    M: np.ndarray = field(repr=False, default=None)  # J @ R_cw
    sigma3d: np.ndarray = field(repr=False, default=None)
    R: np.ndarray = field(repr=False, default=None)
    scale: np.ndarray = field(repr=False, default=None)
    rot: np.ndarray = field(repr=False, default=None)
    R_cw: np.ndarray = field(repr=False, default=None)
    n_source: int = 0

    def __len__(self) -> int:
        return self.index.shape[0]


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    trans: np.ndarray  # (H, W)
    feat: np.ndarray  # (H, W, N_l)
    median: np.ndarray | None = None  # (H, W), not differentiated


@dataclass
class GaussianGrads:
    """Gradients w.r.t. source Gaussian attributes, indexed like the input set."""

    mu: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    scale: np.ndarray
    rot: np.ndarray  # w.r.t. the unit quaternion
    feat: np.ndarray


def _as_set(gaussians) -> GaussianSet:
    if isinstance(gaussians, GaussianSet):
        return gaussians
    return GaussianSet.from_list(list(gaussians))


def prepare(gaussians, pose: Pose, cam: Camera, cutoff: float | None = 3.0,
            z_near: float = Z_NEAR, dilation: float = COV2D_DILATION) -> ProjectedGaussians:
    """Project, cull and depth-sort Gaussians for front-to-back blending.

    Entries behind the near plane are dropped.  With a finite ``cutoff`` the
    footprint radius is ``cutoff * sqrt(max eigenvalue)`` and splats whose
    footprint misses the image are dropped too.  Order is ascending depth with
    ties broken by source index.
    """
    gs = _as_set(gaussians)
    n = len(gs)
    feat_dim = gs.feat.shape[1] if gs.feat.ndim == 2 else 0
    R_cw, t_cw = pose.world_to_camera()
    p_cam = gs.mu @ R_cw.T + t_cw
    keep = p_cam[:, 2] > z_near
    idx = np.nonzero(keep)[0]
    p = p_cam[idx]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / z**2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / z**2
    M = J @ R_cw
    R = quats_to_rots(gs.rot[idx])
    sig = world_covs(gs.scale[idx], R)
    cov = M @ sig @ np.transpose(M, (0, 2, 1))
    cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
    cov[:, 0, 0] += dilation
    cov[:, 1, 1] += dilation
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    conic = np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], axis=1)
    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
    mid = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(mid**2 - det, 0.0))
    if cutoff is None:
        radius = np.full(idx.size, np.inf)
        onscreen = np.ones(idx.size, dtype=bool)
    else:
        radius = cutoff * np.sqrt(lam)
        onscreen = (
            (mean2d[:, 0] + radius > 0) & (mean2d[:, 0] - radius < cam.width)
            & (mean2d[:, 1] + radius > 0) & (mean2d[:, 1] - radius < cam.height)
        )
    sel = np.nonzero(onscreen)[0]
    order = sel[np.lexsort((idx[sel], z[sel]))]
    src = idx[order]
    return ProjectedGaussians(
        index=src,
        mean2d=mean2d[order],
        cov2d=cov[order],
        conic=conic[order],
        z=z[order],
        opacity=gs.opacity[src],
        color=gs.color[src],
        feat=gs.feat[src] if feat_dim else np.zeros((src.size, 0)),
        radius=radius[order],
        p_cam=p[order],
        M=M[order],
        sigma3d=sig[order],
        R=R[order],
        scale=gs.scale[src],
        rot=gs.rot[src],
        R_cw=R_cw,
        n_source=n,
    )


def _check_sorted(pg: ProjectedGaussians) -> None:
    if len(pg) < 2:
        return
    dz = np.diff(pg.z)
    bad = (dz < 0) | ((dz == 0) & (np.diff(pg.index) < 0))
    if np.any(bad):
        raise ContractViolation("projected Gaussians are not sorted front to back")


def _tiles(cam: Camera, tile: int):
    for y0 in range(0, cam.height, tile):
        for x0 in range(0, cam.width, tile):
            yield y0, min(y0 + tile, cam.height), x0, min(x0 + tile, cam.width)


def _tile_members(pg: ProjectedGaussians, y0, y1, x0, x1) -> np.ndarray:
    if len(pg) == 0:
        return np.zeros(0, dtype=np.int64)
    if np.isinf(pg.radius).all():
        return np.arange(len(pg))
    u, v, r = pg.mean2d[:, 0], pg.mean2d[:, 1], pg.radius
    hit = (u + r >= x0 + 0.5) & (u - r <= x1 - 0.5) & (v + r >= y0 + 0.5) & (v - r <= y1 - 0.5)
    return np.nonzero(hit)[0]


def _tile_alpha(pg: ProjectedGaussians, members, px, py, settings: RenderSettings):
    """Per (splat, pixel) blending weights for one tile."""
    mx = pg.mean2d[members, 0][:, None]
    my = pg.mean2d[members, 1][:, None]
    a = pg.conic[members, 0][:, None]
    b = pg.conic[members, 1][:, None]
    c = pg.conic[members, 2][:, None]
    dx = px[None, :] - mx
    dy = py[None, :] - my
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    G = np.exp(np.minimum(power, 0.0))
    sigma = pg.opacity[members][:, None] * G
    active = np.ones_like(sigma, dtype=bool)
    if settings.skip_alpha > 0:
        active &= sigma >= settings.skip_alpha
        sigma = np.where(active, sigma, 0.0)
    t_excl = np.empty_like(sigma)
    t_excl[0] = 1.0
    np.cumprod(1.0 - sigma[:-1], axis=0, out=t_excl[1:])
    if settings.stop_trans > 0:
        # the running product only falls, so entries past the stop stay inactive
        kept = t_excl >= settings.stop_trans
        if not kept.all():
            active &= kept
            sigma = np.where(active, sigma, 0.0)
    t_incl = t_excl * (1.0 - sigma)
    return dx, dy, G, sigma, active, t_incl, t_excl


def _pixel_centers(y0, y1, x0, x1):
    yy, xx = np.mgrid[y0:y1, x0:x1]
    return xx.ravel() + 0.5, yy.ravel() + 0.5


def render(projected: ProjectedGaussians, cam: Camera, settings: RenderSettings = PRODUCTION) -> RenderOutput:
    """Front-to-back blend sorted splats into color, depth, accumulated alpha and features."""
    _check_sorted(projected)
    H, W = cam.height, cam.width
    nf = projected.feat.shape[1]
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    trans = np.zeros((H, W))
    feat = np.zeros((H, W, nf))
    median = np.zeros((H, W))
    if len(projected) == 0:
        return RenderOutput(color, depth, trans, feat, median)

    def work(t):
        y0, y1, x0, x1 = t
        members = _tile_members(projected, y0, y1, x0, x1)
        if members.size == 0:
            return
        px, py = _pixel_centers(y0, y1, x0, x1)
        _, _, _, sigma, _, t_incl, t_excl = _tile_alpha(projected, members, px, py, settings)
        w = sigma * t_excl
        shape = (y1 - y0, x1 - x0)
        half = t_incl <= 0.5
        first = half.argmax(axis=0)
        median[y0:y1, x0:x1] = np.where(half.any(axis=0), projected.z[members][first], 0.0).reshape(shape)
        color[y0:y1, x0:x1] = (w.T @ projected.color[members]).reshape(*shape, 3)
        depth[y0:y1, x0:x1] = (w.T @ projected.z[members]).reshape(shape)
        trans[y0:y1, x0:x1] = w.sum(axis=0).reshape(shape)
        if nf:
            feat[y0:y1, x0:x1] = (w.T @ projected.feat[members]).reshape(*shape, nf)

    _run_tiles(work, cam, settings)
    return RenderOutput(color, depth, trans, feat, median)


def _run_tiles(work, cam: Camera, settings: RenderSettings) -> None:
    tiles = list(_tiles(cam, settings.tile))
    if settings.workers > 1:
        with ThreadPoolExecutor(settings.workers) as ex:
            list(ex.map(work, tiles))
    else:
        for t in tiles:
            work(t)


def render_backward(projected: ProjectedGaussians, cam: Camera, grad_color, grad_depth,
                    grad_trans=None, grad_feat=None, settings: RenderSettings = PRODUCTION) -> GaussianGrads:
    """Reverse pass of :func:`render` back to the source Gaussian attributes.

    Threshold masks (skip, early stop, footprint) are treated as constants.
    Returned arrays have one row per source Gaussian (``projected.n_source``);
    culled Gaussians receive zeros.
    """
    _check_sorted(projected)
    n = len(projected)
    nf = projected.feat.shape[1]
    H, W = cam.height, cam.width
    g_color = np.asarray(grad_color).reshape(H * W, 3) if grad_color is not None else np.zeros((H * W, 3))
    g_depth = np.asarray(grad_depth).reshape(H * W) if grad_depth is not None else np.zeros(H * W)
    g_trans = np.asarray(grad_trans).reshape(H * W) if grad_trans is not None else np.zeros(H * W)
    g_feat = np.asarray(grad_feat).reshape(H * W, nf) if grad_feat is not None else np.zeros((H * W, nf))
    G_all = np.concatenate([g_color, g_depth[:, None], g_trans[:, None], g_feat], axis=1).reshape(H, W, -1)
    X_all = np.concatenate([projected.color, projected.z[:, None], np.ones((n, 1)), projected.feat], axis=1)

    d_mean = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opac = np.zeros(n)
    d_X = np.zeros_like(X_all)

    def work(t):
        y0, y1, x0, x1 = t
        members = _tile_members(projected, y0, y1, x0, x1)
        if members.size == 0:
            return
        px, py = _pixel_centers(y0, y1, x0, x1)
        dx, dy, G, sigma, active, t_incl, t_excl = _tile_alpha(projected, members, px, py, settings)
        Gp = G_all[y0:y1, x0:x1].reshape(-1, G_all.shape[2])
        X = X_all[members]
        q = X @ Gp.T
        w = sigma * t_excl
        d_X[members] += w @ Gp
        a = q * w
        after = a.sum(axis=0)[None, :] - np.cumsum(a, axis=0)
        behind = np.divide(after, t_incl, out=np.zeros_like(after), where=t_incl > 0)
        d_sigma = np.where(active, t_excl * (q - behind), 0.0)
        d_opac[members] += (d_sigma * G).sum(axis=1)
        d_pow = d_sigma * sigma
        ca = projected.conic[members, 0][:, None]
        cb = projected.conic[members, 1][:, None]
        cc = projected.conic[members, 2][:, None]
        d_mean[members, 0] += (d_pow * (ca * dx + cb * dy)).sum(axis=1)
        d_mean[members, 1] += (d_pow * (cb * dx + cc * dy)).sum(axis=1)
        d_conic[members, 0] += -0.5 * (d_pow * dx * dx).sum(axis=1)
        d_conic[members, 1] += -(d_pow * dx * dy).sum(axis=1)
        d_conic[members, 2] += -0.5 * (d_pow * dy * dy).sum(axis=1)

    # tiles write to shared rows, keep this single-threaded
    _run_tiles(work, cam, RenderSettings(settings.skip_alpha, settings.stop_trans, settings.cutoff, settings.tile, 1))
    return projection_backward(projected, cam, d_mean, d_conic, d_opac, d_X[:, :3], d_X[:, 3], d_X[:, 5:])


def projection_backward(pg: ProjectedGaussians, cam: Camera, d_mean, d_conic, d_opac, d_color, d_z, d_feat) -> GaussianGrads:
    """Chain screen-space gradients through the EWA projection to world attributes."""
    n = len(pg)
    ns = pg.n_source
    nf = pg.feat.shape[1]
    out = GaussianGrads(np.zeros((ns, 3)), np.zeros(ns), np.zeros((ns, 3)), np.zeros((ns, 3)),
                        np.zeros((ns, 4)), np.zeros((ns, nf)))
    if n == 0:
        return out
    a, b, c = pg.conic[:, 0], pg.conic[:, 1], pg.conic[:, 2]
    Q = np.stack([np.stack([a, b], 1), np.stack([b, c], 1)], 1)
    GQ = np.zeros((n, 2, 2))
    GQ[:, 0, 0] = d_conic[:, 0]
    GQ[:, 0, 1] = GQ[:, 1, 0] = 0.5 * d_conic[:, 1]
    GQ[:, 1, 1] = d_conic[:, 2]
    d_cov = -Q @ GQ @ Q
    Mt = np.transpose(pg.M, (0, 2, 1))
    d_sig = Mt @ d_cov @ pg.M
    d_M = 2.0 * d_cov @ pg.M @ pg.sigma3d
    d_J = d_M @ pg.R_cw.T
    x, y, z = pg.p_cam[:, 0], pg.p_cam[:, 1], pg.p_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    dpx = d_J[:, 0, 2] * (-fx / z**2) + d_mean[:, 0] * fx / z
    dpy = d_J[:, 1, 2] * (-fy / z**2) + d_mean[:, 1] * fy / z
    dpz = (
        d_J[:, 0, 0] * (-fx / z**2) + d_J[:, 0, 2] * (2 * fx * x / z**3)
        + d_J[:, 1, 1] * (-fy / z**2) + d_J[:, 1, 2] * (2 * fy * y / z**3)
        - d_mean[:, 0] * fx * x / z**2 - d_mean[:, 1] * fy * y / z**2 + d_z
    )
    dp = np.stack([dpx, dpy, dpz], axis=1)
    d_mu = dp @ pg.R_cw
    d_sig = 0.5 * (d_sig + np.transpose(d_sig, (0, 2, 1)))
    RtGR = np.transpose(pg.R, (0, 2, 1)) @ d_sig @ pg.R
    d_scale = 2.0 * pg.scale * np.diagonal(RtGR, axis1=1, axis2=2)
    d_R = 2.0 * d_sig @ pg.R * (pg.scale**2)[:, None, :]
    d_q = quats_to_rots_grad(pg.rot, d_R)
    src = pg.index
    out.mu[src] = d_mu
    out.opacity[src] = d_opac
    out.color[src] = d_color
    out.scale[src] = d_scale
    out.rot[src] = d_q
    out.feat[src] = d_feat
    return out


def render_oracle(gaussians, pose: Pose, cam: Camera, pixel) -> tuple[np.ndarray, float, float, np.ndarray]:
    """Naive blending sum at one pixel over every Gaussian in front of the camera.

    ``pixel`` is (u, v) in integer pixel indices; the pixel center is used.
    No skip, early-stop or footprint thresholds apply.
    """
    gs = list(gaussians.to_list() if isinstance(gaussians, GaussianSet) else gaussians)
    pu, pv = pixel[0] + 0.5, pixel[1] + 0.5
    R_cw, t_cw = pose.world_to_camera()
    entries = []
    for i, g in enumerate(gs):
        try:
            u, v, z = project_point(g.mu, pose, cam)
        except BehindCamera:
            continue
        p_cam = R_cw @ np.asarray(g.mu, dtype=float) + t_cw
        cov = project_cov(world_cov(g.scale, g.rot), pose, cam, p_cam)
        d = np.array([pu - u, pv - v])
        sigma = g.opacity * float(np.exp(-0.5 * d @ np.linalg.solve(cov, d)))
        entries.append((z, i, sigma, g))
    entries.sort(key=lambda e: (e[0], e[1]))
    nf = len(gs[0].feat) if gs else 0
    C = np.zeros(3)
    F = np.zeros(nf)
    D = 0.0
    T = 0.0
    through = 1.0
    for z, _, sigma, g in entries:
        w = sigma * through
        C += w * np.asarray(g.color)
        D += w * z
        F += w * np.asarray(g.feat)
        T += w
        through *= 1.0 - sigma
    return C, D, T, F


def render_oracle_image(gaussians, pose: Pose, cam: Camera) -> RenderOutput:
    """The oracle's naive sum evaluated at every pixel center at once.

    Same projection helpers and ordering as :func:`render_oracle`; the loop
    runs over Gaussians with all pixels vectorized, so it stays cheap enough
    for bulk comparisons.
    """
    gs = list(gaussians.to_list() if isinstance(gaussians, GaussianSet) else gaussians)
    H, W = cam.height, cam.width
    vv, uu = np.mgrid[0:H, 0:W]
    pu, pv = uu + 0.5, vv + 0.5
    R_cw, t_cw = pose.world_to_camera()
    entries = []
    for i, g in enumerate(gs):
        try:
            u, v, z = project_point(g.mu, pose, cam)
        except BehindCamera:
            continue
        p_cam = R_cw @ np.asarray(g.mu, dtype=float) + t_cw
        entries.append((z, i, u, v, np.linalg.inv(project_cov(world_cov(g.scale, g.rot), pose, cam, p_cam)), g))
    entries.sort(key=lambda e: (e[0], e[1]))
    nf = len(gs[0].feat) if gs else 0
    C = np.zeros((H, W, 3))
    F = np.zeros((H, W, nf))
    D = np.zeros((H, W))
    T = np.zeros((H, W))
    through = np.ones((H, W))
    for z, _, u, v, A, g in entries:
        dx, dy = pu - u, pv - v
        sigma = g.opacity * np.exp(-0.5 * (A[0, 0] * dx * dx + (A[0, 1] + A[1, 0]) * dx * dy + A[1, 1] * dy * dy))
        w = sigma * through
        C += w[..., None] * np.asarray(g.color)
        D += w * z
        F += w[..., None] * np.asarray(g.feat)
        T += w
        through *= 1.0 - sigma
    return RenderOutput(C, D, T, F)


def blend_residual_product(projected: ProjectedGaussians, cam: Camera) -> np.ndarray:
    """Per-pixel prod_i (1 - sigma_i) over all splats (no thresholds)."""
    out = np.ones((cam.height, cam.width))
    for y0, y1, x0, x1 in _tiles(cam, 16):
        members = _tile_members(projected, y0, y1, x0, x1)
        if members.size == 0:
            continue
        px, py = _pixel_centers(y0, y1, x0, x1)
        _, _, _, sigma, _, _, _ = _tile_alpha(projected, members, px, py, EXACT)
        out[y0:y1, x0:x1] = np.prod(1.0 - sigma, axis=0).reshape(y1 - y0, x1 - x0)
    return out


def render_gaussians(gaussians, pose: Pose, cam: Camera, settings: RenderSettings = PRODUCTION) -> RenderOutput:
    return render(prepare(gaussians, pose, cam, cutoff=settings.cutoff), cam, settings)


def gaussian(mu, opacity, color, scale, rot=(0.0, 0.0, 0.0, 1.0), feat=None, feat_dim: int = 16) -> Gaussian:
    """Convenience constructor with array coercion."""
    return Gaussian(
        np.asarray(mu, dtype=float), float(opacity), np.asarray(color, dtype=float),
        np.asarray(scale, dtype=float), np.asarray(rot, dtype=float),
        np.zeros(feat_dim) if feat is None else np.asarray(feat, dtype=float),
    )
