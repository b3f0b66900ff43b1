"""Probabilistic anchor octree: motion-probability updates, growth, pruning and decoding.

Each anchor sits at the center of one octree leaf and carries a latent
feature, k learnable offsets (in units of the leaf size) and the log-odds of
being dynamic.  Five small decoders turn (feature, camera distance, camera
direction, temporal embedding) into the k Gaussians of the anchor.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import minimum_filter

from .geometry import Z_NEAR, Camera, GaussianSet, Pose, back_project_depth
from .nn import (
    Mlp,
    attribute_decoder,
    backward,
    feature_decoder,
    forward,
    mlp_from_bytes,
    mlp_to_bytes,
    temporal_encode,
)

P_HIT = 0.7
P_MISS = 0.4
P_PRIOR = 0.5
PRUNE_THRESHOLD = 0.85
P_CLAMP = 1e-6
SCALE_FLOOR = 1e-3  # fraction of the leaf size


class OutsideOctree(ValueError):
    pass


class SaturatedProbability(ValueError):
    pass


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def _check_open(*ps):
    for p in ps:
        p = np.asarray(p)
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise SaturatedProbability("saturated probability")


def bayes_update(p_prev, p_obs, p_prior=P_PRIOR):
    """Log-odds occupancy update, clamped to (1e-6, 1 - 1e-6)."""
    _check_open(p_prev, p_obs, p_prior)
    L = logit(p_prev) + logit(p_obs) - logit(p_prior)
    p = 1.0 / (1.0 + np.exp(-L))
    p = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    return float(p) if np.ndim(p) == 0 else p


def bayes_update_product(p_prev, p_obs, p_prior=P_PRIOR):
    """The same update written as a product of odds ratios (reference form)."""
    _check_open(p_prev, p_obs, p_prior)
    ratio = ((1 - p_obs) / p_obs) * ((1 - p_prev) / p_prev) * (p_prior / (1 - p_prior))
    return 1.0 / (1.0 + ratio)


def voxel_coords(p, depth: int, extent: float, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    p = np.atleast_2d(np.asarray(p, dtype=np.float64)) - np.asarray(origin, dtype=np.float64)
    if np.any(p < 0) or np.any(p >= extent):
        raise OutsideOctree("outside octree")
    n = 1 << depth
    return np.minimum((p / (extent / n)).astype(np.int64), n - 1)


def morton(ijk: np.ndarray, depth: int) -> np.ndarray:
    ijk = np.atleast_2d(ijk).astype(np.int64)
    key = np.zeros(ijk.shape[0], dtype=np.int64)
    for b in range(depth):
        for axis in range(3):
            key |= ((ijk[:, axis] >> b) & 1) << (3 * b + axis)
    return key


def voxel_key(p, depth: int, extent: float = 8.0, origin=(0.0, 0.0, 0.0)):
    """Interleaved (Morton) key of the leaf containing ``p``."""
    keys = morton(voxel_coords(p, depth, extent, origin), depth)
    return int(keys[0]) if np.ndim(p) == 1 else keys


@dataclass
class Anchor:
    center: np.ndarray
    feature: np.ndarray
    offsets: np.ndarray
    log_odds: float
    created_at: int

    @property
    def p_dyn(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.log_odds)))


class Octree:
    """Leaf map of anchors stored as parallel arrays, one row per anchor."""

    def __init__(self, leaf_size: float = 0.1, max_depth: int = 10, origin=None, k: int = 8, feat_dim: int = 32):
        self.leaf_size = float(leaf_size)
        self.max_depth = int(max_depth)
        self.extent = self.leaf_size * (1 << self.max_depth)
        self.origin = np.full(3, -self.extent / 2) if origin is None else np.asarray(origin, dtype=np.float64)
        self.k = int(k)
        self.feat_dim = int(feat_dim)
        self.keys = np.zeros(0, dtype=np.int64)
        self.centers = np.zeros((0, 3))
        self.log_odds = np.zeros(0)
        self.features = np.zeros((0, self.feat_dim))
        self.offsets = np.zeros((0, self.k, 3))
        self.created_at = np.zeros(0, dtype=np.int64)
        self._index: dict[int, int] = {}

    def __len__(self) -> int:
        return self.keys.size

    @property
    def p_dyn(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.log_odds))

    def key_of(self, p) -> np.ndarray:
        return morton(voxel_coords(p, self.max_depth, self.extent, self.origin), self.max_depth)

    def leaf_center(self, p) -> np.ndarray:
        ijk = voxel_coords(p, self.max_depth, self.extent, self.origin)
        return self.origin + (ijk + 0.5) * self.leaf_size

    def contains(self, key: int) -> bool:
        return int(key) in self._index

    def anchor(self, i: int) -> Anchor:
        return Anchor(self.centers[i].copy(), self.features[i].copy(), self.offsets[i].copy(),
                      float(self.log_odds[i]), int(self.created_at[i]))

    def add(self, keys, centers, features, offsets, created_at: int) -> None:
        start = len(self)
        self.keys = np.concatenate([self.keys, keys])
        self.centers = np.concatenate([self.centers, centers])
        self.log_odds = np.concatenate([self.log_odds, np.zeros(len(keys))])
        self.features = np.concatenate([self.features, features])
        self.offsets = np.concatenate([self.offsets, offsets])
        self.created_at = np.concatenate([self.created_at, np.full(len(keys), created_at, dtype=np.int64)])
        for j, key in enumerate(keys):
            self._index[int(key)] = start + j

    def select(self, rows) -> None:
        self.keys = self.keys[rows]
        self.centers = self.centers[rows]
        self.log_odds = self.log_odds[rows]
        self.features = self.features[rows]
        self.offsets = self.offsets[rows]
        self.created_at = self.created_at[rows]
        self._index = {int(k): i for i, k in enumerate(self.keys)}

    def copy(self) -> "Octree":
        o = Octree(self.leaf_size, self.max_depth, self.origin.copy(), self.k, self.feat_dim)
        o.select_from(self)
        return o

    def select_from(self, other: "Octree") -> None:
        self.keys = other.keys.copy()
        self.centers = other.centers.copy()
        self.log_odds = other.log_odds.copy()
        self.features = other.features.copy()
        self.offsets = other.offsets.copy()
        self.created_at = other.created_at.copy()
        self._index = dict(other._index)

    def n_parameters(self) -> int:
        return len(self) * (self.feat_dim + 3 * self.k + 1)


def observe_anchors(octree: Octree, pose: Pose, cam: Camera, motion_mask: np.ndarray, rendered_depth: np.ndarray,
                    observed_depth: np.ndarray | None = None, p_hit: float = P_HIT, p_miss: float = P_MISS,
                    p_prior: float = P_PRIOR) -> int:
    """Fold one motion mask into the anchors' dynamic probabilities, in place.

    An anchor counts as observed when it projects into the image and its
    camera depth is within three leaf sizes of the rendered depth at that
    pixel.  It then gets ``p_hit`` if the pixel is dynamic, else ``p_miss``.

    With ``observed_depth``, anchors lying more than three leaf sizes behind a
    valid measurement are skipped (something in front hides them), and anchors
    more than three leaf sizes in front of every valid measurement in the 3x3
    neighborhood get ``p_hit`` whatever the mask says: the sensor sees through
    the space they occupy, so whatever they were built from has moved.  The
    neighborhood keeps silhouette edges of foreground objects out of that test.
    Returns the number of anchors updated.
    """
    if motion_mask.shape != cam.shape or rendered_depth.shape != cam.shape:
        raise ValueError("mask/depth dimensions do not match the camera")
    if len(octree) == 0:
        return 0
    R_cw, t_cw = pose.world_to_camera()
    pc = octree.centers @ R_cw.T + t_cw
    z = pc[:, 2]
    front = z > Z_NEAR
    u = np.full(z.shape, -1.0)
    v = np.full(z.shape, -1.0)
    u[front] = cam.fx * pc[front, 0] / z[front] + cam.cx
    v[front] = cam.fy * pc[front, 1] / z[front] + cam.cy
    inside = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    rows = np.nonzero(inside)[0]
    ui = u[rows].astype(np.int64)
    vi = v[rows].astype(np.int64)
    tol = 3.0 * octree.leaf_size
    seen = np.abs(rendered_depth[vi, ui] - z[rows]) < tol
    dyn = motion_mask[vi, ui].copy()
    if observed_depth is not None:
        d_obs = observed_depth[vi, ui]
        seen &= ~((d_obs > 0) & (d_obs < z[rows] - tol))
        nearest = minimum_filter(np.where(observed_depth > 0, observed_depth, np.inf), size=3, mode="nearest")
        through = np.isfinite(nearest[vi, ui]) & (nearest[vi, ui] > z[rows] + tol)
        seen |= through
        dyn |= through
    rows, dyn = rows[seen], dyn[seen]
    obs = np.where(dyn, logit(p_hit), logit(p_miss))
    L = octree.log_odds[rows] + obs - logit(p_prior)
    octree.log_odds[rows] = np.clip(L, logit(P_CLAMP), logit(1 - P_CLAMP))
    return int(rows.size)


def grow(octree: Octree, depth: np.ndarray, pose: Pose, cam: Camera, static_mask: np.ndarray,
         stride: int = 2, frame_index: int = 0, rng: np.random.Generator | None = None,
         feature_scale: float = 0.01) -> int:
    """Create anchors in empty leaves hit by back-projected static pixels.

    Every ``stride``-th pixel in both directions with valid depth and a static
    flag is lifted to the world; each previously empty leaf it lands in gets a
    fresh anchor.  Returns the number of anchors added.
    """
    rng = rng or np.random.default_rng(0)
    vv, uu = np.mgrid[0 : cam.height : stride, 0 : cam.width : stride]
    vv, uu = vv.ravel(), uu.ravel()
    ok = static_mask[vv, uu] & (depth[vv, uu] > 0)
    if not ok.any():
        return 0
    pts = back_project_depth(depth, pose, cam, np.stack([vv[ok], uu[ok]], axis=1))
    rel = pts - octree.origin
    inside = np.all((rel >= 0) & (rel < octree.extent), axis=1)
    pts = pts[inside]
    if pts.shape[0] == 0:
        return 0
    keys = octree.key_of(pts)
    _, first = np.unique(keys, return_index=True)
    first = np.sort(first)
    keys, pts = keys[first], pts[first]
    new = np.array([not octree.contains(k) for k in keys], dtype=bool)
    if not new.any():
        return 0
    keys, pts = keys[new], pts[new]
    n = keys.size
    centers = octree.leaf_center(pts)
    feats = rng.normal(0.0, feature_scale, size=(n, octree.feat_dim))
    offsets = rng.uniform(-0.5, 0.5, size=(n, octree.k, 3))
    octree.add(keys, centers, feats, offsets, frame_index)
    return n


def prune_mask(octree: Octree, p_threshold: float = PRUNE_THRESHOLD) -> np.ndarray:
    """Rows that survive pruning."""
    return octree.p_dyn <= p_threshold


def prune(octree: Octree, p_threshold: float = PRUNE_THRESHOLD) -> tuple[Octree, int]:
    """Delete anchors whose dynamic probability exceeds ``p_threshold``."""
    keep = prune_mask(octree, p_threshold)
    removed = int((~keep).sum())
    if removed:
        octree.select(np.nonzero(keep)[0])
    return octree, removed


# decoding -----------------------------------------------------------------------

@dataclass
class DecoderSet:
    f_c: Mlp
    f_a: Mlp
    f_s: Mlp
    f_q: Mlp
    f_d: Mlp
    k: int
    n_low: int

    def __post_init__(self):
        in_dim = self.f_c.in_dim
        expect = {"f_c": 3, "f_a": 1, "f_s": 3, "f_q": 4, "f_d": self.n_low}
        for name, width in expect.items():
            m = getattr(self, name)
            if m.in_dim != in_dim or m.out_dim != self.k * width:
                raise ValueError(f"{name} has dims {m.in_dim}->{m.out_dim}, expected {in_dim}->{self.k * width}")

    @property
    def mlps(self) -> list[Mlp]:
        return [self.f_c, self.f_a, self.f_s, self.f_q, self.f_d]

    @classmethod
    def create(cls, feat_dim: int = 32, k: int = 8, n_low: int = 16, rng=None, hidden: int = 32) -> "DecoderSet":
        rng = rng or np.random.default_rng(0)
        d = feat_dim + 1 + 3 + 2
        f_c = attribute_decoder(d, 3 * k, "sigmoid", rng, hidden, "F_c")
        f_a = attribute_decoder(d, k, "sigmoid", rng, hidden, "F_a")
        f_s = attribute_decoder(d, 3 * k, "softplus", rng, hidden, "F_s")
        f_q = attribute_decoder(d, 4 * k, "none", rng, hidden, "F_q")
        # start the rotation head at the identity quaternion, opacity fairly opaque
        f_q.layers[-1].b[3::4] = 1.0
        f_a.layers[-1].b[:] = 1.5
        f_d = feature_decoder(d, k, n_low, rng, hidden)
        return cls(f_c, f_a, f_s, f_q, f_d, k, n_low)

    def copy(self) -> "DecoderSet":
        return DecoderSet(*(m.copy() for m in self.mlps), self.k, self.n_low)


@dataclass
class DecodeCache:
    rows: np.ndarray  # anchor rows that produced Gaussians
    caches: list = field(default_factory=list)
    raw_rot: np.ndarray | None = None
    scale_pre: np.ndarray | None = None
    leaf: float = 0.1


def visible_anchors(octree: Octree, pose: Pose, cam: Camera, margin_leaves: float = 2.0) -> np.ndarray:
    """Rows whose center is in front of the camera and projects near the image."""
    if len(octree) == 0:
        return np.zeros(0, dtype=np.int64)
    R_cw, t_cw = pose.world_to_camera()
    pc = octree.centers @ R_cw.T + t_cw
    z = pc[:, 2]
    front = z > Z_NEAR
    zs = np.where(front, z, 1.0)
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    m = margin_leaves * octree.leaf_size * max(cam.fx, cam.fy) / zs + 2.0
    ok = front & (u > -m) & (u < cam.width + m) & (v > -m) & (v < cam.height + m)
    return np.nonzero(ok)[0]


def decoder_inputs(octree: Octree, rows, cam_center, t: float) -> np.ndarray:
    rel = cam_center[None, :] - octree.centers[rows]
    dist = np.linalg.norm(rel, axis=1, keepdims=True)
    direction = rel / np.maximum(dist, 1e-12)
    emb = np.broadcast_to(temporal_encode(t), (len(rows), 2))
    return np.concatenate([octree.features[rows], dist, direction, emb], axis=1)


def decode(octree: Octree, decoders: DecoderSet, pose: Pose, cam: Camera, t: float,
           p_threshold: float = PRUNE_THRESHOLD, return_cache: bool = False, cull: bool = True):
    """Decode the k Gaussians of every visible, non-dynamic anchor.

    With ``cull=False`` every non-dynamic anchor is decoded, which is what a
    map snapshot for nearby viewpoints needs.
    """
    if decoders.k != octree.k:
        raise ValueError("decoder k does not match the octree")
    if decoders.f_c.in_dim != octree.feat_dim + 6:
        raise ValueError("decoder input width does not match the anchor features")
    rows = visible_anchors(octree, pose, cam) if cull else np.arange(len(octree))
    rows = rows[octree.p_dyn[rows] <= p_threshold]
    k, nl, leaf = decoders.k, decoders.n_low, octree.leaf_size
    if rows.size == 0:
        gs = GaussianSet.empty(nl)
        return (gs, DecodeCache(rows, leaf=leaf)) if return_cache else gs
    x = decoder_inputs(octree, rows, pose.center(), t)
    outs, caches = zip(*(forward(m, x) for m in decoders.mlps))
    a = rows.size
    color = outs[0].reshape(a * k, 3)
    opacity = outs[1].reshape(a * k)
    scale_pre = outs[2].reshape(a * k, 3)
    raw_rot = outs[3].reshape(a * k, 4)
    feat = outs[4].reshape(a * k, nl)
    rot = raw_rot / np.maximum(np.linalg.norm(raw_rot, axis=1, keepdims=True), 1e-12)
    scale = leaf * (scale_pre + SCALE_FLOOR)
    mu = (octree.centers[rows][:, None, :] + octree.offsets[rows] * leaf).reshape(a * k, 3)
    gs = GaussianSet(mu, opacity, color, scale, rot, feat)
    if return_cache:
        return gs, DecodeCache(rows, list(caches), raw_rot, scale_pre, leaf)
    return gs


@dataclass
class AnchorGrads:
    features: np.ndarray  # (A, feat_dim) over all anchors
    offsets: np.ndarray  # (A, k, 3)
    decoders: list[list[np.ndarray]]  # per decoder, ordered like Mlp.params()


def decode_backward(octree: Octree, decoders: DecoderSet, cache: DecodeCache, g) -> AnchorGrads:
    """Chain Gaussian-attribute gradients into anchor features, offsets and decoders.

    ``g`` holds gradients w.r.t. the decoded set (mu, opacity, color, scale,
    unit rot, feat) in decode order.
    """
    A = len(octree)
    k = decoders.k
    out = AnchorGrads(np.zeros((A, octree.feat_dim)), np.zeros((A, k, 3)),
                      [[np.zeros_like(p) for p in m.params()] for m in decoders.mlps])
    rows = cache.rows
    if rows.size == 0:
        return out
    a = rows.size
    raw = cache.raw_rot
    nrm = np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-12)
    q = raw / nrm
    g_raw = (g.rot - q * (q * g.rot).sum(1, keepdims=True)) / nrm
    heads = [
        g.color.reshape(a, -1),
        g.opacity.reshape(a, -1),
        (g.scale * cache.leaf).reshape(a, -1),
        g_raw.reshape(a, -1),
        g.feat.reshape(a, -1),
    ]
    g_in = np.zeros((a, decoders.f_c.in_dim))
    for j, (m, c, gh) in enumerate(zip(decoders.mlps, cache.caches, heads)):
        grads, gi = backward(m, c, gh)
        out.decoders[j] = grads
        g_in += gi
    out.features[rows] = g_in[:, : octree.feat_dim]
    out.offsets[rows] = g.mu.reshape(a, k, 3) * cache.leaf
    return out


# map file -----------------------------------------------------------------------

_MAP_MAGIC = b"UPMAP"


def map_to_bytes(octree: Octree, decoders: DecoderSet, extra: list[Mlp] = ()) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAP_MAGIC)
    buf.write(struct.pack("<3dd", *octree.origin, octree.leaf_size))
    buf.write(struct.pack("<IIIII", octree.max_depth, octree.k, octree.feat_dim, decoders.n_low, len(octree)))
    for i in range(len(octree)):
        buf.write(struct.pack("<q3ddq", int(octree.keys[i]), *octree.centers[i], float(octree.log_odds[i]),
                              int(octree.created_at[i])))
        buf.write(octree.features[i].astype("<f4").tobytes())
        buf.write(octree.offsets[i].astype("<f4").tobytes())
    mlps = decoders.mlps + list(extra)
    buf.write(struct.pack("<I", len(mlps)))
    for m in mlps:
        buf.write(mlp_to_bytes(m))
    return buf.getvalue()


def map_from_bytes(data: bytes) -> tuple[Octree, DecoderSet, list[Mlp]]:
    if data[:5] != _MAP_MAGIC:
        raise ValueError("not a UPMAP file")
    pos = 5
    ox, oy, oz, leaf = struct.unpack_from("<3dd", data, pos)
    pos += 32
    max_depth, k, feat_dim, n_low, n = struct.unpack_from("<IIIII", data, pos)
    pos += 20
    tree = Octree(leaf, max_depth, np.array([ox, oy, oz]), k, feat_dim)
    keys, centers, lo, created, feats, offs = [], [], [], [], [], []
    for _ in range(n):
        key, cx, cy, cz, L, t0 = struct.unpack_from("<q3ddq", data, pos)
        pos += 48
        keys.append(key)
        centers.append((cx, cy, cz))
        lo.append(L)
        created.append(t0)
        feats.append(np.frombuffer(data, "<f4", feat_dim, pos).astype(np.float64))
        pos += 4 * feat_dim
        offs.append(np.frombuffer(data, "<f4", 3 * k, pos).astype(np.float64).reshape(k, 3))
        pos += 12 * k
    if n:
        tree.keys = np.array(keys, dtype=np.int64)
        tree.centers = np.array(centers)
        tree.log_odds = np.array(lo)
        tree.created_at = np.array(created, dtype=np.int64)
        tree.features = np.array(feats)
        tree.offsets = np.array(offs)
        tree._index = {int(kk): i for i, kk in enumerate(tree.keys)}
    (n_mlp,) = struct.unpack_from("<I", data, pos)
    pos += 4
    mlps = []
    for _ in range(n_mlp):
        m, pos = mlp_from_bytes(data, pos)
        mlps.append(m)
    names = ["F_c", "F_a", "F_s", "F_q", "F_d"]
    for m, name in zip(mlps, names):
        m.name = name
    decoders = DecoderSet(*mlps[:5], k, n_low)
    return tree, decoders, mlps[5:]


def save_map(path, octree: Octree, decoders: DecoderSet, extra: list[Mlp] = ()) -> int:
    data = map_to_bytes(octree, decoders, extra)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_map(path):
    with open(path, "rb") as fh:
        return map_from_bytes(fh.read())
