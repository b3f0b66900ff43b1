"""Camera, pose and Gaussian value types plus the projective geometry they share.

Quaternions are stored as (qx, qy, qz, qw), the TUM trajectory order.  Poses
are camera-to-world transforms.  Everything is float64.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

Z_NEAR = 0.01
COV2D_DILATION = 0.3


class BehindCamera(ValueError):
    """Raised when a point lies at or in front of the near plane's wrong side."""


class DegenerateCovariance(ValueError):
    pass


class ProjectionDegenerate(ValueError):
    pass


class QuaternionNormWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        if not self.depth_scale > 0:
            raise ValueError("depth_scale must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def quat_to_rot(q) -> np.ndarray:
    """Rotation matrix of a quaternion given as (qx, qy, qz, qw).

    A non-unit input is normalized; a QuaternionNormWarning is emitted when its
    norm is off by more than 1e-3.
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    if abs(n - 1.0) > 1e-3:
        warnings.warn(f"quaternion norm {n:.6g} normalized", QuaternionNormWarning, stacklevel=2)
    x, y, z, w = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quats_to_rots(q: np.ndarray) -> np.ndarray:
    """Batched quat_to_rot for unit quaternions of shape (n, 4)."""
    x, y, z, w = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quats_to_rots_grad(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. rotation matrices back onto unit quaternions (n, 4)."""
    x, y, z, w = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = dR
    gx = 2 * (
        g[:, 0, 1] * y + g[:, 0, 2] * z + g[:, 1, 0] * y - 2 * g[:, 1, 1] * x
        - g[:, 1, 2] * w + g[:, 2, 0] * z + g[:, 2, 1] * w - 2 * g[:, 2, 2] * x
    )
    gy = 2 * (
        -2 * g[:, 0, 0] * y + g[:, 0, 1] * x + g[:, 0, 2] * w + g[:, 1, 0] * x
        + g[:, 1, 2] * z - g[:, 2, 0] * w + g[:, 2, 1] * z - 2 * g[:, 2, 2] * y
    )
    gz = 2 * (
        -2 * g[:, 0, 0] * z - g[:, 0, 1] * w + g[:, 0, 2] * x + g[:, 1, 0] * w
        - 2 * g[:, 1, 1] * z + g[:, 1, 2] * y + g[:, 2, 0] * x + g[:, 2, 1] * y
    )
    gw = 2 * (
        -g[:, 0, 1] * z + g[:, 0, 2] * y + g[:, 1, 0] * z - g[:, 1, 2] * x
        - g[:, 2, 0] * y + g[:, 2, 1] * x
    )
    return np.stack([gx, gy, gz, gw], axis=1)


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Quaternion (qx, qy, qz, qw) of a rotation matrix, with qw >= 0."""
    from scipy.spatial.transform import Rotation

    q = Rotation.from_matrix(R).as_quat()
    return q if q[3] >= 0 else -q


def skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"pose quaternion not unit (norm {n})")
        # renormalize to the stated 1e-9 tolerance
        object.__setattr__(self, "rotation", q / n)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(rot_to_quat(T[:3, :3]), T[:3, 3].copy())

    @property
    def R(self) -> np.ndarray:
        return quat_to_rot(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        R = self.R
        return Pose.from_matrix(np.block([[R.T, (-R.T @ self.translation)[:, None]], [np.zeros((1, 3)), np.ones((1, 1))]]))

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose.from_matrix(self.matrix() @ other.matrix())

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """(R_cw, t_cw) such that p_cam = R_cw @ p_world + t_cw."""
        R = self.R
        return R.T, -R.T @ self.translation

    def transform(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p) @ self.R.T + self.translation

    def center(self) -> np.ndarray:
        return self.translation

    def perturb(self, xi) -> "Pose":
        """Right-perturb by a tangent vector (tx, ty, tz, rx, ry, rz) in the camera frame."""
        xi = np.asarray(xi, dtype=np.float64)
        dT = np.eye(4)
        dT[:3, :3] = so3_exp(xi[3:])
        dT[:3, 3] = xi[:3]
        return Pose.from_matrix(self.matrix() @ dT)


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation distance in m, rotation angle in rad) between two poses."""
    dt = float(np.linalg.norm(a.translation - b.translation))
    Rd = a.R.T @ b.R
    c = np.clip((np.trace(Rd) - 1.0) / 2.0, -1.0, 1.0)
    return dt, float(np.arccos(c))


@dataclass(frozen=True)
class Gaussian:
    mu: np.ndarray
    opacity: float
    color: np.ndarray
    scale: np.ndarray
    rot: np.ndarray
    feat: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity outside [0, 1]")
        if np.any(np.asarray(self.scale) <= 0):
            raise DegenerateCovariance("degenerate covariance")


@dataclass
class GaussianSet:
    """Struct-of-arrays Gaussian collection used by the renderer."""

    mu: np.ndarray  # (n, 3)
    opacity: np.ndarray  # (n,)
    color: np.ndarray  # (n, 3)
    scale: np.ndarray  # (n, 3)
    rot: np.ndarray  # (n, 4) unit quaternions
    feat: np.ndarray  # (n, N_l)

    def __len__(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def empty(cls, feat_dim: int = 16) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.ones((0, 3)),
                   np.tile([0.0, 0.0, 0.0, 1.0], (0, 1)), np.zeros((0, feat_dim)))

    @classmethod
    def from_list(cls, gaussians: list[Gaussian], feat_dim: int | None = None) -> "GaussianSet":
        if not gaussians:
            return cls.empty(feat_dim if feat_dim is not None else 16)
        return cls(
            np.array([g.mu for g in gaussians], dtype=np.float64).reshape(-1, 3),
            np.array([g.opacity for g in gaussians], dtype=np.float64),
            np.array([g.color for g in gaussians], dtype=np.float64).reshape(-1, 3),
            np.array([g.scale for g in gaussians], dtype=np.float64).reshape(-1, 3),
            np.array([np.asarray(g.rot) / np.linalg.norm(g.rot) for g in gaussians]).reshape(-1, 4),
            np.array([g.feat for g in gaussians], dtype=np.float64).reshape(len(gaussians), -1),
        )

    def to_list(self) -> list[Gaussian]:
        return [
            Gaussian(self.mu[i], float(self.opacity[i]), self.color[i], self.scale[i], self.rot[i], self.feat[i])
            for i in range(len(self))
        ]

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(self.mu[idx], self.opacity[idx], self.color[idx], self.scale[idx], self.rot[idx], self.feat[idx])


def world_cov(scale, rot) -> np.ndarray:
    """World-space covariance R S S^T R^T from per-axis stddevs and a quaternion."""
    s = np.asarray(scale, dtype=np.float64)
    if np.any(s <= 0):
        raise DegenerateCovariance("degenerate covariance")
    R = quat_to_rot(rot)
    M = R * s[None, :]
    return M @ M.T


def world_covs(scale: np.ndarray, R: np.ndarray) -> np.ndarray:
    M = R * scale[:, None, :]
    return M @ np.transpose(M, (0, 2, 1))


def project_point(p_world, pose: Pose, cam: Camera, z_near: float = Z_NEAR):
    """Pixel coordinates and camera depth of a world point.

    Raises BehindCamera when the camera-frame depth is at or below ``z_near``.
    """
    R_cw, t_cw = pose.world_to_camera()
    x, y, z = R_cw @ np.asarray(p_world, dtype=np.float64) + t_cw
    if z <= z_near:
        raise BehindCamera("behind camera")
    return cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, z


def back_project(u: float, v: float, z: float, pose: Pose, cam: Camera) -> np.ndarray:
    p_cam = np.array([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z])
    return pose.transform(p_cam)


def back_project_depth(depth: np.ndarray, pose: Pose, cam: Camera, pixels: np.ndarray | None = None) -> np.ndarray:
    """World points for pixel centers (v, u) index pairs, or for every pixel."""
    if pixels is None:
        vv, uu = np.mgrid[0 : cam.height, 0 : cam.width]
        pixels = np.stack([vv.ravel(), uu.ravel()], axis=1)
    v, u = pixels[:, 0], pixels[:, 1]
    z = depth[v, u]
    p_cam = np.stack([(u + 0.5 - cam.cx) * z / cam.fx, (v + 0.5 - cam.cy) * z / cam.fy, z], axis=1)
    return pose.transform(p_cam)


def projection_jacobian(p_cam, cam: Camera) -> np.ndarray:
    x, y, z = p_cam
    return np.array([[cam.fx / z, 0.0, -cam.fx * x / z**2], [0.0, cam.fy / z, -cam.fy * y / z**2]])


def project_cov(sigma_world, pose: Pose, cam: Camera, p_cam, z_near: float = Z_NEAR,
                dilation: float = COV2D_DILATION) -> np.ndarray:
    """Screen-space covariance J W Sigma W^T J^T plus the anti-alias floor."""
    p_cam = np.asarray(p_cam, dtype=np.float64)
    if p_cam[2] <= z_near:
        raise BehindCamera("behind camera")
    W, _ = pose.world_to_camera()
    M = projection_jacobian(p_cam, cam) @ W
    cov = M @ np.asarray(sigma_world, dtype=np.float64) @ M.T
    cov = 0.5 * (cov + cov.T) + dilation * np.eye(2)
    if not (cov[0, 0] > 0 and np.linalg.det(cov) > 0):
        raise ProjectionDegenerate("projection degenerate")
    return cov
