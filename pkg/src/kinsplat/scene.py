"""Core scene types: Gaussian primitives, cameras, kinematic states.

Conventions used throughout the package:

* Quaternions are stored ``(w, x, y, z)`` and normalized before any use.
* Per-Gaussian scales are stored in log space; realized scale is ``exp``.
* Opacity is stored as a logit; realized opacity is ``sigmoid``.
* Spherical-harmonic color uses 16 RGB coefficient triples (degree 3).
  Coefficient 0 is the DC term; the realized color is the SH sum plus 0.5,
  clamped below at zero.
* Cameras follow the OpenCV pinhole model: x right, y down, z forward,
  ``u = fx * x / z + cx``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

# Real SH basis constants for degrees 0..3 (splatting sign convention).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_SH_DEGREE = 3
SH_COEFFS = (MAX_SH_DEGREE + 1) ** 2  # 16


class Phase(IntEnum):
    """Training phase: ONE is the aggressive fit, TWO the refinement."""

    ONE = 1
    TWO = 2


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(p):
    return np.log(p / (1.0 - p))


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    """Return q / |q|. Raises ValueError on (near-)zero norm."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("zero-norm quaternion cannot be normalized")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b for (..., 4) (w, x, y, z) quaternions."""
    a = np.asarray(a)
    b = np.asarray(b)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions.

    Args:
        q: (..., 4) array, (w, x, y, z), assumed normalized.

    Returns:
        (..., 3, 3) rotation matrices.
    """
    q = np.asarray(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def realize_covariance(rot: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """World-space covariance sigma = R S S^T R^T for one or many Gaussians.

    Args:
        rot: (..., 4) quaternion(s), need not be pre-normalized.
        log_scale: (..., 3) log scales.

    Returns:
        (..., 3, 3) symmetric positive semi-definite covariance.
    """
    q = normalize_quaternion(rot)
    R = quat_to_rotmat(q)
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    M = R * s[..., None, :]  # columns scaled: R @ diag(s)
    return M @ np.swapaxes(M, -1, -2)


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the SH basis for unit view directions.

    Args:
        dirs: (N, 3) unit vectors.
        degree: active degree in 0..3.

    Returns:
        (N, (degree+1)**2) basis values.
    """
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ValueError(f"SH degree must be in 0..{MAX_SH_DEGREE}, got {degree}")
    dirs = np.asarray(dirs)
    n = dirs.shape[0]
    k = (degree + 1) ** 2
    out = np.empty((n, k), dtype=dirs.dtype)
    out[:, 0] = SH_C0
    if degree < 1:
        return out
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out[:, 1] = -SH_C1 * y
    out[:, 2] = SH_C1 * z
    out[:, 3] = -SH_C1 * x
    if degree < 2:
        return out
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out[:, 4] = SH_C2[0] * xy
    out[:, 5] = SH_C2[1] * yz
    out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[:, 7] = SH_C2[3] * xz
    out[:, 8] = SH_C2[4] * (xx - yy)
    if degree < 3:
        return out
    out[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[:, 10] = SH_C3[1] * xy * z
    out[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[:, 14] = SH_C3[5] * z * (xx - yy)
    out[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(direction) for each basis function.

    Returns:
        (N, (degree+1)**2, 3) partial derivatives w.r.t. the (unnormalized
        sensitivity of the) unit direction components.
    """
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ValueError(f"SH degree must be in 0..{MAX_SH_DEGREE}, got {degree}")
    dirs = np.asarray(dirs)
    n = dirs.shape[0]
    k = (degree + 1) ** 2
    g = np.zeros((n, k, 3), dtype=dirs.dtype)
    if degree < 1:
        return g
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    g[:, 1, 1] = -SH_C1
    g[:, 2, 2] = SH_C1
    g[:, 3, 0] = -SH_C1
    if degree < 2:
        return g
    xx, yy, zz = x * x, y * y, z * z
    g[:, 4, 0] = SH_C2[0] * y
    g[:, 4, 1] = SH_C2[0] * x
    g[:, 5, 1] = SH_C2[1] * z
    g[:, 5, 2] = SH_C2[1] * y
    g[:, 6, 0] = -2.0 * SH_C2[2] * x
    g[:, 6, 1] = -2.0 * SH_C2[2] * y
    g[:, 6, 2] = 4.0 * SH_C2[2] * z
    g[:, 7, 0] = SH_C2[3] * z
    g[:, 7, 2] = SH_C2[3] * x
    g[:, 8, 0] = 2.0 * SH_C2[4] * x
    g[:, 8, 1] = -2.0 * SH_C2[4] * y
    if degree < 3:
        return g
    g[:, 9, 0] = SH_C3[0] * 6.0 * x * y
    g[:, 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
    g[:, 10, 0] = SH_C3[1] * y * z
    g[:, 10, 1] = SH_C3[1] * x * z
    g[:, 10, 2] = SH_C3[1] * x * y
    g[:, 11, 0] = -2.0 * SH_C3[2] * x * y
    g[:, 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
    g[:, 11, 2] = 8.0 * SH_C3[2] * y * z
    g[:, 12, 0] = -6.0 * SH_C3[3] * x * z
    g[:, 12, 1] = -6.0 * SH_C3[3] * y * z
    g[:, 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    g[:, 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
    g[:, 13, 1] = -2.0 * SH_C3[4] * x * y
    g[:, 13, 2] = 8.0 * SH_C3[4] * x * z
    g[:, 14, 0] = 2.0 * SH_C3[5] * x * z
    g[:, 14, 1] = -2.0 * SH_C3[5] * y * z
    g[:, 14, 2] = SH_C3[5] * (xx - yy)
    g[:, 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
    g[:, 15, 1] = -6.0 * SH_C3[6] * x * y
    return g


def eval_sh(coeffs: np.ndarray, direction: np.ndarray, degree: int) -> np.ndarray:
    """Realized RGB color of one Gaussian seen from ``direction``.

    Coefficients above the active degree are ignored. The result is the SH
    sum shifted by +0.5 and clamped below at zero (colors may exceed 1).

    Args:
        coeffs: (16, 3) SH coefficients.
        direction: (3,) unit view direction (Gaussian center minus camera).
        degree: active degree in 0..3.

    Returns:
        (3,) non-negative RGB.
    """
    coeffs = np.asarray(coeffs)
    basis = sh_basis(np.asarray(direction, dtype=np.float64)[None, :], degree)[0]
    k = basis.shape[0]
    rgb = basis @ coeffs[:k] + 0.5
    return np.maximum(rgb, 0.0)


def eval_sh_batch(coeffs: np.ndarray, dirs: np.ndarray, degree: int):
    """Batched :func:`eval_sh`.

    Returns:
        Tuple of realized colors (N, 3), the basis matrix (N, K), and the
        pre-clamp values (N, 3) so a backward pass can mask the clamp.
    """
    basis = sh_basis(dirs, degree)
    k = basis.shape[1]
    raw = np.einsum("nk,nkc->nc", basis, coeffs[:, :k, :]) + 0.5
    return np.maximum(raw, 0.0), basis, raw


def rgb_to_dc(rgb: np.ndarray) -> np.ndarray:
    """Invert the DC term of eval_sh: coefficient giving this color head-on."""
    return (np.asarray(rgb) - 0.5) / SH_C0


@dataclass
class Gaussian:
    """A single anisotropic Gaussian primitive (canonical, pre-activation)."""

    mu: np.ndarray  # (3,) world position
    rot: np.ndarray  # (4,) quaternion (w, x, y, z)
    log_scale: np.ndarray  # (3,)
    opacity_logit: float
    sh_coeffs: np.ndarray  # (16, 3)

    def activate(self):
        """Realized (mu, R, scale, opacity): outputs of the stored params.

        Returns:
            Tuple (mu (3,), R (3,3), scale (3,), opacity float).
        """
        q = normalize_quaternion(self.rot)
        return (
            np.asarray(self.mu, dtype=np.float64),
            quat_to_rotmat(q),
            np.exp(np.asarray(self.log_scale, dtype=np.float64)),
            float(sigmoid(np.float64(self.opacity_logit))),
        )

    def covariance(self) -> np.ndarray:
        return realize_covariance(self.rot, self.log_scale)


@dataclass
class Scene:
    """Struct-of-arrays container for the canonical Gaussian scene.

    The scene owns the optimizable parameters plus bookkeeping used by the
    density-control heuristics. All parameter arrays are float32 and share
    their leading dimension N.
    """

    mu: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    sh_coeffs: np.ndarray
    active_sh_degree: int = 0
    extent: float = 1.0
    # Density-control accumulators, reset after every densify/prune pass:
    # mean screen-space gradient magnitude feeding the clone/split test and
    # a summed world-space position gradient giving the clone offset direction.
    grad_accum: np.ndarray = field(default=None)  # type: ignore[assignment]
    grad_count: np.ndarray = field(default=None)  # type: ignore[assignment]
    grad_dir: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        n = self.mu.shape[0]
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float32)
        self.rot = np.ascontiguousarray(self.rot, dtype=np.float32)
        self.log_scale = np.ascontiguousarray(self.log_scale, dtype=np.float32)
        self.opacity_logit = np.ascontiguousarray(self.opacity_logit, dtype=np.float32)
        self.sh_coeffs = np.ascontiguousarray(self.sh_coeffs, dtype=np.float32)
        if self.mu.shape != (n, 3):
            raise ValueError(f"mu must be (N, 3), got {self.mu.shape}")
        if self.rot.shape != (n, 4):
            raise ValueError(f"rot must be (N, 4), got {self.rot.shape}")
        if self.log_scale.shape != (n, 3):
            raise ValueError(f"log_scale must be (N, 3), got {self.log_scale.shape}")
        if self.opacity_logit.shape != (n,):
            raise ValueError(f"opacity_logit must be (N,), got {self.opacity_logit.shape}")
        if self.sh_coeffs.shape != (n, SH_COEFFS, 3):
            raise ValueError(f"sh_coeffs must be (N, 16, 3), got {self.sh_coeffs.shape}")
        if not 0 <= self.active_sh_degree <= MAX_SH_DEGREE:
            raise ValueError(f"active_sh_degree out of range: {self.active_sh_degree}")
        if not self.extent > 0:
            raise ValueError(f"scene extent must be positive, got {self.extent}")
        if self.grad_accum is None:
            self.reset_grad_stats()

    def __len__(self) -> int:
        return self.mu.shape[0]

    def reset_grad_stats(self) -> None:
        n = len(self)
        self.grad_accum = np.zeros(n, dtype=np.float32)
        self.grad_count = np.zeros(n, dtype=np.int32)
        self.grad_dir = np.zeros((n, 3), dtype=np.float32)

    # Realized (activated) views -------------------------------------------

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    def rotations(self) -> np.ndarray:
        """Unit quaternions (N, 4)."""
        return np.asarray(normalize_quaternion(self.rot), dtype=np.float32)

    def gaussian(self, i: int) -> Gaussian:
        """Copy out primitive i as a standalone Gaussian."""
        return Gaussian(
            mu=self.mu[i].copy(),
            rot=self.rot[i].copy(),
            log_scale=self.log_scale[i].copy(),
            opacity_logit=float(self.opacity_logit[i]),
            sh_coeffs=self.sh_coeffs[i].copy(),
        )

    # Structural edits ------------------------------------------------------

    def subset(self, index) -> "Scene":
        """New Scene holding copies of the selected rows (mask or indices)."""
        return Scene(
            mu=self.mu[index].copy(),
            rot=self.rot[index].copy(),
            log_scale=self.log_scale[index].copy(),
            opacity_logit=self.opacity_logit[index].copy(),
            sh_coeffs=self.sh_coeffs[index].copy(),
            active_sh_degree=self.active_sh_degree,
            extent=self.extent,
        )

    def keep(self, mask: np.ndarray) -> None:
        """Drop rows where mask is False, in place."""
        self.mu = self.mu[mask]
        self.rot = self.rot[mask]
        self.log_scale = self.log_scale[mask]
        self.opacity_logit = self.opacity_logit[mask]
        self.sh_coeffs = self.sh_coeffs[mask]
        self.grad_accum = self.grad_accum[mask]
        self.grad_count = self.grad_count[mask]
        self.grad_dir = self.grad_dir[mask]

    def append(self, mu, rot, log_scale, opacity_logit, sh_coeffs) -> None:
        """Append new rows in place; their grad stats start at zero."""
        m = mu.shape[0]
        self.mu = np.concatenate([self.mu, np.asarray(mu, np.float32)])
        self.rot = np.concatenate([self.rot, np.asarray(rot, np.float32)])
        self.log_scale = np.concatenate([self.log_scale, np.asarray(log_scale, np.float32)])
        self.opacity_logit = np.concatenate(
            [self.opacity_logit, np.asarray(opacity_logit, np.float32)]
        )
        self.sh_coeffs = np.concatenate([self.sh_coeffs, np.asarray(sh_coeffs, np.float32)])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(m, np.float32)])
        self.grad_count = np.concatenate([self.grad_count, np.zeros(m, np.int32)])
        self.grad_dir = np.concatenate([self.grad_dir, np.zeros((m, 3), np.float32)])

    def copy(self) -> "Scene":
        s = self.subset(slice(None))
        s.grad_accum = self.grad_accum.copy()
        s.grad_count = self.grad_count.copy()
        s.grad_dir = self.grad_dir.copy()
        return s


@dataclass
class GaussianDeltas:
    """Additive per-Gaussian deformation deltas (no opacity channel)."""

    d_mu: np.ndarray  # (N, 3)
    d_rot: np.ndarray  # (N, 4)
    d_scale: np.ndarray  # (N, 3) in log-scale space

    @staticmethod
    def zeros(n: int, dtype=np.float32) -> "GaussianDeltas":
        return GaussianDeltas(
            np.zeros((n, 3), dtype=dtype),
            np.zeros((n, 4), dtype=dtype),
            np.zeros((n, 3), dtype=dtype),
        )

    def __len__(self) -> int:
        return self.d_mu.shape[0]

    def subset(self, index) -> "GaussianDeltas":
        return GaussianDeltas(
            self.d_mu[index].copy(), self.d_rot[index].copy(), self.d_scale[index].copy()
        )


@dataclass
class KinematicState:
    """Articulated-tool state: rigid pose plus one jaw opening angle."""

    translation: np.ndarray  # (3,)
    rotation: np.ndarray  # (4,) quaternion (w, x, y, z)
    jaw_angle: float

    def as_vector(self) -> np.ndarray:
        """Raw 8-vector (translation, quaternion, jaw), no normalization."""
        return np.concatenate(
            [
                np.asarray(self.translation, dtype=np.float64).reshape(3),
                np.asarray(self.rotation, dtype=np.float64).reshape(4),
                [float(self.jaw_angle)],
            ]
        )

    @staticmethod
    def from_vector(v) -> "KinematicState":
        v = np.asarray(v, dtype=np.float64).reshape(8)
        return KinematicState(v[:3].copy(), v[3:7].copy(), float(v[7]))


@dataclass
class CameraPose:
    """Pinhole camera: extrinsics as a 4x4 world-to-camera transform."""

    world_to_camera: np.ndarray  # (4, 4)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.world_to_camera.shape != (4, 4):
            raise ValueError("world_to_camera must be 4x4")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    def camera_center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation

    @staticmethod
    def look_at(eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "CameraPose":
        """Camera at ``eye`` looking toward ``target``.

        ``up`` gives the world up direction; image y points the other way.
        """
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        z = target - eye
        zn = np.linalg.norm(z)
        if zn < 1e-12:
            raise ValueError("eye and target coincide")
        z = z / zn
        x = np.cross(-up, z)
        xn = np.linalg.norm(x)
        if xn < 1e-12:
            raise ValueError("view direction parallel to up")
        x = x / xn
        y = np.cross(z, x)
        wtc = np.eye(4)
        R = np.stack([x, y, z])  # rows: camera axes in world coords
        wtc[:3, :3] = R
        wtc[:3, 3] = -R @ eye
        if cx is None:
            cx = (width - 1) / 2.0
        if cy is None:
            cy = (height - 1) / 2.0
        return CameraPose(wtc, float(fx), float(fy), float(cx), float(cy), int(width), int(height))

    def to_dict(self) -> dict:
        return {
            "world_to_camera": self.world_to_camera.tolist(),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraPose":
        return CameraPose(
            world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass
class FrameRecord:
    """One observation: an image path with its camera and kinematic state."""

    name: str
    image_path: str
    camera: CameraPose
    kinematics: KinematicState
    mask_path: str | None = None
