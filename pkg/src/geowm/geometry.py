"""Pinhole projection and rigid-motion primitives.

COORDINATE SYSTEM CONVENTIONS
=============================

Camera frame:
    - Right-handed, +X right, +Y down, +Z forward (optical axis).
    - "Depth" always means the camera-frame Z coordinate (z-depth), never
      the Euclidean ray length.

Pixels:
    - ``(u, v)`` with ``u`` along image width (columns) and ``v`` along
      height (rows).  The centre of the top-left pixel is ``(0, 0)``.
    - Projection divides by the third homogeneous coordinate.

Poses:
    - :class:`RigidTransform` maps points between frames as
      ``x_out = R @ x_in + t``.  Camera poses in this package are
      world-to-camera unless a name says otherwise.

Units: metres and radians throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError

# Points closer to the image plane than this are treated as behind the
# camera; callers get an error instead of a clamped value.
MIN_CAMERA_DEPTH = 1e-9

# Rotation matrices must satisfy R^T R = I and det R = 1 to this tolerance.
ROTATION_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics. Focal lengths must be positive and finite."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite intrinsics {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=np.float64
        )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]))


def _check_rotation(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    err = np.max(np.abs(R.T @ R - np.eye(3)))
    if err > ROTATION_TOL:
        raise ValueError(f"matrix is not orthonormal (max |R^T R - I| = {err:.3e})")
    det = np.linalg.det(R)
    if abs(det - 1.0) > ROTATION_TOL:
        raise ValueError(f"rotation must have det=+1, got {det!r}")
    return R


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element acting as ``x_out = R @ x_in + t``."""

    R: np.ndarray
    t: np.ndarray
    _skip_check: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64) if self._skip_check else _check_rotation(self.R)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"non-finite translation {t}")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), _skip_check=True)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (..., 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.R.T + self.t

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.array(d["R"], dtype=np.float64), np.array(d["t"], dtype=np.float64))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition ``a after b``: (a*b).apply(x) == a.apply(b.apply(x))."""
    return RigidTransform(a.R @ b.R, a.R @ b.t + a.t, _skip_check=True)


def invert(a: RigidTransform) -> RigidTransform:
    Rt = a.R.T
    return RigidTransform(Rt, -Rt @ a.t, _skip_check=True)


def relative(pose_to: RigidTransform, pose_from: RigidTransform) -> RigidTransform:
    """Transform taking ``pose_from``-frame coordinates to ``pose_to``-frame."""
    return compose(pose_to, invert(pose_from))


@dataclass
class DepthMap:
    """Per-pixel z-depth with an explicit validity mask.

    ``values`` is (H, W) float64 metres; entries where ``valid`` is False
    carry no meaning.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.valid.shape:
            raise ValueError(
                f"depth/valid shape mismatch: {self.values.shape} vs {self.valid.shape}"
            )


# ---------------------------------------------------------------------------
# Projection


def backproject(pixel, depth: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Lift a pixel at a given z-depth to a camera-frame 3D point.

    Args:
        pixel: (u, v) pixel coordinates.
        depth: z-depth in metres; must be strictly positive.
        intrinsics: pinhole parameters.

    Returns:
        (3,) float64 point ``(d*(u-cx)/fx, d*(v-cy)/fy, d)``.
    """
    u, v = float(pixel[0]), float(pixel[1])
    d = float(depth)
    if not np.isfinite(u) or not np.isfinite(v):
        raise ValueError(f"non-finite pixel ({u}, {v})")
    if not np.isfinite(d) or d <= 0.0:
        raise ValueError(f"depth must be positive and finite, got {d}")
    return np.array(
        [d * (u - intrinsics.cx) / intrinsics.fx, d * (v - intrinsics.cy) / intrinsics.fy, d],
        dtype=np.float64,
    )


def project(point: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Project a camera-frame point to a pixel, normalizing by z.

    Raises :class:`BehindCameraError` when z <= MIN_CAMERA_DEPTH.
    """
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if p[2] <= MIN_CAMERA_DEPTH:
        raise BehindCameraError(f"point depth {p[2]!r} is not in front of the camera")
    return np.array(
        [intrinsics.fx * p[0] / p[2] + intrinsics.cx, intrinsics.fy * p[1] / p[2] + intrinsics.cy],
        dtype=np.float64,
    )


def project_points(points: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Vectorized :func:`project` over (..., 3); caller screens depths."""
    pts = np.asarray(points, dtype=np.float64)
    z = pts[..., 2]
    if np.any(z <= MIN_CAMERA_DEPTH):
        raise BehindCameraError("point batch contains non-positive depths")
    uv = np.empty(pts.shape[:-1] + (2,), dtype=np.float64)
    uv[..., 0] = intrinsics.fx * pts[..., 0] / z + intrinsics.cx
    uv[..., 1] = intrinsics.fy * pts[..., 1] / z + intrinsics.cy
    return uv


def project_correspondence(
    pixel,
    depth: float,
    intrinsics: CameraIntrinsics,
    relative_pose: RigidTransform,
    scene_flow=None,
) -> np.ndarray:
    """Predict where a pixel lands in the next frame.

    The pixel is lifted at its z-depth, moved by the relative camera pose
    (current camera frame -> next camera frame), displaced by the scene-flow
    vector expressed in the *next* camera frame, and reprojected.

    Args:
        pixel: (u, v) in the current frame.
        depth: current-frame z-depth, strictly positive.
        intrinsics: shared pinhole parameters.
        relative_pose: camera motion, next-frame <- current-frame.
        scene_flow: optional (3,) displacement of the scene point in
            next-frame camera coordinates; None means a static scene.

    Returns:
        (2,) pixel in the next frame.

    Raises:
        BehindCameraError: the moved point has z <= MIN_CAMERA_DEPTH.
        ValueError: non-positive depth or non-finite inputs.
    """
    x_cam = backproject(pixel, depth, intrinsics)
    x_next = relative_pose.apply(x_cam)
    if scene_flow is not None:
        x_next = x_next + np.asarray(scene_flow, dtype=np.float64).reshape(3)
    return project(x_next, intrinsics)


# ---------------------------------------------------------------------------
# SO(3)


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues exponential of an axis-angle vector (3,) -> rotation matrix."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(w)
    K = np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]], dtype=np.float64
    )
    if theta < 1e-12:
        # Second-order series keeps exp(log(R)) == R to machine precision.
        return np.eye(3) + K + 0.5 * (K @ K)
    A = np.sin(theta) / theta
    B = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + A * K + B * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix; norm lies in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-12:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if theta > np.pi - 1e-6:
        # Near pi the antisymmetric part vanishes; recover the axis from the
        # dominant column of R + I and fix its sign with the off-diagonals.
        B = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        k = int(np.argmax(axis))
        if axis[k] < 1e-12:
            raise ValueError("degenerate rotation near pi")
        axis = B[:, k] / axis[k]
        axis = axis / np.linalg.norm(axis)
        sign = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(sign, axis) < 0:
            axis = -axis
        return theta * axis
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * vee


def geodesic_distance(R1: np.ndarray, R2: np.ndarray) -> float:
    """Angle in radians of the rotation taking R1 to R2; range [0, pi]."""
    R1 = np.asarray(R1, dtype=np.float64)
    R2 = np.asarray(R2, dtype=np.float64)
    cos_theta = np.clip((np.trace(R1.T @ R2) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos_theta))


def slerp(R1: np.ndarray, R2: np.ndarray, u: float) -> np.ndarray:
    """Geodesic interpolation from R1 (u=0) to R2 (u=1).

    Raises ValueError when u is outside [0, 1].
    """
    u = float(u)
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"interpolation parameter must lie in [0, 1], got {u}")
    R1 = np.asarray(R1, dtype=np.float64)
    R2 = np.asarray(R2, dtype=np.float64)
    return R1 @ so3_exp(u * so3_log(R1.T @ R2))


def rotation_mean(rotations, tol: float = 1e-12, max_iter: int = 64) -> np.ndarray:
    """Iterated tangent-space average of a list of nearby rotations.

    Initialized at the first element; each sweep averages the logs of the
    residuals and steps along the geodesic, which reduces to repeated slerp
    for two elements.
    """
    rots = [np.asarray(R, dtype=np.float64) for R in rotations]
    if not rots:
        raise ValueError("rotation_mean needs at least one rotation")
    mean = rots[0]
    for _ in range(max_iter):
        delta = np.mean([so3_log(mean.T @ R) for R in rots], axis=0)
        mean = mean @ so3_exp(delta)
        if np.linalg.norm(delta) < tol:
            break
    return mean
