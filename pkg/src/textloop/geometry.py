"""Rigid transforms, pinhole projection and plane-constrained back-projection.

Conventions used throughout the package:
  - poses are passive SE(3) transforms stored as rotation matrix + translation
  - tangent vectors are 6-vectors laid out [rho(3), theta(3)], rotation last
  - planes are (unit normal n, offset d) with n.p + d = 0 for points p on the plane
  - pixel coordinates (u, v) follow u = fx * x/z + cx, v = fy * y/z + cy
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEPTH_EPSILON = 1e-6
RAY_PARALLEL_EPSILON = 1e-9
NEAR_PI_EPSILON = 1e-9

# series switch points for the Rodrigues / V-matrix coefficients
_SMALL_ANGLE = 1e-4


class GeometryError(ValueError):
    """Base class for geometric precondition violations."""


class NonPositiveDepth(GeometryError):
    """Point is at or behind the camera plane."""


class RayParallelToPlane(GeometryError):
    """Viewing ray never meets the plane."""


class NegativeDepth(GeometryError):
    """Plane intersection lies behind the camera at this pixel."""


class OutOfRangeFactor(GeometryError):
    """Interpolation factor outside [0, 1]."""


class NearPiRotation(GeometryError):
    """Rotation angle too close to pi for a single-valued logarithm."""


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def _so3_exp(theta: np.ndarray) -> np.ndarray:
    """Rodrigues formula, with series expansions below _SMALL_ANGLE."""
    angle = float(np.linalg.norm(theta))
    k = _skew(theta)
    if angle < _SMALL_ANGLE:
        a = 1.0 - angle**2 / 6.0 + angle**4 / 120.0
        b = 0.5 - angle**2 / 24.0 + angle**4 / 720.0
    else:
        a = np.sin(angle) / angle
        b = (1.0 - np.cos(angle)) / angle**2
    return np.eye(3) + a * k + b * (k @ k)


def _so3_log(rot: np.ndarray) -> np.ndarray:
    """Inverse of _so3_exp.  Raises NearPiRotation within NEAR_PI_EPSILON of pi."""
    cos_angle = float(np.clip((np.trace(rot) - 1.0) * 0.5, -1.0, 1.0))
    angle = float(np.arccos(cos_angle))
    if np.pi - angle < NEAR_PI_EPSILON:
        raise NearPiRotation(f"rotation angle {angle!r} within {NEAR_PI_EPSILON} of pi")
    vee = np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )
    if angle < _SMALL_ANGLE:
        # theta / (2 sin(theta)) expanded around zero
        return 0.5 * (1.0 + angle**2 / 6.0 + 7.0 * angle**4 / 360.0) * vee
    if np.pi - angle < 1e-3:
        # sin(angle) is tiny; recover the axis from the symmetric part instead
        sym = 0.5 * (rot + rot.T)
        outer = (sym - np.eye(3)) / (1.0 - cos_angle) + np.eye(3)
        pivot = int(np.argmax(np.diag(outer)))
        axis = outer[:, pivot] / np.sqrt(outer[pivot, pivot])
        if np.dot(axis, vee) < 0.0:
            axis = -axis
        return angle * axis
    return (0.5 * angle / np.sin(angle)) * vee


def _v_matrix(theta: np.ndarray) -> np.ndarray:
    """Integrates rotation over a unit twist; couples rho into translation."""
    angle = float(np.linalg.norm(theta))
    k = _skew(theta)
    if angle < _SMALL_ANGLE:
        b = 0.5 - angle**2 / 24.0 + angle**4 / 720.0
        c = 1.0 / 6.0 - angle**2 / 120.0 + angle**4 / 5040.0
    else:
        b = (1.0 - np.cos(angle)) / angle**2
        c = (angle - np.sin(angle)) / angle**3
    return np.eye(3) + b * k + c * (k @ k)


def _v_matrix_inverse(theta: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(theta))
    k = _skew(theta)
    if angle < _SMALL_ANGLE:
        g = 1.0 / 12.0 + angle**2 / 720.0 + angle**4 / 30240.0
    else:
        half = 0.5 * angle
        g = (1.0 - half * np.cos(half) / np.sin(half)) / angle**2
    return np.eye(3) - 0.5 * k + g * (k @ k)


@dataclass(frozen=True)
class Pose:
    """Rigid transform: p_out = rotation @ p_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        trans = np.array(self.translation, dtype=float).reshape(3)
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "Pose":
        mat = np.asarray(mat, dtype=float)
        return cls(mat[:3, :3], mat[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rot_t = self.rotation.T
        return Pose(rot_t, -rot_t @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or a stack of (N, 3) points."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self.rotation @ points + self.translation
        return points @ self.rotation.T + self.translation

    def to_json(self) -> dict:
        return {
            "t": [float(x) for x in self.translation],
            "q": [float(x) for x in rotation_to_quaternion(self.rotation)],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Pose":
        return cls(quaternion_to_rotation(np.asarray(obj["q"], dtype=float)), obj["t"])

    def is_close(self, other: "Pose", tol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=tol)
            and np.allclose(self.translation, other.translation, atol=tol)
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise GeometryError(f"focal lengths must be positive, got {self.fx}, {self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class PlaneParams:
    """Plane n.p + d = 0 with unit normal n."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        normal = np.array(self.normal, dtype=float).reshape(3)
        scale = float(np.linalg.norm(normal))
        if scale < 1e-12:
            raise GeometryError("plane normal must be nonzero")
        normal = normal / scale
        normal.flags.writeable = False
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", float(self.offset) / scale)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.normal + self.offset


@dataclass(frozen=True)
class PixelPoint:
    u: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v])


def transform_point(pose: Pose, points: np.ndarray) -> np.ndarray:
    return pose.apply(points)


def project(
    intrinsics: CameraIntrinsics, point: np.ndarray, depth_epsilon: float = DEPTH_EPSILON
) -> PixelPoint:
    """Project a camera-frame point to pixels.  Raises NonPositiveDepth for z <= epsilon."""
    x, y, z = np.asarray(point, dtype=float)
    if z <= depth_epsilon:
        raise NonPositiveDepth(f"depth {z} not above {depth_epsilon}")
    return PixelPoint(intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy)


def project_array(
    intrinsics: CameraIntrinsics, points: np.ndarray, depth_epsilon: float = DEPTH_EPSILON
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection.

    Returns (uv, valid): uv is (N, 2) with rows undefined where valid is False,
    valid marks points with z > depth_epsilon.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    z = points[:, 2]
    valid = z > depth_epsilon
    safe_z = np.where(valid, z, 1.0)
    uv = np.empty((len(points), 2))
    uv[:, 0] = intrinsics.fx * points[:, 0] / safe_z + intrinsics.cx
    uv[:, 1] = intrinsics.fy * points[:, 1] / safe_z + intrinsics.cy
    return uv, valid


def ray_direction(intrinsics: CameraIntrinsics, pixel: PixelPoint) -> np.ndarray:
    """Unnormalized viewing ray with z = 1."""
    return np.array(
        [(pixel.u - intrinsics.cx) / intrinsics.fx, (pixel.v - intrinsics.cy) / intrinsics.fy, 1.0]
    )


def depth_from_plane(
    intrinsics: CameraIntrinsics, plane: PlaneParams, pixel: PixelPoint
) -> float:
    """Depth (z coordinate) where the pixel's viewing ray meets the plane."""
    ray = ray_direction(intrinsics, pixel)
    denom = float(plane.normal @ ray)
    if abs(denom) <= RAY_PARALLEL_EPSILON:
        raise RayParallelToPlane(f"|n.ray| = {abs(denom)} at pixel ({pixel.u}, {pixel.v})")
    depth = -plane.offset / denom
    if depth <= 0.0:
        raise NegativeDepth(f"plane meets ray at depth {depth} behind the camera")
    return depth


def backproject(
    intrinsics: CameraIntrinsics, plane: PlaneParams, pixel: PixelPoint
) -> np.ndarray:
    """Camera-frame point where the pixel's viewing ray meets the plane."""
    return depth_from_plane(intrinsics, plane, pixel) * ray_direction(intrinsics, pixel)


def exp_map(xi: np.ndarray) -> Pose:
    """Exponential map from a [rho, theta] twist to a Pose."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, theta = xi[:3], xi[3:]
    return Pose(_so3_exp(theta), _v_matrix(theta) @ rho)


def log_map(pose: Pose) -> np.ndarray:
    """Inverse of exp_map; raises NearPiRotation near the cut locus."""
    theta = _so3_log(pose.rotation)
    rho = _v_matrix_inverse(theta) @ pose.translation
    return np.concatenate([rho, theta])


def interpolate(pose: Pose, factor: float) -> Pose:
    """Geodesic interpolation from identity (factor 0) to pose (factor 1)."""
    if not 0.0 <= factor <= 1.0:
        raise OutOfRangeFactor(f"interpolation factor {factor} outside [0, 1]")
    return exp_map(factor * log_map(pose))


def adjoint(pose: Pose) -> np.ndarray:
    """6x6 adjoint of a Pose for the [rho, theta] layout."""
    out = np.zeros((6, 6))
    out[:3, :3] = pose.rotation
    out[:3, 3:] = _skew(pose.translation) @ pose.rotation
    out[3:, 3:] = pose.rotation
    return out


def _q_matrix(rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Translation-rotation coupling block of the SE(3) left Jacobian."""
    angle = float(np.linalg.norm(theta))
    cr = _skew(rho)
    cp = _skew(theta)
    if angle < _SMALL_ANGLE:
        c1 = 1.0 / 6.0 - angle**2 / 120.0
        c2 = 1.0 / 24.0 - angle**2 / 720.0
        c3 = -1.0 / 120.0 + angle**2 / 5040.0
    else:
        c1 = (angle - np.sin(angle)) / angle**3
        c2 = (1.0 - 0.5 * angle**2 - np.cos(angle)) / angle**4
        c3 = (angle - np.sin(angle) - angle**3 / 6.0) / angle**5
    cpcr = cp @ cr
    crcp = cr @ cp
    cpcrcp = cpcr @ cp
    cpcp = cp @ cp
    return (
        0.5 * cr
        + c1 * (cpcr + crcp + cpcrcp)
        - c2 * (cpcp @ cr + cr @ cpcp - 3.0 * cpcrcp)
        - 0.5 * (c2 - 3.0 * c3) * (cpcrcp @ cp + cpcp @ crcp)
    )


def se3_left_jacobian_inverse(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, theta = xi[:3], xi[3:]
    v_inv = _v_matrix_inverse(theta)
    q = _q_matrix(rho, theta)
    out = np.zeros((6, 6))
    out[:3, :3] = v_inv
    out[3:, 3:] = v_inv
    out[:3, 3:] = -v_inv @ q @ v_inv
    return out


def se3_right_jacobian_inverse(xi: np.ndarray) -> np.ndarray:
    """Jacobian of xi -> log(exp(xi) exp(delta)) in delta at zero."""
    return se3_left_jacobian_inverse(-np.asarray(xi, dtype=float).reshape(6))


def rotation_to_quaternion(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion [w, x, y, z] with w >= 0."""
    rot = np.asarray(rot, dtype=float)
    trace = float(np.trace(rot))
    if trace > 0.0:
        s = np.sqrt(trace + 1.0) * 2.0
        q = np.array(
            [
                0.25 * s,
                (rot[2, 1] - rot[1, 2]) / s,
                (rot[0, 2] - rot[2, 0]) / s,
                (rot[1, 0] - rot[0, 1]) / s,
            ]
        )
    else:
        i = int(np.argmax([rot[0, 0], rot[1, 1], rot[2, 2]]))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(rot[i, i] - rot[j, j] - rot[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (rot[k, j] - rot[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (rot[j, i] + rot[i, j]) / s
        q[1 + k] = (rot[k, i] + rot[i, k]) / s
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a [w, x, y, z] quaternion (normalized internally)."""
    q = np.asarray(q, dtype=float).reshape(4)
    norm = float(np.linalg.norm(q))
    if norm < 1e-12:
        raise GeometryError("zero quaternion")
    w, x, y, z = q / norm
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def cumulative_path_length(positions) -> np.ndarray:
    """Arc length walked along a polyline of positions; starts at 0."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    if len(positions) == 0:
        return np.zeros(0)
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def random_pose(rng: np.random.Generator, max_angle: float = 3.0, max_radius: float = 10.0) -> Pose:
    """Uniformly seeded pose for tests and synthetic worlds."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return Pose(_so3_exp(angle * axis), rng.uniform(-max_radius, max_radius, size=3))
