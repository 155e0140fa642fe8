"""Frames, SE(3) poses, sensor intrinsics, and pixel-to-angle conversions.

Conventions used throughout the package:

- World frame: x north, y east, z down. Depth is the world-z of the body
  origin and is positive underwater.
- Body frame: x forward, y starboard, z down. Yaw/pitch/roll are the ZYX
  Euler angles of the world<-body rotation.
- Optical frames (camera, sonar): z along the boresight, x right, y down.
  Bearing is positive to the right (+x), elevation positive downward (+y).

A `Pose3` stores the world<-body rotation as a unit quaternion (w, x, y, z)
plus the body origin in world coordinates. `transform(x)` maps body-frame
points into the parent frame. Local coordinates for optimization are the
right perturbation [dt; dtheta]: `p.retract(d) = p * Pose3(exp(dtheta), dt)`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

_QUAT_TOL = 1e-9


# ---------------------------------------------------------------------------
# Quaternion / SO(3) helpers. Quaternions are (w, x, y, z), scalar first.
# ---------------------------------------------------------------------------

def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = math.sqrt(float(np.dot(q, q)))
    if n == 0.0 or not math.isfinite(n):
        raise InputError("quaternion norm is zero or non-finite")
    return q / n


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    rv = np.asarray(rv, dtype=float)
    angle = math.sqrt(float(np.dot(rv, rv)))
    if angle < 1e-12:
        # sin(a/2)/a ~ 1/2 - a^2/48
        s = 0.5 - angle * angle / 48.0
        return quat_normalize(np.array([1.0, s * rv[0], s * rv[1], s * rv[2]]))
    s = math.sin(0.5 * angle) / angle
    return np.array([math.cos(0.5 * angle), s * rv[0], s * rv[1], s * rv[2]])


def rotvec_from_quat(q: np.ndarray) -> np.ndarray:
    """Rotation vector of q; magnitude in [0, pi]."""
    if q[0] < 0.0:
        q = -q
    v = q[1:4]
    s = math.sqrt(float(np.dot(v, v)))
    w = float(q[0])
    if s < 1e-12:
        return 2.0 / w * v
    angle = 2.0 * math.atan2(s, w)
    return (angle / s) * v


def rotate_vector(q: np.ndarray, x: np.ndarray) -> np.ndarray:
    return quat_to_matrix(q) @ np.asarray(x, dtype=float)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def so3_right_jacobian_inverse(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3): d/de Log(Exp(phi) Exp(e)) at e=0."""
    theta2 = float(np.dot(phi, phi))
    s = skew(phi)
    if theta2 < 1e-14:
        return np.eye(3) + 0.5 * s + (1.0 / 12.0) * (s @ s)
    theta = math.sqrt(theta2)
    c = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * s + c * (s @ s)


def so3_left_jacobian_inverse(phi: np.ndarray) -> np.ndarray:
    """Inverse left Jacobian: d/de Log(Exp(e) Exp(phi)) at e=0."""
    return so3_right_jacobian_inverse(-np.asarray(phi, dtype=float))


# Batched variants used by the optimizer's vectorized factor evaluation.
# Semantics match the scalar functions above element-for-element.

def quat_multiply_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=1)


def quat_conjugate_batch(q: np.ndarray) -> np.ndarray:
    out = -q.copy()
    out[:, 0] = q[:, 0]
    return out


def quat_to_matrix_batch(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    n = q.shape[0]
    r = np.empty((n, 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotvec_from_quat_batch(q: np.ndarray) -> np.ndarray:
    q = np.where(q[:, :1] < 0.0, -q, q)
    v = q[:, 1:4]
    s = np.linalg.norm(v, axis=1)
    w = q[:, 0]
    small = s < 1e-12
    angle = 2.0 * np.arctan2(s, w)
    safe_s = np.where(small, 1.0, s)
    scale = np.where(small, 2.0 / w, angle / safe_s)
    return scale[:, None] * v


def skew_batch(v: np.ndarray) -> np.ndarray:
    n = v.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def so3_right_jacobian_inverse_batch(phi: np.ndarray) -> np.ndarray:
    theta2 = np.einsum("ni,ni->n", phi, phi)
    s = skew_batch(phi)
    s2 = np.einsum("nij,njk->nik", s, s)
    small = theta2 < 1e-14
    theta = np.sqrt(np.where(small, 1.0, theta2))
    c = np.where(
        small,
        1.0 / 12.0,
        1.0 / np.where(small, 1.0, theta2)
        - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta)),
    )
    return np.eye(3)[None, :, :] + 0.5 * s + c[:, None, None] * s2


def euler_zyx_from_matrix_batch(r: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pitch = -np.arcsin(np.clip(r[:, 2, 0], -1.0, 1.0))
    roll = np.arctan2(r[:, 2, 1], r[:, 2, 2])
    yaw = np.arctan2(r[:, 1, 0], r[:, 0, 0])
    return yaw, pitch, roll


def euler_zyx_from_matrix(r: np.ndarray) -> tuple[float, float, float]:
    """(yaw, pitch, roll) of R = Rz(yaw) Ry(pitch) Rx(roll)."""
    pitch = -math.asin(max(-1.0, min(1.0, float(r[2, 0]))))
    roll = math.atan2(float(r[2, 1]), float(r[2, 2]))
    yaw = math.atan2(float(r[1, 0]), float(r[0, 0]))
    return yaw, pitch, roll


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


# ---------------------------------------------------------------------------
# Pose3
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose3:
    """Rigid transform: world<-body unit quaternion + body origin in world."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        t = np.asarray(self.t, dtype=float)
        if q.shape != (4,) or t.shape != (3,):
            raise InputError("Pose3 expects a 4-quaternion and a 3-translation")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise InputError("Pose3 components must be finite")
        n = math.sqrt(float(np.dot(q, q)))
        if abs(n - 1.0) > 1e-6:
            raise InputError(f"quaternion norm {n} too far from 1")
        object.__setattr__(self, "q", q / n)
        object.__setattr__(self, "t", t)

    @classmethod
    def _unchecked(cls, q: np.ndarray, t: np.ndarray, rot: np.ndarray | None = None) -> "Pose3":
        # internal fast path: inputs are trusted (unit q, float arrays)
        self = object.__new__(cls)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)
        if rot is not None:
            object.__setattr__(self, "_rot", rot)
        return self

    @staticmethod
    def identity() -> "Pose3":
        return Pose3()

    @staticmethod
    def from_rotvec(rv: np.ndarray, t: np.ndarray | None = None) -> "Pose3":
        return Pose3(quat_from_rotvec(rv), np.zeros(3) if t is None else np.asarray(t, dtype=float))

    @staticmethod
    def from_euler(yaw: float, pitch: float, roll: float, t: np.ndarray | None = None) -> "Pose3":
        qz = quat_from_rotvec(np.array([0.0, 0.0, yaw]))
        qy = quat_from_rotvec(np.array([0.0, pitch, 0.0]))
        qx = quat_from_rotvec(np.array([roll, 0.0, 0.0]))
        q = quat_multiply(quat_multiply(qz, qy), qx)
        return Pose3(q, np.zeros(3) if t is None else np.asarray(t, dtype=float))

    def rotation_matrix(self) -> np.ndarray:
        rot = getattr(self, "_rot", None)
        if rot is None:
            rot = quat_to_matrix(self.q)
            object.__setattr__(self, "_rot", rot)
        return rot

    def compose(self, other: "Pose3") -> "Pose3":
        q = quat_normalize(quat_multiply(self.q, other.q))
        t = self.rotation_matrix() @ other.t + self.t
        return Pose3._unchecked(q, t)

    def inverse(self) -> "Pose3":
        qi = quat_conjugate(self.q)
        ri = self.rotation_matrix().T
        return Pose3._unchecked(qi, -(ri @ self.t), rot=ri)

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Map a body-frame point into the parent frame."""
        return self.rotation_matrix() @ x + self.t

    def rotvec(self) -> np.ndarray:
        return rotvec_from_quat(self.q)

    def log(self) -> np.ndarray:
        """[translation; rotation-vector], the local coordinates of this pose."""
        return np.concatenate([self.t, rotvec_from_quat(self.q)])

    def retract(self, delta: np.ndarray) -> "Pose3":
        """Right perturbation: self * Pose3(exp(delta[3:6]), delta[0:3])."""
        delta = np.asarray(delta, dtype=float)
        return self.compose(Pose3._unchecked(quat_from_rotvec(delta[3:6]),
                                             delta[0:3].copy()))

    def euler_zyx(self) -> tuple[float, float, float]:
        return euler_zyx_from_matrix(self.rotation_matrix())

    def yaw(self) -> float:
        return self.euler_zyx()[0]

    def almost_equal(self, other: "Pose3", tol: float = 1e-9) -> bool:
        d = self.inverse().compose(other)
        angle = float(np.linalg.norm(d.rotvec()))
        return angle <= tol and float(np.linalg.norm(d.t)) <= tol


def compose(a: Pose3, b: Pose3) -> Pose3:
    return a.compose(b)


def inverse(p: Pose3) -> Pose3:
    return p.inverse()


def transform_point(p: Pose3, x: np.ndarray) -> np.ndarray:
    return p.transform(x)


def optical_from_body() -> Pose3:
    """Canonical forward-looking optical mount.

    Maps body axes (x fwd, y stbd, z down) onto optical axes (z fwd,
    x right, y down): p_optical = R @ p_body.
    """
    # This axis permutation is the -120-degree turn about (1,1,1)/sqrt(3).
    rv = -2.0 * math.pi / 3.0 * np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0)
    return Pose3(quat_from_rotvec(rv), np.zeros(3))


# ---------------------------------------------------------------------------
# Sensor descriptions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InputError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise InputError("principal point must lie inside the image")

    @staticmethod
    def from_fov(hfov: float, vfov: float, width: int, height: int) -> "CameraIntrinsics":
        fx = 0.5 * width / math.tan(0.5 * hfov)
        fy = 0.5 * height / math.tan(0.5 * vfov)
        return CameraIntrinsics(fx=fx, fy=fy, cx=0.5 * width, cy=0.5 * height,
                                width=width, height=height)


@dataclass(frozen=True)
class SonarConfig:
    horizontal_fov: float
    num_beams: int
    range_resolution: float
    num_bins: int
    vertical_aperture: float
    intensity_threshold: float

    def __post_init__(self):
        if self.num_beams < 2:
            raise InputError("sonar needs at least 2 beams")
        if self.horizontal_fov <= 0 or self.range_resolution <= 0 or self.num_bins <= 0:
            raise InputError("sonar fov, range resolution and bin count must be positive")
        if not (0.0 <= self.intensity_threshold <= 1.0):
            raise InputError("intensity threshold must lie in [0, 1]")

    @property
    def angular_resolution(self) -> float:
        return self.horizontal_fov / self.num_beams

    @property
    def max_range(self) -> float:
        return self.num_bins * self.range_resolution

    def beam_bearings(self) -> np.ndarray:
        """Beam center bearings, strictly increasing across the fan."""
        i = np.arange(self.num_beams)
        return -0.5 * self.horizontal_fov + (i + 0.5) * self.angular_resolution


@dataclass(frozen=True)
class Extrinsics:
    camera_from_body: Pose3 = field(default_factory=optical_from_body)
    sonar_from_body: Pose3 = field(default_factory=optical_from_body)


# ---------------------------------------------------------------------------
# Pixel <-> angle conversions
# ---------------------------------------------------------------------------

def _check_in_bounds(centroid, cam: CameraIntrinsics) -> tuple[float, float]:
    u, v = float(centroid[0]), float(centroid[1])
    if not (math.isfinite(u) and math.isfinite(v)):
        raise InputError("pixel centroid must be finite")
    if not (0.0 <= u <= cam.width) or not (0.0 <= v <= cam.height):
        raise InputError(f"pixel centroid ({u}, {v}) outside image bounds "
                         f"{cam.width}x{cam.height}")
    return u, v


def pixel_to_bearing(centroid, cam: CameraIntrinsics) -> float:
    """Horizontal angle of a pixel: atan((u - cx) / fx), positive right."""
    u, _ = _check_in_bounds(centroid, cam)
    return math.atan((u - cam.cx) / cam.fx)


def pixel_to_elevation(centroid, cam: CameraIntrinsics) -> float:
    """Vertical angle of a pixel: atan((v - cy) / fy), positive down."""
    _, v = _check_in_bounds(centroid, cam)
    return math.atan((v - cam.cy) / cam.fy)


def project_point(p_cam: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of an optical-frame point with z > 0."""
    x, y, z = float(p_cam[0]), float(p_cam[1]), float(p_cam[2])
    if z <= 0:
        raise InputError("cannot project a point at or behind the camera")
    return np.array([cam.cx + cam.fx * x / z, cam.cy + cam.fy * y / z])
