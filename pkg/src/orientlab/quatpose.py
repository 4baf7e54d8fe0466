"""Unit-quaternion camera pose math.

Quaternions are stored as (w, x, y, z) and kept canonical: unit norm with
w >= 0, so a rotation and its double-cover twin map to the same value. The
sine encoding turns a canonical quaternion into a small feature vector whose
entries interpolate near-linearly along SLERP paths, which is what makes it
a convenient conditioning signal for the denoiser.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import CameraInsideScene, DegenerateQuaternion, InvalidConfig

DEFAULT_NUM_FREQUENCIES = 7

# Below this angle SLERP falls back to normalized linear interpolation.
SLERP_DEGENERATE_ANGLE = 1e-6


@dataclass(frozen=True)
class Quaternion:
    """Canonical unit quaternion (w, x, y, z), w >= 0."""

    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def dot(self, other: "Quaternion") -> float:
        return (
            self.w * other.w
            + self.x * other.x
            + self.y * other.y
            + self.z * other.z
        )

    def norm(self) -> float:
        return math.sqrt(self.dot(self))


def canonicalize(q) -> Quaternion:
    """Normalize a raw 4-vector and resolve the double cover.

    The sign convention is w >= 0; for w == 0 the first nonzero of (x, y, z)
    is made nonnegative so the mapping is single-valued everywhere.
    """
    arr = np.asarray(q, dtype=np.float64).reshape(4)
    if not np.all(np.isfinite(arr)):
        raise DegenerateQuaternion("quaternion has non-finite components")
    norm_sq = float(np.dot(arr, arr))
    if norm_sq < 1e-24:
        raise DegenerateQuaternion("cannot canonicalize a zero-norm quaternion")
    # skip renormalization at unit norm so canonicalize is exactly idempotent
    if abs(norm_sq - 1.0) > 1e-14:
        arr = arr / math.sqrt(norm_sq)
    if arr[0] < 0.0:
        arr = -arr
    elif arr[0] == 0.0:
        for c in arr[1:]:
            if c != 0.0:
                if c < 0.0:
                    arr = -arr
                break
    return Quaternion(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


def quat_angle(q1: Quaternion, q2: Quaternion) -> float:
    """Angle between two canonical quaternions, arccos of the clamped dot."""
    d = min(1.0, max(-1.0, q1.dot(q2)))
    return math.acos(d)


def slerp(q1: Quaternion, q2: Quaternion, t: float) -> Quaternion:
    """Spherical linear interpolation with constant angular velocity.

    Near-parallel inputs (angle below SLERP_DEGENERATE_ANGLE) use a linear
    blend followed by normalization; the result is re-canonicalized.
    """
    omega = quat_angle(q1, q2)
    a1 = q1.as_array()
    a2 = q2.as_array()
    if omega < SLERP_DEGENERATE_ANGLE:
        out = (1.0 - t) * a1 + t * a2
    else:
        s = math.sin(omega)
        out = (math.sin((1.0 - t) * omega) / s) * a1 + (math.sin(t * omega) / s) * a2
    return canonicalize(out)


def sine_encode(q: Quaternion, num_frequencies: int = DEFAULT_NUM_FREQUENCIES) -> np.ndarray:
    """Encode a canonical quaternion as sin(component * i) features.

    Returns a flat vector of length 4 * num_frequencies in component-major
    order: all frequencies of w, then of x, y, z. Entries lie in [-1, 1].
    Integer frequencies i = 1..num_frequencies are used as printed; since
    each component lies in [-1, 1] the first band alone is already injective
    per component.
    """
    if num_frequencies < 1:
        raise InvalidConfig("num_frequencies must be a positive integer")
    comps = q.as_array()
    freqs = np.arange(1, num_frequencies + 1, dtype=np.float64)
    return np.sin(np.outer(comps, freqs)).reshape(-1)


def sine_encode_batch(quats, num_frequencies: int = DEFAULT_NUM_FREQUENCIES) -> np.ndarray:
    """Vectorized sine_encode over a sequence of quaternions, shape (B, 4F)."""
    if num_frequencies < 1:
        raise InvalidConfig("num_frequencies must be a positive integer")
    comps = np.stack([q.as_array() for q in quats], axis=0)
    freqs = np.arange(1, num_frequencies + 1, dtype=np.float64)
    return np.sin(comps[:, :, None] * freqs[None, None, :]).reshape(len(quats), -1)


def quat_to_matrix(q: Quaternion) -> np.ndarray:
    """Rotation matrix whose columns are the camera axes in world frame."""
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def matrix_to_quat(rot: np.ndarray) -> Quaternion:
    """Canonical quaternion from a 3x3 rotation matrix (Shepperd's method)."""
    r = np.asarray(rot, dtype=np.float64)
    trace = r[0, 0] + r[1, 1] + r[2, 2]
    if trace > 0.0:
        s = math.sqrt(trace + 1.0) * 2.0
        q = (0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s)
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = ((r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s)
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = ((r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s)
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = ((r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s)
    return canonicalize(q)


@dataclass(frozen=True)
class CameraPose:
    """Camera placement: canonical orientation plus position/look_at/up.

    The orientation maps camera-frame vectors to world frame; camera axes are
    x = right, y = up, z = backward (the view direction is -z).
    """

    orientation: Quaternion
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray


def look_at_pose(position, look_at=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Build a pose from position/target/up; orientation is derived."""
    pos = np.asarray(position, dtype=np.float64)
    target = np.asarray(look_at, dtype=np.float64)
    up_hint = np.asarray(up, dtype=np.float64)
    forward = target - pos
    fn = np.linalg.norm(forward)
    if fn < 1e-12:
        raise InvalidConfig("camera position coincides with look_at target")
    forward = forward / fn
    right = np.cross(forward, up_hint)
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise InvalidConfig("view direction is parallel to the up vector")
    right = right / rn
    cam_up = np.cross(right, forward)
    rot = np.stack([right, cam_up, -forward], axis=1)
    return CameraPose(matrix_to_quat(rot), pos, target, up_hint)


def pose_from_spherical(azimuth: float, elevation: float, radius: float) -> CameraPose:
    """Camera on a sphere of given radius, looking at the origin, up = +z."""
    if radius <= 1.0:
        raise CameraInsideScene(f"radius {radius} must exceed the unit scene sphere")
    if not -math.pi / 2 < elevation < math.pi / 2:
        raise InvalidConfig("elevation must lie strictly inside (-pi/2, pi/2)")
    ce = math.cos(elevation)
    pos = (radius * ce * math.cos(azimuth), radius * ce * math.sin(azimuth), radius * math.sin(elevation))
    return look_at_pose(pos)


def uniform_hemisphere_poses(k: int, elevation: float, radius: float) -> list[CameraPose]:
    """k poses at azimuths 2*pi*j/k sharing one elevation and radius."""
    if k < 1:
        raise InvalidConfig("pose count k must be >= 1")
    if elevation < 0.0:
        raise InvalidConfig("hemisphere elevation must be >= 0")
    return [pose_from_spherical(2.0 * math.pi * j / k, elevation, radius) for j in range(k)]


def _fmt17(v: float) -> str:
    return format(float(v), ".17g")


def pose_to_json(pose: CameraPose) -> str:
    """Serialize as {"quat":[w,x,y,z],"position":[x,y,z]} with 17-digit floats."""
    q = pose.orientation
    quat = ",".join(_fmt17(v) for v in (q.w, q.x, q.y, q.z))
    posv = ",".join(_fmt17(v) for v in pose.position)
    return '{"quat":[%s],"position":[%s]}' % (quat, posv)


def pose_from_json(text: str) -> CameraPose:
    """Inverse of pose_to_json; look_at/up are restored to origin/+z.

    Stored quaternions were canonical, so they are rebuilt bit-for-bit
    (canonicalize leaves unit-norm values untouched).
    """
    obj = json.loads(text)
    quat = canonicalize(obj["quat"])
    pos = np.asarray(obj["position"], dtype=np.float64)
    return CameraPose(quat, pos, np.zeros(3), np.array([0.0, 0.0, 1.0]))


def pose_azimuth(pose: CameraPose) -> float:
    """Azimuth of the camera position in [0, 2*pi)."""
    az = math.atan2(float(pose.position[1]), float(pose.position[0]))
    return az % (2.0 * math.pi)
