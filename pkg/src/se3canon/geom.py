"""Exact rigid-transform algebra and rotation-format conversions.

All values are float64 and immutable after construction. Rotation matrices
act on column vectors; helpers that apply transforms to row-stacked point
arrays handle the transposition internally.

Conventions:
  * quaternions are (w, x, y, z) and canonicalized to w >= 0,
  * the 6D rotation format carries the first two columns of the matrix,
  * axis-angle vectors satisfy ||v|| <= pi; at exactly pi the axis sign is
    fixed so its first nonzero component is positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHONORMAL_TOL = 1e-9
QUAT_NORM_TOL = 1e-6
SIXD_EPS = 1e-8
SMALL_ANGLE = 1e-7


class NonUnitQuaternion(ValueError):
    """Quaternion norm deviates from 1 by more than the tolerance."""


class DegenerateSixD(ValueError):
    """6D rotation input is near zero or near collinear."""


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(3)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Rotation:
    """Proper rotation matrix (3x3, orthonormal, det +1)."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64).reshape(3, 3)
        if not np.allclose(m.T @ m, np.eye(3), atol=ORTHONORMAL_TOL, rtol=0.0):
            raise ValueError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(m) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation matrix determinant is not +1")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.eye(3))

    @staticmethod
    def about_z(theta: float) -> "Rotation":
        c, s = np.cos(theta), np.sin(theta)
        return Rotation(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))

    def transpose(self) -> "Rotation":
        return Rotation(self.m.T)

    def apply(self, vec) -> np.ndarray:
        """Rotate one 3-vector or an (..., 3) stack of vectors."""
        return np.asarray(vec, dtype=np.float64) @ self.m.T

    def angle_to(self, other: "Rotation") -> float:
        """Geodesic angle between two rotations, in [0, pi]."""
        c = (np.trace(self.m.T @ other.m) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element: rotation plus translation (meters)."""

    rot: Rotation
    trans: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "trans", _as_vec3(self.trans))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(Rotation.identity(), np.zeros(3))

    def apply(self, pts) -> np.ndarray:
        """Transform one point or an (..., 3) stack of points."""
        return np.asarray(pts, dtype=np.float64) @ self.rot.m.T + self.trans

    def as_matrix(self) -> np.ndarray:
        h = np.eye(4)
        h[:3, :3] = self.rot.m
        h[:3, 3] = self.trans
        return h

    @staticmethod
    def from_matrix(h) -> "RigidTransform":
        h = np.asarray(h, dtype=np.float64).reshape(4, 4)
        return RigidTransform(Rotation(h[:3, :3]), h[:3, 3])


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion, scalar part first."""

    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))


@dataclass(frozen=True)
class SixDRotation:
    """First two (pre-orthonormalization) columns of a rotation matrix."""

    a1: np.ndarray
    a2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a1", _as_vec3(self.a1))
        object.__setattr__(self, "a2", _as_vec3(self.a2))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.a1, self.a2])


@dataclass(frozen=True)
class AxisAngle:
    """Rotation vector; angle = ||v|| (radians), axis = v / ||v||."""

    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v", _as_vec3(self.v))

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(self.v))


# group operations ----------------------------------------------------------


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a then b in the usual matrix sense: (a*b).apply(p) = a.apply(b.apply(p))."""
    return RigidTransform(
        Rotation(a.rot.m @ b.rot.m),
        a.rot.m @ b.trans + a.trans,
    )


def inverse(t: RigidTransform) -> RigidTransform:
    rt = t.rot.m.T
    return RigidTransform(Rotation(rt), -rt @ t.trans)


# quaternion <-> matrix ------------------------------------------------------


def quat_to_rotation(q: Quaternion) -> Rotation:
    n = q.norm()
    if abs(n - 1.0) > QUAT_NORM_TOL:
        raise NonUnitQuaternion(f"quaternion norm {n} deviates from 1 by more than {QUAT_NORM_TOL}")
    w, x, y, z = q.as_array() / n
    return Rotation(np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ]))


def rotation_to_quat(r: Rotation) -> Quaternion:
    """Stable matrix-to-quaternion conversion, canonicalized to w >= 0."""
    m = r.m
    tr = np.trace(m)
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    q = np.array([w, x, y, z])
    q /= np.linalg.norm(q)
    if q[0] < 0.0:
        q = -q
    return Quaternion(*q)


# 6D <-> matrix ---------------------------------------------------------------


def sixd_to_rotation(s: SixDRotation) -> Rotation:
    n1 = np.linalg.norm(s.a1)
    if n1 <= SIXD_EPS:
        raise DegenerateSixD("first 6D vector is near zero")
    b1 = s.a1 / n1
    resid = s.a2 - (b1 @ s.a2) * b1
    n2 = np.linalg.norm(resid)
    if n2 <= SIXD_EPS:
        raise DegenerateSixD("6D vectors are near collinear")
    b2 = resid / n2
    b3 = np.cross(b1, b2)
    return Rotation(np.stack([b1, b2, b3], axis=1))


def rotation_to_sixd(r: Rotation) -> SixDRotation:
    return SixDRotation(r.m[:, 0], r.m[:, 1])


# axis-angle <-> matrix -------------------------------------------------------


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def axisangle_to_rotation(a: AxisAngle) -> Rotation:
    """Rodrigues formula; second-order series below the small-angle cutoff."""
    theta = a.angle
    k = _skew(a.v)
    if theta < SMALL_ANGLE:
        c1 = 1.0 - theta * theta / 6.0
        c2 = 0.5 - theta * theta / 24.0
    else:
        c1 = np.sin(theta) / theta
        c2 = (1.0 - np.cos(theta)) / (theta * theta)
    return Rotation(np.eye(3) + c1 * k + c2 * (k @ k))


def rotation_to_axisangle(r: Rotation) -> AxisAngle:
    """Inverse Rodrigues with angle in [0, pi].

    Near pi the antisymmetric part is ill-conditioned, so the axis is
    recovered from the largest diagonal of (R + I)/2 with its first nonzero
    component made positive.
    """
    m = r.m
    c = np.clip((np.trace(m) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(c))
    if theta < SMALL_ANGLE:
        # vee((R - R^T)/2) = sin(theta) * axis ~= theta * axis
        return AxisAngle(np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) / 2.0)
    if theta < np.pi - 1e-6:
        axis = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
        axis /= 2.0 * np.sin(theta)
        return AxisAngle(theta * axis)
    b = (m + np.eye(3)) / 2.0
    i = int(np.argmax(np.diag(b)))
    axis = b[:, i] / np.sqrt(max(b[i, i], 0.0))
    axis /= np.linalg.norm(axis)
    w = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) / 2.0
    dot = axis @ w
    if dot != 0.0:
        # theta slightly below pi: sin(theta) * axis still carries the sign
        if dot < 0.0:
            axis = -axis
    else:
        for comp in axis:
            if comp != 0.0:
                if comp < 0.0:
                    axis = -axis
                break
    return AxisAngle(theta * axis)
