"""Frame transport for robot states and actions.

Given the canonical frame T of an observation (estimated rotation plus cloud
mean), states and world-frame target poses move into the canonical frame by a
left inverse, and pose displacements by conjugation. De-canonicalization is
the exact inverse; the gripper channel passes through untouched.

When frame estimation reported a degenerate fallback, the frame's rotation is
the identity, so every transform here degrades to translation-only transport.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom


@dataclass(frozen=True)
class RobotState:
    """End-effector pose plus normalized gripper opening in [0, 1]."""

    pos: np.ndarray
    ori: geom.Rotation
    grip: float

    def __post_init__(self):
        object.__setattr__(self, "pos", np.asarray(self.pos, dtype=np.float64).reshape(3))

    def as_transform(self) -> geom.RigidTransform:
        return geom.RigidTransform(self.ori, self.pos)


@dataclass(frozen=True)
class AbsoluteAction:
    """World-frame target pose; orientation in the 6D continuous format."""

    pos: np.ndarray
    ori_sixd: geom.SixDRotation
    grip: float

    def __post_init__(self):
        object.__setattr__(self, "pos", np.asarray(self.pos, dtype=np.float64).reshape(3))

    def as_transform(self) -> geom.RigidTransform:
        return geom.RigidTransform(geom.sixd_to_rotation(self.ori_sixd), self.pos)

    @staticmethod
    def from_transform(t: geom.RigidTransform, grip: float) -> "AbsoluteAction":
        return AbsoluteAction(t.trans, geom.rotation_to_sixd(t.rot), grip)


@dataclass(frozen=True)
class RelativeAction:
    """Pose displacement applied on the left of the previous pose."""

    dpos: np.ndarray
    dori_axisangle: geom.AxisAngle
    grip: float

    def __post_init__(self):
        object.__setattr__(self, "dpos", np.asarray(self.dpos, dtype=np.float64).reshape(3))

    def as_transform(self) -> geom.RigidTransform:
        return geom.RigidTransform(geom.axisangle_to_rotation(self.dori_axisangle), self.dpos)

    @staticmethod
    def from_transform(t: geom.RigidTransform, grip: float) -> "RelativeAction":
        return RelativeAction(t.trans, geom.rotation_to_axisangle(t.rot), grip)


@dataclass(frozen=True)
class CanonicalFrame:
    """Estimated frame of one observation timestep; maps canonical to world."""

    T: geom.RigidTransform
    degenerate_flag: bool = False

    @staticmethod
    def identity() -> "CanonicalFrame":
        return CanonicalFrame(geom.RigidTransform.identity())


# state transport --------------------------------------------------------------


def canon_state(s: RobotState, f: CanonicalFrame) -> RobotState:
    cn = geom.compose(geom.inverse(f.T), s.as_transform())
    return RobotState(cn.trans, cn.rot, s.grip)


def decanon_state(s: RobotState, f: CanonicalFrame) -> RobotState:
    world = geom.compose(f.T, s.as_transform())
    return RobotState(world.trans, world.rot, s.grip)


# absolute actions ---------------------------------------------------------------


def canon_action_abs(a: AbsoluteAction, f: CanonicalFrame) -> AbsoluteAction:
    cn = geom.compose(geom.inverse(f.T), a.as_transform())
    return AbsoluteAction.from_transform(cn, a.grip)


def decanon_action_abs(a: AbsoluteAction, f: CanonicalFrame) -> AbsoluteAction:
    world = geom.compose(f.T, a.as_transform())
    return AbsoluteAction.from_transform(world, a.grip)


# relative actions ---------------------------------------------------------------


def canon_action_rel(d: RelativeAction, f: CanonicalFrame) -> RelativeAction:
    t_inv = geom.inverse(f.T)
    cn = geom.compose(geom.compose(t_inv, d.as_transform()), f.T)
    return RelativeAction.from_transform(cn, d.grip)


def decanon_action_rel(d: RelativeAction, f: CanonicalFrame) -> RelativeAction:
    world = geom.compose(geom.compose(f.T, d.as_transform()), geom.inverse(f.T))
    return RelativeAction.from_transform(world, d.grip)


# diagnostics --------------------------------------------------------------------


def frame_drift(f_prev: CanonicalFrame, f_cur: CanonicalFrame) -> tuple[float, float]:
    """How far two adjacent frames disagree: (rotation angle, |translation delta|).

    Quantifies the error of treating consecutive frames as equal when
    transporting relative actions.
    """
    angle = f_prev.T.rot.angle_to(f_cur.T.rot)
    return angle, float(np.linalg.norm(f_cur.T.trans - f_prev.T.trans))
