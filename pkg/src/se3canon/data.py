"""Episode container and its binary serialization.

An episode is one training sample: a short observation window (point cloud +
robot state per frame), the expert action sequence in world frame, and the
ground-truth scene pose it was generated from.

File format (little-endian throughout), magic b"EPR1":
  uint32 name length, name bytes (utf-8 template id)
  int64 seed, uint32 m, uint32 n
  scene pose: 9 float64 rotation (row-major) + 3 float64 translation
  m observations: PCF1 cloud block, then 3 pos + 4 quat (wxyz) + 1 grip float64
  n actions: 3 pos + 6 sixd + 1 grip float64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geom
from .canon import AbsoluteAction, RelativeAction, RobotState
from .pointcloud import PointCloud, cloud_to_pcf_bytes, read_pcf_block

EPISODE_MAGIC = b"EPR1"


@dataclass(frozen=True)
class EpisodeRecord:
    """One imitation-learning sample; expert actions are world-frame targets."""

    observations: tuple[tuple[PointCloud, RobotState], ...]
    actions: tuple[AbsoluteAction, ...]
    scene_pose: geom.RigidTransform
    template: str
    seed: int

    @property
    def m(self) -> int:
        return len(self.observations)

    @property
    def n(self) -> int:
        return len(self.actions)

    def relative_actions(self) -> tuple[RelativeAction, ...]:
        """Expert displacements: delta_j composes on the left of pose_{j-1},
        starting from the most recent observed state."""
        prev = self.observations[-1][1].as_transform()
        rels = []
        for act in self.actions:
            cur = act.as_transform()
            rels.append(RelativeAction.from_transform(
                geom.compose(cur, geom.inverse(prev)), act.grip))
            prev = cur
        return tuple(rels)


def transform_episode(ep: EpisodeRecord, h: geom.RigidTransform) -> EpisodeRecord:
    """Rigidly move every quantity of an episode by ``h``."""
    obs = tuple(
        (cloud.transformed(h),
         RobotState(h.apply(state.pos), geom.Rotation(h.rot.m @ state.ori.m), state.grip))
        for cloud, state in ep.observations
    )
    acts = tuple(
        AbsoluteAction.from_transform(geom.compose(h, a.as_transform()), a.grip)
        for a in ep.actions
    )
    return EpisodeRecord(obs, acts, geom.compose(h, ep.scene_pose), ep.template, ep.seed)


# serialization -----------------------------------------------------------------


def episode_to_bytes(ep: EpisodeRecord) -> bytes:
    name = ep.template.encode("utf-8")
    out = [EPISODE_MAGIC, struct.pack("<I", len(name)), name,
           struct.pack("<qII", ep.seed, ep.m, ep.n)]
    pose = np.concatenate([ep.scene_pose.rot.m.ravel(), ep.scene_pose.trans])
    out.append(pose.astype("<f8").tobytes())
    for cloud, state in ep.observations:
        out.append(cloud_to_pcf_bytes(cloud))
        q = geom.rotation_to_quat(state.ori)
        rec = np.concatenate([state.pos, q.as_array(), [state.grip]])
        out.append(rec.astype("<f8").tobytes())
    for act in ep.actions:
        rec = np.concatenate([act.pos, act.ori_sixd.as_array(), [act.grip]])
        out.append(rec.astype("<f8").tobytes())
    return b"".join(out)


def episode_from_bytes(raw: bytes) -> EpisodeRecord:
    if raw[:4] != EPISODE_MAGIC:
        raise ValueError("bad EPR1 magic")
    (name_len,) = struct.unpack_from("<I", raw, 4)
    pos = 8
    template = raw[pos:pos + name_len].decode("utf-8")
    pos += name_len
    seed, m, n = struct.unpack_from("<qII", raw, pos)
    pos += 16
    pose_vals = np.frombuffer(raw[pos:pos + 96], dtype="<f8")
    pos += 96
    scene_pose = geom.RigidTransform(geom.Rotation(pose_vals[:9].reshape(3, 3)), pose_vals[9:])
    observations = []
    for _ in range(m):
        cloud, pos = read_pcf_block(raw, pos)
        vals = np.frombuffer(raw[pos:pos + 64], dtype="<f8")
        pos += 64
        q = geom.Quaternion(*vals[3:7])
        observations.append((cloud, RobotState(vals[:3], geom.quat_to_rotation(q), float(vals[7]))))
    actions = []
    for _ in range(n):
        vals = np.frombuffer(raw[pos:pos + 80], dtype="<f8")
        pos += 80
        actions.append(AbsoluteAction(vals[:3], geom.SixDRotation(vals[3:6], vals[6:9]),
                                      float(vals[9])))
    return EpisodeRecord(tuple(observations), tuple(actions), scene_pose, template, seed)


def save_episode(path, ep: EpisodeRecord) -> None:
    Path(path).write_bytes(episode_to_bytes(ep))


def load_episode(path) -> EpisodeRecord:
    return episode_from_bytes(Path(path).read_bytes())
