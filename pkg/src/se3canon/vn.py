"""Rotation-equivariant vector-channel network and canonical-frame estimation.

Features are stacks of 3D vector channels, shaped (..., N, C, 3) per point or
(..., C, 3) after pooling. Every layer commutes with a global rotation of the
vector axis, so the two output vectors rotate with the input cloud and the
orthonormal frame assembled from them transports exactly.

Modes:
  * ``so3`` -- the estimated frame is the full orthonormalized rotation,
  * ``so2`` -- only the in-plane (z-axis) component of that rotation is kept,
    for scenes whose vertical axis is fixed.

Leading batch dimensions are supported everywhere; parameters are shared
across the batch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import geom
from .autodiff import (
    Tensor, as_tensor, atan2, clip_min, cross, gather_rows, mean, reshape,
    stack, sum_, swapaxes, vnorm,
)
from .pointcloud import KnnGraph, PointCloud, knn_graph

VN_MAGIC = b"VNP1"
_MODES = ("so3", "so2")
_NORM_EPS = 1e-8
_FRAME_EPS = 1e-7
_GIMBAL_EPS = 1e-14


class DegenerateFrame(ValueError):
    """The two estimated vectors cannot span a frame (zero or collinear)."""


class GimbalDegenerate(ValueError):
    """First frame column is too close to +-z for in-plane angle extraction."""


@dataclass(frozen=True)
class VNConfig:
    """Architecture knobs for the equivariant branch."""

    repeat_layers: int = 4
    feat_dim: int = 48
    q: int = 10
    mode: str = "so3"

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}")
        if self.repeat_layers < 1 or self.feat_dim < 1 or self.q < 1:
            raise ValueError("repeat_layers, feat_dim and q must be positive")


@dataclass
class VNParams:
    """Weights for the equivariant branch; see :func:`init_vn_params`."""

    block_w: list[Tensor]  # block i channel-mixing weights, (C_in, D)
    block_u: list[Tensor]  # block i activation direction weights, (D, D)
    head: Tensor           # (D, 2): maps pooled channels to the two frame vectors

    def tensors(self) -> list[Tensor]:
        return [*self.block_w, *self.block_u, self.head]

    def to_flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors()])


def vn_param_count(cfg: VNConfig) -> int:
    d, layers = cfg.feat_dim, cfg.repeat_layers
    return 3 * d + (layers - 1) * d * d + layers * d * d + 2 * d


def init_vn_params(cfg: VNConfig, seed: int) -> VNParams:
    """Uniform [-s, s] with s = 1/sqrt(C_in) per map; any full-rank draw keeps
    the layer equivariance exact."""
    rng = np.random.default_rng(seed)

    def draw(c_in, c_out):
        s = 1.0 / np.sqrt(c_in)
        return Tensor(rng.uniform(-s, s, size=(c_in, c_out)), requires_grad=True)

    d = cfg.feat_dim
    block_w = [draw(3 if i == 0 else d, d) for i in range(cfg.repeat_layers)]
    block_u = [draw(d, d) for _ in range(cfg.repeat_layers)]
    return VNParams(block_w=block_w, block_u=block_u, head=draw(d, 2))


def vn_params_from_flat(cfg: VNConfig, flat: np.ndarray) -> VNParams:
    if flat.size != vn_param_count(cfg):
        raise ValueError("flat parameter vector does not match the config")
    d = cfg.feat_dim
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        t = Tensor(flat[pos:pos + n].reshape(shape), requires_grad=True)
        pos += n
        return t

    block_w = [take((3 if i == 0 else d, d)) for i in range(cfg.repeat_layers)]
    block_u = [take((d, d)) for _ in range(cfg.repeat_layers)]
    return VNParams(block_w=block_w, block_u=block_u, head=take((d, 2)))


# equivariant layers ----------------------------------------------------------


def edge_features(x_de, graph) -> Tensor:
    """Neighborhood descriptor of a decentered cloud: 3 vector channels.

    Per point, the per-channel mean over its q neighbors of
    (position, offset to neighbor, unit direction to neighbor).
    Accepts (..., N, 3) clouds with a matching (..., N, q) index table.
    """
    x = as_tensor(x_de.points if isinstance(x_de, PointCloud) else x_de)
    idx = graph.neighbor_idx if isinstance(graph, KnnGraph) else np.asarray(graph)
    neigh = gather_rows(x, idx)                            # (..., N, q, 3)
    center = reshape(x, x.shape[:-1] + (1, 3))
    rel = neigh - center
    dirs = rel / clip_min(vnorm(rel, axis=-1, keepdims=True), _NORM_EPS)
    return stack([x, mean(rel, axis=-2), mean(dirs, axis=-2)], axis=-2)


def vn_linear(f, w) -> Tensor:
    """Mix vector channels with shared weights; never mixes spatial coords."""
    f, w = as_tensor(f), as_tensor(w)
    if f.shape[-2] != w.shape[0]:
        raise ValueError(f"channel mismatch: feature has {f.shape[-2]}, weights expect {w.shape[0]}")
    return swapaxes(swapaxes(f, -1, -2) @ w, -1, -2)


def vn_activation(f, u) -> Tensor:
    """Direction-gated rectifier: keep channels on the learned half-space,
    project the rest onto its boundary plane."""
    f = as_tensor(f)
    d = vn_linear(f, u)
    dhat = d / clip_min(vnorm(d, axis=-1, keepdims=True), _NORM_EPS)
    dot = sum_(f * dhat, axis=-1, keepdims=True)
    gate = (dot.data < 0.0).astype(np.float64)  # constant: gradient ignores the branch choice
    return f - Tensor(gate) * dot * dhat


def vn_mean_pool(f) -> Tensor:
    """Mean over points in a content-sorted order, so permuting the input
    points reproduces the pooled value bitwise."""
    f = as_tensor(f)
    n, c = f.shape[-3], f.shape[-2]
    lead = f.shape[:-3]
    rows = f.data.reshape(*lead, n, c * 3)
    flat = rows.reshape(-1, n, c * 3)
    order = np.empty(flat.shape[:2], dtype=np.int64)
    for b in range(flat.shape[0]):
        order[b] = np.lexsort(flat[b].T[::-1])
    order = order.reshape(*lead, n)
    sorted_rows = gather_rows(reshape(f, lead + (n, c * 3)), order[..., None])
    return mean(reshape(sorted_rows, lead + (n, c, 3)), axis=-3)


def global_feature(x_de, cfg: VNConfig, params: VNParams, graph=None) -> Tensor:
    """Pooled equivariant feature stack, (..., feat_dim, 3)."""
    if graph is None:
        graph = _build_graph(x_de, cfg.q)
    f = edge_features(x_de, graph)
    for w, u in zip(params.block_w, params.block_u):
        f = vn_activation(vn_linear(f, w), u)
    return vn_mean_pool(f)


def forward_phi(x_de, cfg: VNConfig, params: VNParams, graph=None) -> tuple[Tensor, Tensor]:
    """Two rotation-equivariant 3-vectors summarizing the decentered cloud."""
    pooled = global_feature(x_de, cfg, params, graph)
    out = vn_linear(pooled, params.head)  # (..., 2, 3)
    return out[..., 0, :], out[..., 1, :]


def _build_graph(x_de, q: int):
    if isinstance(x_de, PointCloud):
        return knn_graph(x_de, q)
    data = x_de.data if isinstance(x_de, Tensor) else np.asarray(x_de)
    if data.ndim == 2:
        return knn_graph(PointCloud(data), q)
    flat = data.reshape(-1, *data.shape[-2:])
    idx = np.stack([knn_graph(PointCloud(c), q).neighbor_idx for c in flat])
    return idx.reshape(*data.shape[:-2], data.shape[-2], q)


# frame assembly --------------------------------------------------------------


def schmidt_t(r1: Tensor, r2: Tensor) -> Tensor:
    """Differentiable two-vector orthonormalization; columns (u1, u2, u1 x u2).

    Callers must ensure the inputs are non-degenerate (see :func:`schmidt`).
    """
    u1 = r1 / vnorm(r1, axis=-1, keepdims=True)
    w = r2 - sum_(u1 * r2, axis=-1, keepdims=True) * u1
    u2 = w / vnorm(w, axis=-1, keepdims=True)
    return stack([u1, u2, cross(u1, u2)], axis=-1)


def frame_degenerate(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    """Boolean (per batch item) check of the orthogonalization preconditions."""
    n1 = np.linalg.norm(r1, axis=-1)
    u1 = r1 / np.where(n1 > 0.0, n1, 1.0)[..., None]
    resid = r2 - np.sum(u1 * r2, axis=-1, keepdims=True) * u1
    return (n1 <= _FRAME_EPS) | (np.linalg.norm(resid, axis=-1) <= _FRAME_EPS)


def schmidt(r1, r2) -> geom.Rotation:
    """Orthonormalize two 3-vectors into a proper rotation.

    Raises DegenerateFrame when the first vector is near zero or the second
    is near collinear with it.
    """
    r1 = np.asarray(r1, dtype=np.float64).reshape(3)
    r2 = np.asarray(r2, dtype=np.float64).reshape(3)
    if frame_degenerate(r1, r2):
        raise DegenerateFrame("frame vectors are near zero or near collinear")
    return geom.Rotation(schmidt_t(Tensor(r1), Tensor(r2)).data)


def extract_so2_t(r: Tensor) -> Tensor:
    """In-plane angle of the first frame column: atan2(y1, x1)."""
    return atan2(r[..., 1, 0], r[..., 0, 0])


def extract_so2(r: geom.Rotation) -> float:
    x1, y1 = r.m[0, 0], r.m[1, 0]
    if x1 * x1 + y1 * y1 <= _GIMBAL_EPS:
        raise GimbalDegenerate("first frame column is aligned with the z axis")
    return float(np.arctan2(y1, x1))


def _rot_z_t(theta: Tensor) -> Tensor:
    from .autodiff import cos as t_cos, sin as t_sin

    c, s = t_cos(theta), t_sin(theta)
    zero = Tensor(np.zeros_like(theta.data))
    one = Tensor(np.ones_like(theta.data))
    flat = stack([c, -s, zero, s, c, zero, zero, zero, one], axis=-1)
    return reshape(flat, theta.shape + (3, 3))


# canonicalization ------------------------------------------------------------


def canonicalize_t(x, cfg: VNConfig, params: VNParams, graph=None):
    """Differentiable canonical-frame estimation.

    ``x`` is a raw (..., N, 3) cloud. Returns (rot, mean, x_cn, degenerate):
    the estimated rotation as a (..., 3, 3) Tensor, the cloud mean (constant),
    the canonicalized cloud ``R^T (x - mean)`` as a Tensor, and a boolean
    degeneracy mask. Degenerate items fall back to the identity rotation so
    the pipeline degrades to translation-only canonicalization.
    """
    x = as_tensor(x)
    mean_pt = x.data.mean(axis=-2, keepdims=True)
    x_de = x - Tensor(mean_pt)
    r1, r2 = forward_phi(x_de, cfg, params, graph)

    degenerate = frame_degenerate(r1.data, r2.data)
    if np.any(degenerate):
        # substitute safe spanning vectors, then overwrite with identity below
        mask = degenerate[..., None].astype(np.float64)
        e1 = np.broadcast_to(np.array([1.0, 0.0, 0.0]), r1.shape)
        e2 = np.broadcast_to(np.array([0.0, 1.0, 0.0]), r2.shape)
        r1 = r1 * Tensor(1.0 - mask) + Tensor(mask * e1)
        r2 = r2 * Tensor(1.0 - mask) + Tensor(mask * e2)
    rot = schmidt_t(r1, r2)

    if cfg.mode == "so2":
        col = rot.data[..., 0, 0] ** 2 + rot.data[..., 1, 0] ** 2
        gimbal = col <= _GIMBAL_EPS
        if np.any(gimbal & ~degenerate):
            mask = (gimbal & ~degenerate)[..., None, None].astype(np.float64)
            rot = rot * Tensor(1.0 - mask) + Tensor(mask * np.eye(3))
            degenerate = degenerate | gimbal
        rot = _rot_z_t(extract_so2_t(rot))

    if np.any(degenerate):
        mask = degenerate[..., None, None].astype(np.float64)
        rot = rot * Tensor(1.0 - mask) + Tensor(mask * np.eye(3))

    x_cn = x_de @ rot  # row convention: (x - mean) R == R^T applied per column vector
    return rot, mean_pt[..., 0, :], x_cn, degenerate


def estimate_rotation(x: PointCloud, cfg: VNConfig, params: VNParams
                      ) -> tuple[geom.RigidTransform, PointCloud, bool]:
    """Canonical frame of one cloud: (transform, canonical cloud, fallback flag).

    The transform maps canonical coordinates back to observation coordinates;
    all clouds related by a transform in the configured mode's class share the
    canonical output.
    """
    rot, mean_pt, x_cn, degenerate = canonicalize_t(x.points, cfg, params)
    t = geom.RigidTransform(geom.Rotation(rot.data), mean_pt)
    return t, PointCloud(x_cn.data), bool(degenerate)


# persistence -----------------------------------------------------------------

_MODE_CODES = {"so3": 0, "so2": 1}
_CODE_MODES = {v: k for k, v in _MODE_CODES.items()}


def write_vn_block(cfg: VNConfig, params: VNParams) -> bytes:
    header = struct.pack("<4I", _MODE_CODES[cfg.mode], cfg.repeat_layers, cfg.feat_dim, cfg.q)
    return VN_MAGIC + header + params.to_flat().astype("<f8").tobytes()


def read_vn_block(raw: bytes, offset: int = 0) -> tuple[VNConfig, VNParams, int]:
    if raw[offset:offset + 4] != VN_MAGIC:
        raise ValueError("bad VNP1 magic")
    mode_code, layers, dim, q = struct.unpack_from("<4I", raw, offset + 4)
    cfg = VNConfig(repeat_layers=layers, feat_dim=dim, q=q, mode=_CODE_MODES[mode_code])
    count = vn_param_count(cfg)
    start = offset + 20
    end = start + 8 * count
    flat = np.frombuffer(raw[start:end], dtype="<f8").astype(np.float64)
    return cfg, vn_params_from_flat(cfg, flat), end


def save_params(path, cfg: VNConfig, params: VNParams) -> None:
    with open(path, "wb") as f:
        f.write(write_vn_block(cfg, params))


def load_params(path) -> tuple[VNConfig, VNParams]:
    from pathlib import Path

    cfg, params, _ = read_vn_block(Path(path).read_bytes())
    return cfg, params
