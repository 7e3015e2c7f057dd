"""Point-cloud aggregation encoder: neighborhood normalization + residual MLP.

Each point contributes its q-neighborhood, normalized per neighborhood
(per-axis mean removed, scaled by one scalar std) and affine-transformed by
learned per-channel (alpha, beta). A shared residual MLP lifts the flattened
neighborhoods, a coordinate-wise max over points pools them, and a final
linear layer produces the conditioning vector.

The max pool makes the output exactly permutation-invariant; the per-axis
mean subtraction makes the neighborhood features translation-invariant.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, amax, as_tensor, clip_min, gather_rows, mean, reshape, sqrt, tanh
from .pointcloud import KnnGraph, PointCloud, knn_graph

ENC_MAGIC = b"ENC1"
_STD_EPS = 1e-8


@dataclass(frozen=True)
class EncoderConfig:
    q: int = 10
    widths: tuple[int, ...] = (64, 128, 256)
    out_dim: int = 128

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.q < 1 or not self.widths or self.out_dim < 1:
            raise ValueError("q >= 1, nonempty widths and out_dim >= 1 required")


@dataclass(frozen=True)
class SceneFeature:
    """Conditioning embedding of one canonicalized cloud."""

    vec: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vec", np.asarray(self.vec, dtype=np.float64))


@dataclass
class ResidualBlock:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    proj: Tensor  # input skip projection, (in, width)

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2, self.proj]


@dataclass
class EncoderParams:
    alpha: Tensor  # (3,) learned neighborhood scale
    beta: Tensor   # (3,) learned neighborhood shift
    blocks: list[ResidualBlock]
    out_w: Tensor
    out_b: Tensor

    def tensors(self) -> list[Tensor]:
        ts = [self.alpha, self.beta]
        for b in self.blocks:
            ts.extend(b.tensors())
        ts.extend([self.out_w, self.out_b])
        return ts

    def to_flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors()])


def _block_dims(cfg: EncoderConfig) -> list[tuple[int, int]]:
    dims = []
    d_in = 3 * cfg.q
    for w in cfg.widths:
        dims.append((d_in, w))
        d_in = w
    return dims


def encoder_param_count(cfg: EncoderConfig) -> int:
    n = 6
    for d_in, w in _block_dims(cfg):
        n += d_in * w + w + w * w + w + d_in * w
    n += cfg.widths[-1] * cfg.out_dim + cfg.out_dim
    return n


def init_encoder_params(cfg: EncoderConfig, seed: int) -> EncoderParams:
    rng = np.random.default_rng(seed)

    def draw(c_in, c_out):
        s = 1.0 / np.sqrt(c_in)
        return Tensor(rng.uniform(-s, s, size=(c_in, c_out)), requires_grad=True)

    blocks = [
        ResidualBlock(
            w1=draw(d_in, w),
            b1=Tensor(np.zeros(w), requires_grad=True),
            w2=draw(w, w),
            b2=Tensor(np.zeros(w), requires_grad=True),
            proj=draw(d_in, w),
        )
        for d_in, w in _block_dims(cfg)
    ]
    return EncoderParams(
        alpha=Tensor(np.ones(3), requires_grad=True),
        beta=Tensor(np.zeros(3), requires_grad=True),
        blocks=blocks,
        out_w=draw(cfg.widths[-1], cfg.out_dim),
        out_b=Tensor(np.zeros(cfg.out_dim), requires_grad=True),
    )


def encoder_params_from_flat(cfg: EncoderConfig, flat: np.ndarray) -> EncoderParams:
    if flat.size != encoder_param_count(cfg):
        raise ValueError("flat parameter vector does not match the config")
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        t = Tensor(flat[pos:pos + n].reshape(shape), requires_grad=True)
        pos += n
        return t

    alpha, beta = take((3,)), take((3,))
    blocks = [
        ResidualBlock(take((d_in, w)), take((w,)), take((w, w)), take((w,)), take((d_in, w)))
        for d_in, w in _block_dims(cfg)
    ]
    return EncoderParams(alpha, beta, blocks, take((cfg.widths[-1], cfg.out_dim)),
                         take((cfg.out_dim,)))


# forward ----------------------------------------------------------------------


def geometric_affine(x_cn, graph, alpha, beta) -> Tensor:
    """Normalized, affine-transformed q-neighborhoods, (..., N, q, 3).

    Per point: gather the q neighbor coordinates, remove their per-axis mean,
    divide by one scalar std over all q*3 entries (floored at 1e-8 so a fully
    coincident neighborhood maps to beta exactly), then scale/shift by the
    learned per-channel (alpha, beta).
    """
    x = as_tensor(x_cn.points if isinstance(x_cn, PointCloud) else x_cn)
    idx = graph.neighbor_idx if isinstance(graph, KnnGraph) else np.asarray(graph)
    neigh = gather_rows(x, idx)                                  # (..., N, q, 3)
    centered = neigh - mean(neigh, axis=-2, keepdims=True)
    std = sqrt(mean(centered * centered, axis=(-1, -2), keepdims=True))
    return as_tensor(alpha) * (centered / clip_min(std, _STD_EPS)) + as_tensor(beta)


def encode_t(x_cn, graph, cfg: EncoderConfig, params: EncoderParams) -> Tensor:
    """Differentiable encoder core on (..., N, 3) canonical clouds."""
    feats = geometric_affine(x_cn, graph, params.alpha, params.beta)
    h = reshape(feats, feats.shape[:-2] + (3 * cfg.q,))
    for blk in params.blocks:
        h = tanh(h @ blk.w1 + blk.b1) @ blk.w2 + blk.b2 + h @ blk.proj
    pooled = amax(h, axis=-2)
    lead = pooled.shape[:-1]
    flat = reshape(pooled, (-1, cfg.widths[-1])) @ params.out_w + params.out_b
    return reshape(flat, lead + (cfg.out_dim,))


def encode(x_cn: PointCloud, cfg: EncoderConfig, params: EncoderParams) -> SceneFeature:
    """Scene embedding of one canonicalized cloud."""
    graph = knn_graph(x_cn, cfg.q)
    return SceneFeature(encode_t(x_cn.points, graph, cfg, params).data)


# persistence --------------------------------------------------------------------


def write_encoder_block(cfg: EncoderConfig, params: EncoderParams) -> bytes:
    header = struct.pack("<3I", cfg.q, cfg.out_dim, len(cfg.widths))
    header += struct.pack(f"<{len(cfg.widths)}I", *cfg.widths)
    return ENC_MAGIC + header + params.to_flat().astype("<f8").tobytes()


def read_encoder_block(raw: bytes, offset: int = 0) -> tuple[EncoderConfig, EncoderParams, int]:
    if raw[offset:offset + 4] != ENC_MAGIC:
        raise ValueError("bad ENC1 magic")
    q, out_dim, n_widths = struct.unpack_from("<3I", raw, offset + 4)
    widths = struct.unpack_from(f"<{n_widths}I", raw, offset + 16)
    cfg = EncoderConfig(q=q, widths=widths, out_dim=out_dim)
    count = encoder_param_count(cfg)
    start = offset + 16 + 4 * n_widths
    end = start + 8 * count
    flat = np.frombuffer(raw[start:end], dtype="<f8").astype(np.float64)
    return cfg, encoder_params_from_flat(cfg, flat), end
