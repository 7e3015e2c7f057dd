"""Conditional generative action heads and the end-to-end canonical pipeline.

The forward loop: estimate the canonical frame from the most recent cloud,
move every observation (clouds, robot states) into that frame, encode, sample
an action-vector from the chosen head (denoising-diffusion with deterministic
strided sampling, or flow matching with Euler integration), de-normalize, and
transport the predicted actions back to the world frame.

Action vectors are flat per-window encodings, normalized per-dimension to
[-1, 1] from dataset statistics:
  absolute control: per step 3 pos + 6 sixd + 1 grip (10 dims),
  relative control: per step 3 dpos + 3 axis-angle + 1 grip (7 dims).

During training the estimated frame is detached when transporting states and
action targets; gradients still reach the equivariant branch through the
canonicalized cloud fed to the encoder.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import canon, geom, vn
from .autodiff import Adam, Tensor, concat, matmul, mean, reshape, swapaxes, tanh
from .data import EpisodeRecord
from .encoder import (
    ENC_MAGIC, EncoderConfig, EncoderParams, SceneFeature, encode_t,
    encoder_param_count, init_encoder_params, read_encoder_block,
    write_encoder_block,
)
from .pointcloud import PointCloud, knn_graph
from .vn import VNConfig, VNParams, init_vn_params, read_vn_block, vn_param_count, write_vn_block

HEAD_MAGIC = b"HEAD"
STEP_DIMS = {"abs": 10, "rel": 7}
STATE_FEAT_DIM = 10  # pos(3) + first two orientation columns(6) + grip(1)


@dataclass(frozen=True)
class PolicyConfig:
    vn: VNConfig = field(default_factory=VNConfig)
    enc: EncoderConfig = field(default_factory=EncoderConfig)
    control: str = "abs"        # abs | rel
    head: str = "diffusion"     # diffusion | flow
    m: int = 2                  # observation frames
    n: int = 8                  # predicted action steps
    k_steps: int = 100          # diffusion training steps
    ddim_steps: int = 20
    flow_steps: int = 20
    head_hidden: int = 256
    head_blocks: int = 2
    kemb_dim: int = 32
    lr: float = 3e-4
    batch_size: int = 16
    train_steps: int = 2000
    freeze_phi: bool = False
    canonicalize: bool = True

    def __post_init__(self):
        if self.control not in STEP_DIMS:
            raise ValueError("control must be 'abs' or 'rel'")
        if self.head not in ("diffusion", "flow"):
            raise ValueError("head must be 'diffusion' or 'flow'")
        if min(self.m, self.n, self.k_steps, self.ddim_steps, self.flow_steps,
               self.head_hidden, self.head_blocks, self.kemb_dim) < 1:
            raise ValueError("all size parameters must be positive")

    @property
    def action_dim(self) -> int:
        return self.n * STEP_DIMS[self.control]

    @property
    def cond_dim(self) -> int:
        return self.m * self.enc.out_dim + self.m * STATE_FEAT_DIM + self.kemb_dim


@dataclass(frozen=True)
class Condition:
    """Canonical-frame conditioning inputs; the timestep embedding is appended
    per denoising step."""

    scene: np.ndarray  # (m, out_dim)
    state: np.ndarray  # (m, STATE_FEAT_DIM)


# normalization -------------------------------------------------------------------


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension min/max mapping to [-1, 1]; exact round trip.

    Spans are floored at fit time: dimensions that are (near-)constant in the
    dataset -- canonical targets of a single scene are constant by
    construction -- would otherwise blow up once the estimated frame drifts
    during joint training.
    """

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))

    def _span(self) -> np.ndarray:
        return np.where(self.hi > self.lo, self.hi - self.lo, 1.0)

    def normalize(self, a: np.ndarray) -> np.ndarray:
        return 2.0 * (a - self.lo) / self._span() - 1.0

    def denormalize(self, v: np.ndarray) -> np.ndarray:
        return self.lo + (np.asarray(v) + 1.0) * self._span() / 2.0

    @staticmethod
    def fit(vectors: np.ndarray, min_span: float = 0.01) -> "Normalizer":
        lo = vectors.min(axis=0)
        hi = vectors.max(axis=0)
        pad = np.maximum(min_span - (hi - lo), 0.0) / 2.0
        return Normalizer(lo - pad, hi + pad)

    @staticmethod
    def unit(dim: int) -> "Normalizer":
        return Normalizer(-np.ones(dim), np.ones(dim))


# diffusion schedule -----------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionSchedule:
    """Squared-cosine beta schedule with strictly decreasing signal level."""

    k_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @staticmethod
    def squared_cosine(k_steps: int = 100, s: float = 0.008) -> "DiffusionSchedule":
        grid = np.arange(k_steps + 1, dtype=np.float64) / k_steps
        f = np.cos((grid + s) / (1.0 + s) * np.pi / 2.0) ** 2
        abar = f[1:] / f[0]
        betas = np.clip(1.0 - abar / np.concatenate([[1.0], abar[:-1]]), 1e-8, 0.999)
        alphas = 1.0 - betas
        return DiffusionSchedule(k_steps, betas, alphas, np.cumprod(alphas))


def time_embedding(frac: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of a [0, 1] timestep fraction."""
    frac = np.atleast_1d(np.asarray(frac, dtype=np.float64))
    half = max(dim // 2, 1)
    freqs = np.exp(np.arange(half) * (np.log(500.0) / max(half - 1, 1)))
    ang = frac[..., None] * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return emb[..., :dim]


# action vector packing ----------------------------------------------------------------


def actions_to_vector(actions: Sequence, control: str) -> np.ndarray:
    rows = []
    for a in actions:
        if control == "abs":
            rows.append(np.concatenate([a.pos, a.ori_sixd.as_array(), [a.grip]]))
        else:
            rows.append(np.concatenate([a.dpos, a.dori_axisangle.v, [a.grip]]))
    return np.concatenate(rows)


def vector_to_actions(vec: np.ndarray, control: str, n: int) -> list:
    step = STEP_DIMS[control]
    out = []
    for j in range(n):
        row = vec[j * step:(j + 1) * step]
        if control == "abs":
            out.append(canon.AbsoluteAction(
                row[:3], geom.SixDRotation(row[3:6], row[6:9]), float(row[9])))
        else:
            out.append(canon.RelativeAction(row[:3], geom.AxisAngle(row[3:6]), float(row[6])))
    return out


# action head --------------------------------------------------------------------------


@dataclass
class HeadBlock:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    film_w: Tensor  # cond -> (scale, shift), (cond_dim, 2*hidden)
    film_b: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2, self.film_w, self.film_b]


@dataclass
class HeadParams:
    in_w: Tensor
    in_b: Tensor
    blocks: list[HeadBlock]
    out_w: Tensor
    out_b: Tensor

    def tensors(self) -> list[Tensor]:
        ts = [self.in_w, self.in_b]
        for b in self.blocks:
            ts.extend(b.tensors())
        ts.extend([self.out_w, self.out_b])
        return ts

    def to_flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors()])


def head_param_count(cfg: PolicyConfig) -> int:
    a, c, h = cfg.action_dim, cfg.cond_dim, cfg.head_hidden
    per_block = h * h + h + h * h + h + c * 2 * h + 2 * h
    return a * h + h + cfg.head_blocks * per_block + h * a + a


def init_head_params(cfg: PolicyConfig, seed: int) -> HeadParams:
    rng = np.random.default_rng(seed)

    def draw(c_in, c_out):
        s = 1.0 / np.sqrt(c_in)
        return Tensor(rng.uniform(-s, s, size=(c_in, c_out)), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    a, c, h = cfg.action_dim, cfg.cond_dim, cfg.head_hidden
    blocks = [
        HeadBlock(draw(h, h), zeros(h), draw(h, h), zeros(h), draw(c, 2 * h), zeros(2 * h))
        for _ in range(cfg.head_blocks)
    ]
    # zero-init output layer: the untrained head predicts exactly zero
    return HeadParams(draw(a, h), zeros(h), blocks, zeros(h, a), zeros(a))


def head_params_from_flat(cfg: PolicyConfig, flat: np.ndarray) -> HeadParams:
    if flat.size != head_param_count(cfg):
        raise ValueError("flat parameter vector does not match the config")
    a, c, h = cfg.action_dim, cfg.cond_dim, cfg.head_hidden
    pos = 0

    def take(*shape):
        nonlocal pos
        k = int(np.prod(shape))
        t = Tensor(flat[pos:pos + k].reshape(shape), requires_grad=True)
        pos += k
        return t

    in_w, in_b = take(a, h), take(h)
    blocks = [
        HeadBlock(take(h, h), take(h), take(h, h), take(h), take(c, 2 * h), take(2 * h))
        for _ in range(cfg.head_blocks)
    ]
    return HeadParams(in_w, in_b, blocks, take(h, a), take(a))


def _head_forward(a, cond, params: HeadParams, hidden: int) -> Tensor:
    """Residual MLP with feature-wise conditioning; (B, A) x (B, C) -> (B, A)."""
    h = matmul(a if isinstance(a, Tensor) else Tensor(a), params.in_w) + params.in_b
    for blk in params.blocks:
        u = tanh(h @ blk.w1 + blk.b1)
        film = (cond if isinstance(cond, Tensor) else Tensor(cond)) @ blk.film_w + blk.film_b
        u = u * (1.0 + film[:, :hidden]) + film[:, hidden:]
        h = h + u @ blk.w2 + blk.b2
    return h @ params.out_w + params.out_b


def _cond_with_time(cond_core, frac: np.ndarray, kemb_dim: int):
    emb = Tensor(time_embedding(frac, kemb_dim))
    core = cond_core if isinstance(cond_core, Tensor) else Tensor(cond_core)
    return concat([core, emb], axis=-1)


def denoiser_forward(a_k: np.ndarray, cond: Condition, k: int, cfg: PolicyConfig,
                     params: HeadParams) -> np.ndarray:
    """Predicted noise for one action vector at diffusion step k."""
    core = np.concatenate([cond.scene.ravel(), cond.state.ravel()])[None, :]
    cond_t = _cond_with_time(core, np.array([k / cfg.k_steps]), cfg.kemb_dim)
    out = _head_forward(a_k[None, :], cond_t, params, cfg.head_hidden)
    return out.data[0]


# training losses -------------------------------------------------------------------


def diffusion_loss(a0, cond_t, cfg: PolicyConfig, params: HeadParams,
                   schedule: DiffusionSchedule, rng: np.random.Generator) -> Tensor:
    """Noise-prediction MSE at uniformly drawn steps.

    ``a0`` may be a Tensor: a differentiable target lets the loss penalize
    frame-estimation inconsistency across corruption draws of one scene.
    """
    a0 = a0 if isinstance(a0, Tensor) else Tensor(a0)
    b = a0.shape[0]
    k = rng.integers(cfg.k_steps, size=b)
    eps = rng.normal(size=a0.shape)
    abar = schedule.alpha_bars[k][:, None]
    a_k = Tensor(np.sqrt(abar)) * a0 + Tensor(np.sqrt(1.0 - abar) * eps)
    cond_full = _cond_with_time(cond_t, k / cfg.k_steps, cfg.kemb_dim)
    eps_hat = _head_forward(a_k, cond_full, params, cfg.head_hidden)
    diff = eps_hat - Tensor(eps)
    return mean(diff * diff)


def flow_loss(a0, cond_t, cfg: PolicyConfig, params: HeadParams,
              rng: np.random.Generator) -> Tensor:
    """Straight-path velocity regression: target a0 - noise at t ~ U(0, 1)."""
    a0 = a0 if isinstance(a0, Tensor) else Tensor(a0)
    b = a0.shape[0]
    t = rng.uniform(size=b)
    noise = rng.normal(size=a0.shape)
    a_t = Tensor((1.0 - t)[:, None] * noise) + Tensor(t[:, None]) * a0
    cond_full = _cond_with_time(cond_t, t, cfg.kemb_dim)
    v_hat = _head_forward(a_t, cond_full, params, cfg.head_hidden)
    diff = v_hat - (a0 - Tensor(noise))
    return mean(diff * diff)


# samplers --------------------------------------------------------------------------


def ddim_sample(cond: Condition, cfg: PolicyConfig, params: HeadParams,
                schedule: DiffusionSchedule, steps: int | None = None,
                seed: int = 0, clip: bool = True) -> np.ndarray:
    """Deterministic (eta = 0) strided reverse pass from a seeded Gaussian.

    The intermediate clean-sample estimate is clipped to the normalized
    action range; at low signal levels it divides by a tiny sqrt(alpha_bar)
    and would otherwise amplify early prediction error.
    """
    steps = cfg.ddim_steps if steps is None else steps
    core = np.concatenate([cond.scene.ravel(), cond.state.ravel()])[None, :]
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, cfg.action_dim))
    taus = np.unique(np.linspace(0, schedule.k_steps - 1, steps).round().astype(int))[::-1]
    for i, k in enumerate(taus):
        abar_k = schedule.alpha_bars[k]
        abar_prev = schedule.alpha_bars[taus[i + 1]] if i + 1 < len(taus) else 1.0
        cond_full = _cond_with_time(core, np.array([k / schedule.k_steps]), cfg.kemb_dim)
        eps_hat = _head_forward(x, cond_full, params, cfg.head_hidden).data
        x0 = (x - np.sqrt(1.0 - abar_k) * eps_hat) / np.sqrt(abar_k)
        if clip:
            x0 = np.clip(x0, -1.0, 1.0)
            eps_hat = (x - np.sqrt(abar_k) * x0) / np.sqrt(1.0 - abar_k)
        x = np.sqrt(abar_prev) * x0 + np.sqrt(1.0 - abar_prev) * eps_hat
    return x[0]


def flow_sample(cond: Condition, cfg: PolicyConfig, params: HeadParams,
                steps: int | None = None, seed: int = 0) -> np.ndarray:
    """Euler integration of the learned velocity field from seeded noise."""
    steps = cfg.flow_steps if steps is None else steps
    core = np.concatenate([cond.scene.ravel(), cond.state.ravel()])[None, :]
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, cfg.action_dim))
    dt = 1.0 / steps
    for i in range(steps):
        cond_full = _cond_with_time(core, np.array([i * dt]), cfg.kemb_dim)
        v = _head_forward(x, cond_full, params, cfg.head_hidden).data
        x = x + dt * v
    return x[0]


# full pipeline ----------------------------------------------------------------------


@dataclass
class PolicyParams:
    vn: VNParams
    enc: EncoderParams
    head: HeadParams

    def tensors(self) -> list[Tensor]:
        return [*self.vn.tensors(), *self.enc.tensors(), *self.head.tensors()]


def init_policy_params(cfg: PolicyConfig, seed: int) -> PolicyParams:
    return PolicyParams(
        vn=init_vn_params(cfg.vn, seed),
        enc=init_encoder_params(cfg.enc, seed + 1),
        head=init_head_params(cfg, seed + 2),
    )


def parameter_share_report(cfg: PolicyConfig) -> tuple[float, str]:
    """Fraction of policy parameters in the equivariant branch, plus a report.

    The report is informational: it is emitted with a warning when the share
    leaves the expected [2%, 5%] band, since head sizing is a free choice.
    """
    nv = vn_param_count(cfg.vn)
    ne = encoder_param_count(cfg.enc)
    nh = head_param_count(cfg)
    share = nv / (nv + ne + nh)
    lines = [
        f"equivariant branch parameters: {nv}",
        f"encoder parameters:            {ne}",
        f"action head parameters:        {nh}",
        f"equivariant branch share:      {share * 100:.2f}%",
    ]
    if not 0.02 <= share <= 0.05:
        lines.append("warning: share outside the expected [2%, 5%] band")
    return share, "\n".join(lines)


def state_features(states: Sequence[canon.RobotState]) -> np.ndarray:
    return np.stack([
        np.concatenate([s.pos, s.ori.m[:, 0], s.ori.m[:, 1], [s.grip]]) for s in states
    ])


def estimate_frame(cloud: PointCloud, cfg: PolicyConfig, params: PolicyParams
                   ) -> canon.CanonicalFrame:
    """Canonical frame of the most recent observation (identity when the
    pipeline runs with canonicalization disabled)."""
    if not cfg.canonicalize:
        return canon.CanonicalFrame.identity()
    t, _, degen = vn.estimate_rotation(cloud, cfg.vn, params.vn)
    return canon.CanonicalFrame(t, degen)


def _window_condition(obs_window, frame: canon.CanonicalFrame, cfg: PolicyConfig,
                      params: PolicyParams) -> Condition:
    t_inv = geom.inverse(frame.T)
    scenes = []
    for cloud, _ in obs_window:
        x_cn = PointCloud(t_inv.apply(cloud.points))
        graph = knn_graph(x_cn, cfg.enc.q)
        scenes.append(encode_t(x_cn.points, graph, cfg.enc, params.enc).data)
    states = [canon.canon_state(s, frame) for _, s in obs_window]
    return Condition(np.stack(scenes), state_features(states))


def _decanon_actions(vec: np.ndarray, frame: canon.CanonicalFrame, cfg: PolicyConfig) -> list:
    actions = vector_to_actions(vec, cfg.control, cfg.n)
    if cfg.control == "abs":
        return [canon.decanon_action_abs(a, frame) for a in actions]
    return [canon.decanon_action_rel(a, frame) for a in actions]


def policy_rollout(obs_window, cfg: PolicyConfig, params: PolicyParams,
                   normalizer: Normalizer, seed: int,
                   schedule: DiffusionSchedule | None = None) -> list:
    """Full forward loop: canonicalize, encode, sample, de-canonicalize.

    Returns n world-frame actions (absolute or relative per the config).
    """
    if len(obs_window) != cfg.m:
        raise ValueError(f"observation window must have m={cfg.m} frames")
    frame = estimate_frame(obs_window[-1][0], cfg, params)
    cond = _window_condition(obs_window, frame, cfg, params)
    if cfg.head == "diffusion":
        schedule = schedule or DiffusionSchedule.squared_cosine(cfg.k_steps)
        vec = ddim_sample(cond, cfg, params.head, schedule, seed=seed)
    else:
        vec = flow_sample(cond, cfg, params.head, seed=seed)
    return _decanon_actions(normalizer.denormalize(vec), frame, cfg)


# batched training ---------------------------------------------------------------------


class _Group:
    """Episodes of one cloud size, stacked, with cached neighbor graphs
    (indices are rigid-motion invariant, so graphs built on the raw clouds
    are reused for the canonicalized clouds)."""

    def __init__(self, episodes: list[EpisodeRecord], cfg: PolicyConfig):
        self.episodes = episodes
        self.clouds = np.stack([
            np.stack([obs[0].points for obs in ep.observations]) for ep in episodes
        ])  # (E, m, N, 3)
        self.vn_graphs = np.stack([
            knn_graph(ep.observations[-1][0], cfg.vn.q).neighbor_idx for ep in episodes
        ])  # (E, N, qv)
        self.enc_graphs = np.stack([
            np.stack([knn_graph(obs[0], cfg.enc.q).neighbor_idx for obs in ep.observations])
            for ep in episodes
        ])  # (E, m, N, qe)


class _PreparedDataset:
    """Training-ready view of a dataset, bucketed by point count so episodes
    of differently sized scenes can train together."""

    def __init__(self, dataset: Sequence[EpisodeRecord], cfg: PolicyConfig):
        if not dataset:
            raise ValueError("dataset is empty")
        if any(ep.m != cfg.m for ep in dataset):
            raise ValueError(f"every episode window must have m={cfg.m} frames")
        by_size: dict[int, list[EpisodeRecord]] = {}
        for ep in dataset:
            by_size.setdefault(len(ep.observations[-1][0]), []).append(ep)
        self.groups = [_Group(by_size[n], cfg) for n in sorted(by_size)]


def _batch_forward(group: _Group, idx: np.ndarray, cfg: PolicyConfig,
                   params: PolicyParams):
    """Shared observation pipeline for one same-size batch.

    Returns (cond_core Tensor (B, m*D + m*10), targets Tensor (B, A), frames).
    Gradients reach the equivariant branch through the canonicalized clouds
    and, in absolute control, through the canonicalized action targets -- the
    latter is what pressures the frame estimate to stay consistent across
    corruption draws of one scene. States (and relative-control targets,
    whose axis-angle extraction is branchy) use the detached frame.
    """
    clouds = group.clouds[idx]      # (B, m, N, 3)
    b, m, n_pts, _ = clouds.shape
    last = clouds[:, -1]
    if cfg.canonicalize:
        rot, mean_pt, _, _ = vn.canonicalize_t(last, cfg.vn, params.vn, group.vn_graphs[idx])
        x_de = clouds - mean_pt[:, None, None, :]
        x_cn = reshape(matmul(Tensor(x_de.reshape(b, m * n_pts, 3)), rot), (b, m, n_pts, 3))
        frames = [
            canon.CanonicalFrame(geom.RigidTransform(geom.Rotation(rot.data[i]), mean_pt[i]))
            for i in range(b)
        ]
    else:
        rot, mean_pt = None, None
        x_cn = Tensor(clouds)
        frames = [canon.CanonicalFrame.identity()] * b
    scene = encode_t(x_cn, group.enc_graphs[idx], cfg.enc, params.enc)   # (B, m, D)
    scene = reshape(scene, (b, m * cfg.enc.out_dim))

    state_rows = []
    for i, e in enumerate(idx):
        ep = group.episodes[e]
        states = [canon.canon_state(s, frames[i]) for _, s in ep.observations]
        state_rows.append(state_features(states).ravel())
    cond_core = concat([scene, Tensor(np.stack(state_rows))], axis=-1)

    episodes = [group.episodes[e] for e in idx]
    if cfg.control == "abs" and cfg.canonicalize:
        targets = _abs_targets_t(episodes, rot, mean_pt)
    else:
        rows = []
        for ep, frame in zip(episodes, frames):
            if cfg.control == "abs":
                acts = [canon.canon_action_abs(a, frame) for a in ep.actions]
            else:
                acts = [canon.canon_action_rel(d, frame) for d in ep.relative_actions()]
            rows.append(actions_to_vector(acts, cfg.control))
        targets = Tensor(np.stack(rows))
    return cond_core, targets, frames


def _abs_targets_t(episodes: Sequence[EpisodeRecord], rot: Tensor,
                   mean_pt: np.ndarray) -> Tensor:
    """Differentiable canonical absolute-action vectors, (B, n*10).

    T^-1 A on the homogeneous form; the 6D orientation is the first two
    columns of the canonical rotation, so everything stays linear in the
    estimated frame.
    """
    n = episodes[0].n
    b = len(episodes)
    a_rot = np.stack([
        np.stack([geom.sixd_to_rotation(a.ori_sixd).m for a in ep.actions])
        for ep in episodes
    ])  # (B, n, 3, 3)
    a_pos = np.stack([np.stack([a.pos for a in ep.actions]) for ep in episodes])
    grips = np.stack([[a.grip for a in ep.actions] for ep in episodes])  # (B, n)
    rot_t4 = reshape(swapaxes(rot, -1, -2), (b, 1, 3, 3))
    cn_rot = matmul(rot_t4, Tensor(a_rot))                    # R^T R_A, (B, n, 3, 3)
    cn_pos = matmul(Tensor(a_pos - mean_pt[:, None, :]), rot)  # R^T (p - t), row form
    parts = concat([
        cn_pos,
        cn_rot[..., :, 0],  # first two canonical rotation columns = the 6D format
        cn_rot[..., :, 1],
        reshape(Tensor(grips), (b, n, 1)),
    ], axis=-1)                                               # (B, n, 10)
    return reshape(parts, (b, n * 10))


def canonical_action_vectors(dataset: Sequence[EpisodeRecord], cfg: PolicyConfig,
                             params: PolicyParams) -> np.ndarray:
    """Canonical-frame expert action vectors for every episode (used to fit
    the normalizer before training)."""
    rows = []
    for ep in dataset:
        frame = estimate_frame(ep.observations[-1][0], cfg, params)
        if cfg.control == "abs":
            acts = [canon.canon_action_abs(a, frame) for a in ep.actions]
        else:
            acts = [canon.canon_action_rel(d, frame) for d in ep.relative_actions()]
        rows.append(actions_to_vector(acts, cfg.control))
    return np.stack(rows)


def diffusion_train_step(batch: Sequence[EpisodeRecord], cfg: PolicyConfig,
                         params: PolicyParams, normalizer: Normalizer,
                         schedule: DiffusionSchedule, rng: np.random.Generator
                         ) -> tuple[float, list[np.ndarray]]:
    """One un-applied training step: loss plus gradients for every parameter."""
    return _train_step("diffusion", batch, cfg, params, normalizer, schedule, rng)


def flow_train_step(batch: Sequence[EpisodeRecord], cfg: PolicyConfig,
                    params: PolicyParams, normalizer: Normalizer,
                    rng: np.random.Generator) -> tuple[float, list[np.ndarray]]:
    return _train_step("flow", batch, cfg, params, normalizer, None, rng)


def _train_step(kind, batch, cfg, params, normalizer, schedule, rng):
    prep = _PreparedDataset(batch, cfg)
    total = None
    for group in prep.groups:
        part = _group_loss(kind, group, np.arange(len(group.episodes)), cfg, params,
                           normalizer, schedule, rng) * (len(group.episodes) / len(batch))
        total = part if total is None else total + part
    for p in params.tensors():
        p.grad = None
    total.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
             for p in params.tensors()]
    return float(total.data), grads


def _group_loss(kind, group, idx, cfg, params, normalizer, schedule, rng) -> Tensor:
    cond_core, targets, _ = _batch_forward(group, idx, cfg, params)
    span = normalizer._span()
    a0 = (targets - Tensor(normalizer.lo)) * Tensor(2.0 / span) - 1.0
    if kind == "diffusion":
        return diffusion_loss(a0, cond_core, cfg, params.head, schedule, rng)
    return flow_loss(a0, cond_core, cfg, params.head, rng)


@dataclass
class TrainResult:
    params: PolicyParams
    normalizer: Normalizer
    metrics: list[str]
    schedule: DiffusionSchedule


def train(dataset: Sequence[EpisodeRecord], cfg: PolicyConfig, seed: int,
          log_every: int = 50) -> TrainResult:
    """Seeded training loop; every byte of the result is reproducible.

    Emits metrics as "step name value" lines: the running loss, plus periodic
    frame-drift statistics between the window's per-frame estimates and the
    canonicalization residual under a random rigid transform.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    params = init_policy_params(cfg, seed)
    prep = _PreparedDataset(dataset, cfg)
    schedule = DiffusionSchedule.squared_cosine(cfg.k_steps)
    normalizer = Normalizer.fit(canonical_action_vectors(dataset, cfg, params))

    trainable = [*params.enc.tensors(), *params.head.tensors()]
    if cfg.canonicalize and not cfg.freeze_phi:
        trainable = [*params.vn.tensors(), *trainable]
    opt = Adam(trainable, lr=cfg.lr)
    rng = np.random.default_rng(seed)

    metrics: list[str] = []
    queue: list[tuple[int, np.ndarray]] = []
    for step in range(cfg.train_steps):
        if not queue:
            queue = _epoch_batches(prep, cfg.batch_size, rng)
        gi, idx = queue.pop(0)
        group = prep.groups[gi]

        loss = _group_loss(cfg.head, group, idx, cfg, params, normalizer, schedule, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        metrics.append(f"{step} loss {float(loss.data)!r}")
        if (step + 1) % log_every == 0:
            drift, resid = _diagnostics(group, idx[:4], cfg, params, rng)
            metrics.append(f"{step} frame_drift_angle {drift!r}")
            metrics.append(f"{step} equivariance_residual {resid!r}")
    return TrainResult(params, normalizer, metrics, schedule)


def _epoch_batches(prep: _PreparedDataset, batch_size: int,
                   rng: np.random.Generator) -> list[tuple[int, np.ndarray]]:
    """One epoch of shuffled same-size batches across all groups."""
    batches = []
    for gi, group in enumerate(prep.groups):
        order = rng.permutation(len(group.episodes))
        for s in range(0, len(order), batch_size):
            batches.append((gi, order[s:s + batch_size]))
    return [batches[i] for i in rng.permutation(len(batches))]


def _diagnostics(group, idx, cfg, params, rng) -> tuple[float, float]:
    """Median drift between per-frame estimates, and the canonical-cloud
    residual under one random rotation."""
    from .pointcloud import random_se3

    if not cfg.canonicalize:
        return 0.0, 0.0
    drifts, resids = [], []
    h = random_se3(int(rng.integers(2 ** 32)), rot_mode=cfg.vn.mode, trans_scale=0.3)
    for e in idx:
        ep = group.episodes[e]
        frames = [estimate_frame(obs[0], cfg, params) for obs in ep.observations]
        for prev, cur in zip(frames, frames[1:]):
            drifts.append(canon.frame_drift(prev, cur)[0])
        cloud = ep.observations[-1][0]
        _, cn_a, _ = vn.estimate_rotation(cloud, cfg.vn, params.vn)
        _, cn_b, _ = vn.estimate_rotation(cloud.transformed(h), cfg.vn, params.vn)
        resids.append(float(np.abs(cn_a.points - cn_b.points).max()))
    return float(np.median(drifts) if drifts else 0.0), float(np.max(resids))


# checkpoint container ------------------------------------------------------------------

_CONTROL_CODES = {"abs": 0, "rel": 1}
_HEAD_CODES = {"diffusion": 0, "flow": 1}


def write_checkpoint(cfg: PolicyConfig, params: PolicyParams, normalizer: Normalizer) -> bytes:
    head_hdr = struct.pack(
        "<11I",
        _CONTROL_CODES[cfg.control], _HEAD_CODES[cfg.head], cfg.m, cfg.n,
        cfg.k_steps, cfg.ddim_steps, cfg.flow_steps, cfg.head_hidden,
        cfg.head_blocks, cfg.kemb_dim, int(cfg.canonicalize),
    )
    norm = struct.pack("<I", cfg.action_dim)
    norm += normalizer.lo.astype("<f8").tobytes() + normalizer.hi.astype("<f8").tobytes()
    return (
        write_vn_block(cfg.vn, params.vn)
        + write_encoder_block(cfg.enc, params.enc)
        + HEAD_MAGIC + head_hdr + norm
        + params.head.to_flat().astype("<f8").tobytes()
    )


def read_checkpoint(raw: bytes) -> tuple[PolicyConfig, PolicyParams, Normalizer]:
    vn_cfg, vn_params, pos = read_vn_block(raw)
    enc_cfg, enc_params, pos = read_encoder_block(raw, pos)
    if raw[pos:pos + 4] != HEAD_MAGIC:
        raise ValueError("bad HEAD magic")
    vals = struct.unpack_from("<11I", raw, pos + 4)
    pos += 4 + 44
    control = {v: k for k, v in _CONTROL_CODES.items()}[vals[0]]
    head = {v: k for k, v in _HEAD_CODES.items()}[vals[1]]
    cfg = PolicyConfig(
        vn=vn_cfg, enc=enc_cfg, control=control, head=head, m=vals[2], n=vals[3],
        k_steps=vals[4], ddim_steps=vals[5], flow_steps=vals[6], head_hidden=vals[7],
        head_blocks=vals[8], kemb_dim=vals[9], canonicalize=bool(vals[10]),
    )
    (adim,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if adim != cfg.action_dim:
        raise ValueError("checkpoint action dim mismatch")
    lo = np.frombuffer(raw[pos:pos + 8 * adim], dtype="<f8").astype(np.float64)
    pos += 8 * adim
    hi = np.frombuffer(raw[pos:pos + 8 * adim], dtype="<f8").astype(np.float64)
    pos += 8 * adim
    count = head_param_count(cfg)
    flat = np.frombuffer(raw[pos:pos + 8 * count], dtype="<f8").astype(np.float64)
    head_params = head_params_from_flat(cfg, flat)
    return cfg, PolicyParams(vn_params, enc_params, head_params), Normalizer(lo, hi)


def save_checkpoint(path, cfg: PolicyConfig, params: PolicyParams,
                    normalizer: Normalizer) -> None:
    from pathlib import Path

    Path(path).write_bytes(write_checkpoint(cfg, params, normalizer))


def load_checkpoint(path) -> tuple[PolicyConfig, PolicyParams, Normalizer]:
    from pathlib import Path

    return read_checkpoint(Path(path).read_bytes())
