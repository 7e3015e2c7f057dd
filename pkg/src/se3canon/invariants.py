"""Reusable property checks behind the equivtest/gradcheck commands and the
acceptance suite.

Every function is deterministic in its seed and returns measured error
magnitudes; callers compare against their tolerance.
"""

from __future__ import annotations

import numpy as np

from . import canon, geom, policy, vn
from .autodiff import Tensor, numeric_gradient, relative_gradient_error, sum_
from .encoder import EncoderConfig, encode_t, init_encoder_params
from .pointcloud import PointCloud, decenter, knn_graph, random_se3
from .vn import VNConfig, init_vn_params

LAYER_OPS = ("edge_features", "vn_linear", "vn_activation", "vn_mean_pool", "forward_phi")


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return geom.quat_to_rotation(geom.Quaternion(*(q if q[0] >= 0 else -q))).m


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def layer_equivariance_errors(n_rotations: int = 100, n_draws: int = 10, seed: int = 0,
                              n_points: int = 32, cfg: VNConfig | None = None
                              ) -> dict[str, float]:
    """Max relative error of op(R x) vs R op(x) per equivariant layer."""
    cfg = cfg or VNConfig(repeat_layers=2, feat_dim=12, q=6)
    rng = np.random.default_rng(seed)
    errors = {name: 0.0 for name in LAYER_OPS}
    for draw in range(n_draws):
        params = init_vn_params(cfg, seed=int(rng.integers(2 ** 32)))
        cloud = rng.normal(size=(n_points, 3))
        cloud -= cloud.mean(axis=0)
        graph = knn_graph(PointCloud(cloud), cfg.q)
        feat = rng.normal(size=(n_points, cfg.feat_dim, 3))
        w = rng.normal(size=(cfg.feat_dim, cfg.feat_dim))
        base = {
            "edge_features": vn.edge_features(cloud, graph).data,
            "vn_linear": vn.vn_linear(Tensor(feat), Tensor(w)).data,
            "vn_activation": vn.vn_activation(Tensor(feat), Tensor(w)).data,
            "vn_mean_pool": vn.vn_mean_pool(Tensor(feat)).data,
        }
        r1, r2 = vn.forward_phi(cloud, cfg, params, graph)
        base["forward_phi"] = np.stack([r1.data, r2.data])
        for _ in range(n_rotations):
            rot = _random_rotation(rng)
            rotated = {
                "edge_features": vn.edge_features(cloud @ rot.T, graph).data,
                "vn_linear": vn.vn_linear(Tensor(feat @ rot.T), Tensor(w)).data,
                "vn_activation": vn.vn_activation(Tensor(feat @ rot.T), Tensor(w)).data,
                "vn_mean_pool": vn.vn_mean_pool(Tensor(feat @ rot.T)).data,
            }
            g1, g2 = vn.forward_phi(cloud @ rot.T, cfg, params, graph)
            rotated["forward_phi"] = np.stack([g1.data, g2.data])
            for name in LAYER_OPS:
                errors[name] = max(errors[name], _rel_err(rotated[name], base[name] @ rot.T))
    return errors


def canonical_consistency_error(mode: str, template_points: np.ndarray,
                                n_transforms: int = 100, seed: int = 0,
                                cfg: VNConfig | None = None) -> float:
    """Max per-point spread of canonical clouds across random rigid variants
    of one cloud (the canonical-representation equality check)."""
    cfg = cfg or VNConfig(repeat_layers=2, feat_dim=24, q=8, mode=mode)
    if cfg.mode != mode:
        raise ValueError("cfg.mode must match the requested mode")
    params = init_vn_params(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    base = PointCloud(template_points)
    _, reference, _ = vn.estimate_rotation(base, cfg, params)
    worst = 0.0
    for _ in range(n_transforms):
        h = random_se3(int(rng.integers(2 ** 62)), rot_mode=mode, trans_scale=0.5)
        _, cn, _ = vn.estimate_rotation(base.transformed(h), cfg, params)
        worst = max(worst, float(np.abs(cn.points - reference.points).max()))
    return worst


def transport_roundtrip_errors(n_samples: int = 1000, seed: int = 0) -> dict[str, float]:
    """Max decanon(canon(x)) deviation for states and both action modes."""
    rng = np.random.default_rng(seed)
    worst = {"state": 0.0, "abs": 0.0, "rel": 0.0}
    for _ in range(n_samples):
        f = canon.CanonicalFrame(random_se3(int(rng.integers(2 ** 62)), trans_scale=0.5))
        s = canon.RobotState(rng.normal(size=3),
                             geom.Rotation(_random_rotation(rng)), float(rng.uniform()))
        s2 = canon.decanon_state(canon.canon_state(s, f), f)
        worst["state"] = max(worst["state"],
                             float(np.abs(s2.pos - s.pos).max()),
                             float(np.abs(s2.ori.m - s.ori.m).max()))
        a = canon.AbsoluteAction(rng.normal(size=3),
                                 geom.rotation_to_sixd(geom.Rotation(_random_rotation(rng))),
                                 float(rng.uniform()))
        a2 = canon.decanon_action_abs(canon.canon_action_abs(a, f), f)
        worst["abs"] = max(worst["abs"],
                           float(np.abs(a2.pos - a.pos).max()),
                           float(np.abs(a2.ori_sixd.as_array() - a.ori_sixd.as_array()).max()))
        d = canon.RelativeAction(0.1 * rng.normal(size=3),
                                 geom.rotation_to_axisangle(geom.Rotation(_random_rotation(rng))),
                                 float(rng.uniform()))
        d2 = canon.decanon_action_rel(canon.canon_action_rel(d, f), f)
        worst["rel"] = max(worst["rel"],
                           float(np.abs(d2.dpos - d.dpos).max()),
                           float(np.abs(d2.dori_axisangle.v - d.dori_axisangle.v).max()))
    return worst


def relative_chain_error(n_trajectories: int = 1000, steps: int = 5, seed: int = 0) -> float:
    """With equal adjacent frames, composing canonicalized displacements must
    reproduce the canonicalized absolute poses exactly."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trajectories):
        f = canon.CanonicalFrame(random_se3(int(rng.integers(2 ** 62)), trans_scale=0.4))
        poses = [geom.RigidTransform(geom.Rotation(_random_rotation(rng)), rng.normal(size=3))]
        for _ in range(steps):
            delta = geom.RigidTransform(
                geom.axisangle_to_rotation(geom.AxisAngle(0.1 * rng.normal(size=3))),
                0.05 * rng.normal(size=3))
            poses.append(geom.compose(delta, poses[-1]))
        t_inv = geom.inverse(f.T)
        chained = geom.compose(t_inv, poses[0])
        for prev, cur in zip(poses, poses[1:]):
            delta = geom.compose(cur, geom.inverse(prev))
            rel_cn = canon.canon_action_rel(
                canon.RelativeAction.from_transform(delta, 0.0), f)
            chained = geom.compose(rel_cn.as_transform(), chained)
        direct = geom.compose(t_inv, poses[-1])
        worst = max(worst, float(np.abs(chained.as_matrix() - direct.as_matrix()).max()))
    return worst


# gradient checks ------------------------------------------------------------------


def gradient_check_errors(seed: int = 0, fd_step: float = 1e-5) -> dict[str, float]:
    """Analytic vs central-difference gradients for the differentiable stages,
    on 16-point inputs with reduced layer sizes."""
    rng = np.random.default_rng(seed)
    cloud = rng.normal(size=(16, 3))
    out: dict[str, float] = {}

    for mode in ("so3", "so2"):
        cfg = VNConfig(repeat_layers=1, feat_dim=12, q=5, mode=mode)
        params = init_vn_params(cfg, seed=seed)
        weights = rng.normal(size=cloud.shape)
        graph = knn_graph(PointCloud(cloud), cfg.q)

        def phi_loss() -> Tensor:
            _, _, x_cn, _ = vn.canonicalize_t(cloud, cfg, params, graph)
            return sum_(Tensor(weights) * x_cn)

        phi_loss().backward()
        analytic = [p.grad.copy() for p in params.tensors()]
        numeric = numeric_gradient(lambda: float(phi_loss().data), params.tensors(), fd_step)
        out[f"phi_{mode}"] = relative_gradient_error(analytic, numeric)

    enc_cfg = EncoderConfig(q=5, widths=(16, 16), out_dim=8)
    enc_params = init_encoder_params(enc_cfg, seed=seed)
    enc_graph = knn_graph(PointCloud(cloud), enc_cfg.q)
    enc_weights = rng.normal(size=enc_cfg.out_dim)

    def enc_loss() -> Tensor:
        return sum_(Tensor(enc_weights) * encode_t(cloud, enc_graph, enc_cfg, enc_params))

    for p in enc_params.tensors():
        p.grad = None
    enc_loss().backward()
    analytic = [p.grad.copy() for p in enc_params.tensors()]
    numeric = numeric_gradient(lambda: float(enc_loss().data), enc_params.tensors(), fd_step)
    out["encoder"] = relative_gradient_error(analytic, numeric)

    pcfg = policy.PolicyConfig(
        vn=VNConfig(repeat_layers=1, feat_dim=12, q=5),
        enc=EncoderConfig(q=5, widths=(16,), out_dim=8),
        m=1, n=2, head_hidden=16, head_blocks=1, kemb_dim=8,
    )
    head = policy.init_head_params(pcfg, seed=seed + 1)
    # re-randomize the zero-initialized output layer so its gradients are generic
    head.out_w.data[:] = rng.normal(size=head.out_w.shape) * 0.1
    head.out_b.data[:] = rng.normal(size=head.out_b.shape) * 0.1
    a0 = rng.normal(size=(3, pcfg.action_dim))
    cond_core = rng.normal(size=(3, pcfg.cond_dim - pcfg.kemb_dim))
    schedule = policy.DiffusionSchedule.squared_cosine(pcfg.k_steps)

    def diff_loss() -> Tensor:
        return policy.diffusion_loss(a0, Tensor(cond_core), pcfg, head, schedule,
                                     np.random.default_rng(seed + 2))

    def flow_loss_fn() -> Tensor:
        return policy.flow_loss(a0, Tensor(cond_core), pcfg, head,
                                np.random.default_rng(seed + 3))

    for name, fn in (("diffusion_head", diff_loss), ("flow_head", flow_loss_fn)):
        for p in head.tensors():
            p.grad = None
        fn().backward()
        analytic = [p.grad.copy() for p in head.tensors()]
        numeric = numeric_gradient(lambda: float(fn().data), head.tensors(), fd_step)
        out[name] = relative_gradient_error(analytic, numeric)
    return out
