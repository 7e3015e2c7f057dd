"""Command-line harness.

Subcommands: gen, train, eval, canon, equivtest, gradcheck, dispersion.
Exit codes: 0 success, 1 check failure, 2 usage error. Every command is
bit-reproducible under a fixed --seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness, invariants, policy, vn
from .pointcloud import (NoiseSpec, PointCloud, read_cloud_pcf, read_cloud_text,
                         write_cloud_pcf, write_cloud_text)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=str, default=None, help="key = value config file")
    p.add_argument("--mode", choices=("so3", "so2"), default=None,
                   help="override the equivariance mode from the config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="se3canon",
        description="canonical-frame equivariant policy toolkit",
    )
    parser.add_argument("--dump-config", action="store_true",
                        help="print every default setting and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen", help="generate a synthetic episode dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--template", default=None, help="scene template name")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--noise-level", type=int, default=None, choices=(0, 1, 2, 3))

    p = sub.add_parser("train", help="train a policy on a dataset directory")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint file")
    p.add_argument("--metrics", default=None, help="metrics log file")

    p = sub.add_parser("eval", help="evaluate a checkpoint under one condition")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--condition", required=True, choices=harness.CONDITIONS)
    p.add_argument("--out", default=None, help="summary file (key = value)")

    p = sub.add_parser("canon", help="canonicalize a cloud file, emit x_cn and T")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True,
                   help="output cloud path; the transform goes to <output>.tfm")
    p.add_argument("--ckpt", default=None, help="reuse a trained estimator")

    p = sub.add_parser("equivtest", help="run the equivariance invariant suite")
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _add_common(p)

    p = sub.add_parser("dispersion", help="noise-level feature dispersion study")
    _add_common(p)
    p.add_argument("--ckpt", default=None, help="trained checkpoint (default: fresh params)")
    p.add_argument("--frozen", action="store_true",
                   help="ignore --ckpt and use freshly initialized parameters")
    p.add_argument("--augmentations", type=int, default=8)
    return parser


def _load_cloud(path: str) -> PointCloud:
    if Path(path).suffix == ".pcf":
        return read_cloud_pcf(path)
    return read_cloud_text(path)


def _cmd_gen(args) -> int:
    cfg, hcfg = harness.load_config(args.config, args.mode)
    template = harness.builtin_template(args.template or hcfg.template)
    count = args.count if args.count is not None else hcfg.episodes
    level = args.noise_level if args.noise_level is not None else hcfg.noise_level
    episodes = harness.generate_dataset(
        template, count, hcfg.pose_sampler(cfg.vn.mode),
        NoiseSpec.from_level(level, args.seed), args.seed, m=cfg.m, n=cfg.n)
    harness.save_dataset(args.out, episodes, manifest={
        "template": template.name, "count": count, "noise_level": level,
        "seed": args.seed, "mode": cfg.vn.mode,
    })
    print(f"wrote {len(episodes)} episodes to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg, _ = harness.load_config(args.config, args.mode)
    dataset = harness.load_dataset(args.data)
    result = policy.train(dataset, cfg, seed=args.seed)
    policy.save_checkpoint(args.out, cfg, result.params, result.normalizer)
    if args.metrics:
        Path(args.metrics).write_text("\n".join(result.metrics) + "\n")
    last_loss = result.metrics[-1].split()[-1] if result.metrics else "n/a"
    print(f"trained {cfg.train_steps} steps on {len(dataset)} episodes; "
          f"checkpoint {args.out}")
    print(f"final loss {last_loss}")
    return 0


def _cmd_eval(args) -> int:
    _, hcfg = harness.load_config(args.config, args.mode)
    cfg, params, normalizer = policy.load_checkpoint(args.ckpt)
    dataset = harness.load_dataset(args.data)[:hcfg.eval_episodes]
    report = harness.evaluate(cfg, hcfg, params, normalizer, dataset,
                              args.condition, args.seed)
    lines = report.to_lines()
    print("\n".join(lines))
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return 0


def _cmd_canon(args) -> int:
    cloud = _load_cloud(args.input)
    if args.ckpt:
        cfg, params, _ = policy.load_checkpoint(args.ckpt)
        vn_cfg, vn_params = cfg.vn, params.vn
    else:
        cfg, _ = harness.load_config(args.config, args.mode)
        vn_cfg = cfg.vn
        vn_params = vn.init_vn_params(vn_cfg, seed=args.seed)
    t, x_cn, degenerate = vn.estimate_rotation(cloud, vn_cfg, vn_params)
    out = Path(args.output)
    if out.suffix == ".pcf":
        write_cloud_pcf(out, x_cn)
    else:
        write_cloud_text(out, x_cn)
    tfm_lines = [" ".join(repr(v) for v in row) for row in t.as_matrix()]
    Path(str(out) + ".tfm").write_text("\n".join(tfm_lines) + "\n")
    print(f"canonicalized {args.input} -> {out} (degenerate={degenerate})")
    return 0


def _cmd_equivtest(args) -> int:
    cfg, _ = harness.load_config(args.config, args.mode)
    mode = cfg.vn.mode
    failures = 0

    def check(name: str, value: float, tol: float) -> None:
        nonlocal failures
        ok = value < tol
        failures += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'} {name}: {value:.3e} (tol {tol:.0e})")

    layer = invariants.layer_equivariance_errors(n_rotations=25, n_draws=3, seed=args.seed)
    for name, err in layer.items():
        check(f"layer-equivariance/{name}", err, 1e-6)
    template = harness.builtin_template("box_stack").template_points.points
    check(f"canonical-consistency/{mode}",
          invariants.canonical_consistency_error(mode, template, 25, args.seed), 1e-5)
    for name, err in invariants.transport_roundtrip_errors(200, args.seed).items():
        check(f"transport-roundtrip/{name}", err, 1e-10)
    check("relative-chain", invariants.relative_chain_error(200, seed=args.seed), 1e-10)
    share, report = policy.parameter_share_report(policy.PolicyConfig())
    print(report)
    return 1 if failures else 0


def _cmd_gradcheck(args) -> int:
    failures = 0
    for name, err in invariants.gradient_check_errors(seed=args.seed).items():
        ok = err < 1e-4
        failures += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'} gradcheck/{name}: {err:.3e} (tol 1e-04)")
    return 1 if failures else 0


def _cmd_dispersion(args) -> int:
    if args.ckpt and not args.frozen:
        cfg, params, _ = policy.load_checkpoint(args.ckpt)
        vn_cfg, vn_params = cfg.vn, params.vn
        label = f"trained ({args.ckpt})"
    else:
        cfg, _ = harness.load_config(args.config, args.mode)
        vn_cfg = cfg.vn
        vn_params = vn.init_vn_params(vn_cfg, seed=args.seed)
        label = "frozen (fresh initialization)"
    table = harness.feature_dispersion_study(
        vn_cfg, vn_params, augmentations=args.augmentations, seed=args.seed)
    print(f"feature dispersion, {label}")
    for level, value in sorted(table.items()):
        print(f"level {level}: {value:.6e}")
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "canon": _cmd_canon,
    "equivtest": _cmd_equivtest,
    "gradcheck": _cmd_gradcheck,
    "dispersion": _cmd_dispersion,
}


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.dump_config:
        print(harness.default_config_text(), end="")
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
