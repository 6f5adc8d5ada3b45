"""Command-line entry point: ``register``, ``bench``, ``synth``, ``params`` and ``selftest``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import io
from .bench import make_synthetic_pair, make_synthetic_pairs, run_benchmark
from .errors import RegistrationError
from .geometry import compute_metrics
from .params import ModelParams
from .pipeline import VARIANTS, Networks, PipelineConfig, format_diagnostics, register_pair


def _config(args) -> PipelineConfig:
    values = io.load_config(args.config) if args.config else {}
    for item in args.set or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        values[key.strip()] = io._parse_value(val.strip())
    if getattr(args, "method", None):
        values["method"] = args.method
    try:
        return PipelineConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise SystemExit(f"bad configuration: {exc}")


def _networks(args, cfg):
    if getattr(args, "params", None):
        return Networks.from_model(ModelParams.load(args.params))
    return Networks.from_config(cfg)


def cmd_register(args) -> int:
    cfg = _config(args)
    source = io.read_kitti_bin(args.src)
    target = io.read_kitti_bin(args.dst)
    T, corr, diag = register_pair(source, target, cfg, _networks(args, cfg))
    print(T.to_line())
    if args.gt:
        m = compute_metrics(T, io.read_transform(args.gt))
        print(f"rte_cm={m.rte_cm:.4f} rre_deg={m.rre_deg:.4f}")
    if args.verbose:
        print(format_diagnostics(diag), file=sys.stderr)
    if args.out_transform:
        io.write_transform(args.out_transform, T)
    if args.out_corr:
        res = diag["result"]
        io.write_correspondences(args.out_corr, [res.windows, res.patches, res.points])
    if args.ply:
        from .geometry import apply_transform

        io.write_ply(args.ply, apply_transform(source, T))
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args).ablation(args.variant)
    pairs = make_synthetic_pairs(args.scenes, seed=args.seed, noise=args.noise)
    nets = _networks(args, cfg)
    out = Path(args.out)
    cdf = Path(args.cdf) if args.cdf else out.with_name(out.stem + "_cdf.csv")
    report = run_benchmark(pairs, cfg, register=lambda s, t, c: register_pair(s, t, c, nets),
                           rte_threshold_cm=args.rte_threshold, rre_threshold_deg=args.rre_threshold,
                           csv_path=out, cdf_path=cdf)
    for key, val in report.summary().items():
        print(f"{key}={val:.4f}" if isinstance(val, float) else f"{key}={val}")
    return 0


def cmd_synth(args) -> int:
    pair = make_synthetic_pair(args.seed, n_points=args.points, noise=args.noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_kitti_bin(out / "source.bin", pair.source)
    io.write_kitti_bin(out / "target.bin", pair.target)
    io.write_transform(out / "gt.txt", pair.ground_truth)
    if args.ply:
        io.write_ply(out / "source.ply", pair.source)
        io.write_ply(out / "target.ply", pair.target)
    print(f"wrote {out} ({len(pair.source)} points)")
    return 0


def cmd_params(args) -> int:
    cfg = _config(args)
    Networks.from_config(cfg).to_model().save(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    return 0 if run_all() else 1


def _add_config_args(p):
    p.add_argument("--config", help="flat key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config entry")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffreg", description="Hierarchical point-cloud registration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="register two .bin scans")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--params", help="weights file; seeded weights when omitted")
    p.add_argument("--method", choices=("lgr", "ransac", "svd", "icp"))
    p.add_argument("--gt", help="ground-truth transform line, prints metrics")
    p.add_argument("--out-transform")
    p.add_argument("--out-corr", help="correspondence CSV (level,i,j,score)")
    p.add_argument("--ply", help="write the aligned source as ASCII PLY")
    p.add_argument("-v", "--verbose", action="store_true", help="diagnostics on stderr")
    _add_config_args(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("bench", help="benchmark on synthetic pairs")
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True, help="per-pair CSV")
    p.add_argument("--cdf", help="empirical-CDF CSV (default: <out>_cdf.csv)")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--params")
    p.add_argument("--method", choices=("lgr", "ransac", "svd", "icp"))
    p.add_argument("--rte-threshold", type=float, default=60.0)
    p.add_argument("--rre-threshold", type=float, default=5.0)
    _add_config_args(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write a synthetic pair and its ground truth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=int)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--ply", action="store_true", help="also write PLY copies")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("params", help="write seeded weights to a .pdnw file")
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("selftest", help="run the built-in property checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RegistrationError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
