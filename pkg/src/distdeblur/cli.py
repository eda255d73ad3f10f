"""Command-line interface: ``distdeblur {simulate,run,sweep,compare}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .harness import (
    METHODS,
    ExperimentConfig,
    run_method,
    score,
    simulate_observation,
    sweep_and_report,
    write_observation,
)
from .imaging import read_raw, write_png, write_raw


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    named = {
        "reference": args.reference,
        "output_dir": args.out,
        "seed": args.seed,
        "transport": args.transport,
        "lambdas": args.lambdas,
    }
    if args.grid:
        rows, _, cols = args.grid.partition("x")
        named["grid_rows"], named["grid_cols"] = rows, cols or rows
    for k, v in named.items():
        if v is not None:
            overrides[k] = str(v)
    try:
        return cfg.with_overrides(overrides)
    except ValueError as exc:
        raise SystemExit(f"config error: {exc}") from None


def _common(p):
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config entry")
    p.add_argument("--reference", help="reference image (PNG or raw); default is the synthetic image")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--grid", help="block grid as ROWSxCOLS")
    p.add_argument("--transport", choices=("reference", "inprocess", "socket"))
    p.add_argument("--lambdas", help="comma-separated regularization weights")
    p.add_argument("-v", "--verbose", action="store_true")


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    obs = simulate_observation(cfg)
    write_observation(cfg.output_dir, cfg, obs)
    rep = score(obs.truth, _pad(obs.observed, cfg.margin), cfg.margin, cfg.photon_max, "observed")
    print(f"observed {obs.observed.shape[0]}x{obs.observed.shape[1]}: SNR {rep.snr_db:.4f} dB, SSIM {rep.ssim:.4f}")
    return 0


def _pad(img, m):
    from .consensus import initial_anchor

    return initial_anchor(img, m)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    obs = simulate_observation(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lams = [args.lam] if args.lam is not None else list(cfg.lambdas)
    for lam in lams:
        res = run_method(args.method, cfg, obs.observed, obs.psf_grid, lam)
        rep = score(obs.truth, res.image, cfg.margin, cfg.photon_max, args.method, lam)
        stem = out / f"{args.method}_lam{lam:.6g}"
        write_raw(stem.with_suffix(".raw"), res.image)
        write_png(stem.with_suffix(".png"), res.image, cfg.photon_max)
        if res.trace is not None:
            res.trace.write_csv(f"{stem}_trace.csv")
            res.trace.write_timing_csv(f"{stem}_timing.csv")
        print(f"{args.method} lambda={lam:g}: SNR {rep.snr_db:.4f} dB, SSIM {rep.ssim:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    if args.overlaps:
        cfg = cfg.with_overrides({"overlaps": args.overlaps})
    methods = tuple(args.methods.split(",")) if args.methods else METHODS
    reports = sweep_and_report(cfg, methods)
    print(f"{'method':<12} {'lambda':>10} {'SNR dB':>10} {'SSIM':>8}")
    for r in reports:
        print(f"{r.method:<12} {r.lam:>10.4g} {r.snr_db:>10.4f} {r.ssim:>8.4f}")
    print(f"results in {cfg.output_dir}")
    return 0


def cmd_compare(args) -> int:
    if args.metrics:
        best = {}
        with open(args.metrics) as fh:
            for row in csv.DictReader(fh):
                snr_db = float(row["snr_db"])
                if row["method"] not in best or snr_db > best[row["method"]][1]:
                    best[row["method"]] = (float(row["lambda"]), snr_db, float(row["ssim"]))
        for method, (lam, s, q) in best.items():
            print(f"{method:<12} best lambda {lam:<10.4g} SNR {s:.4f} dB  SSIM {q:.4f}")
        return 0
    if not (args.reference and args.estimate):
        raise SystemExit("compare needs REFERENCE and ESTIMATE images, or --metrics")
    ref, est = read_raw(args.reference), read_raw(args.estimate)
    rep = score(ref, est, args.margin, args.photon_max)
    print(f"SNR {rep.snr_db:.4f} dB  SSIM {rep.ssim:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="distdeblur", description="Distributed nonblind image deblurring")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="blur and add noise to a reference image")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="deblur with one method")
    _common(p)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--lam", type=float, help="single regularization weight (default: the config's list)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="all methods over the lambda grid, with metrics and a manifest")
    _common(p)
    p.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
    p.add_argument("--overlaps", help="comma-separated overlap widths for an overlap sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="score an estimate, or summarize a metrics table")
    p.add_argument("reference", nargs="?", help="reference image (raw, estimate domain)")
    p.add_argument("estimate", nargs="?", help="estimate image (raw, same shape)")
    p.add_argument("--margin", type=int, default=0, help="pixels cropped from every side before scoring")
    p.add_argument("--photon-max", type=float, default=6000.0)
    p.add_argument("--metrics", help="metrics.csv from a sweep: print each method's best lambda")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
