"""Command line entry point.

Exit codes: 0 success, 1 suite or check failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .chaos import build_cascade, build_chaos, cell_span, shift_cascade_weight
from .errors import ConfigError
from .estimator import compute_A_N, reconstruction_error
from .harness import (
    CSV_COLUMNS,
    ExperimentConfig,
    build_context,
    run_convergence_experiment,
    run_verification_suite,
    _sample,
)
from .sampler import grad_pairing


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    over = {}
    for name in ("seed", "replicas", "workers"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    if getattr(args, "out", None):
        over["outdir"] = args.out
    return cfg.replace(**over) if over else cfg


def _common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--replicas", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory (default: $IMCHAOS_OUTPUT_DIR or ./imchaos-out)")


def cmd_verify(args) -> int:
    cfg = _load(args)
    rep = run_verification_suite(cfg)
    path = rep.write()
    for r in rep.oracle_rows:
        flag = "ok  " if r.passed else "FAIL"
        print(f"{flag} {r.quantity:46s} mc={r.mc:+.6g} oracle={r.oracle_value:+.6g} z={r.z:+.2f}")
    for r in rep.exact_rows:
        flag = "ok  " if r.passed else "FAIL"
        print(f"{flag} {r.check:46s} value={r.value:.3g} tol={r.tolerance:.1g}")
    print(f"report: {path}")
    return 0 if rep.passed else 1


def cmd_converge(args) -> int:
    cfg = _load(args)
    rep = run_convergence_experiment(cfg)
    path = rep.write()
    print(rep.csv_text(), end="")
    print(f"report: {path}")
    return 0


def cmd_cascade(args) -> int:
    c = build_cascade(args.levels, args.sigma, args.beta, seed=args.seed)
    level = min(args.levels, max(1, args.levels // 2))
    index = 2 ** level // 3
    shift = 2 * np.pi / args.beta
    c2 = shift_cascade_weight(c, (level, index), shift)
    dev = float(np.max(np.abs(c2.M - c.M)))
    dA = c2.A - c.A
    sp = cell_span(level, index, args.levels)
    print(f"shifted X at level {level}, index {index} by 2pi/beta = {shift:.6f}")
    print(f"max |M' - M| = {dev:.3e}")
    print(f"A' - A on the interval: min {dA[sp].min():.12f} max {dA[sp].max():.12f}")
    ok = dev <= 1e-12 and np.allclose(dA[sp], shift, rtol=0, atol=1e-12)
    return 0 if ok else 1


def cmd_reconstruct(args) -> int:
    """Estimate ``<grad Gamma . f> = -<Gamma, div f>`` for ``f = (phi, phi)`` from two components."""
    cfg = _load(args)
    estimates, truth = [], []
    for k in (1, 2):
        ck = cfg.replace(k=k)
        ctx = build_context(ck)
        R = ck.replicas
        Hs, Ts = [], []
        for a in range(0, R, ck.chunk):
            b = min(a + ck.chunk, R)
            f = _sample(ctx, a, b)
            Hs.append(ctx.est(build_chaos(f, ck.beta).values))
            Ts.append(grad_pairing(f, ck.tf(), k))
        H = np.concatenate(Hs)
        estimates.append(compute_A_N(H, H.shape[1]) / (-1j * ck.beta))
        truth.append(np.concatenate(Ts))
    est = sum(estimates)
    tru = sum(truth)
    s = reconstruction_error(-1j * cfg.beta * est, tru, cfg.beta, cfg.batches)
    print("replica  estimate(re)  truth")
    for i in range(min(5, len(tru))):
        print(f"{i:7d}  {est[i].real:+.5f}  {tru[i]:+.5f}")
    print(f"relative L2 error of -<Gamma, div f> from A_N: {s.rel_L2:.4f}")
    return 0


def cmd_emit_plots(args) -> int:
    body = json.loads(Path(args.report).read_text())
    out = Path(args.out or Path(args.report).parent)
    out.mkdir(parents=True, exist_ok=True)
    prov = body["provenance"]
    with open(out / "convergence.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in body["scales"]:
            w.writerow([r["eta"], 0, r["mean_re"], r["mean_im"], r["rel_L2"], r["stderr"], prov["replicas"], prov["seed"]])
        for r in body["averaged"]:
            w.writerow([r["eta"], r["N"], r["mean_re"], r["mean_im"], r["rel_L2"], r["stderr"], prov["replicas"], prov["seed"]])
    if body["correlation"]:
        with open(out / "correlation.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            etas = [r["eta"] for r in body["scales"]]
            w.writerow(["eta"] + etas)
            for e, row in zip(etas, body["correlation"]):
                w.writerow([e] + row)
    if body["oracle_rows"]:
        with open(out / "oracle.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            keys = ["quantity", "oracle", "mc", "oracle_value", "stderr", "z", "pass"]
            w.writerow(keys)
            for r in body["oracle_rows"]:
                w.writerow([r[k] for k in keys])
    print(f"wrote plot tables to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imchaos", description="Gradient reconstruction from imaginary chaos.")
    sub = p.add_subparsers(dest="cmd", metavar="command")
    v = sub.add_parser("verify", help="oracle vs Monte Carlo suite plus exact checks")
    _common(v)
    v.set_defaults(fn=cmd_verify)
    c = sub.add_parser("converge", help="convergence sweep over scales")
    _common(c)
    c.set_defaults(fn=cmd_converge)
    d = sub.add_parser("cascade-demo", help="2pi/beta shift invariance of the dyadic cascade")
    d.add_argument("--beta", type=float, default=1.0)
    d.add_argument("--levels", type=int, default=12)
    d.add_argument("--sigma", type=float, default=1.0)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(fn=cmd_cascade)
    r = sub.add_parser("reconstruct-field", help="-<Gamma, div f> from per-component estimates")
    _common(r)
    r.set_defaults(fn=cmd_reconstruct)
    e = sub.add_parser("emit-plots", help="plot-ready CSV tables from a report")
    e.add_argument("--report", required=True)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_emit_plots)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits 2 on unknown commands
    if not getattr(args, "fn", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def cli(argv=None) -> int:
    try:
        return main(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
