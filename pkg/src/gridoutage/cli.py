"""Command-line entry point: ``gridoutage <command> ...``.

Commands
--------
gen-grid      write a generated topology as JSON
simulate      write a stream CSV and a ground-truth JSON for one planted outage
detect        run the detector on a stream CSV, write the outcome JSON
bench         run a Monte Carlo experiment from a TOML/JSON config
matfun-bench  accuracy and timing of the truncated series against eigh
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from gridoutage import __version__, kernels
from gridoutage.detector import DetectorConfig, run_detection
from gridoutage.errors import GridError
from gridoutage.gaussian import IncrementDistribution, whitening_transform
from gridoutage.grid import (
    GridTopology,
    apply_outage,
    derive_increment_distribution,
    generate_test_grid,
    random_injections,
    sensitivity_matrix,
)
from gridoutage.harness import ExperimentConfig, Scenario, run_monte_carlo, simulate_trial
from gridoutage.learner import LearnerConfig
from gridoutage.localizer import LocalizerThresholds, localize
from gridoutage.matfun import exact_exp_sym, exact_log_sym, truncated_exp, truncated_log


class InputError(Exception):
    """Malformed input file; reported without a traceback."""


def _write(path, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _pair(text: str) -> tuple[int, int]:
    try:
        i, k = (int(p) for p in text.replace(",", "-").split("-"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a branch as I-K, got {text!r}") from None
    return i, k


# --------------------------------------------------------------------------
# stream and model files


def write_stream_csv(path, x: np.ndarray, buses) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([str(b) for b in buses])
        for row in x:
            wr.writerow([repr(float(v)) for v in row])


def read_stream_csv(path) -> tuple[list[int], np.ndarray]:
    """Header of bus ids, then one row of increments per time step."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty file")
    try:
        buses = [int(h) for h in rows[0]]
    except ValueError:
        raise InputError(f"{path}: row 1: header must list integer bus ids, got {rows[0]}") from None
    data = []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(buses):
            raise InputError(f"{path}: row {n}: {len(row)} values for {len(buses)} buses")
        try:
            vals = [float(v) for v in row]
        except ValueError:
            raise InputError(f"{path}: row {n}: non-numeric value in {row}") from None
        if not all(math.isfinite(v) for v in vals):
            raise InputError(f"{path}: row {n}: non-finite value")
        data.append(vals)
    if not data:
        raise InputError(f"{path}: no data rows")
    return buses, np.asarray(data)


def read_model(path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    out = {}
    for key in ("pre", "post"):
        if key not in d:
            continue
        try:
            out[key] = IncrementDistribution.from_dict(d[key])
        except KeyError as exc:
            raise InputError(f"{path}: field '{key}' is missing {exc}") from None
        except ValueError as exc:
            raise InputError(f"{path}: field '{key}': {exc}") from None
    if "pre" not in out:
        raise InputError(f"{path}: missing field 'pre'")
    out["buses"] = d.get("buses")
    return out


# --------------------------------------------------------------------------
# commands


def cmd_gen_grid(args) -> int:
    top = generate_test_grid(args.kind, args.size, args.seed, n_chords=args.chords, shunt=args.shunt)
    _write(args.output, json.dumps(top.to_dict(), indent=2) + "\n")
    return 0


def cmd_simulate(args) -> int:
    top = GridTopology.load(args.grid)
    ids = [top.branch_id(i, k) for i, k in args.outage]
    post = apply_outage(top, ids)
    if not post.is_connected and not args.allow_islanding:
        raise GridError("the outage islands part of the grid; pass --allow-islanding")
    inj = random_injections(top.bus_count - 1, args.injection_seed)
    g = derive_increment_distribution(sensitivity_matrix(top), inj)
    f = derive_increment_distribution(sensitivity_matrix(post), inj)
    scn = Scenario(g, f, top.non_slack, set())
    length = args.length or math.ceil(50 / args.rho)
    tr = simulate_trial(scn, args.rho, args.seed, length, args.noise_level)
    write_stream_csv(args.output, tr.stream, top.non_slack)
    truth = {
        "lambda": tr.lam,
        "outage": [list(p) for p in args.outage],
        "buses": top.non_slack,
        "pre": g.to_dict(),
        "post": f.to_dict(),
    }
    _write(args.truth, json.dumps(truth, indent=2) + "\n")
    return 0


def cmd_detect(args) -> int:
    buses, x = read_stream_csv(args.stream)
    model = read_model(args.model)
    g = model["pre"]
    if g.dim != len(buses):
        raise InputError(f"{args.model}: 'pre' has dimension {g.dim}, stream has {len(buses)} buses")
    if model["buses"] is not None and list(model["buses"]) != buses:
        raise InputError(f"{args.model}: field 'buses' does not match the stream header")
    f = model.get("post")
    if args.mode == "f_known" and f is None:
        raise InputError(f"{args.model}: f_known mode needs field 'post'")
    learner = LearnerConfig(max_iters=args.max_iters,
                            mean_map="euclidean" if args.whiten else "bounded")
    cfg = DetectorConfig(rho=args.rho, alpha=args.alpha, window=args.window, learner=learner, mode=args.mode)
    if args.whiten:
        w = whitening_transform(g.cov).w
        w_inv = np.linalg.inv(w)
        xs = (x - g.mean) @ w.T
        g_det = IncrementDistribution(np.zeros(g.dim), np.eye(g.dim))
        f_det = None if f is None else f.affine(w, g.mean)
    else:
        xs, g_det, f_det, w_inv = x, g, f, None
    out = run_detection(xs, g_det, cfg, f=f_det if args.mode == "f_known" else None)
    if out.mu is not None and w_inv is not None:
        out.mu = w_inv @ out.mu + g.mean
        out.sigma = w_inv @ out.sigma @ w_inv.T
    if out.tau is not None and out.sigma is not None and g.dim >= 3:
        th = LocalizerThresholds(args.delta_max, args.delta_min)
        out.localized = localize(g.cov, np.asarray(out.sigma), th, labels=buses)
    _write(args.output, out.to_json())
    return 0


def cmd_bench(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.trials is not None:
        d = cfg.to_dict()
        d["trials"] = args.trials
        cfg = ExperimentConfig.from_dict(d)
    t0 = time.perf_counter()
    report = run_monte_carlo(cfg, workers=args.workers)
    out = args.output or cfg.output
    _write(out, report.to_json())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    print(f"{cfg.trials} trials in {time.perf_counter() - t0:.1f}s, "
          f"{report['failures']} failed", file=sys.stderr)
    return 0


def _random_sym(rng, dim, radius):
    a = rng.standard_normal((dim, dim))
    a = 0.5 * (a + a.T)
    return a * (radius / np.max(np.abs(np.linalg.eigvalsh(a))))


def cmd_matfun_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    xs = [_random_sym(rng, args.dim, rng.uniform(0, args.radius)) for _ in range(args.count)]
    ss = [_random_sym(rng, args.dim, rng.uniform(0, 0.3)) for _ in range(args.count)]
    ps = [exact_exp_sym(s) for s in ss]

    def timed(fn, items):
        t0 = time.perf_counter()
        res = [fn(v) for v in items]
        return res, time.perf_counter() - t0

    ref_exp, t_exp = timed(exact_exp_sym, xs)
    ref_log, t_log = timed(exact_log_sym, ps)
    rows = []
    for k in args.k_exp:
        got, t = timed(lambda v: truncated_exp(v, k, check=False), xs)
        err = max(float(np.max(np.abs(a - b)) / np.max(np.abs(b))) for a, b in zip(got, ref_exp))
        rows.append({"fn": "exp", "k": k, "max_rel_error": err, "seconds": t, "exact_seconds": t_exp})
    for k in args.k_log:
        got, t = timed(lambda v: truncated_log(v, k, check=False), ps)
        err = max(float(np.max(np.abs(a - b)) / np.max(np.abs(b))) for a, b in zip(got, ref_log))
        rows.append({"fn": "log", "k": k, "max_rel_error": err, "seconds": t, "exact_seconds": t_log})
    report = {"schema": "gridoutage.matfun-bench/1", "dim": args.dim, "count": args.count,
              "radius": args.radius, "rows": rows}
    _write(args.output, json.dumps(report, indent=2) + "\n")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridoutage", description="Grid line-outage detection and localization.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--backend", choices=kernels.available_backends(), help="kernel implementation")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-grid", help="generate a test topology")
    s.add_argument("--kind", choices=["radial", "loopy"], default="loopy")
    s.add_argument("--size", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--chords", type=int, default=None, help="loop count (default ceil(size/8))")
    s.add_argument("--shunt", type=float, default=0.0)
    s.add_argument("-o", "--output", default="-")
    s.set_defaults(func=cmd_gen_grid)

    s = sub.add_parser("simulate", help="simulate one stream with a planted outage")
    s.add_argument("--grid", required=True, help="topology JSON")
    s.add_argument("--outage", type=_pair, action="append", required=True, help="branch I-K (repeatable)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--injection-seed", type=int, default=0)
    s.add_argument("--rho", type=float, default=0.04)
    s.add_argument("--length", type=int, default=None)
    s.add_argument("--noise-level", type=float, default=0.0)
    s.add_argument("--allow-islanding", action="store_true")
    s.add_argument("-o", "--output", required=True, help="stream CSV")
    s.add_argument("--truth", default="-", help="ground-truth JSON")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("detect", help="run detection on a stream CSV")
    s.add_argument("--stream", required=True)
    s.add_argument("--model", required=True, help="JSON with 'pre' (and 'post' for f_known)")
    s.add_argument("--mode", choices=["f_known", "pgd"], default="pgd")
    s.add_argument("--rho", type=float, default=0.04)
    s.add_argument("--alpha", type=float, default=0.01)
    s.add_argument("--window", type=int, default=100)
    s.add_argument("--max-iters", type=int, default=300)
    s.add_argument("--whiten", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--delta-max", type=float, default=0.5)
    s.add_argument("--delta-min", type=float, default=0.1)
    s.add_argument("-o", "--output", default="-")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("bench", help="Monte Carlo experiment")
    s.add_argument("config", help="ExperimentConfig as TOML or JSON")
    s.add_argument("-o", "--output", default=None)
    s.add_argument("--csv", default=None, help="per-alpha summary CSV")
    s.add_argument("--trials", type=int, default=None)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("matfun-bench", help="truncated series vs eigendecomposition")
    s.add_argument("--dim", type=int, default=5)
    s.add_argument("--count", type=int, default=200)
    s.add_argument("--radius", type=float, default=2.0)
    s.add_argument("--k-exp", type=int, nargs="+", default=[4, 8, 12, 16])
    s.add_argument("--k-log", type=int, nargs="+", default=[4, 8, 16, 24])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", default="-")
    s.set_defaults(func=cmd_matfun_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.backend:
        kernels.use_backend(args.backend)
    try:
        return args.func(args)
    except (InputError, ValueError, OSError) as exc:
        # ConfigError and GridError are ValueErrors
        print(f"gridoutage {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
