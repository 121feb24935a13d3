"""Command line interface.

Subcommands: train (run a config, write metrics CSV), gradcheck (finite
difference oracle battery), theory (convergence probe experiment), sweep
(slowdown or buffer-size study from a sweep spec), flops (MAC report for a
configured architecture). Exit codes: 0 success, 1 runtime failure, 2 usage
or config errors.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .checks import run_gradcheck_battery
from .config import ConfigError, config_from_kv, load_config, load_kv
from .errors import ValidationError
from .experiments import (run_buffer_sweep, run_experiment, run_probe,
                          run_slowdown_sweep, write_sweep_csv)
from .metrics import write_metrics
from .schedulers import TrainReport


def _common(parser):
    parser.add_argument("--seed", type=int, default=None,
                        help="override the run seed")
    parser.add_argument("--out", type=str, default=None,
                        help="override the output path")
    parser.add_argument("--quiet", action="store_true",
                        help="suppress progress output")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stagewise")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one experiment config")
    t.add_argument("config")
    _common(t)

    g = sub.add_parser("gradcheck", help="finite-difference gradient oracle")
    g.add_argument("--cases", type=int, default=100)
    g.add_argument("--epsilon", type=float, default=1e-5)
    g.add_argument("--tolerance", type=float, default=1e-4)
    _common(g)

    th = sub.add_parser("theory", help="convergence probe experiment")
    th.add_argument("--steps", type=int, default=5000)
    th.add_argument("--seeds", type=int, default=3)
    _common(th)

    s = sub.add_parser("sweep", help="slowdown or buffer-size sweep")
    s.add_argument("spec")
    _common(s)

    f = sub.add_parser("flops", help="MAC report for a configured network")
    f.add_argument("config")
    _common(f)
    return p


def _emit(quiet, *parts):
    if not quiet:
        print(*parts)


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    report, stages, _ = run_experiment(cfg)
    out = cfg.out or "metrics.csv"
    write_metrics(report, out)
    if report.series("test_acc"):
        accs = [report.final("test_acc", i) for i in range(len(stages))]
        _emit(args.quiet, "final per-stage test accuracy:",
              " ".join(f"{a:.4f}" for a in accs))
    _emit(args.quiet, f"wrote {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_gradcheck_battery(cases_per_type=args.cases,
                                    epsilon=args.epsilon,
                                    tolerance=args.tolerance)
    ok = True
    for name, worst, passed in results:
        ok = ok and passed
        _emit(args.quiet, f"{name:30s} worst rel err {worst:.3e} "
              f"{'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


def _cmd_theory(args) -> int:
    result = run_probe(steps=args.steps, seeds=tuple(range(args.seeds)))
    b = result.bound
    _emit(args.quiet, f"bound: lhs={b.lhs:.6g} rhs={b.rhs:.6g} "
          f"satisfied={b.satisfied} ({b.mode} mode)")
    _emit(args.quiet, f"inf grad norm {b.inf_grad_norm:.6g}, drift rate proxy "
          f"{b.rate_proxy:.6g}")
    if args.out:
        report = TrainReport()
        report.meta["probe"] = "theory"
        tr = result.trace
        for t in range(len(tr.steps)):
            report.add(t, 0, 1, "theory.eta", tr.eta[t])
            report.add(t, 0, 1, "theory.grad_norm", tr.grad_norm[t])
            report.add(t, 0, 1, "theory.drift", tr.drift[t])
            report.add(t, 0, 1, "theory.loss", tr.loss[t])
        write_metrics(report, args.out)
        _emit(args.quiet, f"wrote {args.out}")
    return 0


def _float_list(text):
    return [float(v) for v in text.split()]


def _int_list(text):
    return [int(v) for v in text.split()]


def _cmd_sweep(args) -> int:
    kv = load_kv(args.spec)
    param = kv.get("sweep.param")
    if param not in ("s", "m"):
        raise ConfigError("field 'sweep.param': must be 's' or 'm'")
    values = _float_list(kv.get("sweep.values", ""))
    seeds = _int_list(kv.get("sweep.seeds", "0 1 2"))
    positions = _int_list(kv.get("sweep.positions", ""))
    if not values:
        raise ConfigError("field 'sweep.values': required")
    base_kv = {k: v for k, v in kv.items() if not k.startswith("sweep.")}
    base_kv.setdefault("train.trainer", "async")
    base = config_from_kv(base_kv)
    if args.seed is not None:
        base = replace(base, seed=args.seed)
    if param == "s":
        if not positions:
            positions = list(range(1, base.k + 1))
        rows = run_slowdown_sweep(base, values, positions, seeds)
    else:
        pos = positions[0] if positions else max(1, base.k // 2)
        rows = run_buffer_sweep(base, [int(v) for v in values], pos, seeds,
                                slowdown=float(kv.get("async.s", 1.2)))
    out = args.out or kv.get("run.out") or "sweep.csv"
    meta = {"sweep": param,
            "note": "desk-scale analogue; slowdown simulated via selection pmf"}
    write_sweep_csv(rows, out, meta)
    _emit(args.quiet, f"wrote {out} ({len(rows)} rows)")
    return 0


def _cmd_flops(args) -> int:
    from .experiments import build_dataset, build_specs
    cfg = load_config(args.config)
    dataset = build_dataset(cfg)
    specs = build_specs(cfg, dataset)
    reports = [s.flops() for s in specs]
    largest = max(r.body_total for r in reports)
    print(f"{'stage':>5} {'primary MACs':>14} {'head MACs':>12} "
          f"{'head/largest':>12}")
    for i, r in enumerate(reports):
        ratio = r.head_total / largest if largest else 0.0
        print(f"{i:>5} {r.body_total:>14} {r.head_total:>12} {ratio:>11.2%}")
    return 0


def run_cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else 2
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "theory":
            return _cmd_theory(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "flops":
            return _cmd_flops(args)
        parser.print_usage(sys.stderr)
        return 2
    except (ConfigError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"runtime failure: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))
