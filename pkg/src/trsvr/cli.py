"""``trsvr`` command-line front end.

Exit codes: 0 success, 1 validation or I/O error, 2 numeric failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import theory
from .config import ExperimentConfig
from .core import ConfigurationError, ContractViolation, InputError, NumericFailure, evaluate_objective, full_gradient
from .drivers import OPTIMIZERS, run
from .estimators import MAX_ENUMERATION, count_batches
from .metrics import SERIES_METRICS, format_float, series_text, write_metrics

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _x0(cfg: ExperimentConfig, problem) -> np.ndarray:
    rc = cfg.run_config(problem)
    return np.zeros(problem.d) if rc.x0 is None else rc.x0


def default_K_H(cfg: ExperimentConfig, L_H: Optional[float]) -> float:
    o = cfg.values["optimizer"]
    kind = o["hessian_mode"].split("(")[0].strip()
    if kind == "identity_scaled":
        value = abs(o["hessian_scale"])
    elif kind == "lbfgs" or L_H is None:
        value = o["hessian_cap"]
        if value is None:
            raise ConfigurationError(
                "theory.K_H must be set when the Hessian model has no closed-form bound (set it or optimizer.hessian_cap)",
                key="theory.K_H",
            )
    else:
        value = L_H
    cap = o["hessian_cap"]
    return value if cap is None else min(value, cap)


def theory_constants(cfg: ExperimentConfig, problem=None) -> theory.TheoryConstants:
    """Constants from ``[theory]`` overrides, estimating the missing ones from the problem."""
    th, o = cfg.values["theory"], cfg.values["optimizer"]
    given = {k: th[k] for k in ("L_grad", "L_H", "K_H", "L", "sigma_g", "f_inf") if th[k] is not None}
    z = 1.0 if th["z"] == "auto" else th["z"]
    common = dict(alpha=o["alpha"], b=o["b"], S=o["S"], z=z)
    if all(k in given for k in ("L_grad", "K_H", "L")):
        c = theory.TheoryConstants(L_grad=given["L_grad"], L_H=given.get("L_H", given["L_grad"]),
                                   K_H=given["K_H"], L=given["L"], sigma_g=given.get("sigma_g", 0.0),
                                   f_inf=given.get("f_inf", math.nan), **common)
    else:
        if problem is None:
            raise ConfigurationError("[problem] is needed to estimate constants not given in [theory]",
                                     key="problem")
        rng = np.random.default_rng(o["seed"])
        x0 = _x0(cfg, problem)
        points = [x0, x0 + rng.standard_normal(problem.d), rng.standard_normal(problem.d)]
        c = theory.estimate_constants(problem, points, K_H=1.0, **common)
        c = c.replace(**{k: v for k, v in given.items() if k != "K_H"})
        c = c.replace(K_H=given.get("K_H", default_K_H(cfg, c.L_H)))
    if th["z"] == "auto":
        c = c.replace(z=theory.best_z(c)[0])
    return c


def _problem_or_none(cfg: ExperimentConfig):
    return cfg.problem() if "problem" in cfg.present else None


# -- commands ------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.set)
    problem = cfg.problem()
    rc = cfg.run_config(problem)
    constants = theory_constants(cfg, problem) if rc.strict else None
    t0 = time.perf_counter()
    trace = run(problem, rc, constants)
    wall = time.perf_counter() - t0
    out = cfg.output_dir(args.out) / cfg.values["output"]["metrics"]
    write_metrics(trace, out)
    x = trace.x_final
    print(f"optimizer = {rc.optimizer}")
    print(f"records = {len(trace)}")
    print(f"final_f = {format_float(evaluate_objective(problem, x))}")
    print(f"final_grad_norm = {format_float(float(np.linalg.norm(full_gradient(problem, x))))}")
    print(f"evals = {trace.total_evals}")
    print(f"stop = {trace.stop_reason}")
    print(f"wall_time_s = {wall:.3f}")
    print(f"metrics = {out}")
    return EXIT_OK


def _variance_report(cfg, problem, c) -> theory.Report:
    th, o = cfg.values["theory"], cfg.values["optimizer"]
    rng = np.random.default_rng(o["seed"])
    pairs = []
    for _ in range(th["pairs"]):
        x0 = rng.standard_normal(problem.d)
        pairs.append((x0 + rng.uniform(0.01, 2.0) * rng.standard_normal(problem.d), x0))
    enumerable = count_batches(problem.N, o["b"], o["sampling"]) <= MAX_ENUMERATION
    if th["trials"] == 0 and enumerable:
        return theory.verify_variance_bound(problem, c, pairs, "exact", sampling=o["sampling"])
    return theory.verify_variance_bound(problem, c, pairs, "monte_carlo", trials=th["trials"] or 1000,
                                        seed=o["seed"], sampling=o["sampling"])


def _decrease_report(cfg, problem, c) -> theory.Report:
    rc = cfg.run_config(problem).replace(optimizer="trsvr", record_points=True, diag_every=1, strict=False)
    if rc.radius_policy != "proportional":
        report = theory.Report()
        report.add(theory.CheckResult("decrease", theory.SKIP,
                                      reason="clipped radius policy violates the proportional-rule hypothesis"))
        return report
    trace = run(problem, rc)
    th = cfg.values["theory"]
    return theory.verify_decrease_lemmas(trace, problem, c, th["states"], th["replays"], rc.seed)


def _theorem_report(cfg, problem, c) -> theory.Report:
    schedule = theory.lyapunov_schedule(c)
    if not schedule.valid:
        report = theory.Report()
        report.add(theory.CheckResult("theorem", theory.SKIP, rhs=schedule.Lam_min, reason="bound vacuous"))
        return report
    rc = cfg.run_config(problem).replace(optimizer="trsvr", diag_every=1, grad_tol=None, max_evals=None)
    traces = [run(problem, rc.replace(seed=rc.seed + r)) for r in range(cfg.values["theory"]["seeds"])]
    return theory.verify_theorem_bound(traces, c, schedule)


def cmd_verify(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.set)
    problem = cfg.problem()
    cfg.run_config(problem)
    c = theory_constants(cfg, problem)
    which = ("variance", "decrease", "theorem") if args.which == "all" else (args.which,)
    builders = {"variance": _variance_report, "decrease": _decrease_report, "theorem": _theorem_report}
    report = theory.Report()
    for name in which:
        report.extend(builders[name](cfg, problem, c))
    lines = report.lines()
    out = cfg.output_dir(args.out) / cfg.values["output"]["report"]
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(line + "\n" for line in lines))
    for line in lines:
        print(line)
    print(f"summary: {report.count('PASS')} pass, {report.count('FAIL')} fail, {report.count('SKIP')} skip")
    return EXIT_OK if report.passed else EXIT_VERIFY


def constants_table(cfg: ExperimentConfig, problem=None) -> list[str]:
    c = theory_constants(cfg, problem)
    sched = theory.lyapunov_schedule(c)
    z_best, best = theory.best_z(c)
    rows = [(name, getattr(c, name)) for name in ("L_grad", "L_H", "K_H", "L", "sigma_g", "f_inf", "alpha", "z")]
    rows += [("b", c.b), ("S", c.S), ("step_size_limit", c.step_size_limit),
             ("step_size_ok", str(c.step_size_ok).lower())]
    rows += [(f"lambda[{s}]", v) for s, v in enumerate(sched.lam)]
    rows += [(f"Lambda[{s}]", v) for s, v in enumerate(sched.Lam)]
    rows += [("Lambda_min", sched.Lam_min), ("best_z", z_best), ("best_Lambda_min", best.Lam_min)]
    f0 = cfg.values["theory"]["f0"]
    if f0 is None and problem is not None:
        f0 = evaluate_objective(problem, _x0(cfg, problem))
    K = cfg.values["optimizer"]["K_max"] - 1
    if f0 is None or math.isnan(c.f_inf):
        rows.append(("bound", "unavailable (needs f0 and f_inf)"))
    elif not sched.valid:
        rows.append(("bound", "vacuous (Lambda_min <= 0)"))
    else:
        rows.append((f"bound[K={K}]", theory.convergence_bound(f0, c.f_inf, K, c.S, sched.Lam_min)))
    return [f"{k} = {float(v)!r}" if isinstance(v, (float, np.floating)) else f"{k} = {v}" for k, v in rows]


def cmd_constants(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.set)
    for line in constants_table(cfg, _problem_or_none(cfg)):
        print(line)
    return EXIT_OK


def cmd_compare(args) -> int:
    if not args.config:
        raise ConfigurationError("compare needs at least one config", key="config")
    cfgs = [ExperimentConfig.load(p, args.set) for p in args.config]
    optimizers = [o.strip() for o in args.optimizers.split(",") if o.strip()] if args.optimizers else []
    for o in optimizers:
        if o not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {o!r}", key="optimizers")
    if optimizers:
        runs = [(cfg, o) for cfg in cfgs for o in optimizers]
    else:
        runs = [(cfg, cfg.values["optimizer"]["name"]) for cfg in cfgs]
    if len(runs) < 2:
        raise ConfigurationError("compare needs at least two runs (several configs or --optimizers a,b)",
                                 key="optimizers")
    first = runs[0][0].values["problem"]
    if any(cfg.values["problem"] != first for cfg, _ in runs):
        raise ConfigurationError("configs describe different problems", key="problem")

    problem = runs[0][0].problem()
    out_dir = runs[0][0].output_dir(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    index, seen = [], {}
    for cfg, opt in runs:
        rc = cfg.run_config(problem).replace(optimizer=opt)
        trace = run(problem, rc)
        seen[opt] = seen.get(opt, 0) + 1
        label = opt if seen[opt] == 1 else f"{opt}_{seen[opt]}"
        path = out_dir / f"series_{label}.dat"
        path.write_text(series_text(trace, args.metric))
        index.append(f"{label} {opt} {args.metric} {path.name}")
    (out_dir / runs[0][0].values["output"]["index"]).write_text("".join(line + "\n" for line in index))
    for line in index:
        print(line)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trsvr", description="Trust-region variance-reduced optimization benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, multi=False):
        if multi:
            p.add_argument("config", nargs="*", help="experiment config files")
        else:
            p.add_argument("--config", "-c", required=True, help="experiment config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config entry (repeatable)")
        p.add_argument("--out", help="output directory (default: [output] dir, then $TRSVR_OUTPUT_DIR, then .)")

    p = sub.add_parser("run", help="run one optimizer and write the metrics CSV")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="check the variance, decrease and convergence bounds empirically")
    common(p)
    p.add_argument("--which", choices=("variance", "decrease", "theorem", "all"), default="all")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("constants", help="print constants, the Lyapunov schedule and the bound")
    common(p)
    p.set_defaults(func=cmd_constants)

    p = sub.add_parser("compare", help="write evals-vs-metric series for several runs")
    common(p, multi=True)
    p.add_argument("--optimizers", help="comma-separated optimizers to run on the (single) config")
    p.add_argument("--metric", choices=SERIES_METRICS, default="f")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractViolation as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
