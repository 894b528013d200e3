"""Command-line front end.

    heavyclip run --config exp.json [--threads N] [--seed S] [--out DIR]
    heavyclip schedule --regime nonconvex --T 16 --delta 0.1 --sigma 1 --p 2 --L 1 --Delta1 1
    heavyclip verify lemma2 [--grid default|acceptance] [--grad-norm G --lambda LAM]
    heavyclip verify freedman --spec rademacher
    heavyclip rate --config exp.json

Exit codes: 0 all checks pass, 1 a check failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .clipping import (DEFAULT_GRID_LAMBDAS, PreconditionError, clip_bound_grid, default_grid_models,
                       tight_bias_constant_ratio, verify_clip_bounds)
from .config import DEFAULT_RATE_TOLERANCE, ConfigError, ExperimentConfig, load_config
from .core import RngStream
from .noise import gaussian, noise_from_config, pareto_sphere, two_point
from .optimizer import (check_convex_steps, check_nonconvex_steps, check_parameter_properties,
                        manual_schedule, schedule_convex, schedule_nonconvex)

CSV_VERSION_LINE = "# heavyclip-csv v1"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    """Versioned CSV with LF line endings and ``repr`` float formatting."""
    lines = [CSV_VERSION_LINE, ",".join(header)]
    lines += [",".join(_cell(v) for v in row) for row in rows]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        val = float(obj)
        return val if math.isfinite(val) else repr(val)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True)


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dump_json(obj) + "\n")


def build_schedule(exp: ExperimentConfig, T: int):
    noise, obj = exp.noise_model, exp.obj
    sigma, p, L, scale = noise.certified_sigma, noise.certified_p, obj.smoothness_L, exp.scale()
    key = "R1" if exp.regime == "convex" else "Delta1"
    if exp.schedule is not None:
        lam = exp.schedule["lambda"]
        return manual_schedule(exp.schedule["eta"], math.inf if lam is None else lam,
                               T=T, delta=exp.delta, sigma=sigma, p=p, L=L, **{key: scale})
    if exp.regime == "convex":
        return schedule_convex(T, exp.delta, sigma, p, L, scale)
    return schedule_nonconvex(T, exp.delta, sigma, p, L, scale)


def _step_summary(ledgers, regime):
    check = check_convex_steps if regime == "convex" else check_nonconvex_steps
    results = [check(led) for led in ledgers]
    worst = max(r.worst_excess for r in results)
    failing = [i + 1 for i, r in enumerate(results) if not r.passed]
    clip_excess = max(float(np.max(led.clip_norm - led.lam)) for led in ledgers)
    u_excess = (max(float(np.max(np.sqrt(led.thetau_sq) - 2.0 * led.lam)) for led in ledgers)
                if all(led.exact for led in ledgers) else None)
    passed = not failing and clip_excess <= 1e-12 * float(np.max(ledgers[0].lam)) \
        and (u_excess is None or u_excess <= 1e-9)
    return {"trials": len(results), "steps_per_trial": results[0].n_steps,
            "violations": sum(r.n_violations for r in results), "failing_trials": failing,
            "worst_excess": worst, "clip_norm_excess": clip_excess, "theta_u_excess": u_excess,
            "pass": bool(passed)}


def _trial_rows(ledger, regime):
    available = ledger.r_sq is not None if regime == "convex" else ledger.exact
    event = analysis.event_quantity(ledger, regime) if available else None
    r = ledger.r
    for t in range(ledger.T):
        yield (t + 1, ledger.delta[t], None if r is None else r[t], ledger.grad_norm_sq[t],
               ledger.theta_sq[t], bool(ledger.clipped[t]), None if event is None else event[t + 1])


TRIAL_HEADER = ("t", "delta_t", "r_t", "grad_norm_sq", "theta_norm_sq", "clipped", "event_sum")
SUMMARY_HEADER = ("experiment", "regime", "p", "sigma", "T", "M", "quantile", "bound", "ratio",
                  "event_fraction", "slope", "pass")


def run_experiment(exp: ExperimentConfig, run_dir: Path | None, threads: int):
    """Run every ``T`` of one experiment; return summary rows and failed check names."""
    failures = []
    rows = []
    quantiles = []
    noise = exp.noise_model
    keep = bool({"per-step", "event", "freedman"} & set(exp.checks)) or exp.trial_csv_limit > 0
    for T in exp.T:
        s = build_schedule(exp, T)
        ens = analysis.run_ensemble(exp.obj, noise, s, T, exp.M, exp.base_seed, threads=threads,
                                    x1=exp.start_point(), keep_ledgers=keep)
        report = {"experiment": exp.name, "T": T, "schedule": s.to_dict(),
                  "metric": "avg_gap" if ens.regime == "convex" else "avg_grad_sq"}
        q = analysis.order_statistic_quantile(ens.metrics, 1.0 - exp.delta)
        quantiles.append((T, q))
        report["quantile"] = q
        bound = ratio = frac = None
        row_ok = True
        tag = f"{exp.name}/T={T}"
        if "bound" in exp.checks:
            br = analysis.check_highprob_bound(ens, exp.delta)
            report["bound"] = br.to_dict()
            bound, ratio = br.theorem_bound, br.ratio
            if not br.passed:
                failures.append(f"{tag}/bound")
                row_ok = False
        if "event" in exp.checks:
            ef = analysis.event_fraction(ens, exp.delta)
            report["event"] = ef.to_dict()
            frac = ef.fraction
            if not ef.passed:
                failures.append(f"{tag}/event")
                row_ok = False
        if "per-step" in exp.checks:
            st = _step_summary(ens.ledgers, ens.regime)
            report["per_step"] = st
            if not st["pass"]:
                failures.append(f"{tag}/per-step")
                row_ok = False
        if "freedman" in exp.checks:
            b, F = analysis.replay_thresholds(s, ens.regime)
            spec = analysis.replay_spec(ens.ledgers, ens.regime, s.inputs["R1" if ens.regime == "convex" else "Delta1"])
            fr = analysis.freedman_tail_check(spec, b, F, ens.M, RngStream(exp.base_seed))
            report["freedman"] = {**fr.to_dict(), "b": b, "F": F, "c": spec.c}
            if not fr.passed:
                failures.append(f"{tag}/freedman")
                row_ok = False
        if "lemma2" in exp.checks:
            lam = float(np.max(s.arrays(T)[1]))
            if math.isfinite(lam):
                rep = verify_clip_bounds(noise, lam / 2.0, lam, rng=RngStream(exp.base_seed, 0),
                                         dim=exp.obj.dim)
                report["lemma2"] = rep.to_dict()
                if not rep.passed:
                    failures.append(f"{tag}/lemma2")
                    row_ok = False
        if run_dir is not None:
            write_json(run_dir / "reports" / f"{exp.name}-T{T}.json", report)
            for i, led in enumerate(ens.ledgers[:exp.trial_csv_limit]):
                write_csv(run_dir / "trials" / f"{exp.name}-T{T}-trial{i + 1}.csv", TRIAL_HEADER,
                          _trial_rows(led, ens.regime))
        rows.append([exp.name, ens.regime, noise.certified_p, noise.certified_sigma, T, exp.M,
                     q, bound, ratio, frac, None, row_ok])

    if "rate" in exp.checks:
        fit = analysis.fit_rate(quantiles)
        target = exp.rate_target if exp.rate_target is not None else analysis.rate_exponent(exp.regime, exp.noise_model.certified_p)
        tol = exp.rate_tolerance if exp.rate_tolerance is not None else DEFAULT_RATE_TOLERANCE[exp.regime]
        ok = abs(fit.slope - target) <= tol and not fit.floored
        if run_dir is not None:
            write_json(run_dir / "reports" / f"{exp.name}-rate.json",
                       {**fit.to_dict(), "target": target, "tolerance": tol, "pass": ok,
                        "points": [list(p) for p in quantiles]})
        for row in rows:
            row[10] = fit.slope
            row[11] = row[11] and ok
        if not ok:
            failures.append(f"{exp.name}/rate")
    return rows, failures


def cmd_run(args) -> int:
    cfg = load_config(_require(args.config, "--config"), args.seed)
    base = Path(args.out or cfg.output_dir)
    digest = cfg.digest()
    run_dir = base / f"run-{digest[:16]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_json(run_dir / "config-echo.json", {**cfg.to_dict(), "sha256": digest})
    rows, failures = [], []
    for exp in cfg.experiments:
        r, f = run_experiment(exp, run_dir, args.threads)
        rows += r
        failures += f
    write_csv(run_dir / "summary.csv", SUMMARY_HEADER, rows)
    print(str(run_dir))
    for name in failures:
        print(f"check failed: {name}", file=sys.stderr)
    return 1 if failures else 0


def cmd_rate(args) -> int:
    cfg = load_config(_require(args.config, "--config"), args.seed)
    base = Path(args.out or cfg.output_dir)
    digest = cfg.digest()
    out_dir = base / f"rate-{digest[:16]}"
    table, fits, failed = [], [], []
    for exp in cfg.experiments:
        if len(exp.T) < 4:
            raise ConfigError(f"{exp.name}.T", "a rate fit needs at least four values")
        points = []
        for T in exp.T:
            ens = analysis.run_ensemble(exp.obj, exp.noise_model, build_schedule(exp, T), T, exp.M,
                                        exp.base_seed, threads=args.threads, x1=exp.start_point(),
                                        keep_ledgers=False)
            q = analysis.order_statistic_quantile(ens.metrics, 1.0 - exp.delta)
            points.append((T, q))
            table.append([exp.name, exp.regime, exp.noise_model.certified_p, exp.noise_model.certified_sigma, T, q])
        fit = analysis.fit_rate(points)
        target = exp.rate_target if exp.rate_target is not None else analysis.rate_exponent(exp.regime, exp.noise_model.certified_p)
        tol = exp.rate_tolerance if exp.rate_tolerance is not None else DEFAULT_RATE_TOLERANCE[exp.regime]
        ok = abs(fit.slope - target) <= tol and not fit.floored
        fits.append({"experiment": exp.name, **fit.to_dict(), "target": target, "tolerance": tol, "pass": ok})
        if not ok:
            failed.append(exp.name)
    write_csv(out_dir / "rate.csv", ("experiment", "regime", "p", "sigma", "T", "quantile"), table)
    write_json(out_dir / "rate.json", fits)
    print(dump_json(fits))
    for name in failed:
        print(f"check failed: {name}/rate", file=sys.stderr)
    return 1 if failed else 0


def cmd_schedule(args) -> int:
    if args.regime == "convex":
        scale = _require(args.R1, "--R1")
        s = schedule_convex(args.T, args.delta, args.sigma, args.p, args.L, scale)
        ok = s.eta <= 1.0 / (4.0 * args.L)
        out = {"schedule": s.to_dict(), "step_limit": {"eta_times_4L": 4.0 * args.L * s.eta, "pass": ok}}
    else:
        scale = _require(args.Delta1, "--Delta1")
        s = schedule_nonconvex(args.T, args.delta, args.sigma, args.p, args.L, scale)
        rep = check_parameter_properties(s)
        ok = rep.passed
        out = {"schedule": s.to_dict(), "parameter_properties": rep.to_dict()}
    out["theorem_bound"] = analysis.theorem_bound(args.regime, args.T, args.delta, args.sigma, args.p, args.L, scale)
    print(dump_json(out))
    return 0 if ok else 1


ACCEPTANCE_GRID_MODELS = (
    gaussian(1.0),
    pareto_sphere(1.8, 1.5, 1.0),
    two_point(100.0, 1e-3, 1.5),
    two_point(10.0, 0.01, 2.0),
)
ACCEPTANCE_GRID_LAMBDAS = (1.0, 2.0, 4.0, 16.0, 64.0, 256.0, 1024.0)


def _parse_noise(text: str | None):
    if text is None:
        return gaussian(1.0)
    try:
        return noise_from_config(json.loads(text))
    except (json.JSONDecodeError, ValueError, TypeError, AttributeError) as exc:
        raise ConfigError("--noise", str(exc)) from None


def cmd_verify_lemma2(args) -> int:
    rng_seed = 0 if args.seed is None else args.seed
    if args.grad_norm is not None or args.lam is not None:
        g = _require(args.grad_norm, "--grad-norm")
        lam = _require(args.lam, "--lambda")
        model = _parse_noise(args.noise)
        rep = verify_clip_bounds(model, g, lam, args.n_mc, RngStream(rng_seed))
        print(dump_json({**rep.to_dict(), "method": rep.method}))
        if args.out:
            write_json(Path(args.out) / "lemma2.json", rep.to_dict())
        return 0 if rep.passed else 1

    if args.grid == "acceptance":
        models, lambdas = list(ACCEPTANCE_GRID_MODELS), ACCEPTANCE_GRID_LAMBDAS
    else:
        models, lambdas = default_grid_models(), DEFAULT_GRID_LAMBDAS
    results = clip_bound_grid(models, lambdas, args.n_mc, rng_seed)
    csv_rows = [(r.lam, r.bias_norm, r.bias_bound, r.u_sq_moment, r.u_sq_bound, r.passed) for _, r in results]
    details = [{"noise": m.to_config(), "lambda": r.lam, "grad_norm": r.grad_norm, "method": r.method,
                "bias_scaling_ratio": r.bias_scaling_ratio,
                "tight_constant_ratio": tight_bias_constant_ratio(m, r), **r.to_dict()}
               for m, r in results]
    n_pass = sum(r.passed for _, r in results)
    print(f"lemma2 grid {args.grid}: {len(results)} rows, {n_pass} pass")
    if args.out:
        out = Path(args.out)
        write_csv(out / "lemma2-grid.csv",
                  ("lambda", "bias_norm", "bias_bound", "u_sq_moment", "u_sq_bound", "pass"), csv_rows)
        write_json(out / "lemma2-grid.json", details)
    return 0 if n_pass == len(results) else 1


def cmd_verify_freedman(args) -> int:
    rng = RngStream(0 if args.seed is None else args.seed)
    if args.spec == "rademacher":
        spec = analysis.rademacher_spec(args.T, args.c)
    elif args.spec == "zero":
        spec = analysis.zero_spec(args.T)
    else:
        model = _parse_noise(args.noise)
        lam = _require(args.lam, "--lambda")
        g = args.grad_norm if args.grad_norm is not None else lam / 2.0
        spec = analysis.clipped_noise_spec(model, g, lam, args.T)
    rep = analysis.freedman_tail_check(spec, args.b, args.F, args.trials, rng)
    out = {"spec": spec.name, "T": spec.T, "c": spec.c, "b": args.b, "F": args.F, **rep.to_dict()}
    print(dump_json(out))
    if args.out:
        write_json(Path(args.out) / "freedman.json", out)
    return 0 if rep.passed else 1


def _require(value, flag):
    if value is None:
        raise ConfigError(flag, "required")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads")
    common.add_argument("--seed", type=int, default=None, help="override the base seed (u64)")
    common.add_argument("--out", default=None, help="output directory")

    parser = argparse.ArgumentParser(prog="heavyclip", description="Clipped SGD under heavy-tailed noise.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[common], help="run the ensembles and checks of a config")
    sub.add_parser("rate", parents=[common], help="fit convergence-rate exponents for a config")

    sp = sub.add_parser("schedule", parents=[common], help="print a theorem schedule as JSON")
    sp.add_argument("--regime", choices=("convex", "nonconvex"), required=True)
    sp.add_argument("--T", type=int, required=True)
    sp.add_argument("--delta", type=float, required=True)
    sp.add_argument("--sigma", type=float, required=True)
    sp.add_argument("--p", type=float, required=True)
    sp.add_argument("--L", type=float, required=True)
    sp.add_argument("--R1", type=float)
    sp.add_argument("--Delta1", type=float)

    vp = sub.add_parser("verify", help="run a builtin verification")
    vsub = vp.add_subparsers(dest="target", required=True)
    lp = vsub.add_parser("lemma2", parents=[common], help="clipped-noise bias/variance bounds")
    lp.add_argument("--grid", choices=("default", "acceptance"), default="default")
    lp.add_argument("--grad-norm", type=float, dest="grad_norm")
    lp.add_argument("--lambda", type=float, dest="lam")
    lp.add_argument("--noise", help='noise spec as JSON, e.g. \'{"kind": "gaussian", "sigma": 1}\'')
    lp.add_argument("--n-mc", type=int, default=100_000, dest="n_mc")
    fp = vsub.add_parser("freedman", parents=[common], help="empirical Freedman tail check")
    fp.add_argument("--spec", choices=("rademacher", "zero", "clipped-noise"), default="rademacher")
    fp.add_argument("--T", type=int, default=100)
    fp.add_argument("--b", type=float, default=30.0)
    fp.add_argument("--F", type=float, default=100.0)
    fp.add_argument("--c", type=float, default=1.0)
    fp.add_argument("--trials", type=int, default=100_000)
    fp.add_argument("--noise")
    fp.add_argument("--lambda", type=float, dest="lam")
    fp.add_argument("--grad-norm", type=float, dest="grad_norm")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return 2
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    handlers = {"run": cmd_run, "rate": cmd_rate, "schedule": cmd_schedule}
    try:
        if args.command == "verify":
            return cmd_verify_lemma2(args) if args.target == "lemma2" else cmd_verify_freedman(args)
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PreconditionError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 2
    except (ValueError, analysis.FreedmanPreconditionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
