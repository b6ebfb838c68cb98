"""Command-line entry point.

Subcommands::

    simulate <config.json>               multi-run policy comparison, CSV reports
    ablation <config.json>               exploration sensitivity grid, CSV reports
    solve <problem.json>                 one allocation LP (solver or email document)
    calibrate <scores.csv>               isotonic calibration map from score,label rows
    tune-temperature <ckpt> <ctx.csv>    largest temperature meeting an overlap target

Exit codes: 0 success, 2 invalid configuration or input, 3 infeasible
problem, 4 any other runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_SCHEMA, EXIT_INFEASIBLE, EXIT_RUNTIME = 0, 2, 3, 4


def _write_json(doc, path):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_simulate(args) -> int:
    from .experiment import (config_from_dict, effective_config, load_document, run_experiment,
                             series, write_report)

    doc = load_document(args.config)
    for key in ("rounds", "runs", "seed"):
        if getattr(args, key) is not None:
            doc[key] = getattr(args, key)
    config = config_from_dict(doc)
    if args.print_config:
        _write_json(effective_config(config), None)
        return EXIT_OK
    report = run_experiment(config)
    out = args.out or config.output or "results"
    paths = write_report(report, out)
    summary = report.summary()
    last = config.rounds - 1
    print(f"{'policy':<12}{'cum. reward':>14}{'global viol.':>14}{'max set viol.':>15}")
    for name in report.policies:
        cum = series(summary, name, "cumulative_reward")
        g = series(summary, name, "global_violation")
        p = series(summary, name, "provider_violation_max")
        if not cum or cum[-1].round != last:
            print(f"{name:<12}{'(failed)':>14}")
            continue
        print(f"{name:<12}{cum[-1].mean:>14.1f}{np.mean([r.mean for r in g]):>14.2f}"
              f"{np.mean([r.mean for r in p]):>15.2f}")
    print(f"wrote {paths['rounds']} and {paths['summary']}")
    for err in report.errors:
        print(f"error: {err}", file=sys.stderr)
    return EXIT_RUNTIME if report.errors and not report.records else EXIT_OK


def cmd_ablation(args) -> int:
    from .ablation import metrics, run_grid
    from .experiment import ablation_config_from_dict, load_document

    config, output = ablation_config_from_dict(load_document(args.config))
    if args.runs is not None:
        import dataclasses
        config = dataclasses.replace(config, runs=args.runs)
    result = run_grid(config)
    table = metrics(result)
    out = Path(args.out or output or "ablation")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["q", "tau", "run", "reward", "unsub", "perturbed_unsub", "iterations", "converged", "error"])
        for r in result.records():
            w.writerow([repr(r.q), repr(r.tau), r.run, repr(r.reward), repr(r.unsub), repr(r.perturbed_unsub),
                        r.iterations, r.converged, r.error or ""])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["q", "tau", "mean_reward", "mean_unsub", "ruc_percent", "allocation_variance"])
        for s in table.values():
            w.writerow([repr(s.q), repr(s.tau), repr(s.mean_reward), repr(s.mean_unsub), repr(s.ruc), repr(s.av)])
    _write_json({"config": config.to_dict(), "budget": result.budget}, out / "config.json")
    print(f"budget {result.budget:.6g}")
    print(f"{'sigma_q':>8}{'tau':>6}{'RUC %':>9}{'AV':>11}")
    for s in table.values():
        print(f"{s.q:>8g}{s.tau:>6g}{s.ruc:>9.2f}{s.av:>11.5f}")
    print(f"wrote {out / 'runs.csv'} and {out / 'summary.csv'}")
    return EXIT_OK


def cmd_solve(args) -> int:
    from .experiment import EmailScenario, email_template, load_document
    from .lp_solver import certify, problem_from_dict, solve

    if args.template:
        _write_json(email_template(), args.out)
        return EXIT_OK
    if not args.problem:
        raise SystemExit("solve: a problem file is required unless --template is given")
    doc = load_document(args.problem)
    if isinstance(doc, dict) and "scenario" in doc:
        problem = EmailScenario.from_dict(doc).problem()
    else:
        caps = doc.get("user_caps") or {}
        if isinstance(caps.get("kappa"), list):
            caps["kappa"] = [float("inf") if k is None else k for k in caps["kappa"]]
        try:
            problem = problem_from_dict(doc)
        except (KeyError, TypeError, ValueError) as exc:
            from .experiment import SchemaError
            raise SchemaError("$", f"invalid problem document: {exc!r}") from None
    sol = solve(problem)
    cert = certify(problem, sol)
    out = sol.to_dict()
    out["x"] = np.asarray(sol.x).tolist()
    out["certificate"] = {"feasible": cert.feasible, "rel_gap": cert.rel_gap,
                          "max_row_violation": cert.max_row_violation,
                          "max_cap_violation": cert.max_cap_violation}
    out["row_labels"] = [r.label for r in problem.rows]
    _write_json(out, args.out)
    if args.out:
        print(f"objective {sol.lp_objective:.6g}  gap {sol.rel_gap:.2e}  "
              f"violation {sol.max_row_violation:.2e}  iterations {sol.iterations}")
    return EXIT_OK


def _read_columns(path, required):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            from .experiment import SchemaError
            raise SchemaError(str(path), f"missing columns {missing}")
        return reader.fieldnames, list(reader)


def cmd_calibrate(args) -> int:
    from .calibration import apply, fit_isotonic

    _, rows = _read_columns(args.scores, ["score", "label"])
    scores = np.array([float(r["score"]) for r in rows])
    labels = np.array([float(r["label"]) for r in rows])
    model = fit_isotonic(scores, labels)
    _write_json(model.to_dict(), args.out)
    if args.out:
        brier_raw = float(np.mean((np.clip(scores, 0, 1) - labels) ** 2))
        brier_cal = float(np.mean((apply(model, scores) - labels) ** 2))
        print(f"{len(model.breakpoints)} steps; Brier score {brier_raw:.4f} -> {brier_cal:.4f}")
    return EXIT_OK


def read_contexts(path) -> np.ndarray:
    """``observation,action,z0..z{d-1}`` rows into an (observations, actions, d) array."""
    fields, rows = _read_columns(path, ["observation", "action"])
    feats = [f for f in fields if f not in ("observation", "action")]
    obs = sorted({int(r["observation"]) for r in rows})
    acts = sorted({int(r["action"]) for r in rows})
    oi = {o: k for k, o in enumerate(obs)}
    ai = {a: k for k, a in enumerate(acts)}
    out = np.full((len(obs), len(acts), len(feats)), np.nan)
    for r in rows:
        out[oi[int(r["observation"])], ai[int(r["action"])]] = [float(r[f]) for f in feats]
    if np.isnan(out).any():
        from .experiment import SchemaError
        raise SchemaError(str(path), "every observation needs a row for every action")
    return out


def cmd_tune(args) -> int:
    from .bayes_models import LaplaceState
    from .exploration import NoFeasibleTau, tune_temperature

    contexts = read_contexts(args.contexts)
    state = LaplaceState.load(args.checkpoint)
    try:
        result = tune_temperature(state, contexts, args.grid, args.k, args.p_safe, args.draws, args.seed)
    except NoFeasibleTau as exc:
        _write_json(exc.result.to_dict(), args.out)
        print(f"no temperature reaches overlap {args.p_safe}", file=sys.stderr)
        return EXIT_RUNTIME
    _write_json(result.to_dict(), args.out)
    if args.out:
        print(f"chosen tau {result.chosen_tau:g}")
    return EXIT_OK


def _probability(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def _grid(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse grid {text!r}") from None
    if not vals or min(vals) < 0:
        raise argparse.ArgumentTypeError("temperatures must be non-negative")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="banditlp", description="Constrained bandit simulations and tools.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a policy comparison experiment")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (default: config 'output' or ./results)")
    p.add_argument("--rounds", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ablation", help="run the exploration sensitivity grid")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--runs", type=int)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("solve", help="solve one allocation LP")
    p.add_argument("problem", nargs="?")
    p.add_argument("--out", help="write the solution JSON here instead of stdout")
    p.add_argument("--template", action="store_true", help="emit an example email scenario document")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("calibrate", help="fit an isotonic calibration map")
    p.add_argument("scores", help="CSV with 'score' and 'label' columns")
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("tune-temperature", help="pick a Thompson sampling temperature")
    p.add_argument("checkpoint")
    p.add_argument("contexts")
    p.add_argument("--grid", type=_grid, default="0,0.25,0.5,1,2,4", help="comma-separated temperatures")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--p-safe", type=_probability, default=0.9, help="required mean overlap-at-k")
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_tune)
    return parser


def main(argv=None) -> int:
    from .calibration import EmptyInput
    from .experiment import SchemaError
    from .lp_solver import InfeasibleSuspected

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SchemaError, EmptyInput, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except InfeasibleSuspected as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {exc!r}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
