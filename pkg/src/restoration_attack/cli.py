"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 stage failure.  The output
directory of ``run`` and ``report`` can be overridden with the
``RESTORATION_ATTACK_OUTPUT_DIR`` environment variable.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .attacks import AttackConfig, attack_fn_for, mse_increase
from .errors import ConfigError, RestorationAttackError, StageFailure
from .experiment import OUTPUT_ENV, ExperimentConfig, _split, _test_subset, build_report, run_experiment
from .feeder import bundled_feeder_path, load_feeder
from .forecast import ForecastModel, read_dataset_csv, train
from .planner import PlannerInput, RestorationPlan, plan_restoration
from .synth import PROFILES, synth_dataset
from .validator import validate_plan

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _feeder_arg(value):
    return bundled_feeder_path() if value == "bundled" else Path(value)


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{what} file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} file {path} is not valid JSON: {exc}") from None


def cmd_synth(args):
    if args.profile not in PROFILES:
        raise ConfigError(f"unknown profile {args.profile!r}; choose from {', '.join(PROFILES)}")
    if args.days < 30:
        raise ConfigError("--days must be at least 30")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    synth_dataset(args.seed, args.days, args.profile, args.out)
    print(args.out)


def cmd_train(args):
    cfg = ExperimentConfig.from_dict({"train_days": args.train_days, "days": max(args.train_days + 1, 30)})
    norm, tr, _ = _split(cfg, read_dataset_csv(args.data))
    model = train(
        norm.apply(tr),
        {"architecture": args.architecture, "hidden": args.hidden, "epochs": args.epochs, "seed": args.seed,
         "learning_rate": args.learning_rate},
        norm,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    print(f"{args.out} final training mse {model.training_log[-1][1]:.6g}")


def cmd_attack(args):
    model = ForecastModel.load(args.model)
    cfg = ExperimentConfig.from_dict({"train_days": args.train_days, "days": max(args.train_days + 1, 30),
                                      "test_windows": args.windows})
    norm, _, te = _split(cfg, read_dataset_csv(args.data))
    samples = norm.apply(_test_subset(cfg, te))
    acfg = AttackConfig(
        epsilon=args.epsilon,
        iterations=args.iterations,
        sparsity=args.sparsity,
        mode=args.mode,
        target_feature=args.target_feature,
    )
    value = mse_increase(model, samples, attack_fn_for(model, args.method, acfg))
    out = {"method": args.method, "config": acfg.to_dict(), "windows": len(samples), "mse_increase": value}
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=1, sort_keys=True))
    print(json.dumps(out, sort_keys=True))


def cmd_plan(args):
    feeder = load_feeder(_feeder_arg(args.feeder))
    loads = _read_json(args.loads, "load forecast")
    plan = plan_restoration(
        PlannerInput(feeder, args.stages, loads, stage_minutes=args.stage_minutes, start_hour=args.start_hour,
                     clpu_enabled=not args.no_clpu)
    )
    plan.save(args.out)
    print(f"{args.out} objective {plan.objective:.3f}")


def cmd_validate(args):
    feeder = load_feeder(_feeder_arg(args.feeder))
    plan = RestorationPlan.load(args.plan)
    loads = _read_json(args.loads, "actual load")
    rep = validate_plan(feeder, plan, loads)
    rep.save_json(args.out)
    ff = rep.first_failure
    print("all stages feasible" if ff is None else f"first failure: {ff[0]} at stage {ff[1]}")


def _out_dir(args, cfg=None):
    return os.environ.get(OUTPUT_ENV) or args.output_dir or (cfg.output_dir if cfg else "experiment_out")


def cmd_run(args):
    cfg = ExperimentConfig.load(args.config)
    out = _out_dir(args, cfg)
    report = run_experiment(cfg, out)
    ff = report["validation"]["attacked"]["first_failure"]
    print(f"report written to {Path(out) / 'report.json'}")
    print(report["plan_stability"]["finding"])
    print("attacked plan: " + ("feasible at every stage" if ff is None else
                               f"first failure {ff['microgrid']} at stage {ff['stage']}"))


def cmd_report(args):
    out = _out_dir(args)
    try:
        build_report(out)
    except (RestorationAttackError, OSError, KeyError, ValueError) as exc:
        if isinstance(exc, StageFailure):
            raise
        raise StageFailure("report", f"{type(exc).__name__}: {exc}") from exc
    print(Path(out) / "report.json")


def build_parser():
    p = argparse.ArgumentParser(prog="restoration-attack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a synthetic hourly load/weather CSV")
    s.add_argument("--profile", required=True)
    s.add_argument("--days", type=int, default=40)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a forecaster on a dataset CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--architecture", default="rnn", choices=("linear", "mlp", "rnn"))
    s.add_argument("--hidden", type=int, default=8)
    s.add_argument("--epochs", type=int, default=400)
    s.add_argument("--learning-rate", type=float, default=None)
    s.add_argument("--train-days", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("attack", help="measure the MSE increase of one attack on test windows")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--method", required=True, choices=("pgd", "greedy_pgd", "saa"))
    s.add_argument("--epsilon", type=float, default=0.05)
    s.add_argument("--iterations", type=int, default=50)
    s.add_argument("--sparsity", type=int, default=12)
    s.add_argument("--target-feature", default=None)
    s.add_argument("--mode", default="white_box", choices=("white_box", "black_box"))
    s.add_argument("--train-days", type=int, default=30)
    s.add_argument("--windows", type=int, default=32)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_attack)

    s = sub.add_parser("plan", help="plan restoration from per-load stage forecasts (JSON)")
    s.add_argument("--feeder", default="bundled")
    s.add_argument("--loads", required=True, help="JSON object: load id -> list of per-stage kW")
    s.add_argument("--stages", type=int, default=4)
    s.add_argument("--stage-minutes", type=float, default=60.0)
    s.add_argument("--start-hour", type=float, default=13.0)
    s.add_argument("--no-clpu", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_plan)

    s = sub.add_parser("validate", help="validate a plan against actual per-load stage loads")
    s.add_argument("--feeder", default="bundled")
    s.add_argument("--plan", required=True)
    s.add_argument("--loads", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_validate)

    s = sub.add_parser("run", help="run the full pipeline from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--output-dir")
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("report", help="rebuild report files from stage artifacts")
    s.add_argument("--output-dir")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(f"stage failure {exc}", file=sys.stderr)
        return EXIT_STAGE
    except RestorationAttackError as exc:
        print(f"stage failure [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
