"""Command-line interface: plan, train, analyze, report.

Exit codes: 0 on success, 1 for runtime failures (divergence, corrupt
checkpoints, missing artifacts), 2 for configuration errors (bad YAML,
unknown keys or strategies, invalid values). Output locations resolve in
priority order: --out flag, then the MOAX_OUT_ROOT environment variable,
then output.root in the config, then ./out.

Layout under the output root:
  plans/               budget tables
  runs/<name>/         records.jsonl + checkpoint/
  analyses/<name>/     trace.jsonl + CSV summaries
  reports/<name>/      CSVs plus rendered figures
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .allocation import active_units_static, budget_report, trainable_units_exact
from .checkpoints import checkpoint_task, load_checkpoint, save_checkpoint
from .errors import ConfigError, MoaxError
from .instrumentation import (
    magnitude_histograms,
    measure_active_units,
    record_trace,
    write_active_units_csv,
    write_histograms_csv,
    write_proportions_csv,
    write_trace_jsonl,
)
from .model import build_model
from .runconfig import (
    DEFAULT_STRATEGIES,
    PRESET_STRATEGIES,
    LinedDict,
    RunConfig,
    apply_overrides,
    load_yaml,
    parse_config,
    preset_plan,
    sweep_plan,
)
from .tasks import generate
from .training import (
    read_train_records,
    train,
    write_timings,
    write_train_records,
)


def _load_run_config(args) -> RunConfig:
    if args.config is not None:
        data = load_yaml(args.config)
        default_name = Path(args.config).stem
    else:
        data = LinedDict()
        default_name = "run"
    if getattr(args, "set", None):
        apply_overrides(data, args.set)
    return parse_config(data, default_name=default_name)


def _out_root(args, cfg: RunConfig) -> Path:
    if args.out is not None:
        return Path(args.out)
    env = os.environ.get("MOAX_OUT_ROOT")
    if env:
        return Path(env)
    if cfg.output_root is not None:
        return Path(cfg.output_root)
    return Path("out")


# -- plan ----------------------------------------------------------------------

def cmd_plan(args) -> int:
    cfg = _load_run_config(args)
    budget = cfg.budget

    if args.strategies is not None:
        names = [s.strip() for s in args.strategies.split(",") if s.strip()]
        if not names:
            raise ConfigError("--strategies is empty")
    else:
        names = list(DEFAULT_STRATEGIES)
    for name in names:
        if name not in PRESET_STRATEGIES:
            raise ConfigError(f"unknown strategy {name!r}; expected one of {PRESET_STRATEGIES}")

    baseline = preset_plan("vanilla", budget)
    plans = [preset_plan(name, budget, lenient_alpha=args.lenient_alpha) for name in names]

    if args.sweep_ranks:
        digits = [s.strip() for s in args.sweep_ranks.split(",") if s.strip()]
        sweep = [sweep_plan(d, budget) for d in digits]
        sweep.sort(key=lambda p: (trainable_units_exact(p, baseline), p.name))
        plans.extend(sweep)

    report = budget_report(plans, baseline)

    out_dir = _out_root(args, cfg) / "plans"
    out_dir.mkdir(parents=True, exist_ok=True)
    from .reporting import budget_table_text, write_budget_csv

    write_budget_csv(report, out_dir / "budgets.csv")
    text = budget_table_text(report)
    (out_dir / "budgets.txt").write_text(text)
    sys.stdout.write(text)
    sys.stdout.write(f"wrote {out_dir / 'budgets.csv'}\n")
    return 0


# -- train -----------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    name = args.name or cfg.name
    run_dir = _out_root(args, cfg) / "runs" / name
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = run_dir / "checkpoint"

    data = generate(cfg.task)
    start_step = 0
    if args.resume and (ckpt_dir / "manifest.json").exists():
        from .checkpoints import model_config_to_dict, read_manifest

        manifest = read_manifest(ckpt_dir)
        if manifest["model"] != model_config_to_dict(cfg.model):
            raise ConfigError(
                f"cannot resume: checkpoint in {ckpt_dir} was written with a different model config"
            )
        model, manifest = load_checkpoint(ckpt_dir)
        start_step = manifest["step"]
        sys.stdout.write(f"resuming {name} from step {start_step}\n")
    else:
        model = build_model(cfg.model, cfg.train_seed)

    if start_step >= cfg.hyper.steps and start_step > 0:
        sys.stdout.write(f"run {name} already at step {start_step}; nothing to do\n")
        return 0

    result = train(model, data, cfg.hyper, cfg.train_seed, start_step=start_step)

    if args.resume and start_step > 0:
        existing = read_train_records(run_dir / "records.jsonl") if (run_dir / "records.jsonl").exists() else []
        kept = [r for r in existing if r["step"] <= start_step]
        with open(run_dir / "records.jsonl", "w") as fh:
            for r in kept:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
            for rec in result.records:
                fh.write(json.dumps(rec.to_json_dict(), sort_keys=True) + "\n")
    else:
        write_train_records(result.records, run_dir / "records.jsonl")
    if args.timings:
        write_timings(result.records, run_dir / "timings.csv")

    if result.diverged:
        diag_path = run_dir / "diverged.json"
        diag_path.write_text(json.dumps(result.diagnostic, indent=2, sort_keys=True) + "\n")
        sys.stderr.write(f"training diverged at step {result.diagnostic['step']}: "
                         f"{result.diagnostic['reason']}\n"
                         f"partial records kept in {run_dir / 'records.jsonl'}\n")
        return 1

    last_step = start_step + len(result.records) if result.records else start_step
    save_checkpoint(model, ckpt_dir, step=max(last_step, cfg.hyper.steps), seed=cfg.train_seed,
                    task=cfg.task)
    ev = result.final_eval or {}
    sys.stdout.write(
        f"run {name}: {len(result.records)} steps, eval loss {ev.get('loss', float('nan')):.6g}, "
        f"eval accuracy {ev.get('accuracy', float('nan')):.4g}\n"
    )
    sys.stdout.write(f"checkpoint: {ckpt_dir}\n")
    return 0


# -- analyze -----------------------------------------------------------------------

def _trace_for_checkpoint(ckpt_dir: Path, cfg: RunConfig, sequences: int):
    model, manifest = load_checkpoint(ckpt_dir)
    task = checkpoint_task(manifest) or cfg.task
    data = generate(task)
    n = min(sequences, len(data.eval_x))
    if n < 1:
        raise ConfigError("no eval sequences available to trace")
    trace = record_trace(model, data.eval_x[:n])
    return model, trace


def cmd_analyze(args) -> int:
    cfg = _load_run_config(args)
    name = args.run or cfg.name
    root = _out_root(args, cfg)
    ckpt_dir = Path(args.checkpoint) if args.checkpoint else root / "runs" / name / "checkpoint"
    if not (ckpt_dir / "manifest.json").exists():
        raise MoaxError(f"no checkpoint at {ckpt_dir}; run `moax train` first")

    model, trace = _trace_for_checkpoint(ckpt_dir, cfg, args.sequences)
    plan = model.plan

    out_dir = root / "analyses" / name
    out_dir.mkdir(parents=True, exist_ok=True)

    write_trace_jsonl(trace, out_dir / "trace.jsonl")
    write_proportions_csv(trace, out_dir / "proportions.csv", thresholds=(args.threshold,))
    write_histograms_csv(magnitude_histograms(trace), out_dir / "histograms.csv")

    measured = measure_active_units(trace, plan)
    static = active_units_static(plan) if plan.supports_static_active() else None
    write_active_units_csv(out_dir / "active_units.csv", plan.name, measured, static)

    sys.stdout.write(f"analyzed {len(trace.entries)} trace entries over layers {trace.layers()}\n")
    if static is None:
        sys.stdout.write(f"active units: measured {measured:.6g}\n")
    else:
        sys.stdout.write(f"active units: measured {measured:.6g}, static bound {static:.6g}\n")
    sys.stdout.write(f"wrote {out_dir}\n")
    return 0


# -- report -----------------------------------------------------------------------

def cmd_report(args) -> int:
    from .reporting import (
        budget_table_text,
        save_budget_figure,
        save_histograms_figure,
        save_proportions_figure,
        save_training_figure,
        write_budget_csv,
        write_training_csv,
    )

    cfg = _load_run_config(args)
    name = args.run or cfg.name
    root = _out_root(args, cfg)
    run_dir = root / "runs" / name
    records_path = run_dir / "records.jsonl"
    ckpt_dir = run_dir / "checkpoint"
    if not records_path.exists() or not (ckpt_dir / "manifest.json").exists():
        raise MoaxError(f"report needs a completed run at {run_dir}; run `moax train` first")

    out_dir = root / "reports" / name
    out_dir.mkdir(parents=True, exist_ok=True)

    records = read_train_records(records_path)
    write_training_csv(records, out_dir / "training.csv")
    save_training_figure(records, out_dir / "training.png")

    model, trace = _trace_for_checkpoint(ckpt_dir, cfg, args.sequences)
    plan = model.plan
    write_proportions_csv(trace, out_dir / "proportions.csv", thresholds=(args.threshold,))
    save_proportions_figure(trace, out_dir / "proportions.png", thresholds=(args.threshold,))
    hists = magnitude_histograms(trace)
    write_histograms_csv(hists, out_dir / "histograms.csv")
    save_histograms_figure(hists, out_dir / "histograms.png")
    measured = measure_active_units(trace, plan)
    static = active_units_static(plan) if plan.supports_static_active() else None
    write_active_units_csv(out_dir / "active_units.csv", plan.name, measured, static)

    baseline = preset_plan("vanilla", cfg.budget)
    plans = [preset_plan(s, cfg.budget, lenient_alpha=True) for s in DEFAULT_STRATEGIES]
    budgets = budget_report(plans, baseline)
    write_budget_csv(budgets, out_dir / "budgets.csv")
    (out_dir / "budgets.txt").write_text(budget_table_text(budgets))
    save_budget_figure(budgets, out_dir / "budgets.png")

    sys.stdout.write(f"report for {name}: CSVs and figures in {out_dir}\n")
    return 0


# -- wiring -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moax",
        description="Adapter-expert budgeting, toy training runs, and routing analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("-c", "--config", default=None, help="YAML run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--out", default=None, help="output root directory")

    p_plan = sub.add_parser("plan", help="write normalized budget tables for allocation strategies")
    common(p_plan)
    p_plan.add_argument("--strategies", default=None,
                        help=f"comma list from {', '.join(PRESET_STRATEGIES)}")
    p_plan.add_argument("--sweep-ranks", default=None, metavar="DIGITS[,DIGITS...]",
                        help="rank sweep entries like 2448; one digit per layer group")
    p_plan.add_argument("--lenient-alpha", action="store_true",
                        help="let the published per-layer expert list truncate to the layer count")
    p_plan.set_defaults(func=cmd_plan)

    p_train = sub.add_parser("train", help="train adapters and gates on a synthetic task")
    common(p_train)
    p_train.add_argument("--name", default=None, help="run name (default: config name)")
    p_train.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    p_train.add_argument("--timings", action="store_true",
                         help="also write per-step wall times (non-reproducible) to timings.csv")
    p_train.set_defaults(func=cmd_train)

    p_an = sub.add_parser("analyze", help="trace routing and magnitudes for a trained run")
    common(p_an)
    p_an.add_argument("--run", default=None, help="run name to analyze (default: config name)")
    p_an.add_argument("--checkpoint", default=None, help="explicit checkpoint directory")
    p_an.add_argument("--sequences", type=int, default=8, help="eval sequences to trace")
    p_an.add_argument("--threshold", type=float, default=1e-3,
                      help="magnitude threshold for the proportions table")
    p_an.set_defaults(func=cmd_analyze)

    p_rep = sub.add_parser("report", help="render CSVs plus figures for a trained run")
    common(p_rep)
    p_rep.add_argument("--run", default=None, help="run name to report on (default: config name)")
    p_rep.add_argument("--sequences", type=int, default=8, help="eval sequences to trace")
    p_rep.add_argument("--threshold", type=float, default=1e-3,
                       help="magnitude threshold for the proportions table")
    p_rep.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return 2
    except MoaxError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
