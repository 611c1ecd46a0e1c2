"""Command-line interface.

Subcommands: gen-data, train, plan, eval, landscape, ablate, property.
Report-producing paths write delimited output (CSV/JSON/JSONL) and render a
PNG figure alongside. Module errors exit nonzero with a machine-readable
JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from . import figures
from .energy import ModelPLL, landscape, write_landscape_csv
from .gridworld import build_env
from .harness import (
    ADAPTATION_TIERS,
    CheckpointMissing,
    ExperimentSpec,
    ablate,
    adaptation_eval,
    composition_eval,
    evaluate,
    load_experiment,
    new_model,
    split_obstacles,
    train_pipeline,
    write_report,
)
from .codec import make_plan_template
from .model import load_checkpoint, train
from .oracle import generate_dataset, load_dataset, optimal_plan, save_dataset, state_vec
from .planner import gibbs_plan
from .util import configure_determinism


def _load_spec(args) -> ExperimentSpec:
    spec = load_experiment(args.config)
    plan = spec.plan
    if getattr(args, "horizon", None):
        plan = dc_replace(plan, horizon=args.horizon)
    if getattr(args, "temperature", None):
        plan = dc_replace(plan, temperature=args.temperature)
    if getattr(args, "execution", None):
        plan = dc_replace(plan, execution=args.execution)
    iters = getattr(args, "iters", None)
    iters_list = [int(v) for v in iters.split(",")] if iters else []
    if len(iters_list) == 1:
        plan = dc_replace(plan, iters=iters_list[0])
    spec = dc_replace(spec, plan=plan)
    if getattr(args, "episodes", None):
        spec = dc_replace(spec, episodes=args.episodes)
    if getattr(args, "seed", None) is not None:
        spec = dc_replace(spec, seeds=(args.seed,), data_seed=args.seed, train_seed=args.seed)
    if getattr(args, "checkpoint", None):
        spec = dc_replace(spec, checkpoint=args.checkpoint)
    return spec


def _model_from(args, spec: ExperimentSpec):
    path = args.checkpoint or spec.checkpoint
    if not path or not Path(path).exists():
        raise CheckpointMissing(f"checkpoint {path!r} not found")
    return load_checkpoint(path)


def cmd_gen_data(args) -> int:
    spec = _load_spec(args)
    m = args.m or spec.m
    p = spec.p_corrupt if args.p_corrupt is None else args.p_corrupt
    seed = spec.data_seed if args.seed is None else args.seed
    ds = generate_dataset(spec.env, m, p, seed)
    save_dataset(ds, args.out, args.format)
    print(f"wrote {m} demos to {args.out}")
    return 0


def cmd_train(args) -> int:
    spec = _load_spec(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        dataset = load_dataset(args.data)
        model = new_model(dataset.spec, spec.plan, spec.train, spec.train_seed)
        losses = train(model, dataset, spec.train, spec.train_seed, out_dir=out).losses
    else:
        train_pipeline(spec, out_dir=out)
        losses = _read_loss_csv(out / "loss.csv")
    figures.plot_loss(losses, out / "loss.png")
    print(f"final loss {losses[-1]:.4f}; checkpoint at {out / 'checkpoint.pt'}")
    return 0


def _read_loss_csv(path) -> list[float]:
    with open(path) as fh:
        return [float(row["loss"]) for row in csv.DictReader(fh)]


def cmd_plan(args) -> int:
    spec = _load_spec(args)
    model = _model_from(args, spec)
    seed = args.seed if args.seed is not None else 0
    env = build_env(spec.eval_env, seed)
    template = make_plan_template(
        [], state_vec(env.agent, env.goal), spec.plan.horizon, max_ctx=model.ctx_len
    )
    rng = np.random.default_rng(np.random.SeedSequence((seed, 29)))
    _, trace = gibbs_plan(ModelPLL(model), template, spec.plan, rng)
    text = trace.to_jsonl()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_eval(args) -> int:
    spec = _load_spec(args)
    model = _model_from(args, spec)
    iters = getattr(args, "iters", None)
    sweep = [int(v) for v in iters.split(",")] if iters and "," in iters else None
    report = evaluate(spec, model=model, iters_sweep=sweep)
    out = Path(args.out_dir)
    write_report(report, out)
    labels = [str(s.seed) for s in report.per_seed]
    rates = [s.success_rate for s in report.per_seed]
    figures.plot_success_bars(labels, rates, [0.0] * len(rates), out / "metrics.png",
                              title=f"{spec.name}: success by seed")
    if report.iteration_curve:
        figures.plot_iteration_curve(report.iteration_curve, out / "iters.png")
        with open(out / "iters.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iters", "success_rate", "stderr"])
            for row in report.iteration_curve:
                writer.writerow([row["iters"], f"{row['success_rate']:.4f}", f"{row['stderr']:.4f}"])
    print(f"success rate {report.success_rate:.3f} +- {report.stderr:.3f}")
    return 0


def cmd_landscape(args) -> int:
    spec = _load_spec(args)
    model = _model_from(args, spec)
    levels = [float(v) for v in args.noise_levels.split(",")]
    seed = args.seed if args.seed is not None else 0
    env = None
    for ep in range(200):
        candidate = build_env(spec.eval_env, np.random.SeedSequence((seed, ep, 11)))
        if len(optimal_plan(candidate)) >= spec.plan.horizon:
            env = candidate
            break
    if env is None:
        raise RuntimeError("no sampled env admits an oracle plan filling the horizon")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 31)))
    rows = landscape(model, env, levels, args.trials, rng, horizon=spec.plan.horizon)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_landscape_csv(rows, out / "landscape.csv")
    figures.plot_landscape(rows, out / "landscape.png")
    for row in rows:
        print(f"noise {row.noise_level:.2f}: energy {row.mean_energy:.3f} +- {row.stderr:.3f}")
    return 0


def cmd_ablate(args) -> int:
    spec = _load_spec(args)
    model = _model_from(args, spec)
    reports = ablate(spec, model)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [(m, r.success_rate, r.stderr) for m, r in reports.items()]
    with open(out / "ablate.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "success_rate", "stderr"])
        for method, rate, err in rows:
            writer.writerow([method, f"{rate:.4f}", f"{err:.4f}"])
    (out / "ablate.json").write_text(
        json.dumps({m: r.to_dict() for m, r in reports.items()}, indent=2, sort_keys=True) + "\n"
    )
    figures.plot_success_bars(
        [r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows],
        out / "ablate.png", title=f"{spec.name}: planner ablation",
    )
    for method, rate, err in rows:
        print(f"{method}: {rate:.3f} +- {err:.3f}")
    return 0


def _write_property(out: Path, name: str, rows: list[dict], reports: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "property.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    (out / "property.json").write_text(
        json.dumps(
            {"property": name, "rows": rows, "reports": {k: r.to_dict() for k, r in reports.items()}},
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    figures.plot_success_bars(
        [r["label"] for r in rows],
        [r["success_rate"] for r in rows],
        [r.get("stderr", 0.0) for r in rows],
        out / "property.png",
        title=f"Property: {name}",
    )


def cmd_property(args) -> int:
    spec = _load_spec(args)
    mode = args.mode or spec.mode
    out = Path(args.out_dir)
    reports: dict = {}
    rows: list[dict] = []

    if mode == "adaptation":
        if args.checkpoint or spec.checkpoint:
            model = _model_from(args, spec)
        else:
            model, _ = train_pipeline(spec)
        tiers = args.tiers.split(",") if args.tiers else ["easy", "medium"]
        for tier in tiers:
            report = adaptation_eval(spec, model, ADAPTATION_TIERS[tier])
            reports[tier] = report
            rows.append(
                {"label": tier, "success_rate": report.success_rate,
                 "stderr": report.stderr, "lava_entries": report.lava_entries}
            )
    elif mode == "generalization":
        if spec.test_env is None:
            raise ValueError("generalization needs a [test_env] section in the config")
        model, _ = train_pipeline(spec)
        train_side = evaluate(dc_replace(spec, mode="standard", test_env=None), model=model)
        test_side = evaluate(spec, model=model)
        reports = {"train_env": train_side, "test_env": test_side}
        rows = [
            {"label": "train_env", "success_rate": train_side.success_rate, "stderr": train_side.stderr},
            {"label": "test_env", "success_rate": test_side.success_rate, "stderr": test_side.stderr},
        ]
    elif mode == "composition":
        n_obstacles = spec.env.obstacles
        if not isinstance(n_obstacles, int):
            raise ValueError("composition config must give an obstacle count in [env]")
        full, half_a, half_b = split_obstacles(spec.env, n_obstacles, spec.data_seed)
        full_spec = dc_replace(spec.env, obstacles=full)
        model_a, _ = train_pipeline(spec, env_spec=dc_replace(spec.env, obstacles=half_a))
        model_b, _ = train_pipeline(
            dc_replace(spec, train_seed=spec.train_seed + 1),
            env_spec=dc_replace(spec.env, obstacles=half_b),
        )
        reports = composition_eval(dc_replace(spec, test_env=full_spec), model_a, model_b)
        rows = [
            {"label": k, "success_rate": r.success_rate, "stderr": r.stderr}
            for k, r in reports.items()
        ]
    else:
        raise ValueError(f"unknown property mode {mode!r}")

    _write_property(out, mode, rows, reports)
    for row in rows:
        print(f"{row['label']}: {row['success_rate']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emplan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_dir=True):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None)
        if out_dir:
            p.add_argument("--out-dir", required=True)

    p = sub.add_parser("gen-data", help="generate a demonstration dataset")
    common(p, out_dir=False)
    p.add_argument("--out", required=True, help="dataset file (.jsonl or .bin)")
    p.add_argument("--format", choices=["jsonl", "binary"], default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--p-corrupt", type=float, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model (writes checkpoint, loss.csv, loss.png)")
    common(p)
    p.add_argument("--data", default=None, help="dataset file; generated from config when absent")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("plan", help="print one planning trace as JSON lines")
    common(p, out_dir=False)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--iters", default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--out", default=None, help="also write trace.jsonl here")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("eval", help="run episodes and write metrics.json/csv (+figures)")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--iters", default=None, help="iteration count, or comma list for a sweep")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--execution", choices=["all", "replan"], default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("landscape", help="energy vs corruption level (landscape.csv/png)")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--noise-levels", default="0,0.25,0.5,0.75,1.0")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--horizon", type=int, default=None)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("ablate", help="gibbs vs cem vs random shooting head-to-head")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("property", help="adaptation / generalization / composition protocols")
    common(p)
    p.add_argument("--mode", choices=["adaptation", "generalization", "composition"], default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--tiers", default=None, help="comma list of adaptation tiers")
    p.set_defaults(func=cmd_property)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_determinism()
    try:
        return args.func(args)
    except Exception as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
