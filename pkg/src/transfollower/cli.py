"""``transfollower`` command line.

Every subcommand takes ``--seed``, ``--config`` (a JSON file) and ``--out``.
Config schema (all sections optional, unknown keys ignored)::

    {"config_version": 1,
     "synth": {SynthConfig fields},
     "model": {model config fields},
     "train": {TrainConfig fields},
     "ga":    {GAConfig fields}}
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .baselines.ga import GAConfig, grid_search, run_ga
from .baselines.idm import EventBatch, IDMParams, simulate_idm
from .cf import EVENT_STEPS
from .data import (
    ExtractionStats,
    SynthConfig,
    extract_events,
    generate_synthetic_dataset,
    load_events,
    read_raw_log,
    save_events,
    save_split,
    split_dataset,
    window_events,
)
from .errors import ContractError
from .nn import atomic_write_text
from .train import (
    EvalReport,
    TrainConfig,
    constant_velocity_predictor,
    evaluate_predictor,
    ground_truth_predictor,
    load_model,
    neural_predictor,
    save_train_result,
    train_model,
)
from .viz import export_attention, trajectory_csv, write_attention_exports

CONFIG_VERSION = 1
DESK_MODEL = {"d_model": 64, "ff_dim": 256}
logger = logging.getLogger("transfollower")


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    version = cfg.get("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ContractError(f"{path}: unsupported config_version {version}")
    return cfg


def _snapshot(path: Path, args: argparse.Namespace, resolved: dict) -> None:
    doc = {"config_version": CONFIG_VERSION, "command": args.command,
           "args": {k: v for k, v in vars(args).items() if k not in ("func",)}, **resolved}
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _splits(args, events):
    split = split_dataset(events, args.seed)
    return split, {part: split.select(events, part) for part in ("train", "val", "test")}


def cmd_generate_data(args) -> int:
    section = dict(_load_config(args.config).get("synth", {}))
    section["seed"] = args.seed
    if args.n_events is not None:
        section["n_events"] = args.n_events
    if args.noise_std is not None:
        section["noise_std"] = args.noise_std
    cfg = SynthConfig.from_dict(section)
    events = generate_synthetic_dataset(cfg, workers=args.workers)
    out = Path(args.out)
    save_events(out, events)
    _snapshot(out.with_name(out.name + ".config.json"), args, {"synth": cfg.to_dict()})
    print(f"wrote {len(events)} events to {out}")
    return 0


def cmd_extract_events(args) -> int:
    stats = ExtractionStats()
    events = extract_events(read_raw_log(args.input), prefix=Path(args.input).stem, stats=stats)
    if args.trim:
        events = window_events(events, EVENT_STEPS)
    out = Path(args.out)
    save_events(out, events)
    _snapshot(out.with_name(out.name + ".config.json"), args,
              {"stats": {"records": stats.records, "skipped": stats.skipped,
                         "runs": stats.runs, "events": stats.events, "reasons": stats.reasons}})
    print(f"wrote {len(events)} events to {out} ({stats.skipped} malformed records skipped)")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    model_cfg = dict(DESK_MODEL if args.desk and args.model == "transfollower" else {})
    model_cfg.update(config.get("model", {}))
    train_section = dict(config.get("train", {}))
    train_section["seed"] = args.seed
    for flag, key in ((args.epochs, "max_epochs"), (args.batch_size, "batch_size"),
                      (args.patience, "patience")):
        if flag is not None:
            train_section[key] = flag
    train_cfg = TrainConfig.from_dict(train_section)
    events = load_events(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.val_data:
        parts = {"train": events, "val": load_events(args.val_data)}
    else:
        split, parts = _splits(args, events)
        save_split(out / "split.json", split)
    result = train_model(args.model, parts["train"], parts["val"], train_cfg, model_cfg, run_dir=out)
    save_train_result(result, out)
    _snapshot(out / "cli_config.json", args, {"model": model_cfg, "train": train_cfg.to_dict()})
    report = evaluate_predictor(args.model, neural_predictor(result.model), parts["train"], train_cfg.workers)
    atomic_write_text(out / "train_report.json", report.to_json())
    print(f"best epoch {result.best_epoch}: val combined MSE {result.best_val:.6g}, "
          f"train combined MSE {report.combined_mse:.6g}")
    return 0


def cmd_calibrate_idm(args) -> int:
    section = dict(_load_config(args.config).get("ga", {}))
    section["seed"] = args.seed
    if args.generations is not None:
        section["generations"] = args.generations
    if args.population is not None:
        section["population"] = args.population
    cfg = GAConfig(**section)
    events = load_events(args.data)
    split, parts = _splits(args, events)
    result = run_ga(EventBatch(parts["train"]), EventBatch(parts["val"]), cfg)
    meta = {"val_mse": result.val_mse, "train_mse": result.train_mse, "ga": cfg.to_dict(),
            "split_seed": split.seed}
    if args.grid_points:
        grid_params, grid_val = grid_search(parts["val"], points=args.grid_points)
        meta["grid"] = {"points": args.grid_points, "val_mse": grid_val, "params": grid_params.to_dict()}
    result.params.save(args.out, meta)
    out = Path(args.out)
    _snapshot(out.with_name(out.name + ".config.json"), args, {"ga": cfg.to_dict()})
    print(f"validation combined MSE {result.val_mse:.6g}; params written to {args.out}")
    return 0


def _report_for(args, events) -> tuple[EvalReport, dict]:
    if args.model == "idm":
        params = IDMParams.load(args.checkpoint)
        report = EvalReport.from_results("idm", [simulate_idm(params, e) for e in events])
    elif args.model == "cv":
        report = evaluate_predictor("cv", constant_velocity_predictor, events, args.workers)
    elif args.model == "truth":
        report = evaluate_predictor("truth", ground_truth_predictor, events, args.workers)
    else:
        model = load_model(args.checkpoint)
        if model.kind != args.model:
            raise ContractError(f"checkpoint holds a {model.kind!r} model, not {args.model!r}")
        report = evaluate_predictor(args.model, neural_predictor(model), events, args.workers)
    return report, {e.id: e for e in events}


def cmd_evaluate(args) -> int:
    if args.model not in ("cv", "truth") and not args.checkpoint:
        raise ContractError(f"--checkpoint is required for --model {args.model}")
    events = load_events(args.data)
    if args.split != "all":
        _, parts = _splits(args, events)
        events = parts[args.split]
    report, by_id = _report_for(args, events)
    out = Path(args.out)
    atomic_write_text(out / "report.json", report.to_json())
    _snapshot(out / "config.json", args, {})
    if not args.no_trajectories:
        for r in report.results:
            atomic_write_text(out / "trajectories" / f"{r.event_id}.csv", trajectory_csv(by_id[r.event_id], r))
    print(f"{args.model}: combined {report.combined_mse:.6g} (speed {report.speed_mse:.6g}, "
          f"spacing {report.spacing_mse:.6g}) over {len(report.results)} events; crashes {report.crashes}")
    return 0


def cmd_export_attention(args) -> int:
    model = load_model(args.checkpoint)
    if model.kind != "transfollower":
        raise ContractError("attention export needs a transfollower checkpoint")
    events = {e.id: e for e in load_events(args.data)}
    if args.event_id not in events:
        raise ContractError(f"event {args.event_id!r} not found in {args.data}")
    exports = export_attention(model, events[args.event_id])
    written = write_attention_exports(args.out, exports, args.query_time or (), args.k, args.per_head)
    _snapshot(Path(args.out) / "config.json", args, {"model": model.config_dict()})
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transfollower", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)
        return p

    p = add("generate-data", cmd_generate_data, "generate a synthetic event file")
    p.add_argument("--n-events", type=int)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--workers", type=int, default=1)

    p = add("extract-events", cmd_extract_events, "extract car-following events from a raw log CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--trim", action="store_true", help="cut events into 15 s windows")

    p = add("train", cmd_train, "train a neural model")
    p.add_argument("--model", required=True, choices=("transfollower", "nn", "lstm"))
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--desk", action="store_true", help="use the desk-scale transformer size")
    p.add_argument("--val-data", help="validation event file; when given, all of --data is used for training")

    p = add("calibrate-idm", cmd_calibrate_idm, "calibrate IDM parameters with a genetic algorithm")
    p.add_argument("--data", required=True)
    p.add_argument("--generations", type=int)
    p.add_argument("--population", type=int)
    p.add_argument("--grid-points", type=int, default=0, help="also run a grid search for reference")

    p = add("evaluate", cmd_evaluate, "evaluate a model and write trajectories")
    p.add_argument("--model", required=True, choices=("transfollower", "nn", "lstm", "idm", "cv", "truth"))
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-trajectories", action="store_true")

    p = add("export-attention", cmd_export_attention, "export attention matrices for one event")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--event-id", required=True)
    p.add_argument("--k", type=int, help="also write top-k attention reports")
    p.add_argument("--query-time", type=float, action="append", help="query time in seconds")
    p.add_argument("--per-head", action="store_true")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ContractError, FileNotFoundError, json.JSONDecodeError) as exc:
        parser.print_usage(sys.stderr)
        print(f"transfollower {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
