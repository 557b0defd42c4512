"""Experiment runner: train, unlearn, retrain, evaluate, bound and compare."""

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from fedul_sim._errors import ConfigError, DimensionError, FedulError
from fedul_sim.config import ExperimentConfig, build_experiment
from fedul_sim.data import FederatedDataset
from fedul_sim.evaluation import (
    EvalReport,
    deviation_histogram,
    evaluate,
    write_histogram_csv,
)
from fedul_sim.federation import prepare_federation, run_training
from fedul_sim.model import MlpModel, load_checkpoint, save_checkpoint
from fedul_sim.unlearning import (
    UnlearnConfig,
    UnlearnMode,
    check_bound,
    naive_unlearn,
    replay_retrain,
    unlearn,
)
from fedul_sim.update_store import UpdateStore, store_read, store_write

CHECKPOINT = "model.ckpt"
STORE = "updates.ffus"
RUN_MANIFEST = "run_manifest.json"
RETRAINED = "retrained.ckpt"


def _write_json(path: Path, payload: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=False), encoding="utf-8")
    logging.info(f"Wrote {path}")


def _output_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_artifacts(out: Path) -> tuple[MlpModel, UpdateStore]:
    ckpt, store_path = out / CHECKPOINT, out / STORE
    for path in (ckpt, store_path):
        if not path.exists():
            raise FileNotFoundError(f"Missing training artifact: {path} (run 'train' first)")
    model = load_checkpoint(ckpt)
    store = store_read(store_path)
    if store.dim != model.params.dim:
        raise DimensionError(
            f"Checkpoint has {model.params.dim} parameters but store updates have "
            f"dim {store.dim}."
        )
    return model, store


# ---------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    out = _output_dir(cfg)
    fed, spec = build_experiment(cfg)
    trace = run_training(cfg.fed, fed, spec, backdoor=cfg.backdoor_spec())

    save_checkpoint(trace.final_model, out / CHECKPOINT)
    store_write(trace.store, out / STORE)
    _write_json(
        out / RUN_MANIFEST,
        {
            "config": cfg.raw,
            "created_at": datetime.now(timezone.utc).isoformat(),
            **trace.manifest(),
        },
    )


def cmd_unlearn(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    out = _output_dir(cfg)
    model, store = _load_artifacts(out)
    ucfg = cfg.unlearn_config(args.mode)
    report = unlearn(model, store, ucfg)
    save_checkpoint(report.unlearned_model, out / f"unlearned_{ucfg.mode.value}.ckpt")
    _write_json(
        out / f"unlearn_{ucfg.mode.value}.json",
        report.to_dict(include_delta=args.include_delta),
    )


def cmd_retrain(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    out = _output_dir(cfg)
    _, store = _load_artifacts(out)
    fed, spec = build_experiment(cfg)
    trace = replay_retrain(
        cfg.fed, fed, spec, store, cfg.target_client, backdoor=cfg.backdoor_spec()
    )
    save_checkpoint(trace.final_model, out / RETRAINED)
    _write_json(
        out / "retrain.json",
        {"target_client": cfg.target_client, "wall_time": trace.wall_time},
    )


def cmd_evaluate(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    out = _output_dir(cfg)
    fed, _ = build_experiment(cfg)
    models = {"pre-unlearned": out / CHECKPOINT, "retrained": out / RETRAINED}
    for path in sorted(out.glob("unlearned_*.ckpt")):
        models[path.stem.removeprefix("unlearned_")] = path
    if not models["pre-unlearned"].exists():
        raise FileNotFoundError(f"Missing training artifact: {models['pre-unlearned']}")

    retrained = load_checkpoint(models["retrained"]) if models["retrained"].exists() else None
    results: Dict[str, Any] = {}
    for name, path in models.items():
        if not path.exists():
            continue
        model = load_checkpoint(path)
        main_acc, backdoor_acc = evaluate(model, fed)
        report = EvalReport(main_acc=main_acc, backdoor_acc=backdoor_acc)
        if retrained is not None and name != "retrained":
            report.deviation = deviation_histogram(model, retrained)
            write_histogram_csv(report.deviation, out / f"deviation_{name}.csv")
        results[name] = report.to_dict()
    _write_json(out / "eval.json", results)


def cmd_bound(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    out = _output_dir(cfg)
    model, store = _load_artifacts(out)
    if cfg.fed.aggregation != "plain":
        logging.warning("The error bound assumes plain aggregation; results may not hold.")
    fed, spec = build_experiment(cfg)
    trace = replay_retrain(
        cfg.fed, fed, spec, store, cfg.target_client, backdoor=cfg.backdoor_spec()
    )
    result = check_bound(model, store, trace, cfg.unlearn_config(UnlearnMode.FAST_FEDUL.value))
    _write_json(out / "bound.json", result.to_dict())
    _write_json(out / "unlearn_fast_fedul.json", result.unlearn_report.to_dict())


def _row(
    name: str,
    model: MlpModel,
    fed: FederatedDataset,
    wall_time: float,
    stored_bytes: int,
    retrained: Optional[MlpModel] = None,
    bound: Optional[float] = None,
) -> Dict[str, Any]:
    main_acc, backdoor_acc = evaluate(model, fed)
    row: Dict[str, Any] = {
        "method": name,
        "main_acc": main_acc,
        "backdoor_acc": backdoor_acc,
        "wall_time_s": wall_time,
        "stored_bytes": stored_bytes,
        "deviation_mean_deg": None,
        "bound": bound,
    }
    if retrained is not None:
        row["deviation_mean_deg"] = deviation_histogram(model, retrained).mean_deg
    return row


def run_comparison(cfg: ExperimentConfig) -> List[Dict[str, Any]]:
    """Train, retrain and unlearn with every mode; one row per method."""
    fed, spec = build_experiment(cfg)
    bd = cfg.backdoor_spec()
    fed = prepare_federation(cfg.fed, fed, bd)
    target = cfg.target_client
    alpha = cfg.unlearn_config().alpha

    started = time.perf_counter()
    trace = run_training(cfg.fed, fed, spec)
    train_time = time.perf_counter() - started
    model, store, size = trace.final_model, trace.store, trace.stored_bytes

    retrain = replay_retrain(cfg.fed, fed, spec, store, target)
    m_star = retrain.final_model

    def mode_cfg(mode: UnlearnMode) -> UnlearnConfig:
        return UnlearnConfig(target_client=target, alpha=alpha, mode=mode)

    checked = check_bound(model, store, retrain, mode_cfg(UnlearnMode.FAST_FEDUL))
    fast = checked.unlearn_report
    started = time.perf_counter()
    naive = naive_unlearn(model, store, target)
    naive_time = time.perf_counter() - started
    partial = unlearn(model, store, mode_cfg(UnlearnMode.PARTIAL_SKEW))

    uniform_trace = run_training(replace(cfg.fed, sampling="uniform"), fed, spec)
    ablation = unlearn(
        uniform_trace.final_model,
        uniform_trace.store,
        mode_cfg(UnlearnMode.RANDOM_SAMPLE_ABLATION),
    )

    return [
        _row("pre-unlearned", model, fed, train_time, size),
        _row("retrained", m_star, fed, retrain.wall_time, size),
        _row("fast_fedul", fast.unlearned_model, fed, fast.wall_time, size, m_star, fast.bound),
        _row("naive", naive, fed, naive_time, size, m_star),
        _row("partial_skew", partial.unlearned_model, fed, partial.wall_time, size),
        _row(
            "random_sample_ablation",
            ablation.unlearned_model,
            fed,
            ablation.wall_time,
            uniform_trace.stored_bytes,
        ),
    ]


def cmd_compare(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    out = _output_dir(cfg)
    rows = run_comparison(cfg)
    columns = list(rows[0])
    with open(out / "compare.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if v is None else v for k, v in row.items()})
    _write_json(out / "compare.json", {"rows": rows})

    def fmt(v: Optional[float]) -> str:
        return "-" if v is None else f"{v:.4f}"

    for row in rows:
        print(
            f"{row['method']:<24} main={fmt(row['main_acc'])} "
            f"backdoor={fmt(row['backdoor_acc'])} time={row['wall_time_s']:.4f}s"
        )


COMMANDS: Dict[str, Callable[[ExperimentConfig, argparse.Namespace], None]] = {
    "train": cmd_train,
    "unlearn": cmd_unlearn,
    "retrain": cmd_retrain,
    "evaluate": cmd_evaluate,
    "bound": cmd_bound,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedul-sim",
        description="Federated learning simulator with training-free client unlearning.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Experiment JSON config.")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config field by dotted path (repeatable).",
    )
    common.add_argument("--output", help="Output directory (overrides output_dir).")
    common.add_argument("--seed", type=int, help="Root seed (overrides fed.seed).")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    common.add_argument("-q", "--quiet", action="store_true", help="Warnings only.")

    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=f"{name} (see README)")
        if name == "unlearn":
            p.add_argument(
                "--mode",
                choices=[m.value for m in UnlearnMode],
                help="Unlearning mode (default: config unlearn.mode).",
            )
            p.add_argument(
                "--include-delta",
                action="store_true",
                help="Include Δ'_T in the report JSON.",
            )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(message)s")

    overrides = list(args.overrides)
    if args.output:
        overrides.append(f"output_dir={json.dumps(args.output)}")
    if args.seed is not None:
        overrides.append(f"fed.seed={args.seed}")

    try:
        cfg = ExperimentConfig.from_config_file(args.config, overrides)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"fedul-sim {args.command}: {e}", file=sys.stderr)
        return 2
    except FedulError as e:
        print(f"fedul-sim {args.command}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
