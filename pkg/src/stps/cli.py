"""Command line entry points: synth, select, train, evaluate, forecast.

Every command resolves its settings from defaults, an optional JSON file
(``--config``) and explicit flags, in that order, then writes the resolved
record to ``<out>/config.json``. Feeding that file back reproduces the run.

Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from datetime import timedelta
from pathlib import Path

from .dataio import (DataError, SensingPartition, chronological_split, generate_synthetic,
                     load_adjacency, load_traffic_table, save_adjacency, save_traffic_table,
                     select_locations)
from .metrics import binned_improvement, rmse_svg
from .pipeline import (ABLATIONS, CheckpointError, ModelConfig, NumericalError, StpsModel,
                       checkpoint_load, checkpoint_save, evaluate, fit, infer, prepare_dataset)

log = logging.getLogger("stps")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SYNTH_KEYS = {"n": int, "days": int, "seed": int, "closure_rate": float, "noise_std": float}

DEFAULTS = {
    "data": None, "adjacency": None, "partition": None, "synthetic": None,
    "select": "weighted", "m_prime": None, "seed": 0, "out": ".", "checkpoint": None,
    "ablation": [], "noise_variance": 0.0, "compare": None, "svg": False, "bins": 20,
    "epochs": 50, "alpha": 0.5, "d": 64, "l": 12, "l_prime": 96, "batch": 64,
    "lr": 1e-3, "weight_decay": 1e-3,
}
# ModelConfig fields without a flag of their own; settable from the JSON file
EXTRA_MODEL_KEYS = {"dropout", "patience", "max_steps_per_stage", "teacher_forcing"}
COMMANDS = ("synth", "select", "train", "evaluate", "forecast")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stps", description="Partial-sensing traffic forecasting.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        c = sub.add_parser(name)
        # default=None everywhere so explicit flags can be told apart from omissions
        c.add_argument("--config", default=None, help="JSON file of settings; flags win")
        c.add_argument("--out", default=None, help="output directory")
        c.add_argument("--seed", type=int, default=None)
        c.add_argument("--data", default=None, help="traffic CSV (timestamp + one column per location)")
        c.add_argument("--adjacency", default=None, help="edge list CSV")
        c.add_argument("--synthetic", nargs="*", default=None, metavar="KEY=VAL",
                       help="generate data instead: n= days= seed= closure_rate= noise_std=")
        if name in ("select", "train"):
            c.add_argument("--select", choices=("random", "weighted"), default=None)
            c.add_argument("--m-prime", dest="m_prime", type=int, default=None)
        if name == "train":
            c.add_argument("--partition", default=None)
            c.add_argument("--ablation", action="append", choices=sorted(ABLATIONS), default=None)
            c.add_argument("--noise-variance", dest="noise_variance", type=float, default=None)
            c.add_argument("--epochs", type=int, default=None)
            c.add_argument("--alpha", type=float, default=None)
            c.add_argument("--d", type=int, default=None)
            c.add_argument("--l", type=int, default=None)
            c.add_argument("--l-prime", dest="l_prime", type=int, default=None)
            c.add_argument("--batch", type=int, default=None)
            c.add_argument("--lr", type=float, default=None)
            c.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
        if name in ("evaluate", "forecast"):
            c.add_argument("--checkpoint", default=None)
        if name == "evaluate":
            c.add_argument("--compare", default=None,
                           help="second checkpoint; writes per-bin MAE improvement over it")
            c.add_argument("--bins", type=int, default=None)
            c.add_argument("--svg", action="store_true", default=None)
    return p


def _parse_synthetic(tokens):
    if tokens is None:
        return None
    if isinstance(tokens, dict):
        tokens = [f"{k}={v}" for k, v in tokens.items()]
    spec = {}
    for tok in tokens:
        key, sep, val = tok.partition("=")
        if not sep or key not in SYNTH_KEYS:
            raise UsageError(f"bad --synthetic item {tok!r}; expected one of "
                             + ", ".join(f"{k}=" for k in SYNTH_KEYS))
        try:
            spec[key] = SYNTH_KEYS[key](val)
        except ValueError:
            raise UsageError(f"bad value in --synthetic item {tok!r}") from None
    return spec


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON file, then explicit flags."""
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    cfg = {k: DEFAULTS[k] for k in flags}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise DataError(f"{args.config}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: not valid JSON ({exc})") from None
        loaded.pop("command", None)
        allowed = set(flags) | (EXTRA_MODEL_KEYS if args.command == "train" else set())
        unknown = sorted(set(loaded) - allowed)
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {unknown}")
        cfg.update(loaded)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if "synthetic" in cfg:
        cfg["synthetic"] = _parse_synthetic(cfg["synthetic"])
    return cfg


def _echo(command, cfg, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": command, **cfg}
    text = json.dumps(record, indent=2, sort_keys=True) + "\n"
    (out / "config.json").write_text(text)
    log.info("effective config:\n%s", text.rstrip())


def _load_data(cfg):
    if cfg.get("synthetic") is not None:
        return generate_synthetic(**cfg["synthetic"])
    if not cfg.get("data") or not cfg.get("adjacency"):
        raise DataError("need --data and --adjacency, or --synthetic")
    for key in ("data", "adjacency"):
        if not Path(cfg[key]).is_file():
            raise DataError(f"{cfg[key]}: no such file")
    table = load_traffic_table(cfg["data"])
    return table, load_adjacency(cfg["adjacency"], table.n_locations)


def _partition(cfg, table, graph):
    if cfg.get("partition"):
        if not Path(cfg["partition"]).is_file():
            raise DataError(f"{cfg['partition']}: no such file")
        return SensingPartition.load(cfg["partition"])
    if cfg.get("m_prime") is None:
        raise UsageError("need --partition or --m-prime")
    train_part = chronological_split(table)[0]
    return select_locations(train_part, graph, cfg["m_prime"], cfg["select"], cfg["seed"])


def model_config(cfg) -> ModelConfig:
    values = dict(l=cfg["l"], l_prime=cfg["l_prime"], d=cfg["d"], alpha=cfg["alpha"],
                  lr=cfg["lr"], weight_decay=cfg["weight_decay"], batch=cfg["batch"],
                  epochs_per_stage=cfg["epochs"], seed=cfg["seed"])
    values.update({k: cfg[k] for k in EXTRA_MODEL_KEYS if k in cfg})
    for name in cfg["ablation"] or []:
        if name not in ABLATIONS:
            raise UsageError(f"unknown ablation {name!r}")
        values[ABLATIONS[name]] = True
    try:
        return ModelConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- commands

def cmd_synth(cfg, out: Path):
    table, graph = _load_data({**cfg, "synthetic": cfg["synthetic"] or {}})
    save_traffic_table(table, out / "data.csv")
    save_adjacency(graph, out / "adjacency.csv")
    log.info("wrote %d locations x %d intervals", table.n_locations, table.n_intervals)


def cmd_select(cfg, out: Path):
    table, graph = _load_data(cfg)
    part = _partition({**cfg, "partition": None}, table, graph)
    part.save(out / "partition.txt")
    log.info("unsensed: %s", ",".join(map(str, part.unsensed)))


def cmd_train(cfg, out: Path):
    table, graph = _load_data(cfg)
    part = _partition(cfg, table, graph)
    mc = model_config(cfg)
    ds = prepare_dataset(table, part, mc.l, mc.l_prime, cfg["noise_variance"], cfg["seed"])
    if len(ds.train) == 0:
        raise DataError("training split too short for one window")
    model = StpsModel(mc, graph.adjacency, part, ds.normalizer)
    logs = fit(model, ds.train, ds.val if len(ds.val) else None)
    with (out / "losses.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "epoch", "steps", "train_mae", "val_mae"])
        for e in logs:
            w.writerow([e.stage, e.epoch, e.steps, f"{e.train_mae:.6f}",
                        "" if e.val_mae is None else f"{e.val_mae:.6f}"])
    part.save(out / "partition.txt")
    checkpoint_save(model, out / "model.ckpt")
    log.info("trained stages %s; checkpoint at %s", mc.stages, out / "model.ckpt")


def _checkpoint(cfg):
    path = cfg.get("checkpoint")
    if not path:
        raise UsageError("need --checkpoint")
    if not Path(path).is_file():
        raise DataError(f"{path}: no such file")
    return checkpoint_load(path)


def cmd_evaluate(cfg, out: Path):
    model = _checkpoint(cfg)
    table, _ = _load_data(cfg)
    mc = model.config
    ds = prepare_dataset(table, model.partition, mc.l, mc.l_prime)
    if len(ds.test) == 0:
        raise DataError("test split too short for one window")
    report = evaluate(model, ds.test)
    report.write_csv(out / "report.csv")
    report.write_slices_csv(out / "slices.csv")
    if cfg["svg"]:
        rmse_svg(report, out / "rmse.svg")
    if cfg["compare"]:
        other = checkpoint_load(cfg["compare"])
        bins = binned_improvement(evaluate(other, ds.test), report, cfg["bins"])
        with (out / "bins.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "improvement_pct"])
            w.writerows([i + 1, f"{v:.6f}"] for i, v in enumerate(bins))
    log.info("avg MAE %.4f RMSE %.4f", report.avg_mae, report.avg_rmse)


def cmd_forecast(cfg, out: Path):
    model = _checkpoint(cfg)
    table, _ = _load_data(cfg)
    l = model.config.l
    if table.n_intervals < l:
        raise DataError(f"need at least {l} intervals, table has {table.n_intervals}")
    start = table.n_intervals - l
    tod, dow = table.calendar(start)
    x = table.values[list(model.partition.sensed), start:]
    pred = infer(model, x, tod, dow)
    step = timedelta(minutes=table.interval_minutes)
    first = table.start_epoch + step * table.n_intervals
    header = [(first + step * j).isoformat() for j in range(pred.shape[1])]
    # rows follow the unsensed order stored in the checkpoint's partition
    with (out / "forecast.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows([f"{v:.6f}" for v in row] for row in pred)
    model.partition.save(out / "partition.txt")


HANDLERS = {"synth": cmd_synth, "select": cmd_select, "train": cmd_train,
            "evaluate": cmd_evaluate, "forecast": cmd_forecast}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("STPS_LOG", "INFO").upper(),
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        out = Path(cfg["out"])
        _echo(args.command, cfg, out)
        HANDLERS[args.command](cfg, out)
    except UsageError as exc:
        print(f"stps: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"stps: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"stps: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"stps: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
