"""Command-line entry point: ``python -m nfsgate <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import data as data_mod
from .harness import (
    PipelineCache,
    _coerce,
    _jsonable,
    desk_benchmark,
    emit_report,
    load_cells_jsonl,
    run_experiment,
    write_cells_jsonl,
)
from .models import save_checkpoint
from .training import (
    PipelineConfig,
    load_pretrained,
    pretrain,
    retrain,
    run_pipeline,
    search,
    split_for,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
log = logging.getLogger("nfsgate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def read_config_file(path) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            out[k] = _coerce(k, v)
        except ValueError as exc:
            raise UsageError(f"{path}:{n}: {exc}") from exc
    return out


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline config (explicit flags override --config)")
    g.add_argument("--config", help="key=value file with pipeline settings")
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        g.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar="VALUE")


def build_config(args) -> PipelineConfig:
    values = read_config_file(args.config) if args.config else {}
    for f in fields(PipelineConfig):
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            try:
                values[f.name] = _coerce(f.name, raw)
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
    try:
        return PipelineConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def load_data(args):
    """Dataset plus planted fields (when a sidecar exists)."""
    if getattr(args, "desk", False):
        ds = desk_benchmark()
        return ds, ds.planted.informative_fields
    if not args.data:
        raise UsageError("--data PATH (or --desk) is required")
    path = Path(args.data)
    if args.schema:
        schema = data_mod.DatasetSchema.from_dict(json.loads(Path(args.schema).read_text()))
        planted = None
    elif data_mod.sidecar_path(path).exists():
        schema, planted = data_mod.load_sidecar(path)
    else:
        raise UsageError(f"no schema: pass --schema or provide {data_mod.sidecar_path(path)}")
    ds = data_mod.load_delimited(path, schema, delimiter=args.delimiter)
    return ds, None if planted is None else planted.informative_fields


def _write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(_jsonable(r), sort_keys=True) + "\n")


def _emit(obj, out=None) -> None:
    text = json.dumps(_jsonable(obj), sort_keys=True, indent=1)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def cmd_generate_data(args) -> int:
    planted = tuple(int(i) for i in args.planted.split(",") if i.strip())
    try:
        spec = data_mod.PlantedSpec(planted, args.scale, args.bias, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = data_mod.generate_synthetic(args.M, args.vocab, args.rows, spec)
    side = data_mod.export_synthetic(ds, args.out)
    _emit({"data": str(args.out), "sidecar": str(side), "rows": len(ds),
           "positive_rate": float(ds.labels.mean())})
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = build_config(args)
    ds, _ = load_data(args)
    train, _, _ = split_for(config, ds)
    res = pretrain(config, train, args.out)
    if args.log:
        _write_jsonl(args.log, res.logs)
    _emit({"checkpoint": str(args.out), "epoch_losses": res.epoch_losses})
    return EXIT_OK


def cmd_search(args) -> int:
    config = build_config(args)
    ds, planted = load_data(args)
    train, val, _ = split_for(config, ds)
    model = load_pretrained(config, ds.schema, args.checkpoint)
    res = search(config, model, train, val)
    if args.log:
        _write_jsonl(args.log, res.logs)
    if args.gates:
        save_checkpoint(args.gates, {f"gate.alpha.{k}": g.alpha
                                     for k, g in enumerate(res.ensemble.groups)})
    out = {"selection": res.selection.to_json(), "config": config.to_dict()}
    if planted is not None:
        out["recovery"] = len(set(res.selection.selected) & set(planted))
    _emit(out, args.out)
    return EXIT_OK


def cmd_retrain(args) -> int:
    config = build_config(args)
    ds, _ = load_data(args)
    train, _, test = split_for(config, ds)
    sel = json.loads(Path(args.selection).read_text())
    selected = sel["selection"]["selected"] if "selection" in sel else sel["selected"]
    res = retrain(config, selected, train, test)
    if args.log:
        _write_jsonl(args.log, res.logs)
    _emit({"selected": selected, "test_auc": res.auc, "epoch_losses": res.epoch_losses},
          args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    config = build_config(args)
    ds, planted = load_data(args)
    rec = run_pipeline(config, ds, planted_fields=planted)
    if args.log:
        _write_jsonl(args.log, rec.logs)
    _emit({"method": rec.method, "seed": rec.seed, "selected": rec.selected,
           "test_auc": rec.test_auc, "recovery": rec.recovery, "selection": rec.selection,
           "config": rec.config}, args.out)
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def cmd_experiment(args) -> int:
    config = build_config(args)
    ds, planted = load_data(args)
    methods = [m for m in args.methods.split(";") if m.strip()]
    seeds = _int_list(args.seeds)
    if not methods or not seeds:
        raise UsageError("need at least one method and one seed")
    report = run_experiment(config, methods, seeds, ds, planted_fields=planted,
                            workers=args.workers, cache=PipelineCache())
    out = Path(args.out_dir)
    emit_report(report, out, formats=args.formats.split(","))
    write_cells_jsonl(report, out / "cells.jsonl")
    for line in report.summary_lines():
        print(line)
    failed = [c for c in report.cells if not c.ok]
    return EXIT_RUNTIME if len(failed) == len(report.cells) else EXIT_OK


def cmd_report(args) -> int:
    report = load_cells_jsonl(args.cells)
    emit_report(report, args.out_dir, formats=args.formats.split(","))
    for line in report.summary_lines():
        print(line)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nfsgate", description="Ensemble gate-based feature selection for CTR models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write a planted synthetic dataset and sidecar")
    g.add_argument("--M", type=int, default=20)
    g.add_argument("--vocab", type=int, default=100)
    g.add_argument("--rows", type=int, default=50_000)
    g.add_argument("--planted", default="1,4,7,10,13,17", help="comma-separated field ids")
    g.add_argument("--scale", type=float, default=2.0)
    g.add_argument("--bias", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=123)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    def data_args(sp):
        sp.add_argument("--data", help="delimited file: label then one raw value per field")
        sp.add_argument("--schema", help="schema JSON (defaults to the data sidecar)")
        sp.add_argument("--delimiter", default="\t")
        sp.add_argument("--desk", action="store_true", help="use the built-in planted benchmark")
        _add_config_flags(sp)

    s = sub.add_parser("pretrain", help="train the full-feature network, save a checkpoint")
    data_args(s)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("search", help="gate search from a pretrained checkpoint")
    data_args(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", help="selection JSON")
    s.add_argument("--gates", help="save final gate weights as a checkpoint")
    s.add_argument("--log")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("retrain", help="retrain on a selection and report test AUC")
    data_args(s)
    s.add_argument("--selection", required=True, help="selection JSON from 'search'")
    s.add_argument("--out")
    s.add_argument("--log")
    s.set_defaults(func=cmd_retrain)

    s = sub.add_parser("run", help="pretrain, search and retrain in one go")
    data_args(s)
    s.add_argument("--out")
    s.add_argument("--log", help="JSON-lines log of every phase")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("experiment", help="methods x seeds matrix with aggregated report")
    data_args(s)
    s.add_argument("--methods", default="gating;ensemble",
                   help="';'-separated; each may carry overrides, e.g. 'gating:gate_lr_scale=0.1'")
    s.add_argument("--seeds", default="0,1,2,3,4")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--formats", default="json,csv")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("report", help="re-aggregate a report from cells.jsonl files")
    s.add_argument("cells", nargs="+")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--formats", default="json,csv")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required; see --help")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any failure past parsing is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
