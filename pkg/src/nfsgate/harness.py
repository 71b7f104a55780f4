"""Multi-seed experiment orchestration and report emission."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .data import Dataset, PlantedSpec, SyntheticDataset, generate_synthetic
from .metrics import mean_std, top3_score
from .training import PipelineConfig, PretrainResult, pretrain, run_pipeline, split_for

log = logging.getLogger(__name__)

DESK_FIELDS = 20
DESK_VOCAB = 100
DESK_ROWS = 50_000
DESK_PLANTED = (1, 4, 7, 10, 13, 17)
DESK_SCALE = 2.0
DESK_DATA_SEED = 123

AUC_DECIMALS = 5


def desk_benchmark(rows: int = DESK_ROWS, seed: int = DESK_DATA_SEED) -> SyntheticDataset:
    """The planted benchmark used throughout the tests and demos."""
    return generate_synthetic(DESK_FIELDS, DESK_VOCAB, rows,
                              PlantedSpec(DESK_PLANTED, DESK_SCALE, 0.0, seed))


@dataclass(frozen=True)
class MethodSpec:
    """A method label plus config overrides, e.g. gating at a tenth of the gate rate."""
    label: str
    overrides: tuple[tuple[str, Any], ...] = ()

    @classmethod
    def parse(cls, spec: "str | MethodSpec | tuple") -> "MethodSpec":
        if isinstance(spec, MethodSpec):
            return spec
        if isinstance(spec, tuple):
            label, over = spec
            return cls(label, tuple(sorted(dict(over).items())))
        # "gating" or "gating:gate_lr_scale=0.1,beta_s=0.2"
        label, _, rest = spec.partition(":")
        over = {}
        for item in filter(None, rest.split(",")):
            k, _, v = item.partition("=")
            over[k.strip()] = _coerce(k.strip(), v.strip())
        over.setdefault("method", label.split("@")[0])
        return cls(spec, tuple(sorted(over.items())))

    def config(self, base: PipelineConfig, seed: int) -> PipelineConfig:
        over = dict(self.overrides)
        over.setdefault("method", self.label)
        return base.replace(seed=seed, **over)


def _coerce(key: str, raw: str):
    types = PipelineConfig.field_types()
    if key not in types:
        raise ValueError(f"unknown config key {key!r}")
    default = getattr(PipelineConfig(), key)
    if raw.lower() in ("none", "null"):
        return None
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"{key}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or "float" in str(types[key]):
        return float(raw)
    return raw


@dataclass
class CellResult:
    method: str
    method_index: int
    seed: int
    seed_index: int
    status: str
    test_auc: float | None = None
    selected: list[int] | None = None
    recovery: int | None = None
    error: str | None = None
    logs: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CellResult":
        return cls(**d)


@dataclass
class ExperimentReport:
    methods: list[str]
    seeds: list[int]
    cells: list[CellResult]
    planted: list[int] | None = None

    def cells_for(self, method: str) -> list[CellResult]:
        return [c for c in self.cells if c.method == method]

    def aucs(self, method: str) -> list[float]:
        return [c.test_auc for c in self.cells_for(method) if c.ok]

    def aggregate(self, method: str) -> dict:
        cells = self.cells_for(method)
        ok = [c for c in cells if c.ok]
        out = {"method": method, "n": len(ok), "failed": len(cells) - len(ok),
               "mean_auc": None, "std_auc": None, "std_undefined": None,
               "mean_recovery": None}
        if ok:
            mean, std = mean_std([c.test_auc for c in ok])
            out.update(mean_auc=mean, std_auc=0.0 if std is None else std,
                       std_undefined=std is None)
            rec = [c.recovery for c in ok if c.recovery is not None]
            if rec:
                out["mean_recovery"] = float(np.mean(rec))
        return out

    def top3(self) -> int | None:
        """Top-3 score of the second method against the first (baseline)."""
        if len(self.methods) != 2:
            return None
        a, b = self.aucs(self.methods[0]), self.aucs(self.methods[1])
        if len(a) != len(b) or len(a) < 3:
            return None
        return top3_score(a, b)

    def to_dict(self) -> dict:
        return {"methods": list(self.methods), "seeds": list(self.seeds),
                "planted": self.planted,
                "aggregates": [self.aggregate(m) for m in self.methods],
                "top3": self.top3(),
                "cells": [c.to_dict() for c in self.cells]}

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(list(d["methods"]), list(d["seeds"]),
                   [CellResult.from_dict(c) for c in d["cells"]], d.get("planted"))

    def summary_lines(self) -> list[str]:
        lines = []
        for agg in (self.aggregate(m) for m in self.methods):
            if agg["n"] == 0:
                lines.append(f"{agg['method']}: all {agg['failed']} runs failed")
                continue
            std = "n/a" if agg["std_undefined"] else f"{agg['std_auc']:.{AUC_DECIMALS}f}"
            line = (f"{agg['method']}: AUC {agg['mean_auc']:.{AUC_DECIMALS}f} "
                    f"(std {std}, n={agg['n']})")
            if agg["mean_recovery"] is not None:
                line += f" recovery {agg['mean_recovery']:.2f}"
            if agg["failed"]:
                line += f" failed {agg['failed']}"
            lines.append(line)
        if self.top3() is not None:
            lines.append(f"top3({self.methods[1]} vs {self.methods[0]}) = {self.top3()}")
        return lines


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


class PipelineCache:
    """Shares pretrained networks and retrain outcomes between cells of one dataset."""

    def __init__(self):
        self.pretrained: dict[tuple, PretrainResult] = {}
        self.retrained: dict[tuple, tuple] = {}

    @staticmethod
    def pretrain_key(config: PipelineConfig) -> tuple:
        return (config.model, config.V, config.seed, config.split_seed, config.search_data,
                config.pretrain_epochs, config.batch_size, config.lr_network,
                config.weight_decay)

    def pretrain_for(self, config: PipelineConfig, train: Dataset) -> PretrainResult:
        key = self.pretrain_key(config)
        if key not in self.pretrained:
            self.pretrained[key] = pretrain(config, train)
        return self.pretrained[key]


def run_cell(base: PipelineConfig, spec: MethodSpec, method_index: int, seed: int,
             seed_index: int, dataset: Dataset, planted=None,
             cache: PipelineCache | None = None) -> CellResult:
    """One pipeline run; failures are captured rather than raised."""
    try:
        config = spec.config(base, seed)
        config.validate(dataset.schema.num_fields)
        splits = split_for(config, dataset)
        pre = None
        if cache is not None and config.method not in ("random", "all_features"):
            pre = cache.pretrain_for(config, splits[0])
        rec = run_pipeline(config, dataset, splits=splits, pretrained=pre,
                           planted_fields=planted,
                           retrain_cache=cache.retrained if cache is not None else None)
        return CellResult(spec.label, method_index, seed, seed_index, "ok", rec.test_auc,
                          rec.selected, rec.recovery, None, _jsonable(rec.logs))
    except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the others
        log.warning("cell %s seed %d failed: %s", spec.label, seed, exc)
        return CellResult(spec.label, method_index, seed, seed_index, "failed",
                          error=f"{type(exc).__name__}: {exc}")


def _run_cell_job(args):
    return run_cell(*args)


def run_experiment(base: PipelineConfig, methods: Sequence, seeds: Sequence[int],
                   dataset: Dataset, *, planted_fields=None, workers: int = 1,
                   cache: PipelineCache | None = None) -> ExperimentReport:
    """Run every (method, seed) cell and collect an :class:`ExperimentReport`.

    Seeds are shared across methods so comparisons are paired.  Cell results
    depend only on (config, method, seed), never on execution order, so a
    worker pool gives the same report as a serial run.
    """
    if not methods or not seeds:
        raise ValueError("need at least one method and one seed")
    specs = [MethodSpec.parse(m) for m in methods]
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate method labels: {labels}")
    if planted_fields is None and isinstance(dataset, SyntheticDataset):
        planted_fields = dataset.planted.informative_fields
    planted = None if planted_fields is None else [int(i) for i in planted_fields]
    jobs = [(base, spec, mi, int(seed), si, dataset, planted)
            for si, seed in enumerate(seeds) for mi, spec in enumerate(specs)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            cells = list(pool.map(_run_cell_job, jobs))
    else:
        cache = cache if cache is not None else PipelineCache()
        cells = [run_cell(*job, cache=cache) for job in jobs]
    cells.sort(key=lambda c: (c.method_index, c.seed_index))
    return ExperimentReport(labels, [int(s) for s in seeds], cells, planted)


CELL_COLUMNS = ["row", "method", "seed", "status", "test_auc", "recovery", "selected",
                "n", "mean_auc", "std_auc", "std_undefined", "mean_recovery", "failed",
                "error"]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return " ".join(str(i) for i in v)
    return str(v)


def emit_report(report: ExperimentReport, out_dir, formats: Sequence[str] = ("json", "csv"),
                prefix: str = "report") -> list[Path]:
    """Write the report and its curve data; returns the paths written."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    written = []
    for fmt in formats:
        if fmt not in ("json", "csv"):
            raise ValueError(f"unknown report format {fmt!r}")
    if "json" in formats:
        p = out / f"{prefix}.json"
        p.write_text(report.to_json() + "\n")
        written.append(p)
    if "csv" in formats:
        p = out / f"{prefix}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CELL_COLUMNS)
            for c in report.cells:
                row = {"row": "run", "method": c.method, "seed": c.seed, "status": c.status,
                       "test_auc": c.test_auc, "recovery": c.recovery,
                       "selected": c.selected, "error": c.error}
                w.writerow([_cell(row.get(k)) for k in CELL_COLUMNS])
            for m in report.methods:
                row = {"row": "aggregate", **report.aggregate(m)}
                w.writerow([_cell(row.get(k)) for k in CELL_COLUMNS])
        written.append(p)
        written += write_curves(report, out, prefix)
    return written


def _search_events(cell: CellResult) -> list[dict]:
    return [r for r in cell.logs if r.get("phase") in ("search", "search_epoch_end")]


def write_curves(report: ExperimentReport, out: Path, prefix: str = "report") -> list[Path]:
    """Open-gate counts per group and inter-group difference, one row per logging event."""
    k_max = max((len(r["open_gates"]) for c in report.cells for r in _search_events(c)
                 if r.get("open_gates") is not None), default=0)
    gates = out / f"{prefix}_open_gates.csv"
    diff = out / f"{prefix}_intergroup.csv"
    with gates.open("w", newline="") as fg, diff.open("w", newline="") as fd:
        wg, wd = csv.writer(fg), csv.writer(fd)
        wg.writerow(["method", "seed", "step", "phase", "epoch"]
                    + [f"group_{k}" for k in range(k_max)])
        wd.writerow(["method", "seed", "step", "phase", "epoch", "intergroup_diff"])
        for c in report.cells:
            for r in _search_events(c):
                head = [c.method, c.seed, r["step"], r["phase"], _cell(r.get("epoch"))]
                counts = list(r.get("open_gates") or [])
                wg.writerow(head + [_cell(v) for v in counts + [None] * (k_max - len(counts))])
                wd.writerow(head + [_cell(r.get("intergroup_diff"))])
    return [gates, diff]


def write_cells_jsonl(report: ExperimentReport, path) -> Path:
    """One JSON line per cell; :func:`load_cells_jsonl` re-aggregates from these."""
    path = Path(path)
    header = {"methods": report.methods, "seeds": report.seeds, "planted": report.planted}
    lines = [json.dumps({"header": header}, sort_keys=True)]
    lines += [json.dumps(_jsonable(c.to_dict()), sort_keys=True) for c in report.cells]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_cells_jsonl(paths: Sequence) -> ExperimentReport:
    methods, seeds, cells, planted = [], [], [], None
    for p in paths:
        for n, line in enumerate(Path(p).read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{p}: line {n}: not JSON ({exc.msg})") from exc
            if "header" in d:
                h = d["header"]
                methods += [m for m in h["methods"] if m not in methods]
                seeds += [s for s in h["seeds"] if s not in seeds]
                planted = h.get("planted", planted)
            else:
                cells.append(CellResult.from_dict(d))
    if not cells:
        raise ValueError("no cell records found")
    for c in cells:
        if c.method not in methods:
            methods.append(c.method)
    cells.sort(key=lambda c: (methods.index(c.method), c.seed_index))
    return ExperimentReport(methods, seeds, cells, planted)
