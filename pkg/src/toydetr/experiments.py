"""Train/evaluate cells, ablation grids, and one-axis sweeps.

A *cell* is one (config, seed) training run. Its outputs live in
``<out>/<config hash>-s<seed>/``; a directory that already holds a finished
cell is read back instead of retrained, so grids never clobber each other and
overlapping grids share work.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .autodiff import save_checkpoint
from .config import ExperimentConfig, config_hash, dump_config
from .detector import Detector, infer, train
from .errors import NumericalAbort, ValidationError
from .metrics import REPORT_FIELDS, evaluate, pr_curves_csv, query_statistics, report_csv
from .scenes import Scene, build_dataset

log = logging.getLogger(__name__)

TOGGLES = ("rch", "qrl", "gcl", "hmc")
# rows of the "gradually adding modules" ablation
GRADUAL_GRID = [
    (False, False, False, False),
    (True, False, False, False),
    (True, True, False, False),
    (True, True, True, False),
    (True, True, True, True),
]
FULL_GRID = list(itertools.product((False, True), repeat=4))
STAT_FIELDS = ("matched_score", "unmatched_score", "unmatched_iou")
SWEEP_AXES = ("alpha", "target_transform")


@dataclass
class CellResult:
    seed: int
    status: str  # "ok" or "failed"
    metrics: dict[str, float]
    stats: dict[str, float]
    run_dir: str
    error: str = ""
    seconds: float = 0.0  # wall time of training plus evaluation

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=1)


@lru_cache(maxsize=4)
def _dataset(data_cfg) -> tuple[tuple[Scene, ...], tuple[Scene, ...]]:
    train_set, val_set = build_dataset(data_cfg.gen, data_cfg.train, data_cfg.val, data_cfg.seed)
    return tuple(train_set), tuple(val_set)


def dataset(cfg: ExperimentConfig) -> tuple[list[Scene], list[Scene]]:
    tr, va = _dataset(cfg.data)
    return list(tr), list(va)


def run_dir(cfg: ExperimentConfig, seed: int, out=None) -> Path:
    return Path(out if out is not None else cfg.out) / f"{config_hash(cfg)}-s{seed}"


def final_layer_stats(model, scenes) -> dict[str, float]:
    """Mean matched / unmatched max-category score and unmatched max-IoU at the last layer."""
    scores, ious = query_statistics(model, scenes)
    last = model.cfg.layers

    def mean(xs):
        return float(np.mean(xs)) if len(xs) else float("nan")

    return {
        "matched_score": mean(scores[(last, "matched")]),
        "unmatched_score": mean(scores[(last, "unmatched")]),
        "unmatched_iou": mean(ious[last]),
    }


def _train_log_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "scene_id", "loss", "matched_iou", "matcher"])
    for r in records:
        w.writerow([r.step, r.scene_id, repr(r.loss), repr(r.matched_iou), r.matcher])
    return buf.getvalue()


def train_cell(cfg: ExperimentConfig, seed: int):
    """Train one model; returns (model, step records, val scenes)."""
    train_set, val_set = dataset(cfg)
    mcfg = cfg.model_for_seed(seed)
    model, records = train(Detector(mcfg), train_set, mcfg)
    return model, records, val_set


def run_cell(cfg: ExperimentConfig, seed: int, out=None) -> CellResult:
    """Train, evaluate, and record one (config, seed) cell, reusing a finished run directory."""
    cfg = cfg.with_seed(seed)
    rd = run_dir(cfg, seed, out)
    done = rd / "cell.json"
    if done.exists():
        return CellResult(**json.loads(done.read_text()))
    rd.mkdir(parents=True, exist_ok=True)
    (rd / "config.txt").write_text(dump_config(cfg))
    start = time.perf_counter()
    try:
        model, records, val_set = train_cell(cfg, seed)
        dets = [d for s in val_set for d in infer(model, s, min(cfg.eval.max_dets, cfg.model.queries * cfg.model.categories))]
        report = evaluate(dets, val_set, cfg.model.categories, cfg.eval.max_dets, cfg.eval.lrp_tau)
        stats = final_layer_stats(model, val_set[: cfg.eval.diag_scenes])
    except NumericalAbort as exc:
        log.warning("cell %s aborted: %s", rd.name, exc)
        result = CellResult(seed, "failed", {}, {}, str(rd), f"{exc} (scene {exc.scene_id}, step {exc.step})",
                            time.perf_counter() - start)
        done.write_text(result.to_json())
        return result
    (rd / "train_log.csv").write_text(_train_log_csv(records))
    (rd / "metrics.csv").write_text(report_csv(report))
    (rd / "pr_curves.csv").write_text(pr_curves_csv(report))
    save_checkpoint(rd / "model.ckpt", model.parameters())
    result = CellResult(seed, "ok", report.row(), stats, str(rd), seconds=time.perf_counter() - start)
    done.write_text(result.to_json())
    return result


def _fmt(v: float) -> str:
    return "nan" if not math.isfinite(v) else f"{v:.4f}"


def _mean_row(cells: list[CellResult]) -> tuple[str, list[str]]:
    if not cells or not all(c.ok for c in cells):
        return "failed", ["" for _ in REPORT_FIELDS + STAT_FIELDS]
    vals = [float(np.mean([c.metrics[k] for c in cells])) for k in REPORT_FIELDS]
    vals += [float(np.mean([c.stats[k] for c in cells])) for k in STAT_FIELDS]
    return "ok", [_fmt(v) for v in vals]


@dataclass
class TableResult:
    csv: str
    cells: dict[tuple, list[CellResult]]


def run_ablation(grid, cfg: ExperimentConfig, seeds, out=None) -> TableResult:
    """One row per toggle combination (rch, qrl, gcl, hmc), metrics averaged over ``seeds``.

    A row whose cells abort on any seed is marked ``failed``; the others still run.
    """
    if not seeds:
        raise ValidationError("ablation needs at least one seed")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(TOGGLES) + ["seeds", "status"] + list(REPORT_FIELDS) + list(STAT_FIELDS))
    cells = {}
    for combo in grid:
        combo = tuple(bool(x) for x in combo)
        row_cfg = cfg.with_model(**dict(zip(TOGGLES, combo)))
        cells[combo] = [run_cell(row_cfg, s, out) for s in seeds]
        status, vals = _mean_row(cells[combo])
        w.writerow([int(x) for x in combo] + [" ".join(map(str, seeds)), status] + vals)
    text = buf.getvalue()
    _write_table(out if out is not None else cfg.out, f"ablation-{config_hash(cfg)}.csv", text)
    return TableResult(text, cells)


def _sweep_changes(axis: str, value) -> dict:
    if axis == "alpha":
        return {"alpha": float(value)}
    if axis == "target_transform":
        kind, sep, power = str(value).partition(":")
        if not sep:
            raise ValidationError(f"target_transform values look like 'norm_giou_pow:2', got {value!r}")
        return {"target_kind": kind, "target_power": float(power)}
    raise ValidationError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def run_sweep(axis: str, values, cfg: ExperimentConfig, seeds, out=None) -> TableResult:
    """One row per value of ``axis``, other settings taken from ``cfg``."""
    if not values:
        raise ValidationError("sweep needs at least one value")
    if not seeds:
        raise ValidationError("sweep needs at least one seed")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "seeds", "status"] + list(REPORT_FIELDS) + list(STAT_FIELDS))
    cells = {}
    for v in values:
        row_cfg = cfg.with_model(**_sweep_changes(axis, v))
        cells[v] = [run_cell(row_cfg, s, out) for s in seeds]
        status, vals = _mean_row(cells[v])
        w.writerow([axis, v, " ".join(map(str, seeds)), status] + vals)
    text = buf.getvalue()
    _write_table(out if out is not None else cfg.out, f"sweep-{axis}-{config_hash(cfg)}.csv", text)
    return TableResult(text, cells)


def _write_table(out, name: str, text: str) -> None:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    (path / name).write_text(text)


def diagnose(cfg: ExperimentConfig, seed: int, out=None) -> dict[str, str]:
    """Score-distribution and unmatched-IoU CDF CSVs for a trained cell."""
    from .autodiff import load_checkpoint
    from .metrics import cdf_csv

    cell = run_cell(cfg, seed, out)
    if not cell.ok:
        raise NumericalAbort(f"cell {cell.run_dir} failed: {cell.error}")
    mcfg = cfg.model_for_seed(seed)
    model = Detector(mcfg)
    load_checkpoint(Path(cell.run_dir) / "model.ckpt", model.parameters())
    _, val_set = dataset(cfg)
    scores, ious = query_statistics(model, val_set[: cfg.eval.diag_scenes])
    files = {
        "score_cdf.csv": cdf_csv(dict(scores)),
        "unmatched_iou_cdf.csv": cdf_csv({(layer, "unmatched"): v for layer, v in ious.items()}),
    }
    for name, text in files.items():
        (Path(cell.run_dir) / name).write_text(text)
    return files


__all__ = [
    "CellResult",
    "FULL_GRID",
    "GRADUAL_GRID",
    "SWEEP_AXES",
    "TableResult",
    "dataset",
    "diagnose",
    "final_layer_stats",
    "run_ablation",
    "run_cell",
    "run_dir",
    "run_sweep",
]
