"""Ablation grids: one training run per cell, rendered as comparison tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from ..counting import ConfigError
from ..synth import Dataset
from .config import ExperimentConfig, save_config
from .evaluate import evaluate_detector
from .train import load_checkpoint, load_datasets, train

__all__ = ["AXES", "AblationCell", "AblationRow", "AblationResult", "ablation_cells", "ablate"]

AXES = ("components", "counting_mode", "num_levels", "fixed_k")

METRIC_COLUMNS = ("AP", "AP50", "AP75", "APvt", "APt", "APs", "APm")


@dataclass(frozen=True)
class AblationCell:
    name: str
    marks: dict  # descriptive columns shown before the metrics
    overrides: dict  # per-section config overrides for this cell


@dataclass
class AblationRow:
    name: str
    marks: dict
    metrics: dict
    counting_accuracy: float | None
    config_hash: str


@dataclass
class AblationResult:
    axis: str
    rows: list[AblationRow]
    records: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "axis": self.axis,
            "rows": [vars(r) for r in self.rows],
            "records": self.records,
        }

    def _header(self) -> list[str]:
        marks = list(self.rows[0].marks) if self.rows else []
        return ["name", *marks, *METRIC_COLUMNS, "count_acc"]

    def _cells(self, row: AblationRow) -> list[str]:
        acc = "-" if row.counting_accuracy is None else f"{row.counting_accuracy:.3f}"
        return [row.name, *(str(v) for v in row.marks.values()), *(f"{100 * row.metrics[c]:.1f}" for c in METRIC_COLUMNS), acc]

    def to_markdown(self) -> str:
        header = self._header()
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(self._cells(r)) + " |" for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self._header())
        for r in self.rows:
            acc = "" if r.counting_accuracy is None else repr(r.counting_accuracy)
            writer.writerow([r.name, *r.marks.values(), *(repr(r.metrics[c]) for c in METRIC_COLUMNS), acc])
        return buf.getvalue()

    def save(self, directory: str | Path) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = [d / f"ablation_{self.axis}.{ext}" for ext in ("md", "csv", "json")]
        paths[0].write_text(self.to_markdown())
        paths[1].write_text(self.to_csv())
        paths[2].write_text(json.dumps(self.as_dict(), indent=1))
        return paths


def _tick(flag: bool) -> str:
    return "x" if flag else ""


def ablation_cells(config: ExperimentConfig, axis: str) -> list[AblationCell]:
    """Cells for ``axis``; each differs from ``config`` only in the ablated factor."""
    if axis == "components":
        grid = [
            ("baseline", False, False, False),
            ("CC+DQS", True, True, False),
            ("CC+FE", True, False, True),
            ("CC+DQS+FE", True, True, True),
        ]
        return [
            AblationCell(
                name,
                {"CC": _tick(cc), "DQS": _tick(dqs), "FE": _tick(fe)},
                {"ablation": {"disable_counting": not cc, "disable_dqs": not dqs, "disable_cgfe": not fe, "fixed_k": None}},
            )
            for name, cc, dqs, fe in grid
        ]
    if axis == "counting_mode":
        return [
            AblationCell(mode, {"method": mode}, {"ablation": {"counting_mode": mode, "disable_counting": False}})
            for mode in ("classification", "regression")
        ]
    if axis == "num_levels":
        return [
            AblationCell(
                f"{n}cls",
                {"levels": str(n)},
                {"ablation": {"num_levels": n, "disable_counting": False}, "model": {"thresholds": None, "budgets": None}},
            )
            for n in (4, 5)
        ]
    if axis == "fixed_k":
        ks = [*config.budgets(), None]
        return [
            AblationCell("dynamic" if k is None else f"k={k}", {"k": "dynamic" if k is None else str(k)}, {"ablation": {"fixed_k": k}})
            for k in ks
        ]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")


def _metrics(result: dict) -> dict:
    r = result["report"]
    scale = r["ap_by_scale"]
    return {
        "AP": r["ap"],
        "AP50": r["ap50"],
        "AP75": r["ap75"],
        "APvt": scale.get("vt", 0.0),
        "APt": scale.get("t", 0.0),
        "APs": scale.get("s", 0.0),
        "APm": scale.get("m", 0.0),
    }


def ablate(
    config: ExperimentConfig,
    axis: str,
    out_dir: str | Path | None = None,
    datasets: tuple[Dataset, Dataset] | None = None,
    eval_set: Dataset | None = None,
    progress: Callable[[str], None] | None = None,
) -> AblationResult:
    """Train every cell of ``axis`` on the same data and evaluate it.

    The ``fixed_k`` sweep trains once with the base configuration and varies
    only the evaluation budget. ``eval_set`` defaults to the validation split.
    """
    cells = ablation_cells(config, axis)
    out = Path(out_dir or config.output_dir) / f"ablate_{axis}"
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")
    datasets = datasets if datasets is not None else load_datasets(config)
    evaluation = eval_set if eval_set is not None else datasets[1]
    rows, records = [], []

    if axis == "fixed_k":
        record = train(config, datasets, out / "shared")
        records.append(record.comparable())
        detector, _ = load_checkpoint(record.final_checkpoint, config)
        for cell in cells:
            if progress:
                progress(cell.name)
            cfg = config.with_overrides(**cell.overrides)
            if cfg.eval_k() is None and not detector.config.use_counting:
                raise ConfigError("dynamic budgets need the counting module")
            res = evaluate_detector(detector, evaluation, cfg, cfg.eval_k()).as_dict()
            rows.append(AblationRow(cell.name, cell.marks, _metrics(res), res["counting_accuracy"], cfg.config_hash()))
    else:
        for cell in cells:
            if progress:
                progress(cell.name)
            cfg = config.with_overrides(**cell.overrides)
            record = train(cfg, datasets, out / cell.name.replace("+", "_"), eval_set=evaluation)
            records.append(record.comparable())
            res = record.metrics
            rows.append(AblationRow(cell.name, cell.marks, _metrics(res), res["counting_accuracy"], cfg.config_hash()))

    result = AblationResult(axis, rows, records)
    result.save(out)
    return result
