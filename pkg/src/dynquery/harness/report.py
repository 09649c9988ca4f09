"""Figures and tables from the artifacts of a run directory."""

from __future__ import annotations

import csv
import json
from collections import Counter
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..counting import ConfigError  # noqa: E402

__all__ = ["level_table", "band_table", "render_report"]


def _smooth(values: np.ndarray, window: int) -> np.ndarray:
    if len(values) < window or window <= 1:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def level_table(result: dict) -> str:
    """Per-count-level rows plus the overall row as a markdown table."""
    lines = [
        f"**{result['mode']}**",
        "",
        "| level | count range | queries | images | AP | AP50 | AP75 | APvt | APt | APs | APm |",
        "|---|---|---|---|---|---|---|---|---|---|---|",
    ]
    for r in result["levels"]:
        s = r["ap_by_scale"]
        cells = [r["level"], r["count_range"], r["queries"], str(r["num_images"])]
        cells += [f"{100 * v:.1f}" for v in (r["ap"], r["ap50"], r["ap75"], s.get("vt", 0), s.get("t", 0), s.get("s", 0), s.get("m", 0))]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def band_table(results: list[dict]) -> str:
    lines = ["| mode | band | images | AP | LRP FP | LRP FN |", "|---|---|---|---|---|---|"]
    for res in results:
        for b in res["bands"]:
            lines.append(
                f"| {res['mode']} | {b['band']} | {b['num_images']} | {100 * b['ap']:.1f} | {b['lrp_fp']:.4f} | {b['lrp_fn']:.4f} |"
            )
    return "\n".join(lines) + "\n"


def _loss_figure(losses: list[dict], path: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    for ax, stage, keys in ((axes[0], 1, ("counting",)), (axes[1], 2, ("total", "hungarian", "aux", "counting"))):
        rows = [e for e in losses if e.get("stage") == stage and "step" in e]
        for key in keys:
            if not rows:
                continue
            steps = np.array([e["step"] for e in rows])
            vals = np.array([e[key] for e in rows], dtype=float)
            window = max(1, len(vals) // 50)
            sm = _smooth(vals, window)
            ax.plot(steps[len(steps) - len(sm):], sm, label=key)
        ax.set_title(f"stage {stage}")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        if rows:
            ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def _write_losses(losses: list[dict], path: Path) -> Path:
    keys = ["stage", "step", "k", "l1", "giou", "focal", "hungarian", "aux", "counting", "total"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for e in losses:
            if "step" in e:
                writer.writerow(e)
    return path


def _level_figure(results: list[dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(1, len(results))
    for j, res in enumerate(results):
        rows = res["levels"]
        x = np.arange(len(rows))
        ax.bar(x + j * width, [100 * r["ap"] for r in rows], width, label=res["mode"])
        ax.set_xticks(x + width * (len(results) - 1) / 2, [r["level"] for r in rows])
    ax.set_ylabel("AP")
    ax.set_title("AP per count level")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def _band_figure(results: list[dict], path: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, key in zip(axes, ("lrp_fp", "lrp_fn")):
        width = 0.8 / max(1, len(results))
        for j, res in enumerate(results):
            bands = res["bands"]
            x = np.arange(len(bands))
            ax.bar(x + j * width, [b[key] for b in bands], width, label=res["mode"])
            ax.set_xticks(x + width * (len(results) - 1) / 2, [b["band"] for b in bands])
        ax.set_title(key.replace("_", " ").upper())
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def _budget_figure(results: list[dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for res in results:
        counts = Counter(res["budgets_used"])
        ks = sorted(counts)
        ax.plot(ks, [counts[k] for k in ks], marker="o", label=res["mode"])
    ax.set_xlabel("queries per image")
    ax.set_ylabel("images")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def _ablation_figure(ablation: dict, path: Path) -> Path:
    rows = ablation["rows"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar([r["name"] for r in rows], [100 * r["metrics"]["AP"] for r in rows])
    ax.set_ylabel("AP")
    ax.set_title(f"ablation: {ablation['axis']}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def render_report(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render every figure and table the run directory has inputs for.

    Looks for ``run_record.json``, ``eval_*.json`` and
    ``ablate_*/ablation_*.json``; writes PNG figures, CSV and ``report.md``.
    """
    run = Path(run_dir)
    if not run.is_dir():
        raise ConfigError(f"run directory {run} does not exist")
    out = Path(out_dir) if out_dir else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    sections = [f"# Report for {run.name}", ""]

    record_path = run / "run_record.json"
    if record_path.exists():
        record = json.loads(record_path.read_text())
        losses = record.get("losses", [])
        written.append(_write_losses(losses, out / "losses.csv"))
        written.append(_loss_figure(losses, out / "loss_curves.png"))
        sections += [
            "## Training",
            "",
            f"- config hash: `{record['config_hash']}`",
            f"- seed: {record['seed']}",
            f"- stage-1 counting accuracy: {record.get('stage1_counting_accuracy')}",
            f"- final counting accuracy: {record.get('counting_accuracy')}",
            f"- wall clock: {record.get('wall_clock', 0):.1f} s",
            "",
            "![losses](loss_curves.png)",
            "",
        ]

    results = [json.loads(p.read_text()) for p in sorted(run.glob("eval_*.json"))]
    if results:
        sections += ["## Evaluation", ""]
        sections += [level_table(r) for r in results]
        sections += ["", band_table(results), ""]
        written.append(_level_figure(results, out / "ap_per_level.png"))
        written.append(_band_figure(results, out / "lrp_bands.png"))
        written.append(_budget_figure(results, out / "query_budgets.png"))
        sections += ["![levels](ap_per_level.png)", "", "![bands](lrp_bands.png)", "", "![budgets](query_budgets.png)", ""]
        with open(out / "bands.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["mode", "band", "images", "ap", "lrp_fp", "lrp_fn"])
            for r in results:
                for b in r["bands"]:
                    writer.writerow([r["mode"], b["band"], b["num_images"], b["ap"], b["lrp_fp"], b["lrp_fn"]])
        written.append(out / "bands.csv")

    for path in sorted(run.glob("ablate_*/ablation_*.json")):
        ablation = json.loads(path.read_text())
        png = out / f"ablation_{ablation['axis']}.png"
        written.append(_ablation_figure(ablation, png))
        md = path.with_suffix(".md")
        sections += [f"## Ablation: {ablation['axis']}", "", md.read_text() if md.exists() else "", f"![{ablation['axis']}]({png.name})", ""]

    if len(sections) == 2:
        raise ConfigError(f"nothing to report in {run}: no run record, evaluation or ablation output")
    report = out / "report.md"
    report.write_text("\n".join(sections))
    written.append(report)
    return written
