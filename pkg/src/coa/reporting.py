"""Tables and figures for a finished run.

Each figure is written next to a CSV holding exactly the plotted numbers, so
the values can be checked against ``report.json`` without reading pixels.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from coa.core import atomic_write_bytes, read_jsonl  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.6,
    "lines.markersize": 5,
    "savefig.bbox": "tight",
}


def _fmt(value: Optional[float], scale: float = 1.0) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return f"{value * scale:.1f}"


def table_columns(encoder_names: Sequence[str]) -> list[str]:
    return ["Method", *encoder_names, "Ensemble", "Target", "Fool"]


def table_row(label: str, report: dict) -> list[str]:
    """One table row: encoder means, ensemble mean, then Target/Fool as percentages."""
    per = report.get("per_encoder_mean", {})
    return [label, *(_fmt(per.get(n)) for n in report.get("encoder_names", [])),
            _fmt(report.get("ensemble_mean")), _fmt(report.get("target_asr"), 100.0),
            _fmt(report.get("fool_rate"), 100.0)]


def render_tables(rows: list[tuple[str, dict]], encoder_names: Sequence[str]) -> tuple[str, str]:
    """(csv text, markdown text) for labelled EvalReport dicts."""
    header = table_columns(encoder_names)
    body = [table_row(label, rep) for label, rep in rows]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(body)
    md = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    md += ["| " + " | ".join(r) + " |" for r in body]
    return buf.getvalue(), "\n".join(md) + "\n"


def write_tables(out_dir: str | os.PathLike, rows: list[tuple[str, dict]], encoder_names: Sequence[str],
                 stem: str = "results") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    csv_text, md_text = render_tables(rows, encoder_names)
    atomic_write_bytes(out_dir / f"{stem}.csv", csv_text.encode("utf-8"))
    atomic_write_bytes(out_dir / f"{stem}.md", md_text.encode("utf-8"))
    return out_dir / f"{stem}.csv", out_dir / f"{stem}.md"


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def read_plot_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)


def plot_loss_vs_step(trace_dir: str | os.PathLike, out_dir: str | os.PathLike) -> Optional[Path]:
    """Per-example loss curves (thin) and their mean (bold)."""
    traces = {p.stem: read_jsonl(p) for p in sorted(Path(trace_dir).glob("*.jsonl"))}
    traces = {k: v for k, v in traces.items() if v}
    if not traces:
        return None
    out_dir = Path(out_dir)
    steps = max(len(t) for t in traces.values())
    rows = []
    for ex_id, t in traces.items():
        rows += [(ex_id, r["step"], r["loss"], r["sim_target"], r["sim_clean"]) for r in t]
    _write_csv(out_dir / "loss_vs_step.csv", ["id", "step", "loss", "sim_target", "sim_clean"], rows)
    full = [t for t in traces.values() if len(t) == steps]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for t in traces.values():
            ax.plot([r["step"] for r in t], [r["loss"] for r in t], color="0.7", lw=0.7)
        if full:
            ax.plot(range(steps), np.mean([[r["loss"] for r in t] for t in full], axis=0),
                    color="C3", label=f"mean over {len(full)}")
            ax.legend(frameon=False)
        ax.set_xlabel("PGD step")
        ax.set_ylabel("TCM loss")
        _save(fig, out_dir / "loss_vs_step.png")
    return out_dir / "loss_vs_step.png"


def plot_score_vs_eps(points: list[tuple[float, float]], out_dir: str | os.PathLike) -> Optional[Path]:
    """``points`` are (eps in [0, 1] units, ensemble score); the x axis is shown on the 0-255 scale."""
    if not points:
        return None
    out_dir = Path(out_dir)
    points = sorted(points)
    _write_csv(out_dir / "score_vs_eps.csv", ["eps", "eps_255", "ensemble"],
               [(e, e * 255.0, s) for e, s in points])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot([e * 255.0 for e, _ in points], [s for _, s in points], marker="o", color="C0")
        ax.set_xlabel("perturbation budget eps (/255)")
        ax.set_ylabel("ensemble score")
        _save(fig, out_dir / "score_vs_eps.png")
    return out_dir / "score_vs_eps.png"


def plot_noise_curve(curve: list[dict], out_dir: str | os.PathLike) -> Optional[Path]:
    """``curve`` rows have ``std`` and ``mean`` (mean over examples and noise draws)."""
    curve = [c for c in curve if c.get("mean") is not None]
    if not curve:
        return None
    out_dir = Path(out_dir)
    _write_csv(out_dir / "noise_sensitivity.csv", ["std", "mean"], [(c["std"], c["mean"]) for c in curve])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot([c["std"] for c in curve], [c["mean"] for c in curve], marker="s", color="C2")
        ax.set_xlabel("Gaussian noise std")
        ax.set_ylabel("score vs target")
        _save(fig, out_dir / "noise_sensitivity.png")
    return out_dir / "noise_sensitivity.png"


def write_summary(path: str | os.PathLike, *, table_md: str, figures: dict[str, Optional[Path]],
                  notes: list[str], report: dict) -> None:
    lines = ["# Attack report", "", table_md.rstrip(), ""]
    main = report.get("coa", {})
    lines.append(f"Scored examples: {main.get('n_scored', 0)}; judge errors: {main.get('n_judge_errors', 0)}; "
                 f"victim errors: {main.get('n_victim_errors', 0)}.")
    if report.get("missing"):
        lines.append(f"Missing artifacts: {', '.join(report['missing'])}.")
    lines += ["", "## Figures", ""]
    for title, fig in figures.items():
        if fig is not None:
            lines.append(f"- {title}: `{Path(fig).name}` (data in `{Path(fig).with_suffix('.csv').name}`)")
    if notes:
        lines += ["", "## Notes", ""] + [f"- {n}" for n in notes]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_json(path: str | os.PathLike) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
