"""Evaluation report rendering.

Writes the delimited outputs the tooling consumes (``metric,tag,value``
lines and a threshold-sweep curve dump) and renders the matching figures
to image files.  Figures are drawn on explicit ``Figure`` objects so no
GUI backend or global pyplot state is involved.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from .evalkit import MetricCurve

__all__ = [
    "write_metric_lines",
    "write_curve_dump",
    "parse_loss_log",
    "success_figure",
    "prf_figure",
    "loss_figure",
]


def write_metric_lines(path: str | Path,
                       rows: list[tuple[str, str, float]]) -> None:
    """Write ``metric,tag,value`` lines; values use repr for exactness."""
    lines = ["metric,tag,value"]
    for metric, tag, value in rows:
        lines.append(f"{metric},{tag},{repr(float(value))}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_curve_dump(path: str | Path, pr: MetricCurve, re: MetricCurve,
                     f: MetricCurve) -> None:
    """Write the confidence sweep as ``tau,pr,re,f`` lines."""
    if not (np.array_equal(pr.thresholds, re.thresholds)
            and np.array_equal(pr.thresholds, f.thresholds)):
        raise ValueError("curve dump: threshold grids differ")
    lines = ["tau,pr,re,f"]
    for i, tau in enumerate(pr.thresholds):
        lines.append(",".join(repr(float(v)) for v in
                              (tau, pr.values[i], re.values[i], f.values[i])))
    Path(path).write_text("\n".join(lines) + "\n")


def parse_loss_log(lines: list[str]) -> np.ndarray:
    """Parse ``epoch,L_total,L_cls,L_bbox,lr`` lines into an (n, 5) array."""
    rows = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ValueError(f"loss log line {lineno}: expected 5 fields, "
                             f"got {line!r}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ValueError(f"loss log line {lineno}: non-numeric field "
                             f"in {line!r}") from None
    if not rows:
        raise ValueError("loss log is empty")
    return np.array(rows, dtype=np.float64)


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    return path


def success_figure(curve: MetricCurve, auc: float, path: str | Path) -> Path:
    """Success rate vs overlap threshold, AUC in the legend."""
    fig = Figure(figsize=(5.0, 4.0))
    ax = fig.add_subplot()
    ax.plot(curve.thresholds, curve.values, color="tab:blue",
            label=f"AUC = {auc:.3f}")
    ax.set_xlabel("overlap threshold")
    ax.set_ylabel("success rate")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower left")
    ax.set_title("Success")
    return _save(fig, path)


def prf_figure(pr: MetricCurve, re: MetricCurve, f: MetricCurve,
               peak_f: float, peak_tau: float, path: str | Path) -> Path:
    """Precision / recall / F-score vs confidence threshold."""
    fig = Figure(figsize=(5.0, 4.0))
    ax = fig.add_subplot()
    ax.plot(pr.thresholds, pr.values, color="tab:blue", label="precision")
    ax.plot(re.thresholds, re.values, color="tab:orange", label="recall")
    ax.plot(f.thresholds, f.values, color="tab:green",
            label=f"F (peak {peak_f:.3f})")
    ax.axvline(peak_tau, color="tab:green", linestyle=":", alpha=0.6)
    ax.set_xlabel("confidence threshold")
    ax.set_ylabel("score")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower left")
    ax.set_title("Precision / recall / F")
    return _save(fig, path)


def loss_figure(history: np.ndarray, path: str | Path) -> Path:
    """Per-epoch training losses; expects parse_loss_log output."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2 or history.shape[1] != 5:
        raise ValueError(f"loss history must be (n, 5), got {history.shape}")
    fig = Figure(figsize=(5.0, 4.0))
    ax = fig.add_subplot()
    ax.plot(history[:, 0], history[:, 1], color="tab:blue", label="total")
    ax.plot(history[:, 0], history[:, 2], color="tab:orange",
            label="classification")
    ax.plot(history[:, 0], history[:, 3], color="tab:green", label="box")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="upper right")
    ax.set_title("Training loss")
    return _save(fig, path)
