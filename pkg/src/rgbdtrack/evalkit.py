"""Tracking evaluation: overlap, success/AUC, precision/recall/F, attributes.

Short-term evaluation reduces per-frame overlaps to a success curve over
101 overlap thresholds and its AUC. Long-term evaluation sweeps a
confidence threshold tau: a frame's prediction survives when its
confidence is >= tau, precision averages overlap over surviving
predictions, recall averages it over visible frames, and the F-score peak
across the sweep summarizes the tracker. All reductions use exact float
summation (math.fsum) so independent re-implementations can match
bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np

from . import boxes as boxlib

iou = boxlib.iou

SWEEP_POINTS = 101


class TraceError(ValueError):
    """Raised for malformed or inconsistent prediction traces."""


# ---------------------------------------------------------------------------
# prediction traces

@dataclasses.dataclass
class PredictionTrace:
    """Per-frame tracker output: a box with confidence, or target-absent."""

    boxes: list          # np.ndarray (x, y, w, h) or None
    confidences: list    # float in [0, 1], None exactly when box is None

    def __post_init__(self):
        if len(self.boxes) != len(self.confidences):
            raise TraceError(
                f"trace holds {len(self.boxes)} boxes but "
                f"{len(self.confidences)} confidences")
        for t, (box, conf) in enumerate(zip(self.boxes, self.confidences)):
            if (box is None) != (conf is None):
                raise TraceError(
                    f"frame {t}: confidence must accompany a box")
            if conf is not None and not 0.0 <= conf <= 1.0:
                raise TraceError(
                    f"frame {t}: confidence {conf} outside [0, 1]")

    def __len__(self) -> int:
        return len(self.boxes)


def format_trace(trace: PredictionTrace) -> str:
    lines = []
    for box, conf in zip(trace.boxes, trace.confidences):
        if box is None:
            lines.append("absent")
        else:
            x, y, w, h = (float(v) for v in box)
            lines.append(f"{x!r},{y!r},{w!r},{h!r},{float(conf)!r}")
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> PredictionTrace:
    boxes: list = []
    confs: list = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line == "absent":
            boxes.append(None)
            confs.append(None)
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise TraceError(
                f"line {lineno}: expected 'x,y,w,h,conf' or 'absent', "
                f"got {raw!r}")
        try:
            values = [float(p) for p in parts]
        except ValueError as exc:
            raise TraceError(f"line {lineno}: {exc}") from exc
        boxes.append(np.array(values[:4]))
        confs.append(values[4])
    return PredictionTrace(boxes, confs)


def read_trace(path: str | Path) -> PredictionTrace:
    return parse_trace(Path(path).read_text(encoding="utf-8"))


def write_trace(trace: PredictionTrace, path: str | Path) -> None:
    Path(path).write_text(format_trace(trace), encoding="utf-8")


# ---------------------------------------------------------------------------
# metric curves

@dataclasses.dataclass
class MetricCurve:
    thresholds: np.ndarray
    values: np.ndarray
    summary: float

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.thresholds.shape != self.values.shape:
            raise ValueError("MetricCurve: thresholds/values length mismatch")
        if np.any(np.diff(self.thresholds) <= 0):
            raise ValueError("MetricCurve: thresholds must ascend")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("MetricCurve: values outside [0, 1]")


def sweep_thresholds(n: int = SWEEP_POINTS) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def success_auc(overlaps) -> tuple[MetricCurve, float]:
    """Success curve (fraction of overlaps > theta) and its AUC (mean)."""
    overlaps = [float(v) for v in overlaps]
    if not overlaps:
        raise ValueError("success_auc: empty overlap list")
    thresholds = sweep_thresholds()
    values = [sum(1 for s in overlaps if s > theta) / len(overlaps)
              for theta in thresholds]
    auc = math.fsum(values) / len(values)
    return MetricCurve(thresholds, np.array(values), auc), auc


def pr_re_f(trace: PredictionTrace, gt_boxes, visible):
    """Precision/recall/F curves over the confidence sweep, plus peak F.

    At threshold tau a prediction survives when its confidence >= tau.
    A frame contributes Omega = iou(prediction, groundtruth) when the
    target is visible there and 0 otherwise (a surviving prediction on an
    absent frame is a penalized false positive). Pr averages Omega over
    surviving predictions, Re over visible frames. Conventions: Pr(tau)=0
    when nothing survives, Re=0 for a sequence with no visible frame, and
    the peak reports the lowest tau on ties.

    Returns (pr_curve, re_curve, f_curve, peak_f, peak_tau).
    """
    gt_boxes = list(gt_boxes)
    visible = [bool(v) for v in visible]
    if not len(trace) == len(gt_boxes) == len(visible):
        raise ValueError(
            f"pr_re_f: trace length {len(trace)} vs groundtruth "
            f"{len(gt_boxes)} vs visibility {len(visible)}")
    omega = []
    for box, vis, gt in zip(trace.boxes, visible, gt_boxes):
        if box is None:
            omega.append(None)        # no prediction this frame
        elif vis and gt is not None:
            omega.append(iou(box, gt))
        else:
            omega.append(0.0)
    n_visible = sum(visible)
    thresholds = sweep_thresholds()
    pr_values, re_values, f_values = [], [], []
    for tau in thresholds:
        surviving = [om for om, conf in zip(omega, trace.confidences)
                     if om is not None and conf >= tau]
        visible_sum = math.fsum(
            om for om, conf, vis in zip(omega, trace.confidences, visible)
            if vis and om is not None and conf >= tau)
        pr = math.fsum(surviving) / len(surviving) if surviving else 0.0
        re = visible_sum / n_visible if n_visible else 0.0
        f = 2.0 * pr * re / (pr + re) if pr + re > 0 else 0.0
        pr_values.append(pr)
        re_values.append(re)
        f_values.append(f)
    peak_idx = max(range(len(f_values)), key=lambda i: (f_values[i], -i))
    peak_f = f_values[peak_idx]
    peak_tau = float(thresholds[peak_idx])
    pr_curve = MetricCurve(thresholds, np.array(pr_values), pr_values[peak_idx])
    re_curve = MetricCurve(thresholds, np.array(re_values), re_values[peak_idx])
    f_curve = MetricCurve(thresholds, np.array(f_values), peak_f)
    return pr_curve, re_curve, f_curve, peak_f, peak_tau


def f_score(pr: float, re: float) -> float:
    return 2.0 * pr * re / (pr + re) if pr + re > 0 else 0.0


def mean_overlap(trace: PredictionTrace, gt_boxes, visible) -> float:
    """Average overlap over visible frames; frames without a prediction
    count as zero overlap."""
    gt_boxes = list(gt_boxes)
    visible = [bool(v) for v in visible]
    if not len(trace) == len(gt_boxes) == len(visible):
        raise ValueError(
            f"mean_overlap: trace length {len(trace)} vs groundtruth "
            f"{len(gt_boxes)} vs visibility {len(visible)}")
    terms = [iou(box, gt) if box is not None else 0.0
             for box, gt, vis in zip(trace.boxes, gt_boxes, visible) if vis]
    if not terms:
        raise ValueError("mean_overlap: no visible frames")
    return math.fsum(terms) / len(terms)


def attribute_report(scores, tags_per_sequence,
                     known_tags=None) -> list[tuple[str, float]]:
    """Mean score per attribute tag, sorted by tag name.

    Tags without any sequence are omitted. Unknown tags raise.
    """
    from .synthdata import ATTRIBUTE_TAGS
    if known_tags is None:
        known_tags = ATTRIBUTE_TAGS
    scores = [float(s) for s in scores]
    tags_per_sequence = [tuple(t) for t in tags_per_sequence]
    if len(scores) != len(tags_per_sequence):
        raise ValueError("attribute_report: scores/tags length mismatch")
    groups: dict[str, list[float]] = {}
    for score, tags in zip(scores, tags_per_sequence):
        for tag in tags:
            if tag not in known_tags:
                raise ValueError(f"attribute_report: unknown tag {tag!r}")
            groups.setdefault(tag, []).append(score)
    return [(tag, math.fsum(vals) / len(vals))
            for tag, vals in sorted(groups.items())]
