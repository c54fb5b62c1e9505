"""Frame-level evaluation: average precision, ROC area, and PR area.

All metrics are computed over one combined ranking of every frame in a
split. Ties are handled deterministically: equal scores form one rank
block, blocks get 0.5 credit per tied positive-negative pair in the ROC
statistic, and precision/recall move block-at-a-time. Conventions differ on
whether "AUC" means the ROC or the precision-recall area, so both are
reported; `roc_auc` is the headline value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class MetricUndefinedError(ValueError):
    """The metric has no defined value on this input (e.g. one class only)."""


class EvaluationError(ValueError):
    """A split cannot be evaluated (e.g. a sample is missing ground truth)."""


@dataclass
class EvalReport:
    map: float | None
    roc_auc: float | None
    pr_auc: float | None
    frame_count: int
    positive_fraction: float
    notes: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "map": self.map,
                "roc_auc": self.roc_auc,
                "pr_auc": self.pr_auc,
                "frame_count": self.frame_count,
                "positive_fraction": self.positive_fraction,
                "notes": self.notes,
            },
            indent=1,
        )

    def csv_row(self) -> list:
        fmt = lambda v: "" if v is None else repr(v)
        return [
            fmt(self.map), fmt(self.roc_auc), fmt(self.pr_auc),
            self.frame_count, repr(self.positive_fraction),
        ]


def _as_arrays(scores, truth):
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(truth).ravel().astype(np.int64)
    if s.shape != t.shape:
        raise ValueError(f"scores ({s.shape}) and truth ({t.shape}) differ in length")
    if s.size == 0:
        raise MetricUndefinedError("no frames to evaluate")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    return s, t


def _blocks(scores, truth):
    """Tie blocks in descending score order: (positives, totals) per block."""
    order = np.argsort(-scores, kind="mergesort")
    s, t = scores[order], truth[order]
    boundaries = np.flatnonzero(np.diff(s)) + 1
    pos = np.add.reduceat(t, np.r_[0, boundaries])
    tot = np.diff(np.r_[0, boundaries, s.size])
    return pos, tot


def average_precision(scores, truth) -> float:
    """Step-integral AP over the descending-score ranking with tie blocks.

    Each block contributes (recall gain) * (precision counting the whole
    block); with unique scores this reduces to the usual mean of precision
    at each positive's rank.
    """
    s, t = _as_arrays(scores, truth)
    n_pos = int(t.sum())
    if n_pos == 0:
        raise MetricUndefinedError("average precision needs at least one positive frame")
    pos, tot = _blocks(s, t)
    tp = np.cumsum(pos)
    rank = np.cumsum(tot)
    return float(np.sum((pos / n_pos) * (tp / rank)))


def roc_auc(scores, truth) -> float:
    """Probability a positive outranks a negative, ties counted half."""
    s, t = _as_arrays(scores, truth)
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("ROC area needs both classes present")
    pos, tot = _blocks(s, t)
    neg = tot - pos
    neg_below = n_neg - np.cumsum(neg)  # negatives ranked strictly lower
    wins = np.sum(pos * neg_below) + 0.5 * np.sum(pos * neg)
    return float(wins / (n_pos * n_neg))


def pr_auc(scores, truth) -> float:
    """Trapezoidal area under the precision-recall curve.

    The curve starts at (recall 0, precision 1) and adds one point per tie
    block in descending score order.
    """
    s, t = _as_arrays(scores, truth)
    n_pos = int(t.sum())
    if n_pos == 0:
        raise MetricUndefinedError("PR area needs at least one positive frame")
    pos, tot = _blocks(s, t)
    recall = np.cumsum(pos) / n_pos
    precision = np.cumsum(pos) / np.cumsum(tot)
    r = np.r_[0.0, recall]
    p = np.r_[1.0, precision]
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


def evaluate_split(samples, traces) -> EvalReport:
    """Concatenate every frame of a labelled split and score the ranking.

    Metrics undefined on this split (single-class input) are reported as
    None with an explanatory note instead of failing the whole report.
    """
    if len(samples) != len(traces):
        raise EvaluationError("need one trace per sample")
    scores, truth = [], []
    for sample, trace in zip(samples, traces):
        if sample.frame_truth is None:
            raise EvaluationError(f"sample {sample.id!r} has no frame-level ground truth")
        y = trace.y_hat_values()
        if y.shape[0] != sample.frames:
            raise EvaluationError(
                f"sample {sample.id!r}: trace has {y.shape[0]} frames, expected {sample.frames}"
            )
        scores.append(y)
        truth.append(sample.frame_truth)
    s = np.concatenate(scores)
    t = np.concatenate(truth)

    values: dict[str, float | None] = {}
    notes: dict[str, str] = {}
    for name, fn in (("map", average_precision), ("roc_auc", roc_auc), ("pr_auc", pr_auc)):
        try:
            values[name] = fn(s, t)
        except MetricUndefinedError as exc:
            values[name] = None
            notes[name] = str(exc)
    return EvalReport(
        map=values["map"],
        roc_auc=values["roc_auc"],
        pr_auc=values["pr_auc"],
        frame_count=int(s.size),
        positive_fraction=float(t.mean()),
        notes=notes,
    )
