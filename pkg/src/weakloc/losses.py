"""Training objectives: cross-modal contrastive alignment, modality-aware
top-K multiple-instance loss, smoothness regularisation, and their weighted
combination.

Frame selection is discrete: the top-scoring index sets are computed from
the current forward values and then treated as constants inside the loss
graph, so gradients flow only through the selected probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .datamodel import MODALITIES
from .numerics import Tensor

CONTRAST_PAIRS = (("v", "a"), ("a", "l"), ("v", "l"))


@dataclass(frozen=True)
class LossWeights:
    """Loss hyperparameters.

    `k_divisor` sets the adaptive selection size max(1, ceil(T / k_divisor)).
    `max_contrast_frames` caps how many timestamps per video enter the
    contrastive denominator (None = all), subsampled deterministically from
    `seed`; the same subset is used for every modality of a video so the
    positive pair always stays in the candidate set.
    """

    smooth_weight: float = 0.1
    contrast_weight: float = 0.2
    temperature: float = 0.1
    k_divisor: int = 3
    max_contrast_frames: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.smooth_weight < 0 or self.contrast_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.k_divisor < 1:
            raise ValueError("k_divisor must be >= 1")


@dataclass
class SelectionResult:
    """Index sets feeding the MIL loss for one video."""

    per_modality: dict[str, tuple[int, ...]]
    fused: tuple[int, ...]
    final: tuple[int, ...]
    importance: dict[str, float]
    n_sel: int


@dataclass
class LossBreakdown:
    """Component values for one step, plus the differentiable total."""

    mil: float
    smooth: float
    contrast: float
    total: float
    graph: Tensor = field(repr=False, default=None)

    def csv_row(self, step: int) -> list:
        return [step, repr(self.mil), repr(self.smooth), repr(self.contrast), repr(self.total)]


def selection_size(frames: int, k_divisor: int) -> int:
    return max(1, math.ceil(frames / k_divisor))


def topk_select(scores: np.ndarray, k_divisor: int) -> tuple[int, ...]:
    """Indices of the largest scores, ties broken toward the smaller index.

    Returns max(1, ceil(T / k_divisor)) indices in ascending order.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("topk_select needs at least one score")
    if not np.isfinite(scores).all():
        raise ValueError("topk_select needs finite scores")
    n_sel = selection_size(scores.size, k_divisor)
    order = np.argsort(-scores, kind="stable")  # stable: equal scores keep index order
    return tuple(sorted(int(i) for i in order[:n_sel]))


def build_final_set(trace, k_divisor: int, branch_aware: bool = True) -> SelectionResult:
    """Select the frames the MIL loss will see for one video.

    Per-video modality importance is the mean gate value; branch scores are
    rescaled by it before their top-K (which cannot change membership, but is
    the documented reading of the merge rule) and the final set is the plain
    index union with the fused selection.
    """
    y_hat = trace.y_hat_values()
    fused_sel = topk_select(y_hat, k_divisor)
    per_modality: dict[str, tuple[int, ...]] = {}
    importance: dict[str, float] = {}
    final = set(fused_sel)
    if branch_aware:
        for m in MODALITIES:
            probs = trace.branch_values(m)
            if probs is None:
                continue
            w_m = float(trace.alpha_values(m).mean())
            importance[m] = w_m
            per_modality[m] = topk_select(w_m * probs, k_divisor)
            final.update(per_modality[m])
    result = SelectionResult(
        per_modality=per_modality,
        fused=fused_sel,
        final=tuple(sorted(final)),
        importance=importance,
        n_sel=selection_size(trace.frames, k_divisor),
    )
    trace.selection = result
    return result


def mil_loss(trace, selection: SelectionResult, label: int) -> Tensor:
    """Bag loss over the selected frames.

    Positive bags pull the selected fused probabilities toward 1; negative
    bags push the same highest-scoring frames toward 0.
    """
    picked = nm.gather_rows(trace.y_hat, selection.final)
    if label == 1:
        logs = nm.log_clamped(picked)
    else:
        ones = Tensor(np.ones((len(selection.final), 1)))
        logs = nm.log_clamped(nm.sub(ones, picked))
    return nm.scale(nm.mean_all(logs), -1.0)


def smoothness_loss(y_hat: Tensor) -> Tensor:
    """Mean squared difference of adjacent frame probabilities (0 for T=1)."""
    frames = y_hat.rows
    if frames < 2:
        return Tensor(np.zeros((1, 1)))
    lead = nm.gather_rows(y_hat, np.arange(1, frames))
    lag = nm.gather_rows(y_hat, np.arange(frames - 1))
    diff = nm.sub(lead, lag)
    return nm.mean_all(nm.mul(diff, diff))


def _contrast_indices(frames: int, video_index: int, weights: LossWeights) -> np.ndarray:
    cap = weights.max_contrast_frames
    if cap is None or frames <= cap:
        return np.arange(frames)
    rng = np.random.default_rng([weights.seed, 3, video_index])
    return np.sort(rng.choice(frames, size=cap, replace=False))


def contrastive_loss(traces, weights: LossWeights) -> Tensor:
    """Pull same-timestamp features of different modalities together.

    For each directed modality pair the anchors are every (video, frame) in
    the batch; candidates are the other modality's features at every
    (video, frame); the matching position is the positive. Each anchor
    contributes the cross-entropy of the softmax over similarities/temperature,
    and the three pair losses are averaged.
    """
    if not traces:
        raise ValueError("contrastive_loss needs at least one trace")
    chosen = [_contrast_indices(tr.frames, i, weights) for i, tr in enumerate(traces)]
    normalized = {
        m: nm.concat_rows(
            [nm.l2_normalize_rows(nm.gather_rows(tr.encoded[m], idx))
             for tr, idx in zip(traces, chosen)]
        )
        for m in MODALITIES
    }
    n_total = sum(len(idx) for idx in chosen)
    eye = Tensor(np.eye(n_total))
    pair_losses = []
    for m, n in CONTRAST_PAIRS:
        sims = nm.scale(
            nm.matmul(normalized[m], nm.transpose(normalized[n])),
            1.0 / weights.temperature,
        )
        lse = nm.logsumexp_rows(sims)  # N x 1
        positive = nm.row_sums(nm.mul(sims, eye))  # N x 1 diagonal
        pair_losses.append(nm.mean_all(nm.sub(lse, positive)))
    summed = nm.add(nm.add(pair_losses[0], pair_losses[1]), pair_losses[2])
    return nm.scale(summed, 1.0 / len(CONTRAST_PAIRS))


def _mean_scalars(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = nm.add(acc, t)
    return nm.scale(acc, 1.0 / len(terms))


def total_loss(traces, labels, weights: LossWeights, config=None) -> LossBreakdown:
    """Weighted sum of the three objectives over one batch.

    The bag and smoothness terms are averaged over videos; the contrastive
    term is computed once over the whole batch. Config toggles zero out
    disabled terms; without the modality-aware selection the bag loss falls
    back to the fused top-K only.
    """
    if len(traces) != len(labels) or not traces:
        raise ValueError("need one label per trace and a non-empty batch")
    branch_aware = config is None or config.use_mamil
    use_contrast = config is None or config.use_contrast

    mil_terms, smooth_terms = [], []
    for trace, label in zip(traces, labels):
        selection = build_final_set(trace, weights.k_divisor, branch_aware=branch_aware)
        mil_terms.append(mil_loss(trace, selection, label))
        smooth_terms.append(smoothness_loss(trace.y_hat))
    mil_mean = _mean_scalars(mil_terms)
    smooth_mean = _mean_scalars(smooth_terms)

    total = nm.add(mil_mean, nm.scale(smooth_mean, weights.smooth_weight))
    if use_contrast:
        contrast = contrastive_loss(traces, weights)
        total = nm.add(total, nm.scale(contrast, weights.contrast_weight))
        contrast_value = contrast.item()
    else:
        contrast_value = 0.0

    return LossBreakdown(
        mil=mil_mean.item(),
        smooth=smooth_mean.item(),
        contrast=contrast_value,
        total=total.item(),
        graph=total,
    )
