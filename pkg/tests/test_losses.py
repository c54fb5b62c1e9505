import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakloc import losses as ls
from weakloc import numerics as nm
from weakloc.datamodel import MODALITIES
from weakloc.losses import LossWeights, build_final_set, topk_select
from weakloc.model import PredictionTrace
from weakloc.numerics import Tape, Tensor


def col(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).reshape(-1, 1)


def fake_trace(y_hat, branch=None, alpha=None, encoded=None):
    frames = y_hat.rows if isinstance(y_hat, Tensor) else len(y_hat)
    branch = branch or {}
    alpha = alpha or {}
    encoded = encoded or {
        m: Tensor(np.random.default_rng(hash(m) % 100).normal(size=(frames, 4)))
        for m in MODALITIES
    }
    return PredictionTrace(
        frames=frames,
        y_hat=y_hat if isinstance(y_hat, Tensor) else Tensor(col(y_hat)),
        branch={m: branch.get(m) for m in MODALITIES},
        alpha={m: alpha.get(m) for m in MODALITIES},
        encoded=encoded,
        fused=None,
    )


class TestTopK:
    def test_matches_full_sort(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=9)
        got = topk_select(scores, 3)
        oracle = tuple(sorted(sorted(range(9), key=lambda i: (-scores[i], i))[:3]))
        assert got == oracle
        assert len(got) == 3

    def test_ties_go_to_smaller_indices(self):
        assert topk_select(np.ones(4), 2) == (0, 1)

    def test_minimum_one_selection(self):
        assert len(topk_select(np.array([0.3, 0.9]), 3)) == 1
        assert topk_select(np.array([0.3, 0.9]), 3) == (1,)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            topk_select(np.array([]), 3)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 2**31 - 1),
           st.floats(0.01, 100.0))
    def test_positive_scaling_invariance(self, frames, k_div, seed, factor):
        scores = np.random.default_rng(seed).normal(size=frames)
        assert topk_select(scores, k_div) == topk_select(factor * scores, k_div)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 50), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_cardinality_rule(self, frames, k_div, seed):
        scores = np.random.default_rng(seed).normal(size=frames)
        assert len(topk_select(scores, k_div)) == max(1, math.ceil(frames / k_div))


class TestBuildFinalSet:
    def test_identical_branches_collapse_to_fused(self):
        probs = col([0.9, 0.1, 0.8, 0.2, 0.3, 0.7])
        trace = fake_trace(
            probs[:, 0],
            branch={m: Tensor(probs) for m in MODALITIES},
            alpha={m: Tensor(np.full((6, 1), 0.5)) for m in MODALITIES},
        )
        sel = build_final_set(trace, 3)
        assert sel.final == sel.fused
        assert all(s == sel.fused for s in sel.per_modality.values())
        assert sel.n_sel == 2

    def test_importance_scaling_cannot_change_membership(self):
        rng = np.random.default_rng(1)
        probs = {m: Tensor(col(rng.uniform(0.01, 0.99, size=8))) for m in MODALITIES}
        low = fake_trace(
            rng.uniform(0.01, 0.99, size=8),
            branch=probs,
            alpha={"v": Tensor(np.full((8, 1), 0.9)),
                   "a": Tensor(np.full((8, 1), 1e-3)),
                   "l": Tensor(np.full((8, 1), 0.5))},
        )
        sel = build_final_set(low, 4)
        assert sel.per_modality["a"] == topk_select(low.branch_values("a"), 4)
        assert sel.importance["a"] == pytest.approx(1e-3)

    def test_matches_set_algebra_oracle(self):
        rng = np.random.default_rng(2)
        frames = 11
        branch = {m: Tensor(col(rng.uniform(size=frames))) for m in MODALITIES}
        alpha = {m: Tensor(col(rng.uniform(0.2, 0.8, size=frames))) for m in MODALITIES}
        y = rng.uniform(size=frames)
        trace = fake_trace(y, branch=branch, alpha=alpha)
        sel = build_final_set(trace, 3)

        expected = set(topk_select(y, 3))
        for m in MODALITIES:
            w = alpha[m].data.mean()
            expected |= set(topk_select(w * branch[m].data[:, 0], 3))
        assert set(sel.final) == expected
        assert trace.selection is sel

    def test_fused_only_mode(self):
        rng = np.random.default_rng(3)
        trace = fake_trace(
            rng.uniform(size=9),
            branch={m: Tensor(col(rng.uniform(size=9))) for m in MODALITIES},
        )
        sel = build_final_set(trace, 3, branch_aware=False)
        assert sel.final == sel.fused
        assert sel.per_modality == {}


class TestMilLoss:
    def run(self, probs, label, k_div=1):
        trace = fake_trace(probs)
        sel = build_final_set(trace, k_div, branch_aware=False)
        return ls.mil_loss(trace, sel, label).item(), sel

    def test_perfect_confidence_is_near_zero(self):
        loss, _ = self.run([1 - 1e-7] * 4, label=1)
        assert 0.0 <= loss < 1e-6

    def test_half_confidence_is_ln2(self):
        loss, _ = self.run([0.5] * 5, label=1)
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_negative_bag_direct_evaluation(self):
        trace = fake_trace([0.4, 0.2])
        sel = build_final_set(trace, 1, branch_aware=False)
        loss = ls.mil_loss(trace, sel, 0).item()
        assert loss == pytest.approx(-(math.log(0.8) + math.log(0.6)) / 2, abs=1e-12)

    def test_gradient_direction(self):
        rng = np.random.default_rng(4)
        probs = rng.uniform(0.2, 0.8, size=7)
        for label in (0, 1):
            tape = Tape()
            y_hat = tape.leaf(col(probs))
            trace = fake_trace(y_hat)
            sel = build_final_set(trace, 3, branch_aware=False)
            nm.backward(ls.mil_loss(trace, sel, label))
            picked = np.array(sel.final)
            others = np.setdiff1d(np.arange(7), picked)
            grads = y_hat.grad[:, 0]
            if label == 1:
                assert (grads[picked] < 0).all()
            else:
                assert (grads[picked] > 0).all()
            assert (grads[others] == 0).all()

    def test_non_negative(self):
        rng = np.random.default_rng(5)
        for label in (0, 1):
            loss, _ = self.run(rng.uniform(0.01, 0.99, size=10), label, k_div=3)
            assert loss >= 0.0


class TestSmoothness:
    def test_constant_sequence(self):
        assert ls.smoothness_loss(Tensor(col([0.4] * 6))).item() == 0.0

    def test_step(self):
        assert ls.smoothness_loss(Tensor(col([0.0, 1.0]))).item() == 1.0

    def test_ramp(self):
        assert ls.smoothness_loss(Tensor(col([0.0, 0.5, 1.0]))).item() == pytest.approx(0.25)

    def test_single_frame_is_zero(self):
        assert ls.smoothness_loss(Tensor(col([0.7]))).item() == 0.0

    def test_linear_ramp_minimises_over_grid(self):
        ramp = ls.smoothness_loss(Tensor(col([0.0, 1 / 3, 2 / 3, 1.0]))).item()
        grid = np.linspace(0.0, 1.0, 31)
        best = min(
            ls.smoothness_loss(Tensor(col([0.0, a, b, 1.0]))).item()
            for a in grid
            for b in grid
        )
        assert ramp <= best + 1e-12


def batch_of_traces(n_videos, frames, dim=5, seed=0):
    rng = np.random.default_rng(seed)
    traces = []
    feats = {m: [] for m in MODALITIES}
    for i in range(n_videos):
        encoded = {}
        for m in MODALITIES:
            arr = rng.normal(size=(frames, dim))
            encoded[m] = Tensor(arr)
            feats[m].append(arr)
        traces.append(fake_trace(rng.uniform(0.1, 0.9, size=frames), encoded=encoded))
    return traces, feats


def brute_force_contrastive(feats, tau):
    """Exhaustive double-loop evaluation over all anchors and candidates."""

    def unit(v):
        n = np.linalg.norm(v)
        return v / n if n > 1e-12 else v / 1e-12

    pair_losses = []
    for m, n in [("v", "a"), ("a", "l"), ("v", "l")]:
        anchor_terms = []
        for i, fm in enumerate(feats[m]):
            for t in range(fm.shape[0]):
                a = unit(fm[t])
                pos = math.exp(np.dot(a, unit(feats[n][i][t])) / tau)
                den = 0.0
                for j, fn in enumerate(feats[n]):
                    for s in range(fn.shape[0]):
                        den += math.exp(np.dot(a, unit(fn[s])) / tau)
                anchor_terms.append(-math.log(pos / den))
        pair_losses.append(sum(anchor_terms) / len(anchor_terms))
    return sum(pair_losses) / 3.0


class TestContrastive:
    def test_single_candidate_is_zero(self):
        traces, _ = batch_of_traces(1, 1, seed=6)
        loss = ls.contrastive_loss(traces, LossWeights()).item()
        assert abs(loss) < 1e-12

    def test_uniform_similarity_is_log_candidates(self):
        frames, n_videos = 3, 2
        row = np.full((1, 4), 0.5)
        traces = []
        for _ in range(n_videos):
            encoded = {m: Tensor(np.repeat(row, frames, axis=0)) for m in MODALITIES}
            traces.append(fake_trace([0.5] * frames, encoded=encoded))
        loss = ls.contrastive_loss(traces, LossWeights()).item()
        assert loss == pytest.approx(math.log(n_videos * frames), abs=1e-9)

    def test_matches_brute_force_enumeration(self):
        traces, feats = batch_of_traces(2, 3, seed=7)
        loss = ls.contrastive_loss(traces, LossWeights(temperature=0.1)).item()
        assert loss == pytest.approx(brute_force_contrastive(feats, 0.1), abs=1e-9)

    def test_non_negative_and_bounded_below_by_zero(self):
        for seed in range(3):
            traces, _ = batch_of_traces(2, 4, seed=seed)
            assert ls.contrastive_loss(traces, LossWeights()).item() >= 0.0

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            ls.contrastive_loss([], LossWeights())

    def test_subsample_cap_is_deterministic(self):
        traces, _ = batch_of_traces(2, 10, seed=8)
        w = LossWeights(max_contrast_frames=4, seed=5)
        a = ls.contrastive_loss(traces, w).item()
        traces2, _ = batch_of_traces(2, 10, seed=8)
        b = ls.contrastive_loss(traces2, w).item()
        assert a == b
        full = ls.contrastive_loss(traces, LossWeights()).item()
        assert a != full  # caps change the candidate set


class TestTotalLoss:
    def test_component_sum(self):
        traces, _ = batch_of_traces(3, 5, seed=9)
        weights = LossWeights()
        out = ls.total_loss(traces, [1, 0, 1], weights)
        expected = out.mil + 0.1 * out.smooth + 0.2 * out.contrast
        assert out.total == pytest.approx(expected, abs=1e-12)
        # default weights combine components (1.0, 0.5, 0.25) into 1.10
        assert 1.0 + weights.smooth_weight * 0.5 + weights.contrast_weight * 0.25 == pytest.approx(1.10)

    def test_zero_weights_leave_mil_only(self):
        traces, _ = batch_of_traces(2, 4, seed=10)
        out = ls.total_loss(traces, [1, 0], LossWeights(smooth_weight=0.0, contrast_weight=0.0))
        assert out.total == pytest.approx(out.mil, abs=1e-12)

    def test_graph_is_differentiable(self):
        tape = Tape()
        rng = np.random.default_rng(11)
        traces = []
        for i in range(2):
            y = tape.leaf(col(rng.uniform(0.2, 0.8, size=4)))
            encoded = {m: tape.leaf(rng.normal(size=(4, 3))) for m in MODALITIES}
            traces.append(fake_trace(y, encoded=encoded))
        out = ls.total_loss(traces, [1, 0], LossWeights())
        nm.backward(out.graph)
        assert any((t.y_hat.grad != 0).any() for t in traces)

    def test_csv_row(self):
        traces, _ = batch_of_traces(1, 3, seed=12)
        out = ls.total_loss(traces, [1], LossWeights())
        row = out.csv_row(step=7)
        assert row[0] == 7 and len(row) == 5
        assert float(row[4]) == pytest.approx(out.total)
