"""Deterministic mini-batch training with Adam, checkpointing, and
validation-driven model selection.

Ground-truth frame labels never enter this module's training path: batches
carry only features and the video-level label, and validation quality is
delegated to the metrics module, which owns evaluation inputs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .datamodel import read_matrix, write_matrix
from .losses import LossWeights, total_loss
from .metrics import evaluate_split
from .model import ModelConfig, ModelParams, forward, parameter_shapes


class CheckpointError(ValueError):
    """A checkpoint does not match the requested model configuration."""


class TrainingDiverged(RuntimeError):
    """The loss became non-finite; carries the last good checkpoint path."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 5
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ValueError("lr must be positive; batch_size, epochs, eval_every >= 1")


@dataclass
class TrainState:
    step: int = 0
    moment1: dict = field(default_factory=dict)
    moment2: dict = field(default_factory=dict)
    best_val_map: float | None = None
    best_checkpoint: str | None = None
    last_checkpoint: str | None = None
    history: list = field(default_factory=list)


def init_state(params: ModelParams) -> TrainState:
    state = TrainState()
    for name, arr in params.arrays.items():
        state.moment1[name] = np.zeros_like(arr)
        state.moment2[name] = np.zeros_like(arr)
    return state


def adam_step(params: ModelParams, grads: dict, state: TrainState, config: TrainConfig) -> None:
    """One Adam update with bias correction.

    Entries whose gradient is exactly zero are left untouched, moments
    included, so parameters outside the current computation never drift.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - config.beta1**t
    c2 = 1.0 - config.beta2**t
    for name, theta in params.arrays.items():
        g = grads.get(name)
        if g is None:
            raise nm.NumericError(f"missing gradient for parameter {name!r}")
        if g.shape != theta.shape:
            raise nm.ShapeError(
                f"gradient for {name!r} has shape {g.shape}, expected {theta.shape}"
            )
        if not np.isfinite(g).all():
            raise nm.NumericError(f"non-finite gradient for parameter {name!r}")
        m = config.beta1 * state.moment1[name] + (1.0 - config.beta1) * g
        v = config.beta2 * state.moment2[name] + (1.0 - config.beta2) * g * g
        update = config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        mask = g != 0.0
        params.arrays[name] = np.where(mask, theta - update, theta)
        state.moment1[name] = np.where(mask, m, state.moment1[name])
        state.moment2[name] = np.where(mask, v, state.moment2[name])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_FINGERPRINT_FIELDS = (
    "hidden", "heads", "ffn_width", "input_dims", "use_encoder", "use_cma",
    "use_dms", "use_contrast", "use_mamil", "fusion_variant", "positional_encoding",
)


def _fingerprint(config: ModelConfig) -> dict:
    raw = asdict(config)
    fp = {k: raw[k] for k in _FINGERPRINT_FIELDS}
    fp["input_dims"] = list(fp["input_dims"])
    return fp


def save_checkpoint(params: ModelParams, directory) -> str:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"config": _fingerprint(params.config), "parameters": {}}
    for name, arr in params.arrays.items():
        filename = name.replace(".", "_") + ".bin"
        write_matrix(directory / filename, arr, dtype="f8")
        index["parameters"][name] = {"file": filename, "shape": list(arr.shape)}
    (directory / "params.json").write_text(json.dumps(index, indent=1))
    return str(directory)


def load_checkpoint(directory, config: ModelConfig) -> ModelParams:
    directory = Path(directory)
    index_path = directory / "params.json"
    if not index_path.exists():
        raise CheckpointError(f"checkpoint index missing: {index_path}")
    index = json.loads(index_path.read_text())
    want = _fingerprint(config)
    have = index.get("config", {})
    for key, value in want.items():
        if have.get(key) != value:
            raise CheckpointError(
                f"checkpoint config mismatch on {key!r}: checkpoint has "
                f"{have.get(key)!r}, requested {value!r}"
            )
    expected = parameter_shapes(config)
    listed = index["parameters"]
    if set(listed) != set(expected):
        raise CheckpointError(
            f"checkpoint parameters {sorted(listed)} do not match the "
            f"config inventory {sorted(expected)}"
        )
    arrays = {}
    for name, meta in listed.items():
        arr = read_matrix(directory / meta["file"])
        if arr.shape != expected[name]:
            raise CheckpointError(
                f"parameter {name!r} has shape {arr.shape}, expected {expected[name]}"
            )
        arrays[name] = arr
    params = ModelParams(arrays, config)
    params.audit_shapes()
    return params


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train(
    train_samples,
    val_samples,
    model_config: ModelConfig,
    train_config: TrainConfig,
    loss_weights: LossWeights | None = None,
) -> tuple[ModelParams, TrainState]:
    """Epoch loop: seeded shuffle, forward, backward, Adam; best-on-val kept.

    Fully deterministic given (model seed, train seed, loss seed) and the
    sample list. Raises TrainingDiverged with the last good checkpoint
    reference if the loss goes non-finite.
    """
    if not train_samples:
        raise ValueError("training needs at least one sample")
    weights = loss_weights if loss_weights is not None else LossWeights()
    params = ModelParams.build(model_config)
    params.audit_shapes()
    state = init_state(params)
    ckpt_dir = Path(train_config.checkpoint_dir) if train_config.checkpoint_dir else None
    if ckpt_dir is not None:
        state.last_checkpoint = save_checkpoint(params, ckpt_dir / "last")

    n = len(train_samples)
    for epoch in range(1, train_config.epochs + 1):
        order = np.random.default_rng([train_config.seed, epoch]).permutation(n)
        for start in range(0, n, train_config.batch_size):
            batch = [train_samples[i] for i in order[start : start + train_config.batch_size]]
            labels = [s.label for s in batch]

            tape = nm.Tape()
            leaves = params.as_leaves(tape)
            traces = [forward(s, leaves, model_config) for s in batch]
            if any(not np.isfinite(t.y_hat.data).all() for t in traces):
                raise TrainingDiverged(
                    f"forward pass became non-finite at step {state.step + 1}",
                    last_good=state.best_checkpoint or state.last_checkpoint,
                )
            breakdown = total_loss(traces, labels, weights, model_config)
            if not math.isfinite(breakdown.total):
                raise TrainingDiverged(
                    f"loss became non-finite at step {state.step + 1}",
                    last_good=state.best_checkpoint or state.last_checkpoint,
                )
            nm.backward(breakdown.graph)
            grads = {name: leaves[name].grad for name in params.arrays}
            adam_step(params, grads, state, train_config)
            state.history.append(
                {
                    "step": state.step,
                    "epoch": epoch,
                    "mil": breakdown.mil,
                    "smooth": breakdown.smooth,
                    "con": breakdown.contrast,
                    "total": breakdown.total,
                    "val_map": None,
                }
            )

        if epoch % train_config.eval_every == 0 or epoch == train_config.epochs:
            if val_samples:
                traces = [forward(s, params) for s in val_samples]
                if any(not np.isfinite(t.y_hat.data).all() for t in traces):
                    raise TrainingDiverged(
                        f"validation forward became non-finite after epoch {epoch}",
                        last_good=state.best_checkpoint or state.last_checkpoint,
                    )
                report = evaluate_split(val_samples, traces)
                val_map = report.map
            else:
                val_map = None
            state.history[-1]["val_map"] = val_map
            if ckpt_dir is not None:
                state.last_checkpoint = save_checkpoint(params, ckpt_dir / "last")
                if val_map is not None and (
                    state.best_val_map is None or val_map > state.best_val_map
                ):
                    state.best_val_map = val_map
                    state.best_checkpoint = save_checkpoint(params, ckpt_dir / "best")
            elif val_map is not None and (
                state.best_val_map is None or val_map > state.best_val_map
            ):
                state.best_val_map = val_map

    if ckpt_dir is not None:
        write_train_log(state.history, ckpt_dir / "train_log.csv")
    return params, state


def write_train_log(history, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "mil", "smooth", "con", "total", "val_map"])
        for row in history:
            writer.writerow(
                [
                    row["step"],
                    row["epoch"],
                    repr(row["mil"]),
                    repr(row["smooth"]),
                    repr(row["con"]),
                    repr(row["total"]),
                    "" if row["val_map"] is None else repr(row["val_map"]),
                ]
            )
