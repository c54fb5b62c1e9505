"""The localisation network and its baseline variants.

Pipeline per sample: project each modality to a shared width, run a
per-modality temporal self-attention encoder, compute per-frame modality
gates, fuse the gated streams with multi-head cross-modal attention, and map
everything through sigmoid classifier heads to per-frame probabilities.
Config toggles disable individual stages so ablation variants share one code
path; `early` and `late` fusion variants are the reference baselines.

All stages are built from `numerics` primitives, so a forward pass recorded
on a tape is differentiable end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nm
from .datamodel import MODALITIES, VideoSample
from .numerics import Tensor

FUSION_VARIANTS = ("early", "late", "dcm")


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 128
    heads: int = 4
    ffn_width: int | None = None  # defaults to 2 * hidden
    input_dims: tuple[int, int, int] = (768, 128, 768)  # v, a, l
    use_encoder: bool = True
    use_cma: bool = True
    use_dms: bool = True
    use_contrast: bool = True
    use_mamil: bool = True
    fusion_variant: str = "dcm"
    positional_encoding: str = "sinusoidal"  # none | sinusoidal
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1 or self.heads < 1 or self.hidden % self.heads != 0:
            raise ValueError(
                f"hidden width {self.hidden} must be a positive multiple of "
                f"heads {self.heads}"
            )
        if self.fusion_variant not in FUSION_VARIANTS:
            raise ValueError(f"unknown fusion variant {self.fusion_variant!r}")
        if self.positional_encoding not in ("none", "sinusoidal"):
            raise ValueError(f"unknown positional encoding {self.positional_encoding!r}")

    @property
    def head_width(self) -> int:
        return self.hidden // self.heads

    @property
    def ffn(self) -> int:
        return self.ffn_width if self.ffn_width is not None else 2 * self.hidden

    def dim_of(self, modality: str) -> int:
        return self.input_dims[MODALITIES.index(modality)]

    def has_branch_heads(self) -> bool:
        return self.fusion_variant == "late" or (
            self.fusion_variant == "dcm" and self.use_mamil
        )


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Exact inventory of learnable matrices for a config, in a fixed order."""
    D, F = config.hidden, config.ffn
    shapes: dict[str, tuple[int, int]] = {}
    for m in MODALITIES:
        shapes[f"proj.{m}.weight"] = (config.dim_of(m), D)
        shapes[f"proj.{m}.bias"] = (1, D)
    if config.use_encoder:
        for m in MODALITIES:
            shapes[f"enc.{m}.query"] = (D, D)
            shapes[f"enc.{m}.key"] = (D, D)
            shapes[f"enc.{m}.value"] = (D, D)
            shapes[f"enc.{m}.ffn_in.weight"] = (D, F)
            shapes[f"enc.{m}.ffn_in.bias"] = (1, F)
            shapes[f"enc.{m}.ffn_out.weight"] = (F, D)
            shapes[f"enc.{m}.ffn_out.bias"] = (1, D)
    if config.fusion_variant == "dcm":
        if config.use_dms:
            for m in MODALITIES:
                shapes[f"gate.{m}.weight"] = (D, 1)
                shapes[f"gate.{m}.bias"] = (1, 1)
        if config.use_cma:
            shapes["cma.query"] = (3 * D, D)
            shapes["cma.key"] = (3 * D, D)
            shapes["cma.value"] = (3 * D, D)
        shapes["head.fused.weight"] = (D, 1)
        shapes["head.fused.bias"] = (1, 1)
    if config.has_branch_heads():
        for m in MODALITIES:
            shapes[f"head.{m}.weight"] = (D, 1)
            shapes[f"head.{m}.bias"] = (1, 1)
    if config.fusion_variant == "early":
        shapes["head.early.weight"] = (3 * D, 1)
        shapes["head.early.bias"] = (1, 1)
    return shapes


class ModelParams:
    """All learnable weights as named float64 arrays, tied to their config."""

    def __init__(self, arrays: dict[str, np.ndarray], config: ModelConfig):
        self.arrays = arrays
        self.config = config

    @classmethod
    def build(cls, config: ModelConfig) -> "ModelParams":
        """Seeded init: weights uniform +-sqrt(6/(fan_in+fan_out)), biases zero.

        Classifier heads start at zero so an untrained model outputs exactly
        0.5 everywhere (chance level) instead of one arbitrary projection of
        the inputs.
        """
        rng = np.random.default_rng(config.seed)
        arrays = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".bias") or name.startswith("head."):
                arrays[name] = np.zeros(shape)
            else:
                bound = math.sqrt(6.0 / (shape[0] + shape[1]))
                arrays[name] = rng.uniform(-bound, bound, size=shape)
        return cls(arrays, config)

    def audit_shapes(self) -> None:
        expected = parameter_shapes(self.config)
        missing = expected.keys() - self.arrays.keys()
        extra = self.arrays.keys() - expected.keys()
        if missing or extra:
            raise ValueError(
                f"parameter inventory mismatch: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}"
            )
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ValueError(
                    f"parameter {name!r} has shape {self.arrays[name].shape}, "
                    f"expected {shape}"
                )

    def entry_count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.config)

    def as_constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.arrays.items()}

    def as_leaves(self, tape: nm.Tape) -> dict[str, Tensor]:
        return {k: tape.leaf(v, op=k) for k, v in self.arrays.items()}


@dataclass
class PredictionTrace:
    """Everything a forward pass produces for one sample."""

    frames: int
    y_hat: Tensor  # T x 1 fused probability
    branch: dict[str, Tensor | None]  # per-modality probability columns
    alpha: dict[str, Tensor | None]  # per-frame gates, None when the stage is off
    encoded: dict[str, Tensor]  # encoder outputs, kept for the contrastive loss
    fused: Tensor | None
    selection: object = None  # filled in by the loss module

    def y_hat_values(self) -> np.ndarray:
        return self.y_hat.data[:, 0]

    def branch_values(self, m: str) -> np.ndarray | None:
        t = self.branch.get(m)
        return None if t is None else t.data[:, 0]

    def alpha_values(self, m: str) -> np.ndarray:
        t = self.alpha.get(m)
        return np.ones(self.frames) if t is None else t.data[:, 0]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoidal_encoding(frames: int, width: int) -> np.ndarray:
    key = (frames, width)
    if key not in _PE_CACHE:
        pos = np.arange(frames)[:, None]
        rate = np.exp(-math.log(10000.0) * (2 * (np.arange(width) // 2)) / width)
        angles = pos * rate[None, :]
        pe = np.empty((frames, width))
        pe[:, 0::2] = np.sin(angles[:, 0::2])
        pe[:, 1::2] = np.cos(angles[:, 1::2])
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


def _multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    d_k = q.cols // heads
    outs = []
    for h in range(heads):
        lo, hi = h * d_k, (h + 1) * d_k
        qh = nm.slice_cols(q, lo, hi)
        kh = nm.slice_cols(k, lo, hi)
        vh = nm.slice_cols(v, lo, hi)
        scores = nm.scale(nm.matmul(qh, nm.transpose(kh)), 1.0 / math.sqrt(d_k))
        outs.append(nm.matmul(nm.softmax_rows(scores), vh))
    return outs[0] if heads == 1 else nm.concat_cols(outs)


def project_modality(x: Tensor, params: dict[str, Tensor], m: str) -> Tensor:
    return nm.add(nm.matmul(x, params[f"proj.{m}.weight"]), params[f"proj.{m}.bias"])


def encode_modality(
    x: Tensor, params: dict[str, Tensor], m: str, config: ModelConfig
) -> Tensor:
    """Project to the shared width, then self-attention + FFN with a residual.

    The residual is taken from the projected (width-aligned) input, after the
    optional positional term.
    """
    if x.cols != config.dim_of(m):
        raise nm.ShapeError(
            f"modality {m!r} input has {x.cols} columns, expected {config.dim_of(m)}"
        )
    proj = project_modality(x, params, m)
    if config.positional_encoding == "sinusoidal":
        proj = nm.add(proj, Tensor(sinusoidal_encoding(x.rows, config.hidden)))
    q = nm.matmul(proj, params[f"enc.{m}.query"])
    k = nm.matmul(proj, params[f"enc.{m}.key"])
    v = nm.matmul(proj, params[f"enc.{m}.value"])
    attended = _multi_head_attention(q, k, v, config.heads)
    hidden = nm.relu(
        nm.add(nm.matmul(attended, params[f"enc.{m}.ffn_in.weight"]),
               params[f"enc.{m}.ffn_in.bias"])
    )
    ffn_out = nm.add(
        nm.matmul(hidden, params[f"enc.{m}.ffn_out.weight"]),
        params[f"enc.{m}.ffn_out.bias"],
    )
    out = nm.add(ffn_out, proj)
    if not np.isfinite(out.data).all():
        raise nm.NumericError(f"non-finite activation in the {m!r} temporal encoder")
    return out


def gate_weights(
    encoded: Tensor, params: dict[str, Tensor], m: str
) -> tuple[Tensor, Tensor]:
    """Per-frame modality gate and the gated stream."""
    alpha = nm.sigmoid(
        nm.add(nm.matmul(encoded, params[f"gate.{m}.weight"]), params[f"gate.{m}.bias"])
    )
    return alpha, nm.scale_rows(encoded, alpha)


def cross_modal_attention(
    streams: list[Tensor], params: dict[str, Tensor], config: ModelConfig
) -> Tensor:
    """Fuse the three gated streams: concat in v,a,l order, then attention."""
    concat = nm.concat_cols(streams)
    q = nm.matmul(concat, params["cma.query"])
    k = nm.matmul(concat, params["cma.key"])
    v = nm.matmul(concat, params["cma.value"])
    return _multi_head_attention(q, k, v, config.heads)


def _sigmoid_head(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return nm.sigmoid(
        nm.add(nm.matmul(x, params[f"head.{name}.weight"]), params[f"head.{name}.bias"])
    )


def heads(
    enc_v: Tensor, enc_a: Tensor, enc_l: Tensor, fused: Tensor | None,
    params: dict[str, Tensor],
) -> tuple[Tensor | None, Tensor | None, Tensor | None, Tensor | None]:
    """Per-branch probability columns; None where the branch has no weights."""
    out = []
    for m, enc in zip(MODALITIES, (enc_v, enc_a, enc_l)):
        out.append(_sigmoid_head(enc, params, m) if f"head.{m}.weight" in params else None)
    p_fused = None
    if fused is not None and "head.fused.weight" in params:
        p_fused = _sigmoid_head(fused, params, "fused")
    return out[0], out[1], out[2], p_fused


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _as_tensors(params) -> tuple[dict[str, Tensor], ModelConfig | None]:
    if isinstance(params, ModelParams):
        return params.as_constants(), params.config
    return params, None


def forward(sample: VideoSample, params, config: ModelConfig | None = None) -> PredictionTrace:
    """Run the configured pipeline on one aligned sample.

    `params` may be a ModelParams (evaluation) or a dict of tape-attached
    tensors (training); the result is a pure function of its inputs.
    """
    tensors, own_config = _as_tensors(params)
    config = config or own_config
    if config is None:
        raise ValueError("forward needs a config when params is a plain mapping")

    inputs = {m: Tensor(sample.features[m]) for m in MODALITIES}
    if config.use_encoder:
        encoded = {m: encode_modality(inputs[m], tensors, m, config) for m in MODALITIES}
    else:
        encoded = {m: project_modality(inputs[m], tensors, m) for m in MODALITIES}

    if config.fusion_variant == "early":
        concat = nm.concat_cols([encoded[m] for m in MODALITIES])
        y_hat = _sigmoid_head(concat, tensors, "early")
        return PredictionTrace(
            frames=sample.frames, y_hat=y_hat,
            branch={m: None for m in MODALITIES},
            alpha={m: None for m in MODALITIES},
            encoded=encoded, fused=None,
        )

    if config.fusion_variant == "late":
        p_v, p_a, p_l, _ = heads(encoded["v"], encoded["a"], encoded["l"], None, tensors)
        y_hat = nm.scale(nm.add(nm.add(p_v, p_a), p_l), 1.0 / 3.0)
        return PredictionTrace(
            frames=sample.frames, y_hat=y_hat,
            branch={"v": p_v, "a": p_a, "l": p_l},
            alpha={m: None for m in MODALITIES},
            encoded=encoded, fused=None,
        )

    # dcm: gates -> cross-modal attention -> fused head
    alpha: dict[str, Tensor | None] = {}
    weighted = {}
    for m in MODALITIES:
        if config.use_dms:
            alpha[m], weighted[m] = gate_weights(encoded[m], tensors, m)
        else:
            alpha[m] = Tensor(np.ones((sample.frames, 1)))
            weighted[m] = encoded[m]
    streams = [weighted[m] for m in MODALITIES]
    if config.use_cma:
        fused = cross_modal_attention(streams, tensors, config)
    else:
        fused = nm.scale(nm.add(nm.add(streams[0], streams[1]), streams[2]), 1.0 / 3.0)
    p_v, p_a, p_l, y_hat = heads(encoded["v"], encoded["a"], encoded["l"], fused, tensors)
    return PredictionTrace(
        frames=sample.frames, y_hat=y_hat,
        branch={"v": p_v, "a": p_a, "l": p_l},
        alpha=alpha, encoded=encoded, fused=fused,
    )


def baseline_forward(sample: VideoSample, params: ModelParams, variant: str) -> PredictionTrace:
    """Run the early- or late-fusion reference pipeline."""
    if variant not in ("early", "late"):
        raise ValueError(f"baseline variant must be early or late, got {variant!r}")
    return forward(sample, params, replace(params.config, fusion_variant=variant))
