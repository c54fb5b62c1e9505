"""Operator entry points.

Commands: gen-data (write a synthetic dataset directory), train (fit a model
and keep the best-on-validation checkpoint), eval (score a checkpoint on a
split), predict (emit per-frame probability/gate curves for one video), and
ablate (train and score the module-toggle grid). Every command is driven by
a flat key=value config file plus overriding flags, writes plain files, and
is byte-reproducible given the same config and seeds. MHL_THREADS caps
internal parallelism (default 1).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .datamodel import (
    SyntheticSpec,
    generate_synthetic,
    read_dataset,
    split_dataset,
    write_dataset,
)
from .losses import LossWeights
from .metrics import evaluate_split
from .model import ModelConfig, forward
from .trainer import TrainConfig, TrainingDiverged, load_checkpoint, train

# key -> (parser, default, description); "" parses to None where marked optional
KEYS = {
    # synthetic data
    "num_videos": (int, 200, "videos to generate"),
    "positive_fraction": (float, 0.5, "fraction of videos with planted segments"),
    "frames_min": (int, 40, "minimum frames per video"),
    "frames_max": (int, 120, "maximum frames per video"),
    "segments_min": (int, 1, "minimum planted segments per positive"),
    "segments_max": (int, 3, "maximum planted segments per positive"),
    "segment_len_min": (int, 3, "minimum segment length, frames"),
    "segment_len_max": (int, 10, "maximum segment length, frames"),
    "carriers": (str, "v,a,l,va,vl,al,val", "comma list of modality subsets a segment may occupy"),
    "signal_shift": (float, 2.0, "additive shift inside planted segments"),
    "noise_scale": (float, 1.0, "background noise sigma"),
    "fps": (float, 2.0, "frames per second of the synthetic streams"),
    "text_mode": (str, "sentence", "sentence | naive | none"),
    "paired_signal": (bool, False, "targets carry matched-sign visual+audio shifts"),
    "distractors_min": (int, 0, "min mismatched-sign texture segments per video"),
    "distractors_max": (int, 0, "max mismatched-sign texture segments per video"),
    "data_seed": (int, 0, "generator seed"),
    # model
    "hidden": (int, 128, "shared hidden width"),
    "heads": (int, 4, "attention heads (must divide hidden)"),
    "ffn_width": (int, 0, "feed-forward width; 0 means 2*hidden"),
    "positional_encoding": (str, "sinusoidal", "none | sinusoidal"),
    "fusion_variant": (str, "dcm", "early | late | dcm"),
    "use_encoder": (bool, True, "temporal self-attention encoders"),
    "use_cma": (bool, True, "cross-modal attention fusion"),
    "use_dms": (bool, True, "per-frame modality gates"),
    "use_contrast": (bool, True, "cross-modal contrastive loss"),
    "use_mamil": (bool, True, "modality-aware top-K selection"),
    "model_seed": (int, 0, "weight init seed"),
    # loss
    "smooth_weight": (float, 0.1, "smoothness regularisation weight"),
    "contrast_weight": (float, 0.2, "contrastive loss weight"),
    "temperature": (float, 0.1, "contrastive softmax temperature"),
    "k_divisor": (int, 3, "select max(1, ceil(T/k)) frames per branch"),
    "max_contrast_frames": (int, 0, "per-video frame cap for contrastive pairs; 0 = all"),
    "loss_seed": (int, 0, "seed for contrastive subsampling"),
    # training
    "lr": (float, 1e-4, "Adam learning rate"),
    "batch_size": (int, 32, "videos per step"),
    "epochs": (int, 100, "training epochs"),
    "eval_every": (int, 5, "validate every N epochs"),
    "train_seed": (int, 0, "shuffle seed"),
    "val_fraction": (float, 0.15, "validation share of the dataset"),
    "test_fraction": (float, 0.15, "test share of the dataset"),
    "split_seed": (int, 0, "split assignment seed"),
}

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str):
    kind = KEYS[key][0]
    raw = raw.strip()
    if kind is bool:
        if raw.lower() not in _BOOL_WORDS:
            raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as bool")
        return _BOOL_WORDS[raw.lower()]
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc


class RunConfig:
    """Flat configuration: documented defaults overlaid by file and flags."""

    def __init__(self, values=None):
        self.values = {k: default for k, (_, default, _) in KEYS.items()}
        if values:
            self.values.update(values)

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        values = {}
        if path is not None:
            for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
                stripped = line.split("#", 1)[0].strip()
                if not stripped:
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, raw = (part.strip() for part in stripped.split("=", 1))
                if key not in KEYS:
                    raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
                values[key] = _parse_value(key, raw)
        return cls(values)

    def apply_flags(self, args) -> None:
        if args.seed is not None:
            for key in ("data_seed", "model_seed", "train_seed", "loss_seed", "split_seed"):
                self.values[key] = args.seed
        if getattr(args, "k_div", None) is not None:
            self.values["k_divisor"] = args.k_div
        if getattr(args, "heads", None) is not None:
            self.values["heads"] = args.heads
        if getattr(args, "text_mode", None) is not None:
            self.values["text_mode"] = args.text_mode
        for toggle in ("encoder", "cma", "dms", "contrast", "mamil"):
            if getattr(args, f"no_{toggle}", False):
                self.values[f"use_{toggle}"] = False

    def synthetic_spec(self) -> SyntheticSpec:
        v = self.values
        return SyntheticSpec(
            num_videos=v["num_videos"],
            positive_fraction=v["positive_fraction"],
            frames_min=v["frames_min"],
            frames_max=v["frames_max"],
            segments_min=v["segments_min"],
            segments_max=v["segments_max"],
            segment_len_min=v["segment_len_min"],
            segment_len_max=v["segment_len_max"],
            carriers=tuple(c.strip() for c in v["carriers"].split(",") if c.strip()),
            signal_shift=v["signal_shift"],
            noise_scale=v["noise_scale"],
            fps=v["fps"],
            text_mode=v["text_mode"],
            paired_signal=v["paired_signal"],
            distractors_min=v["distractors_min"],
            distractors_max=v["distractors_max"],
            seed=v["data_seed"],
        )

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            hidden=v["hidden"],
            heads=v["heads"],
            ffn_width=v["ffn_width"] or None,
            use_encoder=v["use_encoder"],
            use_cma=v["use_cma"],
            use_dms=v["use_dms"],
            use_contrast=v["use_contrast"],
            use_mamil=v["use_mamil"],
            fusion_variant=v["fusion_variant"],
            positional_encoding=v["positional_encoding"],
            seed=v["model_seed"],
        )

    def loss_weights(self) -> LossWeights:
        v = self.values
        return LossWeights(
            smooth_weight=v["smooth_weight"],
            contrast_weight=v["contrast_weight"],
            temperature=v["temperature"],
            k_divisor=v["k_divisor"],
            max_contrast_frames=v["max_contrast_frames"] or None,
            seed=v["loss_seed"],
        )

    def train_config(self, checkpoint_dir=None) -> TrainConfig:
        v = self.values
        return TrainConfig(
            lr=v["lr"],
            batch_size=v["batch_size"],
            epochs=v["epochs"],
            seed=v["train_seed"],
            eval_every=v["eval_every"],
            checkpoint_dir=str(checkpoint_dir) if checkpoint_dir else None,
        )

    def splits(self, samples):
        return split_dataset(
            samples,
            val_fraction=self.values["val_fraction"],
            test_fraction=self.values["test_fraction"],
            seed=self.values["split_seed"],
        )


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("MHL_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    workers = min(thread_count(), len(items)) if items else 1
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = RunConfig.load(args.config)
    config.apply_flags(args)
    samples = generate_synthetic(config.synthetic_spec())
    write_dataset(samples, args.out)
    positives = sum(s.label for s in samples)
    print(f"wrote {len(samples)} samples ({positives} positive) to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    config.apply_flags(args)
    samples = read_dataset(args.data)
    train_split, val_split, _ = config.splits(samples)
    try:
        params, state = train(
            train_split,
            val_split,
            config.model_config(),
            config.train_config(checkpoint_dir=args.out),
            config.loss_weights(),
        )
    except TrainingDiverged as exc:
        print(f"training diverged: {exc} (last good checkpoint: {exc.last_good})",
              file=sys.stderr)
        return 3
    best = state.best_val_map
    print(
        f"trained {config.values['epochs']} epochs on {len(train_split)} videos; "
        f"best validation mAP {'n/a' if best is None else f'{best:.4f}'}"
    )
    return 0


def _forward_split(samples, params):
    return parallel_map(lambda s: forward(s, params), samples)


def cmd_eval(args) -> int:
    config = RunConfig.load(args.config)
    config.apply_flags(args)
    samples = read_dataset(args.data)
    splits = dict(zip(("train", "val", "test"), config.splits(samples)))
    chosen = splits[args.split]
    if not chosen:
        print(f"split {args.split!r} is empty", file=sys.stderr)
        return 2
    params = load_checkpoint(args.checkpoint, config.model_config())
    report = evaluate_split(chosen, _forward_split(chosen, params))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["map", "roc_auc", "pr_auc", "frame_count", "positive_fraction"])
        writer.writerow(report.csv_row())
    print(
        f"{args.split}: mAP={report.map} roc_auc={report.roc_auc} "
        f"pr_auc={report.pr_auc} over {report.frame_count} frames"
    )
    return 0


def _write_curve_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "y_hat", "p_v", "p_a", "p_l", "alpha_v", "alpha_a", "alpha_l"])
        y = trace.y_hat_values()
        branch = {m: trace.branch_values(m) for m in ("v", "a", "l")}
        alpha = {m: trace.alpha_values(m) for m in ("v", "a", "l")}
        for t in range(trace.frames):
            row = [t, repr(float(y[t]))]
            row += ["" if branch[m] is None else repr(float(branch[m][t])) for m in ("v", "a", "l")]
            row += [repr(float(alpha[m][t])) for m in ("v", "a", "l")]
            writer.writerow(row)


def _write_curve_svg(path, trace, threshold=0.5) -> None:
    """Probability polyline with shading where the score crosses the threshold."""
    y = trace.y_hat_values()
    frames = len(y)
    width, height, pad = 800, 240, 20
    span = max(1, frames - 1)
    to_x = lambda t: pad + t * (width - 2 * pad) / span
    to_y = lambda v: height - pad - v * (height - 2 * pad)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    t = 0
    while t < frames:
        if y[t] > threshold:
            start = t
            while t < frames and y[t] > threshold:
                t += 1
            x0, x1 = to_x(start), to_x(t - 1)
            parts.append(
                f'<rect x="{x0:.2f}" y="{pad}" width="{max(x1 - x0, 1.0):.2f}" '
                f'height="{height - 2 * pad}" fill="#fbb" opacity="0.6"/>'
            )
        else:
            t += 1
    parts.append(
        f'<line x1="{pad}" y1="{to_y(threshold):.2f}" x2="{width - pad}" '
        f'y2="{to_y(threshold):.2f}" stroke="#999" stroke-dasharray="4 3"/>'
    )
    points = " ".join(f"{to_x(t):.2f},{to_y(v):.2f}" for t, v in enumerate(y))
    parts.append(f'<polyline points="{points}" fill="none" stroke="#b00" stroke-width="1.5"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def cmd_predict(args) -> int:
    config = RunConfig.load(args.config)
    config.apply_flags(args)
    samples = read_dataset(args.data)
    matches = [s for s in samples if s.id == args.sample]
    if not matches:
        print(f"sample {args.sample!r} not found in {args.data}", file=sys.stderr)
        return 2
    params = load_checkpoint(args.checkpoint, config.model_config())
    trace = forward(matches[0], params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_curve_csv(out / "curve.csv", trace)
    _write_curve_svg(out / "curve.svg", trace)
    print(f"wrote curve for {args.sample} ({trace.frames} frames) to {out}")
    return 0


# Table-style toggle grid: baselines first, then stages added one at a time.
ABLATION_GRID = [
    ("early_fusion", dict(fusion_variant="early", use_encoder=False, use_cma=False,
                          use_dms=False, use_contrast=False, use_mamil=False)),
    ("early_fusion_encoded", dict(fusion_variant="early", use_cma=False,
                                  use_dms=False, use_contrast=False, use_mamil=False)),
    ("late_fusion_encoded", dict(fusion_variant="late", use_cma=False,
                                 use_dms=False, use_contrast=False, use_mamil=False)),
    ("fusion_attention", dict(use_dms=False, use_contrast=False, use_mamil=False)),
    ("fusion_attention_gated", dict(use_contrast=False, use_mamil=False)),
    ("fusion_aligned", dict(use_mamil=False)),
    ("full_model", dict()),
]

_TOGGLE_COLUMNS = ("use_encoder", "use_cma", "use_dms", "use_contrast", "use_mamil")


def cmd_ablate(args) -> int:
    config = RunConfig.load(args.config)
    config.apply_flags(args)
    samples = read_dataset(args.data)
    train_split, val_split, test_split = config.splits(samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, overrides in ABLATION_GRID:
        variant = RunConfig(dict(config.values))
        for key, value in overrides.items():
            variant.values[key] = value
        params, _ = train(
            train_split,
            val_split,
            variant.model_config(),
            variant.train_config(checkpoint_dir=out / name),
            variant.loss_weights(),
        )
        report = evaluate_split(test_split, _forward_split(test_split, params))
        rows.append(
            [name, variant.values["fusion_variant"]]
            + [str(variant.values[k]) for k in _TOGGLE_COLUMNS]
            + report.csv_row()[:3]
        )
        print(f"{name}: mAP={report.map} roc_auc={report.roc_auc}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["name", "fusion_variant", *_TOGGLE_COLUMNS, "map", "roc_auc", "pr_auc"]
        )
        writer.writerows(rows)
    print(f"wrote {len(rows)} ablation rows to {out / 'ablation.csv'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(parser, *, config=True, seed=True):
    if config:
        parser.add_argument("--config", default=None, help="key=value config file")
    if seed:
        parser.add_argument("--seed", type=int, default=None,
                            help="override every seed in the config")


def _add_model_flags(parser):
    parser.add_argument("--k-div", type=int, default=None, help="top-K divisor override")
    parser.add_argument("--heads", type=int, default=None, help="attention head count override")
    for toggle in ("encoder", "cma", "dms", "contrast", "mamil"):
        parser.add_argument(f"--no-{toggle}", action="store_true",
                            help=f"disable the {toggle} stage")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weakloc",
        description="weakly-supervised multimodal temporal localisation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--text-mode", choices=["sentence", "naive", "none"], default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint/log output directory")
    _add_model_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    _add_model_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="emit per-frame curves for one sample")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True, help="sample id from the manifest")
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("ablate", help="train and score the module-toggle grid")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
