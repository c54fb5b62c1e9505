"""Sample format, temporal alignment, and the synthetic-stream generator.

A sample is three per-modality feature sequences aligned to a common frame
count: visual features arrive frame-aligned, audio is linearly interpolated
from its native clip rate, and text is expanded from sentence-level
embeddings using the sentence timestamps. The synthetic generator plants
additive signal segments into chosen modality subsets so that end-to-end
localisation is verifiable without any real dataset.

On-disk layout of a dataset directory:

    manifest.json          array of {id, label, T, fps, video_path,
                           audio_path, text_mode, text_paths, truth_path?}
    <id>_video.bin         T x 768 matrix container
    <id>_audio.bin         S_a x 128 matrix container (native clip rate)
    <id>_sentences.json    {"embeddings": path, "spans": [{start_s, end_s, row}]}
    <id>_text.bin          S x 768 sentence embeddings, or 1 x 768 for the
                           whole-transcript ("naive") mode
    <id>_truth.txt         one line of T comma-separated 0/1 values

Matrix container (binary, little-endian): magic "MHLF", version u32 (1 =
float32 payload, 2 = float64), rows u32, cols u32, then rows*cols values
row-major. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODALITIES = ("v", "a", "l")
FEATURE_DIMS = {"v": 768, "a": 128, "l": 768}

MAGIC = b"MHLF"
_HEADER = struct.Struct("<4sIII")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    """A file does not conform to the on-disk format."""


class SpecError(ValueError):
    """A synthetic-data spec asks for something impossible."""


# ---------------------------------------------------------------------------
# matrix container
# ---------------------------------------------------------------------------


def write_matrix(path, matrix: np.ndarray, dtype: str = "f4") -> None:
    """Write a 2-D array as a matrix container (f4 = version 1, f8 = version 2)."""
    arr = np.ascontiguousarray(matrix)
    if arr.ndim != 2:
        raise FormatError(f"matrix container needs 2-D data, got shape {arr.shape}")
    version = 1 if dtype == "f4" else 2
    payload = arr.astype(_DTYPES[version], copy=False)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, version, arr.shape[0], arr.shape[1]))
        fh.write(payload.tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    """Read a matrix container, returning float64 regardless of stored precision."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"matrix file missing: {path}")
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes, offset 0)")
    magic, version, rows, cols = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version not in _DTYPES:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    dtype = _DTYPES[version]
    expected = rows * cols * dtype.itemsize
    body = blob[_HEADER.size :]
    if len(body) != expected:
        raise FormatError(
            f"{path}: payload is {len(body)} bytes, expected {expected} "
            f"for {rows}x{cols} at offset {_HEADER.size}"
        )
    data = np.frombuffer(body, dtype=dtype).reshape(rows, cols)
    return data.astype(np.float64)


# ---------------------------------------------------------------------------
# sample types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SentenceSpan:
    """One transcript sentence: its time interval and its embedding row."""

    start_s: float
    end_s: float
    row: int


@dataclass
class TextPayload:
    """Raw text-side data carried with a sample for serialisation."""

    mode: str  # sentence | naive | none
    spans: list[SentenceSpan] = field(default_factory=list)
    embeddings: np.ndarray | None = None  # S x 768 (sentence) or 1 x 768 (naive)


@dataclass
class VideoSample:
    """One weakly-labeled video with aligned per-modality features.

    `frame_truth` is evaluation-only ground truth and must never feed the
    training path.
    """

    id: str
    frames: int
    fps: float
    label: int
    features: dict[str, np.ndarray]
    frame_truth: np.ndarray | None = None
    raw_audio: np.ndarray | None = None
    text: TextPayload | None = None
    # synthetic-only diagnostics: ((start, end), carrier) per planted segment;
    # evaluation-side metadata like frame_truth, never read by training
    segments: list | None = None

    def validate(self) -> None:
        for m in MODALITIES:
            feat = self.features.get(m)
            if feat is None:
                raise FormatError(f"sample {self.id}: missing modality {m!r}")
            if feat.shape != (self.frames, FEATURE_DIMS[m]):
                raise FormatError(
                    f"sample {self.id}: modality {m!r} has shape {feat.shape}, "
                    f"expected {(self.frames, FEATURE_DIMS[m])}"
                )
        if self.label not in (0, 1):
            raise FormatError(f"sample {self.id}: label must be 0 or 1")
        if self.frame_truth is not None:
            if self.frame_truth.shape != (self.frames,):
                raise FormatError(
                    f"sample {self.id}: frame truth has length "
                    f"{self.frame_truth.shape[0]}, expected {self.frames}"
                )
            has_positive = bool(self.frame_truth.any())
            if has_positive != bool(self.label):
                raise FormatError(
                    f"sample {self.id}: label {self.label} contradicts frame truth"
                )


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------


def interpolate_audio(raw: np.ndarray, frames: int) -> np.ndarray:
    """Resample an S x D sequence to `frames` rows by per-column linear interpolation.

    Source rows sit at normalized positions i*(S-1)/(T-1); first and last
    output rows equal the first and last input rows. S == 1 repeats the
    single row; frames == 1 returns the first row.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] == 0:
        raise ValueError("interpolate_audio needs at least one input row")
    if frames < 1:
        raise ValueError("interpolate_audio needs at least one output frame")
    S = raw.shape[0]
    if S == frames:
        return raw.copy()
    if S == 1:
        return np.repeat(raw, frames, axis=0)
    if frames == 1:
        return raw[:1].copy()
    positions = np.arange(frames) * (S - 1) / (frames - 1)
    lo = np.floor(positions).astype(np.intp)
    lo = np.minimum(lo, S - 2)
    frac = (positions - lo)[:, None]
    return raw[lo] * (1.0 - frac) + raw[lo + 1] * frac


def _validate_spans(spans: list[SentenceSpan], n_rows: int) -> None:
    prev_end = -math.inf
    for sp in spans:
        if not 0 <= sp.start_s < sp.end_s:
            raise ValueError(f"invalid span [{sp.start_s}, {sp.end_s})")
        if sp.start_s < prev_end:
            raise ValueError(f"span starting at {sp.start_s}s overlaps its predecessor")
        if not 0 <= sp.row < n_rows:
            raise IndexError(f"span embedding row {sp.row} out of range for {n_rows} rows")
        prev_end = sp.end_s


def expand_sentences(
    spans: list[SentenceSpan], embeddings: np.ndarray, frames: int, fps: float
) -> np.ndarray:
    """Expand sentence embeddings to frame resolution.

    Frame t covers [t/fps, (t+1)/fps); it receives the embedding of the span
    containing its midpoint, or a zero vector when no span covers it.
    """
    if fps <= 0:
        raise ValueError("fps must be positive")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    _validate_spans(spans, embeddings.shape[0])
    out = np.zeros((frames, embeddings.shape[1]))
    for t in range(frames):
        mid = (t + 0.5) / fps
        for sp in spans:
            if sp.start_s <= mid < sp.end_s:
                out[t] = embeddings[sp.row]
                break
    return out


def naive_text_expand(global_embedding: np.ndarray, frames: int) -> np.ndarray:
    """Repeat the single whole-transcript embedding for every frame."""
    if frames < 1:
        raise ValueError("need at least one frame")
    row = np.asarray(global_embedding, dtype=np.float64).reshape(1, -1)
    return np.repeat(row, frames, axis=0)


def _materialize_text(text: TextPayload, frames: int, fps: float) -> np.ndarray:
    if text.mode == "sentence":
        return expand_sentences(text.spans, text.embeddings, frames, fps)
    if text.mode == "naive":
        return naive_text_expand(text.embeddings, frames)
    if text.mode == "none":
        return np.zeros((frames, FEATURE_DIMS["l"]))
    raise FormatError(f"unknown text mode {text.mode!r}")


# ---------------------------------------------------------------------------
# synthetic streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Configuration for generated multimodal streams with planted segments.

    `carriers` lists the modality subsets a planted segment may live in,
    e.g. "v", "al", "val"; one is drawn uniformly per segment.

    With `paired_signal` on, a planted segment draws a sign and shifts the
    visual and audio streams by the SAME signed amount, while every video
    (either label) also receives `distractors_min..max` texture segments,
    unmarked in the ground truth, whose visual and audio shifts carry
    OPPOSITE signs. Per-modality magnitudes are then identical for targets
    and distractors; the cross-modal sign agreement identifies a true
    segment.
    """

    num_videos: int = 200
    positive_fraction: float = 0.5
    frames_min: int = 40
    frames_max: int = 120
    segments_min: int = 1
    segments_max: int = 3
    segment_len_min: int = 3
    segment_len_max: int = 10
    carriers: tuple[str, ...] = ("v", "a", "l", "va", "vl", "al", "val")
    signal_shift: float = 2.0
    noise_scale: float = 1.0
    fps: float = 2.0
    text_mode: str = "sentence"
    paired_signal: bool = False
    distractors_min: int = 0
    distractors_max: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.num_videos < 1:
            raise SpecError("num_videos must be >= 1")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise SpecError("positive_fraction must lie in [0, 1]")
        if not 1 <= self.frames_min <= self.frames_max:
            raise SpecError("frame count range is empty")
        if not 1 <= self.segments_min <= self.segments_max:
            raise SpecError("segment count range is empty")
        if not 1 <= self.segment_len_min <= self.segment_len_max:
            raise SpecError("segment length range is empty")
        if not 0 <= self.distractors_min <= self.distractors_max:
            raise SpecError("distractor count range is empty")
        if self.distractors_max > 0 and not self.paired_signal:
            raise SpecError("distractor segments are only defined for paired_signal")
        if self.segment_len_max > self.frames_min:
            raise SpecError(
                f"segment of {self.segment_len_max} frames cannot fit in a "
                f"{self.frames_min}-frame video"
            )
        most = self.segments_max + self.distractors_max
        needed = most * self.segment_len_max + (most - 1)
        if needed > self.frames_min:
            raise SpecError(
                f"{most} non-adjacent segments of up to "
                f"{self.segment_len_max} frames need {needed} frames, "
                f"but videos may have only {self.frames_min}"
            )
        for carrier in self.carriers:
            if not carrier or any(m not in MODALITIES for m in carrier):
                raise SpecError(f"bad carrier subset {carrier!r}")
        if self.text_mode not in ("sentence", "naive", "none"):
            raise SpecError(f"bad text_mode {self.text_mode!r}")
        if self.fps <= 0:
            raise SpecError("fps must be positive")


def _place_segments(rng, frames, lengths):
    """Choose non-overlapping, non-adjacent [start, end) frame intervals."""
    k = len(lengths)
    slack = frames - sum(lengths) - (k - 1)
    cuts = np.sort(rng.integers(0, slack + 1, size=k))
    segments = []
    offset = 0
    for i, length in enumerate(lengths):
        start = int(cuts[i]) + offset + i  # +i inserts a one-frame separator
        segments.append((start, start + length))
        offset += length
    return segments


def _overlap(lo1, hi1, lo2, hi2):
    return max(0.0, min(hi1, hi2) - max(lo1, lo2))


def _quantize(arr: np.ndarray) -> np.ndarray:
    # snap to float32 grid so disk round trips reproduce in-memory values
    return arr.astype(np.float32).astype(np.float64)


def _plan_events(rng, frames: int, positive: bool, spec: SyntheticSpec):
    """Decide the video's segments: (interval, per-modality additive term,
    truthful, carrier). Additive terms are scalars (constant shift) or
    per-dimension pattern rows (paired mode)."""
    n_true = (
        int(rng.integers(spec.segments_min, spec.segments_max + 1)) if positive else 0
    )
    n_texture = (
        int(rng.integers(spec.distractors_min, spec.distractors_max + 1))
        if spec.distractors_max > 0
        else 0
    )
    total = n_true + n_texture
    if total == 0:
        return []
    lengths = [
        int(rng.integers(spec.segment_len_min, spec.segment_len_max + 1))
        for _ in range(total)
    ]
    placed = _place_segments(rng, frames, lengths)
    truthful = np.array([True] * n_true + [False] * n_texture)
    if n_texture:
        rng.shuffle(truthful)
    events = []
    for interval, is_true in zip(placed, truthful):
        if spec.paired_signal:
            sign = 1.0 if rng.random() < 0.5 else -1.0
            shift = sign * spec.signal_shift
            if is_true:
                effects, carrier = {"v": shift, "a": shift}, "va"
            else:
                effects, carrier = {"v": shift, "a": -shift}, ""
        else:
            carrier = str(rng.choice(spec.carriers))
            effects = {m: spec.signal_shift for m in carrier}
        events.append((interval, effects, bool(is_true), carrier))
    return events


def _generate_one(index: int, positive: bool, spec: SyntheticSpec) -> VideoSample:
    rng = np.random.default_rng([spec.seed, 1, index])
    frames = int(rng.integers(spec.frames_min, spec.frames_max + 1))
    duration = frames / spec.fps
    events = _plan_events(rng, frames, positive, spec)

    truth = np.zeros(frames, dtype=np.int8)
    for (s, e), _, truthful, _ in events:
        if truthful:
            truth[s:e] = 1

    video = rng.normal(0.0, spec.noise_scale, size=(frames, FEATURE_DIMS["v"]))
    for (s, e), effects, _, _ in events:
        if "v" in effects:
            video[s:e] += effects["v"]
    video = _quantize(video)

    n_clips = max(1, math.ceil(duration))  # one audio clip per second
    audio = rng.normal(0.0, spec.noise_scale, size=(n_clips, FEATURE_DIMS["a"]))
    for (s, e), effects, _, _ in events:
        if "a" not in effects:
            continue
        lo_s, hi_s = s / spec.fps, e / spec.fps
        for clip in range(n_clips):
            frac = _overlap(clip, clip + 1, lo_s, hi_s)
            if frac > 0:
                audio[clip] += effects["a"] * frac
    audio = _quantize(audio)

    # sentences tile the full duration with random 1.5-4 s lengths
    spans = []
    cursor = 0.0
    while cursor < duration:
        length = float(rng.uniform(1.5, 4.0))
        end = min(cursor + length, duration)
        spans.append(SentenceSpan(start_s=cursor, end_s=end, row=len(spans)))
        cursor = end
    sent_emb = rng.normal(0.0, spec.noise_scale, size=(len(spans), FEATURE_DIMS["l"]))
    for (s, e), effects, _, _ in events:
        if "l" not in effects:
            continue
        lo_s, hi_s = s / spec.fps, e / spec.fps
        for sp in spans:
            if _overlap(sp.start_s, sp.end_s, lo_s, hi_s) > 0:
                sent_emb[sp.row] += effects["l"]
    sent_emb = _quantize(sent_emb)

    if spec.text_mode == "sentence":
        text = TextPayload(mode="sentence", spans=spans, embeddings=sent_emb)
    elif spec.text_mode == "naive":
        weights = np.array([sp.end_s - sp.start_s for sp in spans])
        global_emb = _quantize(
            (weights[:, None] * sent_emb).sum(axis=0, keepdims=True) / weights.sum()
        )
        text = TextPayload(mode="naive", embeddings=global_emb)
    else:
        text = TextPayload(mode="none")

    sample = VideoSample(
        id=f"synth{index:04d}",
        frames=frames,
        fps=spec.fps,
        label=1 if positive else 0,
        features={
            "v": video,
            "a": interpolate_audio(audio, frames),
            "l": _materialize_text(text, frames, spec.fps),
        },
        frame_truth=truth,
        raw_audio=audio,
        text=text,
        segments=[(interval, carrier) for interval, _, truthful, carrier in events if truthful],
    )
    sample.validate()
    return sample


def generate_synthetic(spec: SyntheticSpec) -> list[VideoSample]:
    """Generate the full synthetic set; deterministic given spec.seed."""
    spec.validate()
    n_pos = round(spec.num_videos * spec.positive_fraction)
    flags = np.zeros(spec.num_videos, dtype=bool)
    flags[:n_pos] = True
    np.random.default_rng([spec.seed, 0]).shuffle(flags)
    return [_generate_one(i, bool(flags[i]), spec) for i in range(spec.num_videos)]


# ---------------------------------------------------------------------------
# dataset IO
# ---------------------------------------------------------------------------


def write_sample(sample: VideoSample, directory) -> dict:
    """Write one sample's files into `directory`, returning its manifest entry."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sid = sample.id
    entry = {
        "id": sid,
        "label": int(sample.label),
        "T": int(sample.frames),
        "fps": float(sample.fps),
        "video_path": f"{sid}_video.bin",
        "audio_path": f"{sid}_audio.bin",
        "text_mode": sample.text.mode if sample.text else "none",
        "text_paths": {},
    }
    write_matrix(directory / entry["video_path"], sample.features["v"])
    raw_audio = sample.raw_audio if sample.raw_audio is not None else sample.features["a"]
    write_matrix(directory / entry["audio_path"], raw_audio)

    text = sample.text
    if text is not None and text.mode == "sentence":
        emb_name = f"{sid}_text.bin"
        sent_name = f"{sid}_sentences.json"
        write_matrix(directory / emb_name, text.embeddings)
        doc = {
            "embeddings": emb_name,
            "spans": [
                {"start_s": sp.start_s, "end_s": sp.end_s, "row": sp.row}
                for sp in text.spans
            ],
        }
        (directory / sent_name).write_text(json.dumps(doc, indent=1))
        entry["text_paths"] = {"sentences": sent_name}
    elif text is not None and text.mode == "naive":
        emb_name = f"{sid}_text.bin"
        write_matrix(directory / emb_name, text.embeddings)
        entry["text_paths"] = {"embedding": emb_name}

    if sample.frame_truth is not None:
        truth_name = f"{sid}_truth.txt"
        line = ",".join(str(int(v)) for v in sample.frame_truth)
        (directory / truth_name).write_text(line + "\n")
        entry["truth_path"] = truth_name
    return entry


def read_sample(entry: dict, directory) -> VideoSample:
    """Load and align one sample from its manifest entry."""
    directory = Path(directory)
    sid = entry["id"]
    frames = int(entry["T"])
    fps = float(entry["fps"])

    video = read_matrix(directory / entry["video_path"])
    raw_audio = read_matrix(directory / entry["audio_path"])

    mode = entry.get("text_mode", "none")
    text_paths = entry.get("text_paths") or {}
    if mode == "sentence":
        sent_path = directory / text_paths["sentences"]
        if not sent_path.exists():
            raise FormatError(f"sentence file missing: {sent_path}")
        doc = json.loads(sent_path.read_text())
        spans = [
            SentenceSpan(start_s=d["start_s"], end_s=d["end_s"], row=d["row"])
            for d in doc["spans"]
        ]
        emb = read_matrix(directory / doc["embeddings"])
        text = TextPayload(mode="sentence", spans=spans, embeddings=emb)
    elif mode == "naive":
        emb = read_matrix(directory / text_paths["embedding"])
        text = TextPayload(mode="naive", embeddings=emb)
    else:
        text = TextPayload(mode="none")

    truth = None
    if entry.get("truth_path"):
        truth_path = directory / entry["truth_path"]
        if not truth_path.exists():
            raise FormatError(f"truth file missing: {truth_path}")
        fields = truth_path.read_text().strip().split(",")
        if len(fields) != frames:
            raise FormatError(
                f"{truth_path}: {len(fields)} truth values, expected {frames}"
            )
        if any(f not in ("0", "1") for f in fields):
            raise FormatError(f"{truth_path}: truth values must be 0 or 1")
        truth = np.array([int(f) for f in fields], dtype=np.int8)

    sample = VideoSample(
        id=sid,
        frames=frames,
        fps=fps,
        label=int(entry["label"]),
        features={
            "v": video,
            "a": interpolate_audio(raw_audio, frames),
            "l": _materialize_text(text, frames, fps),
        },
        frame_truth=truth,
        raw_audio=raw_audio,
        text=text,
    )
    sample.validate()
    return sample


def write_dataset(samples: list[VideoSample], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = [write_sample(s, directory) for s in samples]
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def read_dataset(directory) -> list[VideoSample]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"manifest missing: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    return [read_sample(entry, directory) for entry in manifest]


def split_dataset(samples, val_fraction=0.15, test_fraction=0.15, seed=0):
    """Deterministic train/val/test partition of a sample list."""
    n = len(samples)
    order = np.random.default_rng([seed, 2]).permutation(n)
    n_val = round(n * val_fraction)
    n_test = round(n * test_fraction)
    val_idx = set(order[:n_val].tolist())
    test_idx = set(order[n_val : n_val + n_test].tolist())
    train, val, test = [], [], []
    for i, s in enumerate(samples):
        (val if i in val_idx else test if i in test_idx else train).append(s)
    return train, val, test
