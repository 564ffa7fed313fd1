"""Synthetic paired audio-visual word dataset with controllable ambiguity.

Each class owns a smooth visual trajectory (per-frame 2-D pattern) and a
smooth audio spectrogram envelope, both placed inside a word boundary that
sits mid-sequence with a small per-sample temporal jitter; Gaussian noise
is added everywhere. Confusable class pairs share their visual prototype
exactly while keeping distinct audio prototypes, so the visual stream
alone cannot separate them.

Generation is a pure function of (seed, split, sample index): every sample
derives its own random stream from that triple, which makes parallel and
serial generation bit-identical.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

__all__ = [
    "SynthConfig", "AVSample", "SplitArrays", "SyntheticDataset",
    "generate_sample", "generate_dataset", "visual_prototype", "audio_prototype",
    "attach_word_boundary_indicator", "word_isolate", "spec_augment",
    "grayscale_and_crop", "dump_dataset", "load_dataset",
    "STRESS_AUDIO_NOISE", "SPLITS",
]

SPLITS = ("train", "val", "test")
_SPLIT_DOMAIN = {"train": 11, "val": 12, "test": 13}
_PROTO_VISUAL_DOMAIN = 21
_PROTO_AUDIO_DOMAIN = 22

# Audio noise level used by the teacher robustness comparison; high enough
# that zeroing the out-of-word frames and masking-based augmentation matter.
STRESS_AUDIO_NOISE = 2.0

DUMP_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 20
    train_per_class: int = 60
    val_per_class: int = 10
    test_per_class: int = 20
    visual_frames: int = 29
    visual_channels: int = 1
    visual_height: int = 16
    visual_width: int = 16
    audio_frames: int = 139
    audio_bins: int = 20
    word_len: int = 15
    jitter: int = 2
    visual_noise: float = 1.5
    audio_noise: float = 0.3
    visual_signal: float = 1.0
    audio_signal: float = 1.0
    confusable_pairs: tuple = ((0, 1), (2, 3), (4, 5), (6, 7))
    pair_audio_margin: float = 1.0
    seed: int = 1234

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if min(self.train_per_class, self.val_per_class, self.test_per_class) < 1:
            raise ValueError("every split needs at least one sample per class")
        if self.visual_noise < 0 or self.audio_noise < 0:
            raise ValueError("noise levels must be non-negative")
        seen = set()
        for pair in self.confusable_pairs:
            a, b = pair
            if a == b or not (0 <= a < self.num_classes) or not (0 <= b < self.num_classes):
                raise ValueError(f"bad confusable pair {pair}")
            if a in seen or b in seen:
                raise ValueError("confusable pairs must be disjoint")
            seen.update(pair)
        base = self.base_start
        if self.jitter < 0 or base - self.jitter < 0 or base + self.jitter + self.word_len > self.visual_frames:
            raise ValueError("word boundary jitter does not fit inside the sequence")

    @property
    def base_start(self) -> int:
        """Canonical word start: the word sits mid-sequence."""
        return (self.visual_frames - self.word_len) // 2

    @property
    def audio_word_len(self) -> int:
        return int(round(self.word_len * self.audio_frames / self.visual_frames))

    def per_class(self, split: str) -> int:
        return {"train": self.train_per_class, "val": self.val_per_class,
                "test": self.test_per_class}[split]


@dataclass
class AVSample:
    visual: np.ndarray        # [T_v x C x H x W]
    audio: np.ndarray         # [T_a x F]
    label: int
    boundary_v: tuple         # (start, end) in visual frames, end exclusive
    boundary_a: tuple         # (start, end) in audio frames


@dataclass
class SplitArrays:
    visual: np.ndarray        # [S x T_v x C x H x W]
    audio: np.ndarray         # [S x T_a x F]
    labels: np.ndarray        # [S] int64
    bounds_v: np.ndarray      # [S x 2] int64
    bounds_a: np.ndarray      # [S x 2] int64

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class SyntheticDataset:
    cfg: SynthConfig
    splits: dict = field(default_factory=dict)

    def __getitem__(self, split: str) -> SplitArrays:
        return self.splits[split]


def _smooth_mode(rng, length: int, *space: int) -> np.ndarray:
    """One separable sinusoid product over (time, *space), unit amplitude.

    Temporal frequency stays below one cycle over the word so that a small
    temporal shift barely decorrelates the pattern.
    """
    t = (np.arange(length) + 0.5) / length
    cur = np.sin(2 * np.pi * rng.uniform(0.25, 1.0) * t + rng.uniform(0, 2 * np.pi))
    for dim in space:
        s = (np.arange(dim) + 0.5) / dim
        wave = np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * s + rng.uniform(0, 2 * np.pi))
        cur = np.multiply.outer(cur, wave)
    return cur


def _temporal_envelope(rng, length: int) -> np.ndarray:
    """Smooth positive modulation of the word over its duration."""
    t = (np.arange(length) + 0.5) / length
    return 1.0 + 0.35 * np.sin(2 * np.pi * rng.uniform(0.3, 1.0) * t + rng.uniform(0, 2 * np.pi))


def _rms_normalize(pat: np.ndarray) -> np.ndarray:
    return pat / np.sqrt(np.mean(pat ** 2))


def _visual_archetype(cfg: SynthConfig, label: int) -> int:
    for a, b in cfg.confusable_pairs:
        if label in (a, b):
            return min(a, b)
    return label


def visual_prototype(cfg: SynthConfig, label: int) -> np.ndarray:
    """Noiseless within-word visual trajectory [word_len x H x W]. Members of
    a confusable pair share this array exactly.

    Each archetype owns a grating with its own orientation and spatial
    frequency, modulated smoothly over time at an archetype-specific rate,
    plus a low-frequency ripple. Texture statistics (not position) carry the
    class, so they survive the model's global average pooling.
    """
    arch = _visual_archetype(cfg, label)
    rng = np.random.default_rng((cfg.seed, _PROTO_VISUAL_DOMAIN, arch))
    h, w = cfg.visual_height, cfg.visual_width
    n_orient = 4
    theta = np.pi * (arch % n_orient) / n_orient
    cycles = 1.0 + 0.75 * (arch // n_orient)
    yy = (np.arange(h) + 0.5)[:, None] / h
    xx = (np.arange(w) + 0.5)[None, :] / w
    grating = np.sin(2 * np.pi * cycles * (np.cos(theta) * xx + np.sin(theta) * yy)
                     + rng.uniform(0, 2 * np.pi))
    rate = 0.3 + 0.6 * ((arch % 3) / 2.0)
    t = (np.arange(cfg.word_len) + 0.5) / cfg.word_len
    envelope = 1.0 + 0.5 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    pat = np.multiply.outer(envelope, grating)
    pat += 0.25 * _smooth_mode(rng, cfg.word_len, h, w)
    return cfg.visual_signal * _rms_normalize(pat)


def audio_prototype(cfg: SynthConfig, label: int) -> np.ndarray:
    """Noiseless within-word spectrogram envelope [audio_word_len x F];
    distinct per class, also inside confusable pairs.

    Each class owns a Gaussian band around its own frequency bin, modulated
    smoothly over time, plus a low-frequency ripple.
    """
    rng = np.random.default_rng((cfg.seed, _PROTO_AUDIO_DOMAIN, label))
    f = (np.arange(cfg.audio_bins) + 0.5) / cfg.audio_bins
    mu = (label + 0.5) / cfg.num_classes
    width = 0.6 / cfg.num_classes
    band = np.exp(-((f - mu) ** 2) / (2 * width * width))
    pat = np.multiply.outer(_temporal_envelope(rng, cfg.audio_word_len), band)
    pat += 0.25 * _smooth_mode(rng, cfg.audio_word_len, cfg.audio_bins)
    return cfg.audio_signal * _rms_normalize(pat)


def generate_sample(cfg: SynthConfig, split: str, index: int) -> AVSample:
    """Deterministic sample for (cfg.seed, split, index)."""
    if split not in _SPLIT_DOMAIN:
        raise ValueError(f"unknown split {split!r}")
    label = index % cfg.num_classes
    rng = np.random.default_rng((cfg.seed, _SPLIT_DOMAIN[split], index))
    delta = int(rng.integers(-cfg.jitter, cfg.jitter + 1))
    start_v = cfg.base_start + delta
    end_v = start_v + cfg.word_len
    ratio = cfg.audio_frames / cfg.visual_frames
    start_a = int(round(start_v * ratio))
    end_a = min(start_a + cfg.audio_word_len, cfg.audio_frames)

    visual = np.zeros((cfg.visual_frames, cfg.visual_channels, cfg.visual_height, cfg.visual_width))
    visual[start_v:end_v, 0] = visual_prototype(cfg, label)
    if cfg.visual_noise > 0:
        visual += rng.normal(0.0, cfg.visual_noise, visual.shape)

    audio = np.zeros((cfg.audio_frames, cfg.audio_bins))
    audio[start_a:end_a] = audio_prototype(cfg, label)[: end_a - start_a]
    if cfg.audio_noise > 0:
        audio += rng.normal(0.0, cfg.audio_noise, audio.shape)

    return AVSample(visual=visual, audio=audio, label=label,
                    boundary_v=(start_v, end_v), boundary_a=(start_a, end_a))


def generate_dataset(cfg: SynthConfig) -> SyntheticDataset:
    cfg.validate()
    ds = SyntheticDataset(cfg=cfg)
    for split in SPLITS:
        count = cfg.num_classes * cfg.per_class(split)
        visual = np.empty((count, cfg.visual_frames, cfg.visual_channels,
                           cfg.visual_height, cfg.visual_width))
        audio = np.empty((count, cfg.audio_frames, cfg.audio_bins))
        labels = np.empty(count, dtype=np.int64)
        bounds_v = np.empty((count, 2), dtype=np.int64)
        bounds_a = np.empty((count, 2), dtype=np.int64)
        for i in range(count):
            s = generate_sample(cfg, split, i)
            visual[i] = s.visual
            audio[i] = s.audio
            labels[i] = s.label
            bounds_v[i] = s.boundary_v
            bounds_a[i] = s.boundary_a
        ds.splits[split] = SplitArrays(visual, audio, labels, bounds_v, bounds_a)
    _check_pair_margins(cfg)
    return ds


def _check_pair_margins(cfg: SynthConfig):
    for a, b in cfg.confusable_pairs:
        if not np.array_equal(visual_prototype(cfg, a), visual_prototype(cfg, b)):
            raise AssertionError(f"pair {(a, b)} visual prototypes diverged")
        gap = np.linalg.norm(audio_prototype(cfg, a) - audio_prototype(cfg, b))
        if gap < cfg.pair_audio_margin:
            raise ValueError(f"pair {(a, b)} audio prototypes closer than the margin ({gap:.3f})")


def attach_word_boundary_indicator(visual: np.ndarray, bounds_v) -> np.ndarray:
    """Append a binary channel that is 1.0 on frames inside the word.

    visual: [T x C x H x W] with bounds (start, end), or [B x T x C x H x W]
    with bounds [B x 2].
    """
    visual = np.asarray(visual, dtype=np.float64)
    if visual.ndim == 4:
        out = np.zeros((visual.shape[0], visual.shape[1] + 1) + visual.shape[2:])
        out[:, :-1] = visual
        start, end = bounds_v
        out[start:end, -1] = 1.0
        return out
    if visual.ndim == 5:
        out = np.zeros((visual.shape[0], visual.shape[1], visual.shape[2] + 1) + visual.shape[3:])
        out[:, :, :-1] = visual
        for i, (start, end) in enumerate(np.asarray(bounds_v)):
            out[i, start:end, -1] = 1.0
        return out
    raise ValueError(f"expected 4-D or 5-D visual input, got {visual.shape}")


def word_isolate(audio: np.ndarray, bounds_a) -> np.ndarray:
    """Zero all spectrogram frames outside [start, end); shape preserved.
    Idempotent. audio: [T x F] with (start, end), or [B x T x F] with [B x 2]."""
    audio = np.asarray(audio, dtype=np.float64)
    out = np.zeros_like(audio)
    if audio.ndim == 2:
        start, end = bounds_a
        out[start:end] = audio[start:end]
        return out
    if audio.ndim == 3:
        for i, (start, end) in enumerate(np.asarray(bounds_a)):
            out[i, start:end] = audio[i, start:end]
        return out
    raise ValueError(f"expected 2-D or 3-D audio input, got {audio.shape}")


def spec_augment(audio: np.ndarray, max_time_mask: int, max_freq_mask: int,
                 rng, training: bool = True) -> np.ndarray:
    """Zero one random time band and one random frequency band (train only).

    Band widths are drawn uniformly from 0..max inclusive; evaluation mode
    returns the input unchanged. audio: [T x F] or [B x T x F].
    """
    if not training or (max_time_mask == 0 and max_freq_mask == 0):
        return audio
    audio = np.asarray(audio, dtype=np.float64)
    batched = audio.ndim == 3
    out = audio.copy()
    views = out if batched else out[None]
    t_len, f_len = views.shape[1], views.shape[2]
    if max_time_mask >= t_len or max_freq_mask >= f_len:
        raise ValueError("mask widths must be smaller than the masked axis")
    for row in views:
        w = int(rng.integers(0, max_time_mask + 1))
        if w:
            t0 = int(rng.integers(0, t_len - w + 1))
            row[t0:t0 + w, :] = 0.0
        w = int(rng.integers(0, max_freq_mask + 1))
        if w:
            f0 = int(rng.integers(0, f_len - w + 1))
            row[:, f0:f0 + w] = 0.0
    return out if batched else views[0]


def grayscale_and_crop(frames: np.ndarray, out_h: int, out_w: int, rng,
                       training: bool = True) -> np.ndarray:
    """Channel-mean grayscale plus crop: one random offset per sample in
    training, center crop in evaluation. frames: [T x C x H x W] or
    [B x T x C x H x W] -> same with C=1 and (out_h, out_w) spatial."""
    frames = np.asarray(frames, dtype=np.float64)
    batched = frames.ndim == 5
    views = frames if batched else frames[None]
    h, w = views.shape[-2:]
    if out_h > h or out_w > w:
        raise ValueError("crop larger than the frame")
    gray = views.mean(axis=2, keepdims=True)
    out = np.empty(gray.shape[:3] + (out_h, out_w))
    for i, vid in enumerate(gray):
        if training:
            dy = int(rng.integers(0, h - out_h + 1))
            dx = int(rng.integers(0, w - out_w + 1))
        else:
            dy, dx = (h - out_h) // 2, (w - out_w) // 2
        out[i] = vid[:, :, dy:dy + out_h, dx:dx + out_w]
    return out if batched else out[0]


def _split_files(split: str):
    return {"visual": (f"{split}_visual.bin", "<f8"),
            "audio": (f"{split}_audio.bin", "<f8"),
            "labels": (f"{split}_labels.bin", "<i8"),
            "bounds_v": (f"{split}_bounds_v.bin", "<i8"),
            "bounds_a": (f"{split}_bounds_a.bin", "<i8")}


def dump_dataset(ds: SyntheticDataset, out_dir) -> Path:
    """Materialize the dataset as per-split binary blobs plus a manifest.
    Arrays are little-endian, C order; the manifest echoes the config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": DUMP_FORMAT_VERSION,
                "config": asdict(ds.cfg),
                "splits": {}}
    for split, arrays in ds.splits.items():
        entry = {}
        for name, (fname, dtype) in _split_files(split).items():
            arr = getattr(arrays, name)
            (out_dir / fname).write_bytes(np.ascontiguousarray(arr).astype(dtype).tobytes())
            entry[name] = {"file": fname, "shape": list(arr.shape), "dtype": dtype}
        manifest["splits"][split] = entry
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(in_dir) -> SyntheticDataset:
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / "manifest.json").read_text())
    if manifest.get("format_version") != DUMP_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {manifest.get('format_version')}")
    raw_cfg = dict(manifest["config"])
    raw_cfg["confusable_pairs"] = tuple(tuple(p) for p in raw_cfg["confusable_pairs"])
    cfg = SynthConfig(**raw_cfg)
    ds = SyntheticDataset(cfg=cfg)
    for split, entry in manifest["splits"].items():
        arrays = {}
        for name, meta in entry.items():
            blob = (in_dir / meta["file"]).read_bytes()
            expected = int(np.prod(meta["shape"])) * np.dtype(meta["dtype"]).itemsize
            if len(blob) != expected:
                raise ValueError(f"corrupt dump: {meta['file']} has {len(blob)} bytes, expected {expected}")
            arr = np.frombuffer(blob, dtype=meta["dtype"]).reshape(meta["shape"])
            arrays[name] = arr.astype(np.dtype(meta["dtype"]).newbyteorder("="))
        ds.splits[split] = SplitArrays(**arrays)
    return ds
