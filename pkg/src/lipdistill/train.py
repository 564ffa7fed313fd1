"""Optimizer, schedule, the two training procedures, and checkpointing.

Teacher pretraining fits the audio classifier with label-smoothed
cross-entropy (plus word isolation and train-only spectrogram masking).
Student distillation fits the visual classifier with the combined
objective; the teacher runs in evaluation mode, detached from the tape,
and its parameters are never touched.

Runs are deterministic: (config, seed) fixes every logged number. All
randomness flows through generators derived from the training seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor, Tape
from .align import build_alignment_map
from .blocks import ModelConfig, TeacherModel, StudentModel
from .losses import (DistillConfig, smoothed_targets, label_smoothed_ce,
                     sample_mixup_lambda, mixup_batch, seq_kd_loss,
                     frame_kd_loss, total_loss)
from .synthdata import (SyntheticDataset, attach_word_boundary_indicator,
                        word_isolate, spec_augment)

__all__ = [
    "TrainConfig", "Checkpoint", "TrainResult", "DivergenceError",
    "cosine_lr", "init_adam_state", "adam_step", "train_teacher",
    "train_student", "evaluate_top1", "save_checkpoint", "load_checkpoint",
    "build_model", "CHECKPOINT_VERSION", "ablation_cells", "run_kd_ablation",
]

CHECKPOINT_VERSION = 1
EVAL_BATCH = 200


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


@dataclass
class TrainConfig:
    initial_lr: float = 3e-4
    epochs: int = 6
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    schedule: str = "cosine"
    word_isolation: bool = True
    spec_augment: bool = True
    word_boundary: bool = True
    sa_max_time_mask: int = 20
    sa_max_freq_mask: int = 4
    max_steps: int | None = None   # truncate the run; the schedule still spans the full plan

    def validate(self):
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if self.schedule != "cosine":
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive when set")


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * 0.5 * (1 + cos(pi * step / total_steps)); lr0 at step 0, 0 at the end."""
    if total_steps < 1:
        raise ValueError("total_steps must be at least 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def init_adam_state(params: dict) -> dict:
    """Zeroed first/second moments per parameter name, step counter at 0."""
    return {"t": 0,
            "m": {k: np.zeros_like(p.data) for k, p in params.items()},
            "v": {k: np.zeros_like(p.data) for k, p in params.items()}}


def adam_step(params: dict, grads, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0):
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.wrt(p) if hasattr(grads, "wrt") else grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(t, f"non-finite gradient for {name}")
        if weight_decay:
            g = g + weight_decay * p.data
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class Checkpoint:
    """Named parameter arrays plus everything needed to rebuild and resume."""

    role: str                  # "teacher" or "student"
    model_cfg: ModelConfig
    flags: dict                # preprocessing the model was trained with
    arrays: dict               # name -> float64 ndarray
    epoch: int
    rng_state: dict
    metrics: dict


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list              # one dict per epoch (the JSONL rows)
    step_lr: np.ndarray
    step_base: np.ndarray
    step_kd1: np.ndarray
    step_kd2: np.ndarray
    step_total: np.ndarray


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """One file: a JSON manifest line, then a contiguous little-endian
    float64 blob holding the tensors at the recorded offsets."""
    path = Path(path)
    names = sorted(ckpt.arrays)
    tensors = []
    offset = 0
    chunks = []
    for name in names:
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"version": CHECKPOINT_VERSION, "role": ckpt.role,
                "model_cfg": asdict(ckpt.model_cfg), "flags": ckpt.flags,
                "epoch": ckpt.epoch, "rng_state": ckpt.rng_state,
                "metrics": ckpt.metrics, "tensors": tensors, "blob_bytes": offset}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode())
        fh.write(b"\n")
        for chunk in chunks:
            fh.write(chunk)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    head, _, blob = raw.partition(b"\n")
    manifest = json.loads(head.decode())
    version = manifest.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version mismatch: file has {version}, "
                         f"this build reads {CHECKPOINT_VERSION}")
    if len(blob) != manifest["blob_bytes"]:
        raise ValueError(f"corrupt checkpoint: blob is {len(blob)} bytes, "
                         f"manifest says {manifest['blob_bytes']}")
    arrays = {}
    for meta in manifest["tensors"]:
        size = int(np.prod(meta["shape"])) * 8
        arr = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=meta["offset"])
        arrays[meta["name"]] = arr.reshape(meta["shape"]).astype(np.float64)
    cfg_kw = dict(manifest["model_cfg"])
    cfg_kw["visual_widths"] = tuple(cfg_kw["visual_widths"])
    cfg_kw["audio_widths"] = tuple(cfg_kw["audio_widths"])
    return Checkpoint(role=manifest["role"], model_cfg=ModelConfig(**cfg_kw),
                      flags=manifest["flags"], arrays=arrays,
                      epoch=manifest["epoch"], rng_state=manifest["rng_state"],
                      metrics=manifest["metrics"])


def build_model(ckpt: Checkpoint):
    """Reconstruct the model a checkpoint came from, weights loaded."""
    rng = np.random.default_rng(0)  # placeholder init, overwritten by load_state
    if ckpt.role == "teacher":
        model = TeacherModel(ckpt.model_cfg, rng)
    elif ckpt.role == "student":
        model = StudentModel(ckpt.model_cfg, rng,
                             use_boundary_channel=ckpt.flags.get("word_boundary", True))
    else:
        raise ValueError(f"unknown checkpoint role {ckpt.role!r}")
    model.load_state(ckpt.arrays)
    return model


def _model_eval_inputs(model, arrays, word_isolation_flag: bool) -> np.ndarray:
    if isinstance(model, TeacherModel):
        audio = arrays.audio
        if word_isolation_flag:
            audio = word_isolate(audio, arrays.bounds_a)
        return audio
    frames = arrays.visual
    if model.use_boundary_channel:
        frames = attach_word_boundary_indicator(frames, arrays.bounds_v)
    return frames


def evaluate_top1(model, arrays, word_isolation: bool = False,
                  batch_size: int = EVAL_BATCH) -> float:
    """Fraction of samples whose argmax logit matches the label.

    Evaluation mode throughout: no dropout, no augmentation; batches are
    consumed and reduced in index order, so the value is deterministic.
    """
    n = len(arrays)
    if n == 0:
        raise ValueError("empty split")
    inputs = _model_eval_inputs(model, arrays, word_isolation)
    correct = 0
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        logits, _ = model.forward(Tensor(inputs[lo:hi]), training=False)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == arrays.labels[lo:hi]))
    return correct / n


def _epoch_record(epoch, lr_first, sums, steps, dcfg, train_hits, train_seen, val_top1):
    base = sums["base"] / steps
    kd1 = sums["kd1"] / steps
    kd2 = sums["kd2"] / steps
    lam1 = dcfg.lambda1 if dcfg is not None else 0.0
    lam2 = dcfg.lambda2 if dcfg is not None else 0.0
    # total derived from component means so the decomposition identity is exact
    return {"epoch": epoch, "lr": lr_first, "loss_base": base,
            "loss_kd1": kd1, "loss_kd2": kd2,
            "loss_total": base + lam1 * kd1 + lam2 * kd2,
            "train_top1": train_hits / train_seen, "val_top1": val_top1}


def _write_metrics(out_dir, records):
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _finite_scalar(x: Tensor, step: int, what: str) -> float:
    val = float(x.data)
    if not math.isfinite(val):
        raise DivergenceError(step, f"{what} is {val}")
    return val


def train_teacher(dataset: SyntheticDataset, model_cfg: ModelConfig,
                  train_cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Fit the audio classifier; returns the best-validation checkpoint.

    Word isolation (when on) is applied to every split; spectrogram masking
    (when on) only to training batches.
    """
    train_cfg.validate()
    model_cfg.validate()
    model = TeacherModel(model_cfg, np.random.default_rng((train_cfg.seed, 101)))
    run_rng = np.random.default_rng((train_cfg.seed, 102))
    dcfg = DistillConfig(lambda1=0.0, lambda2=0.0)

    train = dataset["train"]
    audio_train = word_isolate(train.audio, train.bounds_a) if train_cfg.word_isolation else train.audio
    targets = smoothed_targets(train.labels, model_cfg.num_classes, 0.1)

    def forward_batch(idx, rng, step):
        audio_b = audio_train[idx]
        if train_cfg.spec_augment:
            audio_b = spec_augment(audio_b, train_cfg.sa_max_time_mask,
                                   train_cfg.sa_max_freq_mask, rng)
        logits, _ = model.forward(Tensor(audio_b), training=True, rng=rng)
        loss = label_smoothed_ce(logits, Tensor(targets[idx]))
        return loss, None, None, logits

    result = _fit(model, forward_batch, dataset, train_cfg, dcfg,
                  val_kwargs={"word_isolation": train_cfg.word_isolation},
                  run_rng=run_rng)
    ckpt = Checkpoint(role="teacher", model_cfg=model_cfg,
                      flags={"word_isolation": train_cfg.word_isolation},
                      arrays=result.pop("best_arrays"),
                      epoch=result.pop("best_epoch"),
                      rng_state=run_rng.bit_generator.state,
                      metrics=result.pop("best_metrics"))
    _write_metrics(out_dir, result["metrics"])
    if out_dir is not None:
        save_checkpoint(ckpt, Path(out_dir) / "teacher.ckpt")
    return TrainResult(checkpoint=ckpt, **result)


def train_student(dataset: SyntheticDataset, teacher_ckpt: Checkpoint,
                  model_cfg: ModelConfig, train_cfg: TrainConfig,
                  distill_cfg: DistillConfig, out_dir=None) -> TrainResult:
    """Distill the visual classifier from a frozen audio teacher.

    Per batch: optional mixup of both modalities with one coefficient and
    pairing, teacher forward in evaluation mode (detached), student forward,
    then base + weighted KD losses. When mixup is off, teacher features are
    precomputed once per run; the values are identical either way.
    """
    train_cfg.validate()
    model_cfg.validate()
    distill_cfg.validate()
    if teacher_ckpt.model_cfg.hidden_size != model_cfg.hidden_size:
        raise ValueError("teacher and student backend dimensions disagree: "
                         f"{2 * teacher_ckpt.model_cfg.hidden_size} vs {2 * model_cfg.hidden_size}")
    teacher = build_model(teacher_ckpt)
    teacher_wi = bool(teacher_ckpt.flags.get("word_isolation", True))
    student = StudentModel(model_cfg, np.random.default_rng((train_cfg.seed, 201)),
                           use_boundary_channel=train_cfg.word_boundary)
    run_rng = np.random.default_rng((train_cfg.seed, 202))

    train = dataset["train"]
    targets = smoothed_targets(train.labels, model_cfg.num_classes, distill_cfg.epsilon)
    need_teacher = distill_cfg.kd1 or distill_cfg.kd2
    audio_train = word_isolate(train.audio, train.bounds_a) if teacher_wi else train.audio
    amap = build_alignment_map(model_cfg.audio_frames, model_cfg.visual_frames,
                               distill_cfg.sigma, distill_cfg.window) if distill_cfg.kd2 else None

    cache_seq = cache_aligned = None
    if need_teacher and not distill_cfg.mixup:
        cache_seq, cache_aligned = _teacher_features(teacher, audio_train, amap,
                                                     distill_cfg, model_cfg)

    def forward_batch(idx, rng, step):
        visual_b = train.visual[idx]
        if train_cfg.word_boundary:
            visual_b = attach_word_boundary_indicator(visual_b, train.bounds_v[idx])
        targets_b = targets[idx]
        seq_t = aligned_t = None
        if distill_cfg.mixup:
            lam = sample_mixup_lambda(distill_cfg.mixup_alpha, rng)
            perm = rng.permutation(len(idx))
            audio_b = audio_train[idx]
            visual_b, audio_b, targets_b = mixup_batch(
                visual_b, audio_b, targets_b,
                visual_b[perm], audio_b[perm], targets_b[perm], lam)
            if need_teacher:
                seq_t, aligned_t = _teacher_batch(teacher, audio_b, amap, distill_cfg)
        elif need_teacher:
            seq_t = cache_seq[idx] if cache_seq is not None else None
            aligned_t = cache_aligned[idx] if cache_aligned is not None else None

        logits, enc = student.forward(Tensor(visual_b), training=True, rng=rng)
        l_base = label_smoothed_ce(logits, Tensor(targets_b))
        l_kd1 = seq_kd_loss(Tensor(seq_t), enc.sequence_vector) if distill_cfg.kd1 else None
        l_kd2 = frame_kd_loss(enc.frame_states, Tensor(aligned_t)) if distill_cfg.kd2 else None
        loss = total_loss(l_base, l_kd1, l_kd2, distill_cfg)
        return loss, l_base, (l_kd1, l_kd2), logits

    result = _fit(student, forward_batch, dataset, train_cfg, distill_cfg,
                  val_kwargs={}, run_rng=run_rng)
    ckpt = Checkpoint(role="student", model_cfg=model_cfg,
                      flags={"word_boundary": train_cfg.word_boundary},
                      arrays=result.pop("best_arrays"),
                      epoch=result.pop("best_epoch"),
                      rng_state=run_rng.bit_generator.state,
                      metrics=result.pop("best_metrics"))
    _write_metrics(out_dir, result["metrics"])
    if out_dir is not None:
        save_checkpoint(ckpt, Path(out_dir) / "student.ckpt")
    return TrainResult(checkpoint=ckpt, **result)


def _teacher_batch(teacher, audio_b, amap, dcfg):
    """Teacher features for one batch, evaluation mode, as plain arrays."""
    _, enc = teacher.forward(Tensor(audio_b), training=False)
    seq_t = enc.sequence_vector.data if dcfg.kd1 else None
    aligned_t = None
    if dcfg.kd2:
        aligned_t = np.einsum("jt,btd->bjd", amap.weights, enc.frame_states.data)
    return seq_t, aligned_t


def _teacher_features(teacher, audio_train, amap, dcfg, model_cfg):
    """Hoist the per-sample teacher features out of the epoch loop; valid
    because the teacher is frozen and its inputs are fixed without mixup."""
    n = audio_train.shape[0]
    seq = np.empty((n, 2 * model_cfg.hidden_size)) if dcfg.kd1 else None
    aligned = (np.empty((n, model_cfg.visual_frames, 2 * model_cfg.hidden_size))
               if dcfg.kd2 else None)
    for lo in range(0, n, EVAL_BATCH):
        hi = min(lo + EVAL_BATCH, n)
        seq_t, aligned_t = _teacher_batch(teacher, audio_train[lo:hi], amap, dcfg)
        if seq is not None:
            seq[lo:hi] = seq_t
        if aligned is not None:
            aligned[lo:hi] = aligned_t
    return seq, aligned


def _fit(model, forward_batch, dataset, train_cfg, dcfg, val_kwargs, run_rng):
    """Shared optimization loop: shuffled batches, cosine LR, Adam, per-epoch
    validation, best-val snapshotting."""
    train = dataset["train"]
    n = len(train)
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    planned = train_cfg.epochs * steps_per_epoch
    budget = planned if train_cfg.max_steps is None else min(planned, train_cfg.max_steps)

    params = model.named_params()
    state = init_adam_state(params)
    labels = train.labels
    step = 0
    records = []
    step_lr, step_base, step_kd1, step_kd2, step_total = [], [], [], [], []
    best = {"val": -1.0, "epoch": -1, "arrays": None, "metrics": None}

    for epoch in range(train_cfg.epochs):
        if step >= budget:
            break
        perm = run_rng.permutation(n)
        sums = {"base": 0.0, "kd1": 0.0, "kd2": 0.0}
        taken = 0
        hits = 0
        seen = 0
        lr_first = None
        for b in range(steps_per_epoch):
            if step >= budget:
                break
            idx = perm[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
            lr = cosine_lr(step, planned, train_cfg.initial_lr)
            if lr_first is None:
                lr_first = lr
            with Tape() as tape:
                tape.watch(*params.values())
                loss, l_base, kds, logits = forward_batch(idx, run_rng, step)
            lv = _finite_scalar(loss, step, "loss")
            grads = tape.backward(loss)
            adam_step(params, grads, state, lr, train_cfg.beta1, train_cfg.beta2,
                      train_cfg.adam_eps, train_cfg.weight_decay)
            base_v = _finite_scalar(l_base, step, "base loss") if l_base is not None else lv
            kd1_v = float(kds[0].data) if kds and kds[0] is not None else 0.0
            kd2_v = float(kds[1].data) if kds and kds[1] is not None else 0.0
            sums["base"] += base_v
            sums["kd1"] += kd1_v
            sums["kd2"] += kd2_v
            step_lr.append(lr)
            step_base.append(base_v)
            step_kd1.append(kd1_v)
            step_kd2.append(kd2_v)
            step_total.append(lv)
            hits += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
            seen += len(idx)
            step += 1
            taken += 1
        if taken == 0:
            break
        val_top1 = evaluate_top1(model, dataset["val"], **val_kwargs)
        rec = _epoch_record(epoch, lr_first, sums, taken, dcfg, hits, seen, val_top1)
        records.append(rec)
        if val_top1 > best["val"]:
            best = {"val": val_top1, "epoch": epoch,
                    "arrays": {k: p.data.copy() for k, p in params.items()},
                    "metrics": {"epoch": epoch, "val_top1": val_top1}}

    if best["arrays"] is None:
        raise RuntimeError("no training steps were taken")
    return {"metrics": records,
            "best_arrays": best["arrays"],
            "best_epoch": best["epoch"],
            "best_metrics": best["metrics"],
            "step_lr": np.array(step_lr),
            "step_base": np.array(step_base),
            "step_kd1": np.array(step_kd1),
            "step_kd2": np.array(step_kd2),
            "step_total": np.array(step_total)}


def ablation_cells(base: DistillConfig):
    """The four distillation configurations of the main comparison."""
    from dataclasses import replace
    return [
        ("baseline", replace(base, kd1=False, kd2=False)),
        ("kd1", replace(base, kd1=True, kd2=False)),
        ("kd1_kd2_sigma3", replace(base, kd1=True, kd2=True, sigma=3.0)),
        ("kd1_kd2_sigma2", replace(base, kd1=True, kd2=True, sigma=2.0)),
    ]


def run_kd_ablation(dataset: SyntheticDataset, model_cfg: ModelConfig,
                    train_cfg: TrainConfig, distill_cfg: DistillConfig,
                    seeds, out_dir=None, log=None) -> dict:
    """Train one teacher per seed, then the four student cells on top of it.

    Returns {"teacher": {"accs": [...]}, "cells": {name: {"accs": [...],
    "mean": m, "std": s}}} with test Top-1 per run; std is the population
    deviation over seeds. Per-run metrics and checkpoints are written under
    out_dir/<cell>/seed<k>/ when out_dir is given.
    """
    from dataclasses import replace
    say = log if log is not None else (lambda msg: None)
    cells = ablation_cells(distill_cfg)
    results = {name: [] for name, _ in cells}
    teacher_accs = []
    for seed in seeds:
        seed_train = replace(train_cfg, seed=seed)
        tdir = None if out_dir is None else Path(out_dir) / "teacher" / f"seed{seed}"
        tres = train_teacher(dataset, model_cfg, seed_train, out_dir=tdir)
        teacher = build_model(tres.checkpoint)
        tacc = evaluate_top1(teacher, dataset["test"],
                             word_isolation=train_cfg.word_isolation)
        teacher_accs.append(tacc)
        say(f"seed {seed}: teacher test top1 {tacc:.4f}")
        for name, cell_cfg in cells:
            cdir = None if out_dir is None else Path(out_dir) / name / f"seed{seed}"
            sres = train_student(dataset, tres.checkpoint, model_cfg,
                                 seed_train, cell_cfg, out_dir=cdir)
            acc = evaluate_top1(build_model(sres.checkpoint), dataset["test"])
            results[name].append(acc)
            say(f"seed {seed}: {name} test top1 {acc:.4f}")
    summary = {"teacher": {"accs": teacher_accs},
               "cells": {name: {"accs": accs,
                                "mean": float(np.mean(accs)),
                                "std": float(np.std(accs))}
                         for name, accs in results.items()}}
    return summary
