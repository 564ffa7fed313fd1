"""Training objectives: smoothed cross-entropy, mixup, the two hidden-state
distillation terms, and their weighted combination.

Teacher-side tensors entering a distillation loss must already be detached
(plain constants); gradient flows into the student operand only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "DistillConfig", "smoothed_targets", "label_smoothed_ce", "mixup_batch",
    "sample_mixup_lambda", "seq_kd_loss", "frame_kd_loss", "total_loss",
]


@dataclass
class DistillConfig:
    """Weights and switches for the combined student objective."""

    lambda1: float = 2.0        # sequence-level weight
    lambda2: float = 10.0       # frame-level weight
    epsilon: float = 0.1        # label smoothing mass
    mixup_alpha: float = 0.2    # Beta(alpha, alpha) for the mixing coefficient
    mixup: bool = False
    kd1: bool = False
    kd2: bool = False
    sigma: float = 3.0          # Gaussian std of the alignment window
    window: int = 7             # alignment window width (odd)

    def validate(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("KD weights must be non-negative")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("label smoothing epsilon must be in [0, 1)")
        if self.mixup and not self.mixup_alpha > 0:
            raise ValueError("mixup_alpha must be positive when mixup is enabled")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be odd and positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


def smoothed_targets(labels, n_classes: int, epsilon: float) -> np.ndarray:
    """Label-smoothed class distributions, one row per label.

    Off-class mass is epsilon/N, the true class keeps 1 - (N-1) * epsilon / N,
    so every row sums to one.
    """
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError("label out of range")
    q = np.full((labels.size, n_classes), epsilon / n_classes, dtype=np.float64)
    q[np.arange(labels.size), labels] = 1.0 - (n_classes - 1) * epsilon / n_classes
    return q


def label_smoothed_ce(logits, targets) -> Tensor:
    """Cross-entropy -sum(q * log p) against explicit target rows; the mean
    over the batch when logits are 2-D."""
    logits = T.as_tensor(logits)
    q = T.as_tensor(targets)
    if logits.shape != q.shape:
        raise ValueError(f"logits {logits.shape} and targets {q.shape} disagree")
    logp = T.log_softmax(logits)
    per = T.scale(T.reduce_sum(T.mul(q, logp), axis=-1), -1.0)
    if per.ndim == 0:
        return per
    return T.reduce_mean(per)


def sample_mixup_lambda(alpha: float, rng) -> float:
    return float(rng.beta(alpha, alpha))


def mixup_batch(visual_a, audio_a, targets_a, visual_b, audio_b, targets_b, lam: float):
    """Convex combination of two sample groups with one coefficient.

    Both modalities and the target rows mix with the same lambda and the
    same pairing, so teacher features stay aligned with the mixed inputs.
    Operates on plain arrays (mixing happens before the tape opens).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup lambda must lie in [0, 1], got {lam}")
    mix = lambda a, b: lam * a + (1.0 - lam) * b
    return (mix(np.asarray(visual_a, dtype=np.float64), np.asarray(visual_b, dtype=np.float64)),
            mix(np.asarray(audio_a, dtype=np.float64), np.asarray(audio_b, dtype=np.float64)),
            mix(np.asarray(targets_a, dtype=np.float64), np.asarray(targets_b, dtype=np.float64)))


def _check_pair(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} disagree")


def seq_kd_loss(s_teacher, s_student) -> Tensor:
    """Squared distance between pooled sequence vectors; batch mean for 2-D
    inputs. The teacher operand must be a detached constant."""
    s_a = T.as_tensor(s_teacher)
    s_v = T.as_tensor(s_student)
    _check_pair(s_a, s_v, "seq_kd_loss")
    d = T.sub(s_a, s_v)
    sq = T.reduce_sum(T.mul(d, d), axis=-1)
    if sq.ndim == 0:
        return sq
    return T.reduce_mean(sq)


def frame_kd_loss(h_student, h_teacher_aligned) -> Tensor:
    """Mean over visual frames of the squared distance between student
    states and time-aligned teacher states; batch mean for 3-D inputs."""
    h_v = T.as_tensor(h_student)
    h_a = T.as_tensor(h_teacher_aligned)
    _check_pair(h_v, h_a, "frame_kd_loss")
    d = T.sub(h_v, h_a)
    per_frame = T.reduce_sum(T.mul(d, d), axis=-1)
    per_seq = T.reduce_mean(per_frame, axis=-1)
    if per_seq.ndim == 0:
        return per_seq
    return T.reduce_mean(per_seq)


def total_loss(l_base, l_kd1, l_kd2, cfg: DistillConfig) -> Tensor:
    """l_base + lambda1 * l_kd1 + lambda2 * l_kd2; disabled terms pass 0."""
    out = T.as_tensor(l_base)
    if l_kd1 is not None:
        out = T.add(out, T.scale(T.as_tensor(l_kd1), cfg.lambda1))
    if l_kd2 is not None:
        out = T.add(out, T.scale(T.as_tensor(l_kd2), cfg.lambda2))
    return out
