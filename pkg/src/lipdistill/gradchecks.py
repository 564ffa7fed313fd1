"""Named finite-difference suite covering every layer and loss.

Each component builds a tiny deterministic scalar objective from random
inputs in [-1, 1] and compares analytic gradients against central
differences (h=1e-5) over three seeds. This is the harness behind the
``lipdistill gradcheck`` subcommand and the gradient acceptance gate.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor
from . import blocks as B
from .align import build_alignment_map, apply_alignment
from .losses import (DistillConfig, smoothed_targets, label_smoothed_ce,
                     seq_kd_loss, frame_kd_loss, total_loss)

__all__ = ["run_suite", "SUITE_SEEDS", "GRADCHECK_TOL", "GRADCHECK_H"]

SUITE_SEEDS = (0, 1, 2)
GRADCHECK_TOL = 1e-4
GRADCHECK_H = 1e-5


def _dot_target(rng, out_tensor_shape):
    return Tensor(rng.uniform(-1.0, 1.0, out_tensor_shape))


def _check_linear(rng):
    x = Tensor(rng.uniform(-1, 1, (3, 4)))
    w = Tensor(rng.uniform(-1, 1, (4, 2)))
    b = Tensor(rng.uniform(-1, 1, (2,)))
    tgt = _dot_target(rng, (3, 2))
    return lambda: T.reduce_sum(T.mul(B.linear(x, w, b), tgt)), [x, w, b]


def _check_gru_cell(rng):
    p = B.GruCellParams.create(rng, 3, 2)
    x = Tensor(rng.uniform(-1, 1, (2, 5, 3)))
    tgt = _dot_target(rng, (2, 2))

    def f():
        h = Tensor(np.zeros((2, 2)))
        for t in range(5):
            h = B.gru_cell(T.take(x, t, 1), h, p)
        return T.reduce_sum(T.mul(h, tgt))

    return f, [x] + list(p.named("p").values())


def _check_bigru(rng):
    enc = B.BiGru(rng, 3, 2, layers=3)
    x = Tensor(rng.uniform(-1, 1, (1, 4, 3)))
    tgt = _dot_target(rng, (1, 4, 4))
    params = [x] + list(enc.named_params("e").values())
    return lambda: T.reduce_sum(T.mul(enc(x).frame_states, tgt)), params


def _check_se_block(rng):
    x = Tensor(rng.uniform(-1, 1, (2, 3, 3, 4)))
    w1 = Tensor(rng.uniform(-1, 1, (4, 2)))
    w2 = Tensor(rng.uniform(-1, 1, (2, 4)))
    tgt = _dot_target(rng, (2, 3, 3, 4))
    return lambda: T.reduce_sum(T.mul(B.se_block(x, w1, w2, (1, 2)), tgt)), [x, w1, w2]


def _check_residual2d(rng):
    blk1 = B.ResidualBlock2d(rng, 2, 3, se_reduction=2, use_se=True)
    blk2 = B.ResidualBlock2d(rng, 3, 3, se_reduction=2, use_se=True)
    x = Tensor(rng.uniform(-1, 1, (1, 4, 4, 2)))
    tgt = _dot_target(rng, (1, 4, 4, 3))
    params = [x] + list(blk1.named_params("b1").values()) + list(blk2.named_params("b2").values())
    return lambda: T.reduce_sum(T.mul(blk2(blk1(x)), tgt)), params


def _check_residual1d(rng):
    blk = B.ResidualBlock1d(rng, 3, 4)
    x = Tensor(rng.uniform(-1, 1, (2, 6, 3)))
    tgt = _dot_target(rng, (2, 6, 4))
    return lambda: T.reduce_sum(T.mul(blk(x), tgt)), [x] + list(blk.named_params("b").values())


def _tiny_model_cfg():
    return B.ModelConfig(visual_frames=5, visual_channels=1, visual_height=8,
                         visual_width=8, audio_frames=12, audio_bins=4,
                         visual_widths=(2, 3), audio_widths=(3, 3, 3),
                         audio_feature_dim=3, se_reduction=2, hidden_size=4,
                         gru_layers=3, num_classes=3, dropout=0.0)


def _check_visual_frontend(rng):
    cfg = _tiny_model_cfg()
    fe = B.VisualFrontend(rng, 1, cfg.visual_widths, cfg.se_reduction, 0.0)
    x = Tensor(rng.uniform(-1, 1, (1, 3, 1, 8, 8)))
    tgt = _dot_target(rng, (1, 3, fe.out_dim))
    return lambda: T.reduce_sum(T.mul(fe(x), tgt)), [x] + list(fe.named_params("fe").values())


def _check_audio_frontend(rng):
    cfg = _tiny_model_cfg()
    fe = B.AudioFrontend(rng, cfg.audio_bins, cfg.audio_widths, cfg.audio_feature_dim)
    x = Tensor(rng.uniform(-1, 1, (1, 6, cfg.audio_bins)))
    tgt = _dot_target(rng, (1, 6, fe.out_dim))
    return lambda: T.reduce_sum(T.mul(fe(x), tgt)), [x] + list(fe.named_params("fe").values())


def _check_classifier_head(rng):
    head = B.ClassifierHead(rng, 6, 3, dropout=0.0)
    x = Tensor(rng.uniform(-1, 1, (2, 6)))
    tgt = _dot_target(rng, (2, 3))
    return lambda: T.reduce_sum(T.mul(head(x), tgt)), [x] + list(head.named_params("h").values())


def _check_label_smoothed_ce(rng):
    logits = Tensor(rng.uniform(-1, 1, (4, 5)))
    q = smoothed_targets(rng.integers(0, 5, 4), 5, 0.1)
    return lambda: label_smoothed_ce(logits, Tensor(q)), [logits]


def _check_seq_kd(rng):
    s_v = Tensor(rng.uniform(-1, 1, (3, 6)))
    s_a = Tensor(rng.uniform(-1, 1, (3, 6)))
    return lambda: seq_kd_loss(s_a, s_v), [s_v]


def _check_frame_kd_aligned(rng):
    amap = build_alignment_map(12, 5, sigma=3.0, window=7)
    h_a = Tensor(rng.uniform(-1, 1, (2, 12, 6)))
    h_v = Tensor(rng.uniform(-1, 1, (2, 5, 6)))
    return lambda: frame_kd_loss(h_v, apply_alignment(amap, h_a)), [h_v, h_a]


def _check_student_total_loss(rng):
    """Full combined objective on the tiny student; teacher sides detached."""
    cfg = _tiny_model_cfg()
    student = B.StudentModel(cfg, rng, use_boundary_channel=False)
    dcfg = DistillConfig(kd1=True, kd2=True)
    amap = build_alignment_map(cfg.audio_frames, cfg.visual_frames,
                               dcfg.sigma, dcfg.window)
    frames = Tensor(rng.uniform(-1, 1, (1, cfg.visual_frames, 1, 8, 8)))
    teacher_frames = rng.uniform(-1, 1, (1, cfg.audio_frames, cfg.backend_dim))
    aligned = Tensor(amap.weights @ teacher_frames[0])
    seq_t = Tensor(teacher_frames[0].mean(axis=0))
    q = smoothed_targets([1], cfg.num_classes, dcfg.epsilon)

    def f():
        logits, enc = student.forward(frames)
        l_base = label_smoothed_ce(logits, Tensor(q))
        l_kd1 = seq_kd_loss(seq_t, T.reshape(enc.sequence_vector, (cfg.backend_dim,)))
        l_kd2 = frame_kd_loss(T.reshape(enc.frame_states, (cfg.visual_frames, cfg.backend_dim)),
                              aligned)
        return total_loss(l_base, l_kd1, l_kd2, dcfg)

    return f, list(student.named_params().values())


COMPONENTS = [
    ("linear", _check_linear),
    ("gru_cell_5step", _check_gru_cell),
    ("bigru_3layer", _check_bigru),
    ("se_block", _check_se_block),
    ("residual_block_2d_stack", _check_residual2d),
    ("residual_block_1d", _check_residual1d),
    ("visual_frontend", _check_visual_frontend),
    ("audio_frontend", _check_audio_frontend),
    ("classifier_head", _check_classifier_head),
    ("label_smoothed_ce", _check_label_smoothed_ce),
    ("seq_kd_loss", _check_seq_kd),
    ("frame_kd_loss_aligned", _check_frame_kd_aligned),
    ("student_total_loss", _check_student_total_loss),
]


def run_suite(seeds=SUITE_SEEDS, tol=GRADCHECK_TOL, h=GRADCHECK_H):
    """Run every component; returns [(name, max_rel_err, passed)]."""
    results = []
    for name, builder in COMPONENTS:
        worst = 0.0
        for seed in seeds:
            f, params = builder(np.random.default_rng((9000, seed)))
            report = T.finite_diff_check(f, params, h=h, tol=tol)
            worst = max(worst, report.max_rel_err)
        results.append((name, worst, worst < tol))
    return results
