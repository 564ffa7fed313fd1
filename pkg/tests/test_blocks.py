import numpy as np
import pytest

from lipdistill import tensor as T
from lipdistill import blocks as B
from lipdistill.tensor import Tensor


def tiny_cfg(**kw):
    base = dict(visual_frames=5, visual_channels=1, visual_height=8, visual_width=8,
                audio_frames=12, audio_bins=4, visual_widths=(2, 3),
                audio_widths=(3, 3, 3), audio_feature_dim=3, se_reduction=2,
                hidden_size=4, gru_layers=3, num_classes=3, dropout=0.2)
    base.update(kw)
    return B.ModelConfig(**base)


def test_linear_identity_and_hand_value():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = B.linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2)))
    assert np.array_equal(out.data, x.data)
    out = B.linear(Tensor([1.0, 1.0]), Tensor([[1.0], [1.0]]), Tensor([1.0]))
    assert out.data.item() == 3.0


def test_gru_cell_zero_params():
    rng = np.random.default_rng(0)
    p = B.GruCellParams.create(rng, 3, 2)
    for name in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"):
        getattr(p, name).data[:] = 0.0
    h = B.gru_cell(Tensor(np.ones(3)), Tensor(np.zeros(2)), p)
    assert np.array_equal(h.data, np.zeros(2))


def test_gru_cell_bounded():
    rng = np.random.default_rng(1)
    p = B.GruCellParams.create(rng, 4, 3)
    x = Tensor(rng.uniform(-5, 5, (6, 4)))
    h = Tensor(rng.uniform(-0.99, 0.99, (6, 3)))
    out = B.gru_cell(x, h, p)
    assert np.all(np.abs(out.data) < 1.0)


def test_gru_cell_dim_mismatch():
    rng = np.random.default_rng(2)
    p = B.GruCellParams.create(rng, 3, 2)
    with pytest.raises(ValueError):
        B.gru_cell(Tensor(np.zeros(4)), Tensor(np.zeros(2)), p)


def test_scan_matches_composed_cell():
    rng = np.random.default_rng(3)
    p = B.GruCellParams.create(rng, 3, 2)
    x = Tensor(rng.uniform(-1, 1, (2, 5, 3)))
    h = Tensor(np.zeros((2, 2)))
    states = []
    for t in range(5):
        h = B.gru_cell(T.take(x, t, 1), h, p)
        states.append(h.data)
    composed = np.stack(states, axis=1)
    enc = B.BiGru(rng, 3, 2, layers=1)
    scanned = enc._scan(x, p, reverse=False).data
    assert np.allclose(scanned, composed, atol=1e-13)


def test_bigru_single_frame():
    rng = np.random.default_rng(4)
    enc = B.BiGru(rng, 3, 2, layers=2)
    out = enc(Tensor(rng.uniform(-1, 1, (1, 3))))
    assert out.frame_states.shape == (1, 4)
    assert np.array_equal(out.sequence_vector.data, out.frame_states.data[0])


def test_bigru_seq_vector_is_time_mean():
    rng = np.random.default_rng(5)
    enc = B.BiGru(rng, 3, 2, layers=3)
    out = enc(Tensor(rng.uniform(-1, 1, (2, 6, 3))))
    assert out.frame_states.shape == (2, 6, 4)
    assert np.all(np.abs(out.sequence_vector.data - out.frame_states.data.mean(1)) < 1e-12)


def test_bigru_rejects_empty_sequence():
    rng = np.random.default_rng(6)
    enc = B.BiGru(rng, 3, 2, layers=1)
    with pytest.raises(ValueError):
        enc(Tensor(np.zeros((1, 0, 3))))


def test_bigru_time_reversal_symmetry():
    """Swapping direction parameters (and the direction blocks of deeper
    input weights) must reproduce the time-mirrored output with the
    direction halves swapped."""
    rng = np.random.default_rng(7)
    hidden, d_in, layers = 2, 3, 2
    enc = B.BiGru(rng, d_in, hidden, layers=layers)
    mirror = B.BiGru(np.random.default_rng(99), d_in, hidden, layers=layers)
    for i, (fwd, bwd) in enumerate(enc.layers):
        swapped = []
        for src in (bwd, fwd):
            tgt = B.GruCellParams(**{k: Tensor(getattr(src, k).data.copy())
                                     for k in ("w_z", "u_z", "b_z", "w_r", "u_r",
                                               "b_r", "w_h", "u_h", "b_h")})
            if i > 0:
                for k in ("w_z", "w_r", "w_h"):
                    w = getattr(tgt, k).data
                    w[:] = np.vstack([w[hidden:], w[:hidden]])
            swapped.append(tgt)
        mirror.layers[i] = tuple(swapped)
    x = rng.uniform(-1, 1, (1, 5, d_in))
    fwd_out = enc(Tensor(x)).frame_states.data
    rev_out = mirror(Tensor(x[:, ::-1].copy())).frame_states.data
    mirrored = rev_out[:, ::-1][:, :, [2, 3, 0, 1]]
    assert np.allclose(fwd_out, mirrored, atol=1e-12)


def test_se_block_zero_weights_halves():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(2, 3, 3, 4)))
    y = B.se_block(x, Tensor(np.zeros((4, 2))), Tensor(np.zeros((2, 4))), (1, 2))
    assert np.allclose(y.data, 0.5 * x.data, atol=1e-15)


def test_se_gate_strictly_in_unit_interval():
    rng = np.random.default_rng(9)
    se = B.SqueezeExcite(rng, 4, 2)
    x = Tensor(rng.normal(size=(2, 3, 3, 4)) * 50)
    y = se(x, (1, 2))
    ratio = y.data / np.where(x.data == 0, 1.0, x.data)
    valid = ratio[x.data != 0]
    assert np.all(valid > 0.0) and np.all(valid < 1.0)


def test_se_vector_case():
    rng = np.random.default_rng(10)
    x = Tensor(rng.normal(size=(4,)))
    y = B.se_block(x, Tensor(np.zeros((4, 2))), Tensor(np.zeros((2, 4))), ())
    assert np.allclose(y.data, 0.5 * x.data)


def test_residual_block_identity_when_zero():
    rng = np.random.default_rng(11)
    blk = B.ResidualBlock2d(rng, 3, 3, se_reduction=2, use_se=False)
    blk.conv1_w.data[:] = 0.0
    blk.conv2_w.data[:] = 0.0
    x = Tensor(rng.normal(size=(2, 4, 4, 3)))
    assert np.allclose(blk(x).data, x.data)


def test_residual_block_se_halves_conv_path():
    rng = np.random.default_rng(12)
    blk = B.ResidualBlock2d(rng, 3, 3, se_reduction=2, use_se=True)
    blk.se.w1.data[:] = 0.0
    blk.se.w2.data[:] = 0.0
    x = Tensor(rng.normal(size=(2, 4, 4, 3)))
    with_se = blk(x).data
    blk_no = B.ResidualBlock2d(rng, 3, 3, se_reduction=2, use_se=False)
    for name in ("conv1_w", "conv1_b", "conv2_w", "conv2_b"):
        getattr(blk_no, name).data = getattr(blk, name).data.copy()
    without = blk_no(x).data
    conv_path = without - x.data
    assert np.allclose(with_se, x.data + 0.5 * conv_path, atol=1e-12)


def test_residual_block_projects_channel_change():
    rng = np.random.default_rng(13)
    blk = B.ResidualBlock2d(rng, 2, 5, se_reduction=2, use_se=True)
    x = Tensor(rng.normal(size=(1, 4, 4, 2)))
    assert blk(x).shape == (1, 4, 4, 5)
    assert blk.proj_w is not None


def test_conv1d_rejects_short_sequence():
    rng = np.random.default_rng(14)
    w = Tensor(rng.normal(size=(9, 4)))
    b = Tensor(np.zeros(4))
    with pytest.raises(ValueError):
        B.conv1d_same(Tensor(np.zeros((1, 2, 3))), w, b)


def test_avgpool_checks_even_extent():
    with pytest.raises(ValueError):
        B.avgpool2d(Tensor(np.zeros((1, 5, 4, 2))))
    out = B.avgpool2d(Tensor(np.arange(16.0).reshape(1, 4, 4, 1)))
    assert out.shape == (1, 2, 2, 1)
    assert out.data[0, 0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)


def test_visual_frontend_shapes_and_time_axis():
    cfg = B.ModelConfig()
    fe = B.VisualFrontend(np.random.default_rng(15), 1, cfg.visual_widths,
                          cfg.se_reduction, cfg.dropout)
    x = Tensor(np.random.default_rng(16).normal(size=(2, 29, 1, 16, 16)))
    out = fe(x)
    assert out.shape == (2, 29, 16)


def test_visual_frontend_pooling_oracle():
    """Pooled features equal plain per-channel means of the conv stack."""
    cfg = tiny_cfg()
    fe = B.VisualFrontend(np.random.default_rng(17), 1, cfg.visual_widths,
                          cfg.se_reduction, dropout=0.5)
    frames = Tensor(np.full((1, 3, 1, 8, 8), 0.75))
    stack = fe.conv_stack(frames).data
    direct = stack.mean(axis=(1, 2))
    out = fe(frames, training=False).data   # eval mode: dropout is identity
    assert np.allclose(out.reshape(3, -1), direct, atol=1e-12)


def test_visual_frontend_eval_dropout_identity():
    cfg = tiny_cfg()
    fe = B.VisualFrontend(np.random.default_rng(18), 1, cfg.visual_widths,
                          cfg.se_reduction, dropout=0.9)
    x = Tensor(np.random.default_rng(19).normal(size=(1, 3, 1, 8, 8)))
    a = fe(x, training=False).data
    b = fe(x, training=False).data
    assert np.array_equal(a, b)


def test_audio_frontend_shapes():
    cfg = B.ModelConfig()
    fe = B.AudioFrontend(np.random.default_rng(20), cfg.audio_bins,
                         cfg.audio_widths, cfg.audio_feature_dim)
    out = fe(Tensor(np.random.default_rng(21).normal(size=(1, 139, 20))))
    assert out.shape == (1, 139, 32)


def test_audio_frontend_zero_convs_is_projected_input():
    cfg = tiny_cfg(audio_widths=(4, 4, 4), audio_bins=4)
    fe = B.AudioFrontend(np.random.default_rng(22), 4, (4, 4, 4), 3)
    for blk in fe.blocks:
        blk.conv1_w.data[:] = 0.0
        blk.conv2_w.data[:] = 0.0
    x = np.random.default_rng(23).normal(size=(1, 6, 4))
    out = fe(Tensor(x)).data
    assert np.allclose(out, x @ fe.proj_w.data + fe.proj_b.data, atol=1e-12)


def test_classifier_head_uniform_when_zero():
    head = B.ClassifierHead(np.random.default_rng(24), 6, 5, dropout=0.0)
    head.w.data[:] = 0.0
    logits = head(Tensor(np.random.default_rng(25).normal(size=(2, 6))))
    p = T.softmax(logits).data
    assert np.allclose(p, 0.2, atol=1e-15)


def test_model_shapes_and_matched_backend():
    cfg = B.ModelConfig(num_classes=20)
    teacher = B.TeacherModel(cfg, np.random.default_rng(26))
    student = B.StudentModel(cfg, np.random.default_rng(27), use_boundary_channel=True)
    assert teacher.backend_dim == student.backend_dim == 128
    rng = np.random.default_rng(28)
    tl, tenc = teacher.forward(Tensor(rng.normal(size=(2, 139, 20))))
    sl, senc = student.forward(Tensor(rng.normal(size=(2, 29, 2, 16, 16))))
    assert tl.shape == sl.shape == (2, 20)
    assert tenc.frame_states.shape == (2, 139, 128)
    assert senc.frame_states.shape == (2, 29, 128)
    assert tenc.sequence_vector.shape == senc.sequence_vector.shape == (2, 128)


def test_forward_deterministic_given_seed():
    cfg = tiny_cfg()
    student = B.StudentModel(cfg, np.random.default_rng(29), use_boundary_channel=False)
    x = Tensor(np.random.default_rng(30).normal(size=(1, 5, 1, 8, 8)))
    a = student.forward(x, training=True, rng=np.random.default_rng(5))[0].data
    b = student.forward(x, training=True, rng=np.random.default_rng(5))[0].data
    assert np.array_equal(a, b)


def test_load_state_roundtrip_and_errors():
    cfg = tiny_cfg()
    m1 = B.StudentModel(cfg, np.random.default_rng(31), use_boundary_channel=False)
    m2 = B.StudentModel(cfg, np.random.default_rng(32), use_boundary_channel=False)
    m2.load_state(m1.state_arrays())
    x = Tensor(np.random.default_rng(33).normal(size=(1, 5, 1, 8, 8)))
    assert np.array_equal(m1.forward(x)[0].data, m2.forward(x)[0].data)
    bad = m1.state_arrays()
    bad.pop(next(iter(bad)))
    with pytest.raises(ValueError):
        m2.load_state(bad)


def test_model_config_validation():
    with pytest.raises(ValueError):
        B.ModelConfig(num_classes=1).validate()
    with pytest.raises(ValueError):
        B.ModelConfig(dropout=1.0).validate()
    with pytest.raises(ValueError):
        B.ModelConfig(visual_height=10, visual_widths=(4, 4, 4)).validate()
    B.ModelConfig().validate()
