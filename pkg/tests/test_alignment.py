import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lipdistill import tensor as T
from lipdistill.align import AlignmentMap, apply_alignment, build_alignment_map, center_index
from lipdistill.tensor import Tensor


def test_default_map_centers():
    m = build_alignment_map(139, 29, 3.0, 7)
    assert m.centers[0] == 2
    assert m.centers[14] == 69
    assert m.centers[28] == 136


def test_interior_row_weights():
    m = build_alignment_map(139, 29, 3.0, 7)
    expected = np.exp(-(np.arange(-3, 4) ** 2) / 18.0)
    expected /= expected.sum()
    row = m.weights[14]
    support = row[row > 0]
    assert support.size == 7
    assert np.allclose(support, expected, atol=5e-4)


def test_boundary_row_renormalized():
    m = build_alignment_map(139, 29, 3.0, 7)
    # row 0 is centered at 2, so offset -3 falls off the left edge
    row = m.weights[0]
    assert (row > 0).sum() == 6
    assert abs(row.sum() - 1.0) < 1e-12


def test_degenerate_window_is_identity():
    m = build_alignment_map(10, 10, 3.0, 1)
    assert np.array_equal(m.weights, np.eye(10))


def test_invalid_parameters():
    with pytest.raises(ValueError):
        build_alignment_map(10, 12, 3.0, 7)   # fewer audio than visual frames
    with pytest.raises(ValueError):
        build_alignment_map(20, 10, 3.0, 4)   # even window
    with pytest.raises(ValueError):
        build_alignment_map(20, 10, 0.0, 7)   # sigma
    with pytest.raises(ValueError):
        build_alignment_map(20, 0, 3.0, 7)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 4), st.floats(0.5, 10.0),
       st.sampled_from([1, 3, 5, 7, 9]))
def test_rows_stochastic_grid(n_visual, ratio, sigma, window):
    t_audio = n_visual * ratio
    m = build_alignment_map(t_audio, n_visual, sigma, window)
    sums = m.weights.sum(axis=1)
    assert np.all(np.abs(sums - 1.0) < 1e-12)
    half = (window - 1) // 2
    for j in range(n_visual):
        nz = np.flatnonzero(m.weights[j])
        assert nz.size <= window
        assert np.all(np.diff(nz) == 1)          # contiguous
        c = m.centers[j]
        assert c in nz
        assert nz.min() >= max(0, c - half)
        assert nz.max() <= min(t_audio - 1, c + half)


def test_center_weight_is_strict_max():
    m = build_alignment_map(139, 29, 3.0, 7)
    for j in range(29):
        row = m.weights[j]
        assert row[m.centers[j]] == row.max()
        others = np.delete(row, m.centers[j])
        assert np.all(others < row[m.centers[j]])


def test_interior_rows_symmetric_decreasing():
    m = build_alignment_map(139, 29, 2.0, 7)
    for j in range(29):
        c = m.centers[j]
        if c - 3 < 0 or c + 3 > 138:
            continue
        row = m.weights[j]
        for k in range(1, 4):
            assert row[c - k] == pytest.approx(row[c + k], rel=1e-12)
            assert row[c - k] < row[c - k + 1]


def test_large_sigma_approaches_uniform():
    m = build_alignment_map(139, 29, 1e6, 7)
    interior = m.weights[14]
    support = interior[interior > 0]
    assert np.allclose(support, 1.0 / 7.0, atol=1e-6)


def test_center_formula_matches_ratio():
    # 139/29 is about 4.8 audio frames per visual frame
    gaps = np.diff([center_index(j, 139, 29) for j in range(29)])
    assert set(gaps) <= {4, 5}
    assert abs(gaps.mean() - 139 / 29) < 0.05


def test_apply_constant_fixed_point():
    m = build_alignment_map(139, 29, 3.0, 7)
    v = np.arange(6, dtype=np.float64)
    states = Tensor(np.tile(v, (139, 1)))
    out = apply_alignment(m, states)
    assert np.all(np.abs(out.data - v) < 1e-12)


def test_apply_identity_map():
    m = build_alignment_map(8, 8, 3.0, 1)
    states = Tensor(np.random.default_rng(0).normal(size=(8, 3)))
    assert np.array_equal(apply_alignment(m, states).data, states.data)


def test_apply_linearity():
    m = build_alignment_map(24, 6, 3.0, 7)
    rng = np.random.default_rng(1)
    h1 = rng.normal(size=(24, 5))
    h2 = rng.normal(size=(24, 5))
    lhs = apply_alignment(m, Tensor(0.3 * h1 + 0.7 * h2)).data
    rhs = 0.3 * apply_alignment(m, Tensor(h1)).data + 0.7 * apply_alignment(m, Tensor(h2)).data
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_apply_batched_matches_single():
    m = build_alignment_map(24, 6, 3.0, 7)
    rng = np.random.default_rng(2)
    h = rng.normal(size=(3, 24, 5))
    batched = apply_alignment(m, Tensor(h)).data
    for i in range(3):
        single = apply_alignment(m, Tensor(h[i])).data
        assert np.allclose(batched[i], single, atol=1e-12)


def test_apply_gradient_is_map_transpose():
    m = build_alignment_map(12, 4, 3.0, 5)
    rng = np.random.default_rng(3)
    h = Tensor(rng.uniform(-1, 1, (12, 3)))
    tgt = Tensor(rng.uniform(-1, 1, (4, 3)))
    rep = T.finite_diff_check(lambda: T.reduce_sum(T.mul(apply_alignment(m, h), tgt)), [h])
    assert rep.passed
    # analytic check: d(sum(tgt * W h))/dh = W^T tgt
    with T.Tape() as tape:
        tape.watch(h)
        loss = T.reduce_sum(T.mul(apply_alignment(m, h), tgt))
    g = tape.backward(loss).wrt(h)
    assert np.allclose(g, m.weights.T @ tgt.data, atol=1e-12)


def test_apply_shape_errors():
    m = build_alignment_map(12, 4, 3.0, 5)
    with pytest.raises(ValueError):
        apply_alignment(m, Tensor(np.zeros((13, 3))))
    with pytest.raises(ValueError):
        apply_alignment(m, Tensor(np.zeros(12)))


def test_map_is_immutable():
    m = build_alignment_map(12, 4, 3.0, 5)
    with pytest.raises(ValueError):
        m.weights[0, 0] = 1.0
