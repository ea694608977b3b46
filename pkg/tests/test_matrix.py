import gc
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monoforward.matrix import (
    DOUBLE,
    SINGLE,
    DenseMatrix,
    LabelError,
    ShapeError,
    cross_entropy_with_grad,
    matmul,
    matrix,
    relu,
    relu_mask,
    softmax_rows,
    tracker,
    tracker_peak,
    tracker_reset,
    transpose,
    zeros,
)


def test_matmul_identity():
    a = matrix([[1, 2], [3, 4]])
    eye = matrix([[1, 0], [0, 1]])
    assert np.array_equal(matmul(a, eye).data, a.data)


def test_matmul_hand_value():
    c = matmul(matrix([[1, 2]]), matrix([[3], [4]]))
    assert c.shape == (1, 1)
    assert c.data[0, 0] == 11


def test_matmul_shape_error_names_shapes():
    a, b = zeros(2, 3), zeros(2, 3)
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(a, b)


def test_matmul_associative_double(rng):
    a = DenseMatrix(rng.standard_normal((4, 5)), DOUBLE)
    b = DenseMatrix(rng.standard_normal((5, 6)), DOUBLE)
    c = DenseMatrix(rng.standard_normal((6, 3)), DOUBLE)
    left = matmul(matmul(a, b), c).data
    right = matmul(a, matmul(b, c)).data
    assert np.allclose(left, right, rtol=1e-10)


def test_transpose():
    assert transpose(matrix([[5.0]])).data[0, 0] == 5.0
    a = matrix([[1, 2], [3, 4]])
    assert np.array_equal(transpose(a).data, [[1, 3], [2, 4]])


def test_transpose_involution(rng):
    a = DenseMatrix(rng.standard_normal((3, 4)))
    assert np.array_equal(transpose(transpose(a)).data, a.data)


def test_relu_and_mask():
    z = matrix([[-1.0, 0.0, 2.0]])
    assert np.array_equal(relu(z).data, [[0, 0, 2]])
    # strict inequality: derivative at exactly 0 is 0
    assert np.array_equal(relu_mask(z).data, [[0, 0, 1]])
    allneg = matrix([[-3.0, -1.0], [-2.0, -0.5]])
    assert not relu(allneg).data.any()


def test_softmax_symmetry_and_closed_form():
    s = softmax_rows(matrix([[0.0, 0.0]]))
    assert np.allclose(s.data, [[0.5, 0.5]])
    s = softmax_rows(matrix([[0.0, math.log(3.0)]], precision=DOUBLE))
    assert np.allclose(s.data, [[0.25, 0.75]], atol=1e-12)


def test_softmax_shift_invariance():
    x = matrix([[1.0, 2.0, 3.0]], precision=DOUBLE)
    shifted = matrix([[1001.0, 1002.0, 1003.0]], precision=DOUBLE)
    assert np.allclose(softmax_rows(x).data, softmax_rows(shifted).data,
                       atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_softmax_rows_sum_to_one(seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((4, 7)) * r.choice([1.0, 100.0, 1e4])
    s_single = softmax_rows(DenseMatrix(x, SINGLE)).data.sum(axis=1)
    assert np.allclose(s_single, 1.0, atol=1e-6)
    s_double = softmax_rows(DenseMatrix(x, DOUBLE)).data.sum(axis=1)
    assert np.allclose(s_double, 1.0, atol=1e-12)


def test_cross_entropy_perfect_and_uniform():
    # softmax driven to a onehot: loss ~ 0
    g = matrix([[100.0, 0.0, 0.0]], precision=DOUBLE)
    loss, _ = cross_entropy_with_grad(g, [0])
    assert loss < 1e-12
    g = zeros(3, 10, DOUBLE)
    loss, _ = cross_entropy_with_grad(g, [1, 5, 9])
    assert math.isclose(loss, math.log(10), rel_tol=1e-12)


def test_cross_entropy_grad_closed_form():
    # two classes, logits [0,0], label 0, batch of 2: dG row = (sigma-y)/N
    g = zeros(2, 2, DOUBLE)
    _, dg = cross_entropy_with_grad(g, [0, 0])
    assert np.allclose(dg.data, [[-0.25, 0.25], [-0.25, 0.25]], atol=1e-12)


def test_cross_entropy_label_error():
    with pytest.raises(LabelError):
        cross_entropy_with_grad(zeros(1, 3), [3])


def test_cross_entropy_grad_matches_finite_differences(rng):
    g = rng.standard_normal((5, 4))
    y = rng.integers(0, 4, 5)
    _, dg = cross_entropy_with_grad(DenseMatrix(g, DOUBLE), y)
    h = 1e-5
    num = np.zeros_like(g)
    for i in range(g.shape[0]):
        for j in range(g.shape[1]):
            gp, gm = g.copy(), g.copy()
            gp[i, j] += h
            gm[i, j] -= h
            lp, _ = cross_entropy_with_grad(DenseMatrix(gp, DOUBLE), y)
            lm, _ = cross_entropy_with_grad(DenseMatrix(gm, DOUBLE), y)
            num[i, j] = (lp - lm) / (2 * h)
    rel = np.abs(num - dg.data).max() / np.abs(num).max()
    assert rel < 1e-6


class TestTracker:
    def test_alloc_free_peak(self):
        gc.collect()
        tracker_reset()
        base = tracker().live_bytes
        a = zeros(1000, 1000, SINGLE)
        assert tracker_peak() - base >= 4_000_000
        del a
        gc.collect()
        assert tracker().live_bytes == base

    def test_reset_then_idle_peak_stays_at_live(self):
        gc.collect()
        tracker_reset()
        assert tracker_peak() == tracker().live_bytes

    def test_sequential_allocations_do_not_stack(self):
        gc.collect()
        tracker_reset()
        base = tracker().live_bytes
        a = zeros(250, 1000, SINGLE)  # 1 MB
        del a
        b = zeros(250, 1000, SINGLE)
        del b
        gc.collect()
        assert tracker_peak() - base < 1_100_000

    def test_peak_monotone_between_resets(self):
        gc.collect()
        tracker_reset()
        seen = []
        for n in (10, 200, 50, 300, 100):
            a = zeros(n, n)
            seen.append(tracker_peak())
            del a
        assert seen == sorted(seen)


def test_dense_matrix_rejects_bad_rank():
    with pytest.raises(ShapeError):
        DenseMatrix(np.zeros((2, 2, 2)))


def test_values_finite_after_ops(rng):
    a = DenseMatrix(rng.standard_normal((8, 8)) * 1e4, SINGLE)
    for out in (relu(a), softmax_rows(a), transpose(a)):
        assert np.isfinite(out.data).all()
