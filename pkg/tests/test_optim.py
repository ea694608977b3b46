import numpy as np
import pytest

from monoforward.matrix import DOUBLE, DenseMatrix, ShapeError, matrix, zeros
from monoforward.optim import AdamState, adam_step, sgd_step


def test_sgd_zero_grad_no_change():
    p = matrix([[1.0, -2.0]], DOUBLE)
    before = p.data.copy()
    sgd_step(p, zeros(1, 2, DOUBLE), 0.1)
    assert np.array_equal(p.data, before)


def test_sgd_arithmetic():
    p = matrix([[1.0]], DOUBLE)
    sgd_step(p, matrix([[0.5]], DOUBLE), 0.1)
    assert np.isclose(p.data[0, 0], 0.95)


def test_sgd_two_half_steps_equal_one_full():
    g = matrix([[0.3, -0.7]], DOUBLE)
    p1 = matrix([[1.0, 2.0]], DOUBLE)
    sgd_step(p1, g, 0.1)
    p2 = matrix([[1.0, 2.0]], DOUBLE)
    sgd_step(p2, g, 0.05)
    sgd_step(p2, g, 0.05)
    assert np.allclose(p1.data, p2.data, atol=1e-15)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step(zeros(2, 2), zeros(1, 2), 0.1)


def test_adam_zero_grad_fresh_state_no_change():
    p = matrix([[3.0, -1.0]], DOUBLE)
    before = p.data.copy()
    adam_step(p, zeros(1, 2, DOUBLE), AdamState(p), 1e-3)
    assert np.array_equal(p.data, before)


@pytest.mark.parametrize("g", [0.5, -2.0, 17.0])
def test_adam_first_step_closed_form(g):
    # first bias-corrected step: delta = -lr * g / (|g| + eps) ~ -lr*sign(g)
    lr, eps = 1e-3, 1e-8
    p = matrix([[0.0]], DOUBLE)
    adam_step(p, matrix([[g]], DOUBLE), AdamState(p), lr, eps=eps)
    expected = -lr * g / (abs(g) + eps)
    assert np.isclose(p.data[0, 0], expected, rtol=1e-9)


def test_adam_scale_robust_first_step():
    out = []
    for scale in (1.0, 100.0):
        p = matrix([[0.0, 0.0]], DOUBLE)
        g = matrix([[0.2 * scale, -0.8 * scale]], DOUBLE)
        adam_step(p, g, AdamState(p), 1e-3)
        out.append(p.data.copy())
    assert np.allclose(out[0], out[1], atol=1e-5)


def test_adam_t_increments_and_v_nonnegative(rng):
    p = DenseMatrix(rng.standard_normal((3, 3)), DOUBLE)
    st = AdamState(p)
    for k in range(5):
        g = DenseMatrix(rng.standard_normal((3, 3)), DOUBLE)
        adam_step(p, g, st, 1e-3)
        assert st.t == k + 1
        assert (st.v.data >= 0).all()
        assert st.m.shape == p.shape and st.v.shape == p.shape


def test_adam_states_independent(rng):
    pw = DenseMatrix(rng.standard_normal((4, 4)), DOUBLE)
    pm = DenseMatrix(rng.standard_normal((2, 4)), DOUBLE)
    sw, sm = AdamState(pw), AdamState(pm)
    snap_m = sm.m.data.copy()
    adam_step(pw, DenseMatrix(rng.standard_normal((4, 4)), DOUBLE), sw, 1e-3)
    assert np.array_equal(sm.m.data, snap_m)
    assert sm.t == 0


def test_adam_matches_textbook_reference(rng):
    # independent oracle: the two-pass textbook formulation
    p_ref = rng.standard_normal((3, 2))
    beta1, beta2, lr, eps = 0.9, 0.999, 1e-3, 1e-8
    m = np.zeros_like(p_ref)
    v = np.zeros_like(p_ref)
    p = DenseMatrix(p_ref, DOUBLE)
    st = AdamState(p)
    ref = p_ref.copy()
    for t in range(1, 6):
        g = rng.standard_normal((3, 2))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        ref -= lr * mhat / (np.sqrt(vhat) + eps)
        adam_step(p, DenseMatrix(g, DOUBLE), st, lr)
        assert np.allclose(p.data, ref, rtol=1e-9, atol=1e-12)
