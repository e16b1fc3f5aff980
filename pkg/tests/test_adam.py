import numpy as np
import pytest

from dynrad.diffcore import Adam, GradientNanError


def test_zero_gradient_is_identity():
    p = np.array([1.0, -2.0, 3.0])
    opt = Adam(lr=0.1, size=3)
    for _ in range(5):
        opt.step(p, np.zeros(3))
    np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])


def test_first_step_is_signed_lr():
    p = np.array([0.0])
    opt = Adam(lr=0.05, size=1)
    opt.step(p, np.array([3.7]))
    # bias-corrected first step: -lr * g/(|g| + eps) ~ -lr * sign(g)
    assert abs(p[0] + 0.05) < 1e-7
    p2 = np.array([0.0])
    opt2 = Adam(lr=0.05, size=1)
    opt2.step(p2, np.array([-0.002]))
    assert abs(p2[0] - 0.05) < 1e-4


def scripted_adam(g_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Independent reference recurrence, scalar case."""
    m = v = 0.0
    p = 1.0
    out = []
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
        out.append(p)
    return out


def test_five_steps_match_scripted_recurrence():
    # quadratic f(p) = p^2, grad 2p, five coupled steps
    lr = 0.1
    p = np.array([1.0])
    opt = Adam(lr=lr, size=1)
    mine = []
    ref_grads = []
    for _ in range(5):
        g = 2.0 * p[0]
        ref_grads.append(g)
        opt.step(p, np.array([g]))
        mine.append(p[0])
    ref = scripted_adam(ref_grads, lr)
    np.testing.assert_allclose(mine, ref, atol=1e-12, rtol=0)


def test_nan_gradient_aborts_step():
    p = np.array([1.0, 2.0])
    opt = Adam(lr=0.1, size=2)
    with pytest.raises(GradientNanError):
        opt.step(p, np.array([np.nan, 1.0]))
    np.testing.assert_array_equal(p, [1.0, 2.0])


def test_slice_only_touches_its_range():
    p = np.arange(6, dtype=np.float64)
    opt = Adam(lr=0.5, size=6, lo=2, hi=4)
    opt.step(p, np.ones(6))
    assert np.array_equal(p[:2], [0.0, 1.0])
    assert np.array_equal(p[4:], [4.0, 5.0])
    assert not np.array_equal(p[2:4], [2.0, 3.0])


def test_zero_lr_scale_is_bit_stable():
    p = np.array([1.0, 2.0])
    before = p.copy()
    opt = Adam(lr=0.1, size=2)
    opt.step(p, np.array([5.0, -5.0]), lr_scale=0.0)
    assert np.array_equal(p, before)
    assert opt.t == 0
