"""Adam update rule against a hand-rolled scalar reference."""

import numpy as np
import pytest

from adae.autodiff import Tensor
from adae.optim import Adam, AdamState, NonFiniteGradientError, adam_step


def reference_adam(x0, grads, lr, beta1=0.5, beta2=0.999, eps=1e-8):
    """Scalar reference sequence, written out step by step."""
    x, m, v = x0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x = x - lr * m_hat / (np.sqrt(v_hat) + eps)
        out.append(x)
    return out


def test_first_step_moves_by_about_lr():
    # deviation from lr is eps/|g|, so keep |g| well above eps=1e-8
    lr = 0.01
    for g in (3.0, -0.25, 1.0):
        p = Tensor(np.array([1.0, 2.0]), name="p")
        s = AdamState.for_param(p)
        adam_step(p, np.full(2, g), s, lr)
        moved = np.abs(p.data - np.array([1.0, 2.0]))
        assert np.all(np.abs(moved - lr) < 1e-6 * lr)
        assert np.all(np.sign(np.array([1.0, 2.0]) - p.data) == np.sign(g))


def test_zero_gradient_never_moves_parameter():
    p = Tensor(np.array([0.5, -0.5]), name="p")
    s = AdamState.for_param(p)
    for _ in range(25):
        adam_step(p, np.zeros(2), s, 0.1)
    assert np.array_equal(p.data, [0.5, -0.5])


def test_three_steps_on_quadratic_match_reference():
    # f(x) = x^2, so grad = 2x, from x=1 with lr=0.1
    p = Tensor(np.array([1.0]), name="x")
    s = AdamState.for_param(p)
    xs = []
    grads = []
    x_ref = 1.0
    ref_m = ref_v = 0.0
    refs = []
    for t in range(1, 4):
        g = 2.0 * float(p.data[0])
        adam_step(p, np.array([g]), s, 0.1)
        xs.append(float(p.data[0]))
        # reference computed independently on the same gradient sequence
        ref_g = 2.0 * x_ref
        ref_m = 0.5 * ref_m + 0.5 * ref_g
        ref_v = 0.999 * ref_v + 0.001 * ref_g * ref_g
        x_ref = x_ref - 0.1 * (ref_m / (1 - 0.5 ** t)) / (np.sqrt(ref_v / (1 - 0.999 ** t)) + 1e-8)
        refs.append(x_ref)
    assert np.allclose(xs, refs, atol=1e-12, rtol=0)


def test_constant_gradient_sequence_matches_reference():
    p = Tensor(np.array([0.0]), name="x")
    s = AdamState.for_param(p)
    got = []
    for _ in range(5):
        adam_step(p, np.array([0.7]), s, 0.05)
        got.append(float(p.data[0]))
    assert np.allclose(got, reference_adam(0.0, [0.7] * 5, 0.05), atol=1e-12, rtol=0)


def test_nonfinite_gradient_names_the_parameter():
    p = Tensor(np.zeros(2), name="generator.encoder0.kernel")
    s = AdamState.for_param(p)
    with pytest.raises(NonFiniteGradientError, match="generator.encoder0.kernel"):
        adam_step(p, np.array([np.nan, 0.0]), s, 0.1)


def test_second_moment_stays_nonnegative_and_t_counts():
    rng = np.random.default_rng(0)
    p = Tensor(np.zeros(4), name="p")
    s = AdamState.for_param(p)
    for t in range(1, 20):
        adam_step(p, rng.standard_normal(4), s, 0.01)
        assert np.all(s.v >= 0)
        assert s.t == t


def test_optimizer_wrapper_steps_only_params_with_grads():
    a = Tensor(np.ones(2), requires_grad=True, name="a")
    b = Tensor(np.ones(2), requires_grad=True, name="b")
    opt = Adam([a, b])
    a.grad = np.ones(2)
    b.grad = None
    opt.step(0.1)
    assert not np.array_equal(a.data, np.ones(2))
    assert np.array_equal(b.data, np.ones(2))


def test_state_arrays_roundtrip():
    a = Tensor(np.ones(3), requires_grad=True, name="w")
    opt = Adam([a])
    a.grad = np.full(3, 0.3)
    opt.step(0.05)
    dumped = opt.state_arrays("adam.g")
    opt2 = Adam([a])
    opt2.load_state_arrays("adam.g", dumped)
    st1 = opt.states[id(a)]
    st2 = opt2.states[id(a)]
    assert np.array_equal(st1.m, st2.m)
    assert np.array_equal(st1.v, st2.v)
    assert st1.t == st2.t
