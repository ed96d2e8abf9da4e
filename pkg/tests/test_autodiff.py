"""Engine-level gradient and tape behavior tests.

Numeric ground truth throughout is central finite differences at
h = 1e-4 in float64; analytic gradients must agree to 1e-5 relative
(error floored at unit scale for near-zero entries).
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradsuite
from rcnas import autodiff as ad
from rcnas.autodiff import (
    GradCheckError,
    ShapeError,
    Tape,
    Tensor,
    UnknownPrimitiveError,
    forward_primitive,
    grad_check,
    primitive_names,
    register_primitive,
)

ENGINE_CASES = gradsuite.engine_cases()


@pytest.mark.parametrize("label,f,x", ENGINE_CASES, ids=[c[0] for c in ENGINE_CASES])
def test_primitive_gradients(label, f, x):
    report = grad_check(f, x, h=gradsuite.H, tol=gradsuite.TOL)
    assert report.passed, f"{label}: {report}"


def test_square_at_three_matches_slope_six():
    # d(x^2)/dx at 3 is 6; the FD oracle must agree essentially exactly
    def f(x):
        return ad.tensor_sum(ad.mul(x, x))

    report = grad_check(f, Tensor(np.array([3.0])), h=1e-4)
    assert report.passed
    assert abs(report.analytic[0] - 6.0) < 1e-12
    assert abs(report.numeric[0] - 6.0) < 1e-8


def test_fanout_accumulates_additively():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    with Tape() as tape:
        y = ad.add(x, x)  # y = 2x, dy/dx = 2 per coordinate
        loss = ad.tensor_sum(y)
        tape.backward(loss)
    assert np.array_equal(x.grad, np.array([2.0, 2.0]))


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ad.relu(x)
        with pytest.raises(ShapeError):
            tape.backward(y)


def test_backward_on_empty_tape_raises():
    with Tape() as tape:
        loss = Tensor(np.array(1.0), requires_grad=True)
        with pytest.raises(RuntimeError):
            tape.backward(loss)


def test_no_grad_outside_tape():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = ad.relu(x)  # no active tape: nothing recorded
    assert y.grad is None and x.grad is None


def test_channel_shuffle_permutation():
    x = Tensor(np.arange(4, dtype=np.float64).reshape(1, 4, 1, 1))
    y = ad.channel_shuffle(x, 2)
    assert list(y.data[0, :, 0, 0]) == [0.0, 2.0, 1.0, 3.0]


def test_uniform_cross_entropy_gradient():
    # logits all equal: grad is softmax minus one-hot, i.e. 1/K off-target
    K, B = 4, 2
    x = Tensor(np.zeros((B, K)), requires_grad=True)
    labels = np.array([1, 3])
    with Tape() as tape:
        loss = ad.cross_entropy_logits(x, labels)
        tape.backward(loss)
    expect = np.full((B, K), 1.0 / K)
    expect[0, 1] -= 1.0
    expect[1, 3] -= 1.0
    expect /= B
    np.testing.assert_allclose(x.grad, expect, atol=1e-12)


def test_max_pool_deterministic_tie_break():
    # two equal maxima in one window: gradient flows to the first argmax only
    x = Tensor(np.array([[[[5.0, 5.0], [0.0, 0.0]]]]), requires_grad=True)
    with Tape() as tape:
        y = ad.max_pool2d(x, 2, stride=1, padding=0)
        tape.backward(ad.tensor_sum(y))
    assert x.grad[0, 0, 0, 0] == 1.0 and x.grad[0, 0, 0, 1] == 0.0


def test_grad_check_reports_bad_backward_coordinates():
    # negative control: a deliberately wrong backward must be caught,
    # with the offending coordinates listed
    def bad_double(x: Tensor) -> Tensor:
        out = Tensor(x.data * 2.0, requires_grad=x.requires_grad)
        return ad._record(out, (x,), lambda g: (g * 3.0,))  # wrong: claims slope 3

    def f(x):
        return ad.tensor_sum(bad_double(x))

    report = grad_check(f, Tensor(np.array([1.0, 2.0])), h=1e-4)
    assert not report.passed
    assert len(report.failures) == 2
    assert "coord" in str(report)


def test_grad_check_wraps_exceptions():
    def f(x):
        if x.data[0] > 1.0:
            raise ValueError("boom")
        return ad.tensor_sum(x)

    with pytest.raises(GradCheckError) as ei:
        grad_check(f, Tensor(np.array([1.0])), h=1e-4)
    assert ei.value.coordinate is not None


def test_primitive_registry_round_trip():
    names = primitive_names()
    assert "conv2d" in names and "softmax" in names
    out = forward_primitive("relu", [Tensor(np.array([-1.0, 2.0]))])
    np.testing.assert_array_equal(out.data, [0.0, 2.0])
    with pytest.raises(UnknownPrimitiveError):
        forward_primitive("no_such_primitive", [])


def test_register_primitive_then_dispatch():
    register_primitive("test_negate", lambda ins, at: ad.scale(ins[0], -1.0))
    out = forward_primitive("test_negate", [Tensor(np.array([3.0]))])
    assert out.data[0] == -3.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_simplex(vals):
    x = Tensor(np.array(vals))
    s = ad.softmax(x).data
    assert abs(s.sum() - 1.0) < 1e-12
    assert np.all(s >= 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_weighted_sum_matches_manual_combination(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(3)
    xs = [rng.standard_normal((2, 2)) for _ in range(3)]
    out = ad.weighted_sum(Tensor(w), [Tensor(x) for x in xs])
    manual = sum(wi * xi for wi, xi in zip(w, xs))
    np.testing.assert_allclose(out.data, manual, atol=1e-12)


def test_assert_finite_raises_on_nan():
    with pytest.raises(ad.NumericError):
        ad.assert_finite(Tensor(np.array([1.0, np.nan])), "unit test")
