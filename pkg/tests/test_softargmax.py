import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from posereg.softargmax import (joint_probability, ramp_weights, soft_argmax, soft_argmax_backward,
                                soft_argmax_conv, soft_argmax_printed_derivative, spatial_softmax,
                                spatial_softmax_composed)
from posereg.tensor import Tensor, finite_difference_check

maps = hnp.arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)),
                  elements=st.floats(-30, 30, allow_nan=False))


def test_ramps():
    r = ramp_weights(4, 2)
    assert np.array_equal(r.wx[0], [0.25, 0.5, 0.75, 1.0])
    assert np.array_equal(r.wy[:, 0], [0.5, 1.0])
    assert r.stacked().shape == (2, 8)
    with pytest.raises(ValueError):
        ramp_weights(0)


def test_softmax_examples():
    assert np.array_equal(spatial_softmax(np.zeros((2, 2))).data, np.full((2, 2), 0.25))
    h = np.log([[1.0, 3.0], [2.0, 2.0]])
    assert np.allclose(spatial_softmax(h).data.ravel(), [0.125, 0.375, 0.25, 0.25], atol=1e-15)


def test_softmax_matches_direct_formula():
    h = np.random.default_rng(0).normal(size=(8, 8))
    assert np.abs(spatial_softmax(h).data - oracles.softmax(h)).max() < 1e-12


def test_softmax_extreme_magnitudes_stay_normalised():
    h = np.random.default_rng(1).choice([-1e4, 1e4], size=(6, 6))
    p = spatial_softmax(h).data
    assert np.isfinite(p).all() and abs(p.sum() - 1) < 1e-9


def test_composed_softmax_agrees_with_fused():
    h = np.random.default_rng(2).normal(size=(3, 5, 5))
    assert np.allclose(spatial_softmax(h).data, spatial_softmax_composed(h).data, rtol=0, atol=1e-15)


def test_soft_argmax_uniform_centroid():
    assert np.array_equal(soft_argmax(np.zeros((4, 4))).data, [0.625, 0.625])


def test_soft_argmax_peak_example():
    h = np.zeros((8, 8))
    h[5, 2] = 50.0          # 1-based column 3, row 6
    assert np.abs(soft_argmax(h).data - [3 / 8, 6 / 8]).max() < 1e-6


def test_soft_argmax_matches_direct_formula():
    h = np.random.default_rng(3).normal(size=(7, 5)) * 3
    assert np.abs(soft_argmax(h).data - oracles.soft_argmax(h)).max() < 1e-12


def test_sharpening_sweep_shrinks_distance():
    rng = np.random.default_rng(4)
    h = rng.uniform(-1, 0, size=(8, 8))
    h[2, 6] = 1.0           # margin >= 1 over every other cell
    target = np.array([7 / 8, 3 / 8])
    dists = [np.linalg.norm(soft_argmax(beta * h).data - target) for beta in (1, 5, 25)]
    assert dists[0] > dists[1] > dists[2]
    assert dists[2] < 1 / (8 * 1e3)


def test_batched_shapes():
    h = np.zeros((2, 3, 4, 5))
    assert soft_argmax(h).shape == (2, 3, 2)
    assert joint_probability(h).shape == (2, 3)


def test_conv_realisation_is_bit_identical():
    rng = np.random.default_rng(5)
    for shape in [(1, 1, 8, 8), (2, 5, 8, 8), (3, 2, 6, 9)]:
        h = rng.normal(size=shape) * 4
        assert np.array_equal(soft_argmax(h).data, soft_argmax_conv(h).data)
        h32 = h.astype(np.float32)
        assert np.array_equal(soft_argmax(h32).data, soft_argmax_conv(h32).data)


def test_gradient_of_uniform_map_has_zero_mean():
    g = soft_argmax_backward(np.zeros((5, 5)), [1.0, 0.0])
    assert abs(g.sum()) < 1e-15


def test_gradient_is_shift_invariant():
    h = np.random.default_rng(6).normal(size=(6, 6))
    up = np.array([0.3, -1.2])
    assert np.allclose(soft_argmax_backward(h, up), soft_argmax_backward(h + 7.5, up), rtol=0, atol=1e-15)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(5):
        h = Tensor(rng.normal(size=(6, 6)))
        up = rng.normal(size=2)
        assert finite_difference_check(lambda t: (soft_argmax(t) * up).sum(), h) < 1e-5


def test_backward_function_agrees_with_tape():
    h = Tensor(np.random.default_rng(8).normal(size=(2, 4, 4)), requires_grad=True)
    up = np.array([[1.0, 2.0], [-1.0, 0.5]])
    (soft_argmax(h) * up).sum().backward()
    assert np.allclose(h.grad, soft_argmax_backward(h.data, up), rtol=0, atol=1e-15)


def test_diagonal_only_derivative_differs_from_exact_gradient():
    h = np.random.default_rng(9).normal(size=(4, 4))
    dx, _ = soft_argmax_printed_derivative(h)
    exact = soft_argmax_backward(h, [1.0, 0.0])
    assert np.abs(dx - exact).max() > 1e-3


def test_joint_probability_examples():
    assert joint_probability(np.zeros((3, 3))).data == 0.5
    h = np.full((3, 3), -1.0)
    h[1, 2] = math.log(3)
    assert abs(joint_probability(h).data - 0.75) < 1e-15


def test_joint_probability_gradient():
    rng = np.random.default_rng(10)
    h = Tensor(rng.normal(size=(5, 5)))
    assert finite_difference_check(joint_probability, h) < 1e-5


@settings(max_examples=200, deadline=None)
@given(maps)
def test_softmax_normalised_and_argmax_in_range(h):
    p = spatial_softmax(h).data
    assert abs(p.sum() - 1) < 1e-9
    xy = soft_argmax(h).data
    assert np.all(xy > 0) and np.all(xy <= 1)


@settings(max_examples=200, deadline=None)
@given(maps, st.floats(-100, 100))
def test_shift_invariance(h, c):
    a, b = soft_argmax(h).data, soft_argmax(h + c).data
    assert np.allclose(a, b, rtol=0, atol=1e-12)
