import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from crozenas.perturb import PerturbConfig, fgsm, fgsm_from_grad, gaussian_perturb, robust_params
from crozenas.tensor import Batch, GradientSet, ParameterSet, backward, forward_trace, init_params

finite = st.floats(-10, 10, allow_nan=False, width=64)


def _pset(arr, key=("l", "conv_weight")):
    return ParameterSet([(key, np.asarray(arr, dtype=float))])


def test_hand_example():
    out = robust_params(_pset([3.0, 4.0]), GradientSet([(("l", "conv_weight"), np.array([1.0, 0.0]))]), 0.1)
    np.testing.assert_allclose(out[("l", "conv_weight")], [3.5, 4.0], rtol=0, atol=1e-15)


def test_beta_zero_is_bitwise_identity(mixed_plan, tiny_batch):
    params = init_params(mixed_plan, 0)
    trace = forward_trace(mixed_plan, params, tiny_batch.images)
    grads, _ = backward(trace, trace.loss(tiny_batch.labels))
    out = robust_params(params, grads, 0.0)
    assert all(np.array_equal(out[k], params[k]) for k in params)


@pytest.mark.parametrize("theta,g", [([1.0, 2.0], [0.0, 0.0]), ([0.0, 0.0], [1.0, 1.0])])
def test_guard_paths(theta, g):
    out = robust_params(_pset(theta), GradientSet([(("l", "conv_weight"), np.array(g))]), 0.5)
    assert np.array_equal(out[("l", "conv_weight")], theta)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        robust_params(_pset([1.0, 2.0]), GradientSet([(("l", "conv_weight"), np.ones(3))]), 0.1)


@given(arrays(np.float64, 7, elements=finite), arrays(np.float64, 7, elements=finite),
       st.floats(1e-4, 1.0))
def test_relative_step_is_beta(theta, g, beta):
    if np.linalg.norm(theta) < 1e-6 or np.linalg.norm(g) < 1e-6:
        return
    out = robust_params(_pset(theta), GradientSet([(("l", "conv_weight"), g)]), beta)
    rel = np.linalg.norm(out[("l", "conv_weight")] - theta) / np.linalg.norm(theta)
    assert rel == pytest.approx(beta, rel=1e-9)


def test_fgsm_epsilon_zero(mixed_plan, tiny_batch):
    out = fgsm(mixed_plan, init_params(mixed_plan, 0), tiny_batch, 0.0)
    assert np.array_equal(out, tiny_batch.images)


def test_fgsm_sign_saturation():
    x = np.zeros((1, 2, 2, 2))
    out = fgsm_from_grad(x, np.full_like(x, 1e-30), 0.25)
    assert np.all(out == 0.25)


def test_fgsm_zero_gradient_stays_put():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    g = np.array([[[[0.0, 1.0], [-2.0, 0.0]]]])
    out = fgsm_from_grad(x, g, 0.5)
    np.testing.assert_array_equal(out - x, [[[[0.0, 0.5], [-0.5, 0.0]]]])


def test_fgsm_box_on_network(mixed_plan, tiny_batch):
    eps = 8 / 255
    params = init_params(mixed_plan, 3)
    out = fgsm(mixed_plan, params, tiny_batch, eps)
    # independent sign mask from a fresh trace
    trace = forward_trace(mixed_plan, params, tiny_batch.images)
    _, gx = backward(trace, trace.loss(tiny_batch.labels))
    delta = out - tiny_batch.images
    # x + eps - x is eps only up to the float spacing of x
    tol = 8 * np.finfo(float).eps * np.maximum(1.0, np.abs(tiny_batch.images))
    assert np.all(np.abs(delta) <= eps + tol)
    nz = gx != 0
    assert nz.any()
    assert np.all(np.abs(np.abs(delta[nz]) - eps) <= tol[nz])
    assert np.all(delta[~nz] == 0)
    assert np.array_equal(np.sign(delta), np.sign(gx))


def test_fgsm_clip():
    x = np.full((1, 1, 2, 2), 0.99)
    out = fgsm_from_grad(x, np.ones_like(x), 0.1, clip=(0.0, 1.0))
    assert np.all(out == 1.0)


def test_gaussian_sigma_zero(tiny_batch):
    out = gaussian_perturb(tiny_batch, 0.0, np.random.default_rng(0))
    assert np.array_equal(out, tiny_batch.images)


def test_gaussian_std_and_determinism():
    sigma = 8 / 255
    batch = Batch(np.zeros((10, 1, 100, 100)), np.zeros(10, dtype=int))
    a = gaussian_perturb(batch, sigma, np.random.default_rng(42))
    b = gaussian_perturb(batch, sigma, np.random.default_rng(42))
    assert np.array_equal(a, b)
    assert abs(a.std() / sigma - 1) < 0.02


def test_labels_untouched(tiny_batch):
    before = tiny_batch.labels.copy()
    gaussian_perturb(tiny_batch, 0.1, np.random.default_rng(0))
    assert np.array_equal(tiny_batch.labels, before)


@pytest.mark.parametrize("kwargs", [dict(beta=-1), dict(epsilon=-0.1), dict(sigma=-1),
                                    dict(input_kind="pgd"), dict(clip=(1.0, 0.0))])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        PerturbConfig(**kwargs)


@settings(max_examples=25)
@given(arrays(np.float64, (1, 2, 3, 3), elements=finite),
       arrays(np.float64, (1, 2, 3, 3), elements=finite), st.floats(0, 1))
def test_fgsm_box_property(x, g, eps):
    out = fgsm_from_grad(x, g, eps)
    tol = 8 * np.finfo(float).eps * np.maximum(1.0, np.abs(x))
    assert np.all(np.abs(out - x) <= eps + tol)
