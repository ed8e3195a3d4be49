import numpy as np
import pytest

from gausslock import autodiff, core, generator, traps
from gausslock.errors import ShapeMismatch


def test_zero_upstream_zero_gradient(rng):
    w = generator.init_weights(seed=0)
    g = autodiff.backprop_through_generator(w, rng.normal(size=32), np.zeros((256, 14)))
    assert g.grads.size == sum(p.size for p in w.params().values())
    assert np.all(g.grads == 0.0)


def test_single_linear_layer_closed_form(rng):
    w = generator.init_weights(d_in=4, hidden=(), n_gaussians=2, seed=0)
    x = rng.normal(size=4)
    up = rng.normal(size=(2, 14))
    g = autodiff.backprop_through_generator(w, x, up).as_dict()
    assert np.allclose(g["W0"], np.outer(up.ravel(), x), atol=1e-14)
    assert np.allclose(g["b0"], up.ravel(), atol=1e-14)


def test_two_layer_mlp_against_finite_differences(rng):
    w = generator.init_weights(d_in=6, hidden=(16,), n_gaussians=4, seed=3)
    X = rng.normal(size=(3, 6))
    up = rng.normal(size=(3, 4, 14))
    g = autodiff.backprop_through_generator(w, X, up)
    theta, layout = autodiff.flatten(w.params())

    def f(t):
        return float(np.sum(up * generator.forward(w.with_params(autodiff.unflatten(t, layout)), X)))

    assert autodiff.fd_check(f, theta, g.grads, samples=50, h=1e-6) < 1e-5


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        autodiff.backprop_through_generator(generator.init_weights(), np.ones(32), np.ones((10, 14)))


def test_fd_check_quadratic(rng):
    theta = rng.normal(size=20)
    assert autodiff.fd_check(lambda t: float(t @ t), theta, 2 * theta, samples=20) < 1e-9


def test_fd_check_detects_corrupted_gradient(rng):
    theta = rng.normal(size=20)
    assert autodiff.fd_check(lambda t: float(t @ t), theta, 2.2 * theta, samples=20) >= 0.05


def test_coupled_trap_through_generator(rng):
    w = generator.init_weights(d_in=8, hidden=(24,), n_gaussians=16, seed=5)
    x = rng.normal(size=8)
    cfg = traps.TrapConfig()
    mask = traps.build_opacity_mask(core.activate(generator.forward(w, x)), 0.1)

    def value(t):
        raw = generator.forward(w.with_params(autodiff.unflatten(t, layout)), x)
        return traps.coupled_trap(core.activate(raw), cfg, mask).value

    res = traps.coupled_trap(core.activate(generator.forward(w, x)), cfg, mask)
    g = autodiff.backprop_through_generator(w, x, res.grad)
    theta, layout = autodiff.flatten(w.params())
    assert autodiff.fd_check(value, theta, g.grads, samples=40, h=1e-6) < 1e-3


def test_deterministic_and_linear(rng):
    w = generator.init_weights(seed=4)
    x = rng.normal(size=32)
    g1, g2 = rng.normal(size=(256, 14)), rng.normal(size=(256, 14))
    a = autodiff.backprop_through_generator(w, x, g1)
    b = autodiff.backprop_through_generator(w, x, g1)
    assert np.array_equal(a.grads, b.grads)
    mix = autodiff.backprop_through_generator(w, x, 2.0 * g1 - 3.0 * g2)
    sep = 2.0 * a.grads - 3.0 * autodiff.backprop_through_generator(w, x, g2).grads
    assert np.allclose(mix.grads, sep, atol=1e-12, rtol=0)
