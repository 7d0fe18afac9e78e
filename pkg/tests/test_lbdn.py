import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustnets import autodiff as ad
from robustnets.autodiff import Tape, grad_check
from robustnets.certify import empirical_lipschitz
from robustnets.lbdn import (SandwichLayer, build_explicit, cayley, init_lbdn, lbdn_forward,
                             lbdn_to_explicit, orthogonality_residual, sandwich_forward)
from robustnets.linalg import DimensionError, spectral_norm


def test_cayley_identity():
    AT, BT = cayley(np.zeros((3, 3)), np.zeros((2, 3)))
    np.testing.assert_array_equal(AT, np.eye(3))
    np.testing.assert_array_equal(BT, np.zeros((2, 3)))


def test_cayley_scalar_closed_form():
    AT, BT = cayley(np.zeros((1, 1)), np.ones((1, 1)))
    np.testing.assert_allclose(AT, [[0.0]], atol=1e-15)
    np.testing.assert_allclose(BT, [[-1.0]])


def test_cayley_residual(rng):
    AT, BT = cayley(rng.standard_normal((3, 3)), rng.standard_normal((5, 3)))
    assert np.linalg.norm(AT.T @ AT + BT.T @ BT - np.eye(3)) < 1e-12


def test_cayley_tape_matches_numpy(rng):
    X, Y = rng.standard_normal((4, 4)), rng.standard_normal((3, 4))
    tape = Tape()
    AT, BT = cayley(tape.leaf(X), tape.leaf(Y))
    ref = cayley(X, Y)
    np.testing.assert_allclose(AT.value, ref[0], atol=1e-13)
    np.testing.assert_allclose(BT.value, ref[1], atol=1e-13)


def test_zero_layer_maps_origin_to_zero():
    layer = SandwichLayer(*cayley(np.zeros((2, 2)), np.zeros((2, 2))), np.zeros((2, 1)), np.ones((2, 1)))
    np.testing.assert_array_equal(sandwich_forward(layer, np.zeros((2, 1))), np.zeros((2, 1)))


def test_scalar_layer_with_zero_A_is_zero():
    AT, BT = cayley(np.zeros((1, 1)), np.ones((1, 1)))
    layer = SandwichLayer(AT, BT, np.zeros((1, 1)), np.ones((1, 1)))
    z = np.linspace(-3, 3, 7).reshape(1, -1)
    np.testing.assert_allclose(sandwich_forward(layer, z), np.zeros((1, 7)), atol=1e-15)


def test_sandwich_layer_is_one_lipschitz(rng):
    p = init_lbdn(5, (7,), 1, seed=3)
    p.params["d0"] = rng.standard_normal((7, 1))
    p.params["b0"] = rng.standard_normal((7, 1))
    layer = lbdn_to_explicit(p).layers[0]
    z1, z2 = rng.standard_normal((5, 1000)), rng.standard_normal((5, 1000))
    lhs = np.linalg.norm(sandwich_forward(layer, z1) - sandwich_forward(layer, z2), axis=0)
    assert np.all(lhs <= np.linalg.norm(z1 - z2, axis=0) * (1 + 1e-9))


def test_unit_gamma_scales():
    m = lbdn_to_explicit(init_lbdn(3, (4,), 2, gamma=1.0))
    assert m.input_scale == 1.0 and m.output_scale == 1.0


def test_output_only_model_norm_bounded():
    gamma = 2.5
    for seed in range(5):
        m = lbdn_to_explicit(init_lbdn(6, (), 3, gamma=gamma, seed=seed))
        assert spectral_norm(m.W_L) <= 1 + 1e-8
        W = lbdn_forward(m, np.eye(6)) - lbdn_forward(m, np.zeros((6, 1)))
        assert spectral_norm(W) <= gamma * (1 + 1e-8)


def test_mnist_shape():
    p = init_lbdn(784, (64, 64), 10, gamma=5.0)
    m = lbdn_to_explicit(p)
    out = lbdn_forward(m, np.random.default_rng(0).random((784, 128)))
    assert out.shape == (10, 128)
    assert m.input_scale * m.output_scale == pytest.approx(5.0, rel=1e-15)


def test_zero_params_give_constant_bias():
    p = init_lbdn(3, (4, 4), 2)
    for k in p.params:
        p.params[k][:] = 0.0
    p.params["b2"][:] = [[0.5], [-1.0]]
    out = lbdn_forward(lbdn_to_explicit(p), np.random.default_rng(1).standard_normal((3, 6)))
    np.testing.assert_array_equal(out, np.tile([[0.5], [-1.0]], (1, 6)))


def test_one_dimensional_slope_bounded():
    gamma = 4.0
    p = init_lbdn(1, (8, 8), 1, gamma=gamma, seed=2)
    m = lbdn_to_explicit(p)
    x = np.linspace(-5, 5, 2001).reshape(1, -1)
    y = lbdn_forward(m, x)
    assert np.max(np.abs(np.diff(y)) / np.diff(x)) <= gamma * (1 + 1e-9)
    assert empirical_lipschitz(lambda u: lbdn_forward(m, u), 1) <= gamma * (1 + 1e-6)


def test_forward_shape_error():
    m = lbdn_to_explicit(init_lbdn(3, (4,), 2))
    with pytest.raises(DimensionError):
        lbdn_forward(m, np.ones((2, 1)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), widths=st.lists(st.integers(1, 12), max_size=3),
       nu=st.integers(1, 6), ny=st.integers(1, 6))
def test_orthogonality_property(seed, widths, nu, ny):
    m = lbdn_to_explicit(init_lbdn(nu, widths, ny, seed=seed))
    assert max(orthogonality_residual(layer) for layer in m.layers) <= 1e-10


def test_gamma_only_changes_scales():
    a = lbdn_to_explicit(init_lbdn(4, (5, 3), 2, gamma=1.0, seed=8))
    b = lbdn_to_explicit(init_lbdn(4, (5, 3), 2, gamma=9.0, seed=8))
    for la, lb in zip(a.layers, b.layers):
        assert la.AT.tobytes() == lb.AT.tobytes() and la.BT.tobytes() == lb.BT.tobytes()
    assert a.input_scale == 1.0
    assert b.input_scale == pytest.approx(3.0, rel=1e-15)


def test_tape_forward_matches_numpy(rng):
    p = init_lbdn(3, (5,), 2, gamma=2.0, seed=0, act="tanh")
    x = rng.standard_normal((3, 4))
    tape = Tape()
    y = lbdn_forward(build_explicit(tape, p, {k: tape.leaf(v) for k, v in p.params.items()}), x)
    np.testing.assert_allclose(y.value, lbdn_forward(lbdn_to_explicit(p), x), atol=1e-14)


@pytest.mark.parametrize("learnable", [False, True])
def test_gradient_through_network(learnable):
    p = init_lbdn(3, (4, 3), 2, gamma=2.0, learnable_gamma=learnable, seed=1, act="tanh")
    rng = np.random.default_rng(0)
    for k in p.params:
        if k[0] in "db":
            p.params[k] = 0.3 * rng.standard_normal(p.params[k].shape)
    x, target = rng.standard_normal((3, 6)), rng.standard_normal((2, 6))
    names = sorted(p.params)

    def f(tape, leaves):
        m = build_explicit(tape, p, dict(zip(names, leaves)))
        return ad.mean(ad.square(lbdn_forward(m, x) - target))

    assert grad_check(f, [p.params[k] for k in names]) < 1e-6
