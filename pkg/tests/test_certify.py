import dataclasses

import numpy as np
import pytest

from robustnets.autodiff import ContractError
from robustnets.certify import (build_iqc_matrix, certify_lbdn, contraction_probe, empirical_lipschitz,
                                iqc_accumulate, passivity_probe, unrolled_ren_map, verify_ren)
from robustnets.lbdn import init_lbdn, lbdn_forward, lbdn_to_explicit
from robustnets.ren import Certificate, ExplicitRen, IqcSpec, RenDims, init_ren, to_explicit

from test_ren import make_spec


def _scalar_model(a=0.5):
    z = np.zeros
    return ExplicitRen(A=np.array([[a]]), B1=z((1, 0)), B2=z((1, 1)), C1=z((0, 1)), D11=z((0, 0)),
                       D12=z((0, 1)), C2=np.eye(1), D21=z((1, 0)), D22=z((1, 1)),
                       bx=z((1, 1)), bv=z((0, 1)), by=z((1, 1)))


def _static_model(D22):
    ny, nu = D22.shape
    z = np.zeros
    return ExplicitRen(A=z((0, 0)), B1=z((0, 0)), B2=z((0, nu)), C1=z((0, 0)), D11=z((0, 0)),
                       D12=z((0, nu)), C2=z((ny, 0)), D21=z((ny, 0)), D22=D22,
                       bx=z((0, 1)), bv=z((0, 1)), by=z((ny, 1)))


def test_static_gain_matrix(rng):
    D22 = rng.standard_normal((2, 3))
    gamma = 1.7
    M = build_iqc_matrix(_static_model(D22), Certificate(np.zeros((0, 0))), IqcSpec.lipschitz(gamma))
    np.testing.assert_allclose(M, D22.T @ D22 / gamma - gamma * np.eye(3), atol=1e-14)
    norm = np.linalg.norm(D22, 2)
    assert verify_ren(_static_model(D22), Certificate(np.zeros((0, 0))), IqcSpec.lipschitz(1.01 * norm)).passed
    assert not verify_ren(_static_model(D22), Certificate(np.zeros((0, 0))), IqcSpec.lipschitz(0.99 * norm)).passed


@pytest.mark.parametrize("a,ok", [(0.85, True), (0.95, False), (-0.89, True), (-0.91, False)])
def test_scalar_contraction_matrix(a, ok):
    spec = IqcSpec.contracting(0.9)
    M = build_iqc_matrix(_scalar_model(a), Certificate(np.eye(1)), spec)
    assert M[0, 0] == pytest.approx(a * a - 0.81)
    assert verify_ren(_scalar_model(a), Certificate(np.eye(1)), spec).passed is ok


def test_perturbed_model_fails():
    spec = IqcSpec.contracting()
    p = init_ren(RenDims(1, 4, 6, 1), spec, init="random", seed=0)
    m, c = to_explicit(p)
    report = verify_ren(dataclasses.replace(m, A=3 * m.A), c, spec)
    assert not report.passed and report.margin > 0


def test_larger_gamma_still_passes():
    p = init_ren(RenDims(2, 3, 5, 2), IqcSpec.lipschitz(1.0), init="random", seed=2)
    m, c = to_explicit(p)
    assert verify_ren(m, c, IqcSpec.lipschitz(1.0)).passed
    assert verify_ren(m, c, IqcSpec.lipschitz(3.0)).passed


def test_falsification_has_teeth():
    spec = IqcSpec.contracting()
    for name in ("A", "B1", "C1"):
        failures = 0
        for seed in range(100):
            p = init_ren(RenDims(1, 3, 4, 1), spec, init="random", seed=seed)
            m, c = to_explicit(p)
            bad = dataclasses.replace(m, **{name: 3 * getattr(m, name)})
            failures += not verify_ren(bad, c, spec).passed
        assert failures >= 95, name


def test_iqc_identical_runs_zero():
    p = init_ren(RenDims(2, 3, 4, 2), IqcSpec.lipschitz(1.0), init="random", seed=0)
    m, c = to_explicit(p)
    us = [np.ones((2, 1))] * 5
    assert iqc_accumulate(m, c, p.spec, np.ones((3, 1)), np.ones((3, 1)), us, us) == (0.0, 0.0)


def test_iqc_length_mismatch():
    p = init_ren(RenDims(1, 1, 1, 1), IqcSpec.lipschitz(1.0), seed=0)
    m, c = to_explicit(p)
    with pytest.raises(ContractError):
        iqc_accumulate(m, c, p.spec, np.zeros((1, 1)), np.zeros((1, 1)), [np.zeros((1, 1))], [])


def _pairs(rng, nx, nu, pairs, horizon):
    xa, xb = rng.standard_normal((nx, pairs)), rng.standard_normal((nx, pairs))
    us = [rng.standard_normal((nu, pairs)) for _ in range(horizon)]
    vs = [rng.standard_normal((nu, pairs)) for _ in range(horizon)]
    return xa, xb, us, vs


@pytest.mark.parametrize("kind", ["lipschitz", "passive_input", "passive_output", "general"])
def test_iqc_brute_force(kind, rng):
    spec = make_spec(kind, 2, 2)
    p = init_ren(RenDims(2, 3, 6, 2), spec, init="random", seed=11)
    m, c = to_explicit(p)
    xa, xb, us, vs = _pairs(rng, 3, 2, 30, 40)
    lhs, bound = iqc_accumulate(m, c, spec, xa, xb, us, vs)
    assert np.all(lhs >= bound - 1e-8 * (1 + np.abs(bound) + np.abs(lhs)))


def test_lipschitz_rearrangement(rng):
    gamma = 2.0
    p = init_ren(RenDims(2, 3, 6, 2), IqcSpec.lipschitz(gamma), init="random", seed=1)
    m, c = to_explicit(p)
    xa, xb, us, vs = _pairs(rng, 3, 2, 10, 30)
    from robustnets.ren import ren_simulate
    _, ya = ren_simulate(m, xa, us)
    _, yb = ren_simulate(m, xb, vs)
    du2 = sum(((u - v) ** 2).sum(axis=0) for u, v in zip(us, vs))
    dy2 = sum(((a - b) ** 2).sum(axis=0) for a, b in zip(ya, yb))
    d = np.einsum("ib,ij,jb->b", xa - xb, c.P, xa - xb)
    assert np.all(gamma ** 2 * du2 - dy2 >= -gamma * d - 1e-8 * (1 + gamma ** 2 * du2))


def test_contraction_probe_cases():
    m, c = _scalar_model(0.5), Certificate(np.eye(1))
    us = [np.zeros((1, 1))] * 10
    np.testing.assert_allclose(contraction_probe(m, c, np.ones((1, 1)), np.zeros((1, 1)), us),
                               0.5 ** np.arange(11))
    assert not contraction_probe(m, c, np.ones((1, 1)), np.ones((1, 1)), us).any()


def test_contraction_probe_rate(rng):
    spec = IqcSpec.contracting(0.8)
    p = init_ren(RenDims(1, 4, 8, 1), spec, init="random", seed=5)
    m, c = to_explicit(p)
    us = [rng.standard_normal((1, 1)) for _ in range(50)]
    r = contraction_probe(m, c, rng.standard_normal((4, 1)), rng.standard_normal((4, 1)), us)
    assert np.all(r[1:] <= 0.8 * r[:-1] + 1e-9 * (1 + r[0]))


@pytest.mark.parametrize("kind", ["passive_input", "passive_output"])
def test_passivity_probe(kind):
    spec = make_spec(kind, 2, 2)
    p = init_ren(RenDims(2, 3, 6, 2), spec, init="random", seed=3)
    m, c = to_explicit(p)
    assert passivity_probe(m, c, spec, pairs=100, horizon=50) >= -1e-8


def test_passivity_probe_static_quadratic_form(rng):
    Z = rng.standard_normal((2, 2))
    nu = 0.3
    m = _static_model(nu * np.eye(2) + Z.T @ Z)
    spec = IqcSpec.passive_input(nu)
    assert passivity_probe(m, Certificate(np.zeros((0, 0))), spec) >= -1e-12
    assert passivity_probe(m, Certificate(np.zeros((0, 0))), spec, scale=0.0) == 0.0


def test_passivity_probe_needs_passive_spec():
    p = init_ren(RenDims(1, 1, 1, 1), IqcSpec.lipschitz(1.0), seed=0)
    m, c = to_explicit(p)
    with pytest.raises(ContractError):
        passivity_probe(m, c, p.spec)


def test_lipschitz_linear_and_relu(rng):
    assert empirical_lipschitz(lambda x: 2.0 * x, 3) == pytest.approx(2.0, abs=1e-9)
    W = rng.standard_normal((4, 5))
    est = empirical_lipschitz(lambda x: W @ x, 5)
    assert est == pytest.approx(np.linalg.norm(W, 2), rel=1e-6)

    def relu(x):
        from robustnets import autodiff as ad
        return ad.relu(x) if isinstance(x, ad.Var) else np.maximum(x, 0.0)

    assert empirical_lipschitz(relu, 1) == pytest.approx(1.0, abs=1e-9)


def test_lipschitz_of_random_lbdn():
    p = init_lbdn(4, (16, 16), 3, gamma=10.0, seed=0)
    m = lbdn_to_explicit(p)
    est = empirical_lipschitz(lambda x: lbdn_forward(m, x), 4)
    assert 0 < est <= 10 * (1 + 1e-6)


def test_lipschitz_of_unrolled_ren():
    gamma = 1.5
    p = init_ren(RenDims(2, 3, 6, 2), IqcSpec.lipschitz(gamma), init="random", seed=0)
    m, _ = to_explicit(p)
    f = unrolled_ren_map(m, np.zeros((3, 1)), 10)
    assert empirical_lipschitz(f, 20, trials=200) <= gamma * (1 + 1e-6)


def test_certify_lbdn_cases():
    p = init_lbdn(3, (5, 4), 2, gamma=1.0, seed=0)
    report = certify_lbdn(p)
    assert report.passed and report.matrix_norm == 1.0
    m = lbdn_to_explicit(p)
    layer = m.layers[0]
    m.layers[0] = dataclasses.replace(layer, AT=1.1 * layer.AT, pre=None)
    bad = certify_lbdn(m)
    assert not bad.passed and bad.margin > 0.01
