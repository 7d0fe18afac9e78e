import numpy as np
import pytest

from robustnets.certify import certify_lbdn, verify_ren
from robustnets.lbdn import init_lbdn, lbdn_forward, lbdn_to_explicit
from robustnets.ren import RenDims, init_ren, to_explicit
from robustnets.serialize import (ModelFileError, load_lbdn, load_ren, save_lbdn, save_ren, sniff,
                                  spec_from_file)

from test_ren import KINDS, make_spec


@pytest.mark.parametrize("kind", KINDS)
def test_ren_round_trip(tmp_path, kind):
    dims = RenDims(2, 3, 4, 2)
    spec = make_spec(kind, 2, 2)
    params = init_ren(dims, spec, init="random", seed=3, act="tanh")
    model, cert = to_explicit(params)
    path = tmp_path / "m.txt"
    save_ren(path, model, cert, spec)
    assert sniff(path) == "ren"
    m2, c2, variant, alpha, extras = load_ren(path)
    assert variant == kind and alpha == spec.alpha and m2.act == "tanh"
    for name in ("A", "B1", "D11", "D22", "bx", "by"):
        np.testing.assert_array_equal(getattr(m2, name), getattr(model, name))
    np.testing.assert_array_equal(c2.P, cert.P)
    np.testing.assert_array_equal(c2.Lambda, cert.Lambda)
    rebuilt = spec_from_file(variant, alpha, extras, gamma=2.0, nu_passive=0.2, rho=0.5)
    assert verify_ren(m2, c2, rebuilt).passed


def test_ren_empty_blocks_keep_shape(tmp_path):
    spec = make_spec("contracting", 1, 1)
    model, cert = to_explicit(init_ren(RenDims(1, 2, 0, 1), spec, seed=0))
    save_ren(tmp_path / "m.txt", model, cert, spec)
    m2 = load_ren(tmp_path / "m.txt")[0]
    assert m2.B1.shape == (2, 0) and m2.D11.shape == (0, 0) and m2.D21.shape == (1, 0)


def test_lbdn_round_trip(tmp_path, rng):
    p = init_lbdn(3, (5, 4), 2, gamma=7.0, learnable_gamma=True, seed=1, act="tanh")
    save_lbdn(tmp_path / "l.txt", p)
    assert sniff(tmp_path / "l.txt") == "lbdn"
    q = load_lbdn(tmp_path / "l.txt")
    assert (q.nu, q.widths, q.ny, q.act, q.learnable_gamma) == (3, (5, 4), 2, "tanh", True)
    x = rng.standard_normal((3, 6))
    np.testing.assert_array_equal(lbdn_forward(lbdn_to_explicit(q), x), lbdn_forward(lbdn_to_explicit(p), x))
    assert certify_lbdn(q).passed


def test_bad_files(tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    with pytest.raises(ModelFileError):
        load_ren(empty)
    with pytest.raises(ModelFileError):
        load_lbdn(empty)
    bad = tmp_path / "bad.txt"
    bad.write_text("hello world\n")
    with pytest.raises(ModelFileError):
        sniff(bad)
    truncated = tmp_path / "t.txt"
    truncated.write_text("renv1 contracting 1 1 1 1 1\nA 2 2\n1 2\n")
    with pytest.raises(ModelFileError):
        load_ren(truncated)
    missing = tmp_path / "m.txt"
    missing.write_text("renv1 contracting 1 1 1 1 1\nA 1 1\n0.5\n")
    with pytest.raises(ModelFileError, match="missing"):
        load_ren(missing)
