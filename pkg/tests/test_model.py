import numpy as np
import pytest
import sympy as sp
from hypothesis import given
from hypothesis import strategies as st

from chac.model import (
    OMEGA_COMPONENTS,
    MobilitySpec,
    ModelParams,
    PotentialSpec,
    mobility_eval,
    potential_eval,
    regularized_normal,
)

from .oracles import central_diff, f_scalar, f_symbolic

P = PotentialSpec()
M = MobilitySpec()


def test_potential_special_values():
    assert potential_eval(P, 1.0, 1.0)[0] == pytest.approx(0.0, abs=1e-15)
    assert potential_eval(P, 0.0, 0.0)[0] == pytest.approx(0.062, abs=1e-15)


def test_potential_matches_symbolic(rng):
    r, e, f = f_symbolic()
    exprs = [f, sp.diff(f, r), sp.diff(f, e), sp.diff(f, r, r), sp.diff(f, r, e), sp.diff(f, e, e)]
    fns = [sp.lambdify((r, e), ex) for ex in exprs]
    pts = rng.uniform(-0.5, 1.5, size=(50, 2))
    got = potential_eval(P, pts[:, 0], pts[:, 1])
    for g, fn in zip(got, fns):
        np.testing.assert_allclose(g, [fn(a, b) for a, b in pts], rtol=1e-12, atol=1e-13)


def test_potential_derivatives_fd(rng):
    pts = rng.uniform(-0.5, 1.5, size=(100, 2))
    f, fr, fe, frr, fre, fee = potential_eval(P, pts[:, 0], pts[:, 1])
    g = central_diff(lambda x: f_scalar(x[..., 0], x[..., 1]), pts)
    H_r = central_diff(lambda x: potential_eval(P, x[..., 0], x[..., 1])[1], pts)
    H_e = central_diff(lambda x: potential_eval(P, x[..., 0], x[..., 1])[2], pts)
    for got, fd in ((fr, g[:, 0]), (fe, g[:, 1]), (frr, H_r[:, 0]), (fre, H_r[:, 1]), (fee, H_e[:, 1])):
        assert np.max(np.abs(got - fd) / np.maximum(np.abs(fd), 1e-3)) <= 1e-6


def test_shifted_convexity_on_observed_range():
    x = np.linspace(-0.5, 1.5, 200)
    R, E = np.meshgrid(x, x)
    _, _, _, frr, fre, fee = potential_eval(P, R, E)
    a = P.alpha
    assert np.all(frr + a > 0)
    assert np.all((frr + a) * (fee + a) - fre**2 > 0)


def test_potential_nonnegative_on_samples(rng):
    pts = rng.uniform(-2, 3, size=(10000, 2))
    assert potential_eval(P, pts[:, 0], pts[:, 1])[0].min() >= 0


@pytest.mark.parametrize("kw", [{"C": -1.0}, {"D": -0.1}, {"alpha": 0.0}])
def test_potential_spec_validation(kw):
    with pytest.raises(ValueError):
        PotentialSpec(**kw)


def test_param_validation():
    with pytest.raises(ValueError):
        MobilitySpec(l22=0)
    with pytest.raises(ValueError):
        MobilitySpec(c=-1)
    with pytest.raises(ValueError):
        ModelParams(gamma_rho=0)


def test_normal_examples():
    n, dn = regularized_normal(np.zeros(2), 4.0)
    np.testing.assert_array_equal(n, 0)
    np.testing.assert_allclose(dn, np.eye(2) / 2.0)
    n, _ = regularized_normal(np.array([3.0, 4.0]), 1.0)
    np.testing.assert_allclose(n, np.array([3, 4]) / np.sqrt(26), rtol=1e-15)
    with pytest.raises(ValueError):
        regularized_normal(np.zeros(2), 0.0)


vec2 = st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))


@given(vec2, st.floats(1e-3, 1e3))
def test_normal_shorter_than_one(g, c):
    n, dn = regularized_normal(np.array(g), c)
    assert np.linalg.norm(n) < 1
    fd = central_diff(lambda x: regularized_normal(x, c)[0], np.array(g), h=1e-5 * max(1.0, np.linalg.norm(g)))
    assert np.abs(dn - fd).max() <= 1e-6 * max(np.abs(dn).max(), 1e-8) + 1e-12


def test_mobility_zero_gradient():
    L, _ = mobility_eval(M, 0.3, 0.4, np.zeros(2), np.zeros(2))
    np.testing.assert_array_equal(L, np.diag([1.0, 1.0, 1000.0]))


def _random_omega(rng, n, scale=10.0):
    return (
        rng.uniform(-0.5, 1.5, n), rng.uniform(-0.5, 1.5, n),
        rng.standard_normal((n, 2)) * scale, rng.standard_normal((n, 2)) * scale,
    )


def test_mobility_symmetric_spd_and_schur(rng):
    r, e, gr, ge = _random_omega(rng, 10**4)
    gr = gr * 10.0 ** rng.uniform(-3, 2, size=(10**4, 1))  # |grad rho| up to ~1e3
    L, _ = mobility_eval(M, r, e, gr, ge)
    assert np.array_equal(L, np.swapaxes(L, -1, -2))
    np.linalg.cholesky(L)  # raises if any sample is not positive definite
    S = L[:, :2, :2] - L[:, :2, 2:] @ L[:, 2:, :2] / L[:, 2:, 2:]
    assert np.abs(S - np.eye(2)).max() <= 1e-13
    assert np.linalg.eigvalsh(L).min() >= 1e-3


def test_mobility_derivatives_fd(rng):
    r, e, gr, ge = _random_omega(rng, 100, scale=2.0)
    om = np.column_stack([r, e, gr, ge])
    assert OMEGA_COMPONENTS == ("rho", "eta", "rho_x", "rho_y", "eta_x", "eta_y")
    _, dL = mobility_eval(M, r, e, gr, ge)
    fd = central_diff(lambda x: mobility_eval(M, x[..., 0], x[..., 1], x[..., 2:4], x[..., 4:6])[0], om)
    err = np.abs(dL - fd).max(axis=(1, 2, 3)) / np.maximum(np.abs(fd).max(axis=(1, 2, 3)), 1e-12)
    assert err.max() <= 1e-6


def test_mobility_broadcasts_and_skips_derivatives():
    L, dL = mobility_eval(M, np.zeros((4, 5)), 0.0, np.ones((4, 5, 2)), np.zeros(2), derivatives=False)
    assert L.shape == (4, 5, 3, 3) and dL is None
