import math

import numpy as np
import pytest

from branchlil.decompose import split
from branchlil.fixtures import default_f, load_fixture
from branchlil.model import BranchingModel, yule_model
from branchlil.moments import (
    ConvolutionMoments,
    fourth_moment,
    moment_ode,
    second_moment,
    sigma_cr,
    sigma_la,
    sigma_quadrature,
    sigma_sm,
    third_moment,
    variance_constants,
    variance_limit_check,
)
from branchlil.oracle import yule_moments
from branchlil.spectral import semigroup_apply, spectrum_for

LN2 = math.log(2)


@pytest.fixture(scope="module")
def yule():
    m = yule_model()
    return (m,) + spectrum_for(m)


def test_yule_convolution(yule):
    m, _, b = yule
    f = np.ones(1)
    assert second_moment(m, b, f, LN2)[0] == pytest.approx(6, rel=1e-10)
    assert third_moment(m, b, f, LN2)[0] == pytest.approx(26, rel=1e-10)
    assert fourth_moment(m, b, f, LN2)[0] == pytest.approx(150, rel=1e-10)


def test_yule_ode(yule):
    m, _, _ = yule
    tab = moment_ode(m, [1.0], [0.0, LN2])
    np.testing.assert_allclose(tab.m[:, -1, 0], [2, 6, 26, 150], rtol=1e-9)
    np.testing.assert_allclose(tab.m[:, 0, 0], [1, 1, 1, 1])


def test_ode_matches_oracle_on_interval(yule):
    m, _, _ = yule
    t = np.linspace(0, 3, 7)
    tab = moment_ode(m, [1.0], t)
    for i, ti in enumerate(t):
        np.testing.assert_allclose(tab.m[:, i, 0], yule_moments(1.0, ti), rtol=1e-9)


def test_time_zero_powers(bases):
    m, _, b = bases["three_state_cyclic"]
    f = np.array([0.5, -1.0, 2.0])
    cm = ConvolutionMoments(m, b, f)
    for j, fn in enumerate([cm.m1, cm.m2, cm.m3, cm.m4], start=1):
        np.testing.assert_allclose(fn(0.0), f**j, atol=1e-14)


def test_unit_offspring_moments():
    Q = np.array([[-1.0, 1.0], [2.0, -2.0]])
    m = BranchingModel(d=2, Q=Q, beta=np.array([1.0, 3.0]), offspring=np.array([[0.0, 1.0]] * 2))
    _, b = spectrum_for(m)[0], spectrum_for(m)[1]
    f = np.array([1.5, -0.5])
    t = 0.8
    cm = ConvolutionMoments(m, b, f)
    for j, fn in enumerate([cm.m2, cm.m3, cm.m4], start=2):
        np.testing.assert_allclose(fn(t), semigroup_apply(b, f**j, t), rtol=1e-10)


def test_no_branching_ode():
    Q = np.array([[-1.0, 1.0], [2.0, -2.0]])
    m = BranchingModel(d=2, Q=Q, beta=np.zeros(2), offspring=np.array([[0.0, 0.0, 1.0]] * 2))
    from scipy.linalg import expm

    f = np.array([1.0, 3.0])
    tab = moment_ode(m, f, [0.0, 1.2])
    P = expm(1.2 * Q)
    for j in range(4):
        np.testing.assert_allclose(tab.m[j, -1], P @ f ** (j + 1), rtol=1e-9)


def test_order_one_matches_semigroup(bases):
    for m, sp, b in bases.values():
        f = np.linspace(-1, 1, m.d) + 0.3
        tab = moment_ode(m, f, [0.0, 1.5], order=1)
        np.testing.assert_allclose(tab.m[0, -1], semigroup_apply(b, f, 1.5), rtol=1e-9, atol=1e-12)


def test_negative_time_rejected(yule):
    m, _, b = yule
    with pytest.raises(ValueError):
        second_moment(m, b, [1.0], -1.0)
    with pytest.raises(ValueError):
        moment_ode(m, [1.0], [0.0, -1.0])


def test_sigma_values(bases):
    m, _, b = bases["yule"]
    assert sigma_la(m, b, split(b, b.phi1)) == pytest.approx(1.0, abs=1e-10)
    m, _, b = bases["two_state_small"]
    assert sigma_sm(m, b, split(b, default_f("two_state_small"))) == pytest.approx(5 * math.sqrt(2) / 6, abs=1e-8)
    m, _, b = bases["two_state_critical"]
    assert sigma_cr(m, b, split(b, default_f("two_state_critical"))) == pytest.approx(math.sqrt(2), abs=1e-8)


def test_sigma_zero_components(bases):
    m, _, b = bases["two_state_small"]
    d = split(b, b.phi1)
    assert sigma_sm(m, b, d) == 0 and sigma_cr(m, b, d) == 0
    d = split(b, default_f("two_state_small"))
    assert sigma_la(m, b, d) == 0


def test_sigma_homogeneity(bases):
    m, _, b = bases["two_state_small"]
    f = default_f("two_state_small")
    s1 = variance_constants(m, b, f)
    s3 = variance_constants(m, b, 3 * f)
    assert s3.sigma_sm_sq == pytest.approx(9 * s1.sigma_sm_sq, rel=1e-12)
    assert s3.sigma_sm_sq == pytest.approx(15 * math.sqrt(2) / 2, rel=1e-12)


def test_jordan_factor_one_third(bases):
    """Critical constant for a size-2 chain: F = (v_2, 0) and the 1/(1 + 2 tau) factor."""
    m, _, b = bases["jordan_designed"]
    from branchlil.model import branching_moments

    A2 = branching_moments(m).A2
    Phi = b.Phi[1].real
    f = Phi @ np.array([0.0, 1.0])  # v = (0, 1) on the critical block
    d = split(b, f)
    assert d.tau_cr == 1
    g = Phi[:, 0]  # Phi_k F with F = (1, 0)
    tau0 = float(np.sum(A2 * g**2 * b.phi1_hat))
    assert sigma_cr(m, b, d) == pytest.approx(tau0 / 3, rel=1e-12)


def test_deterministic_guard():
    # p_1 = 1: branching never changes the population, so every constant is 0
    from branchlil.model import mean_generator
    from branchlil.spectral import compute_spectrum

    Q = np.array([[-1.0, 1.0], [1.0, -1.0]])
    det = BranchingModel(d=2, Q=Q, beta=np.ones(2), offspring=np.array([[0.0, 1.0]] * 2))
    _, b = compute_spectrum(mean_generator(det), perron=False)
    for f in ([1.0, 1.0], [1.0, -1.0]):
        c = variance_constants(det, b, np.array(f))
        assert (c.sigma_sm_sq, c.sigma_cr_sq, c.sigma_la_sq) == (0.0, 0.0, 0.0)


def test_quadrature_cross_check(bases):
    m, _, b = bases["two_state_small"]
    d = split(b, default_f("two_state_small"))
    assert sigma_quadrature(m, b, d, "sm") == pytest.approx(sigma_sm(m, b, d), rel=1e-9)
    m, _, b = bases["yule"]
    d = split(b, b.phi1)
    assert sigma_quadrature(m, b, d, "la") == pytest.approx(sigma_la(m, b, d), rel=1e-9)
    m, _, b = bases["three_state_cyclic"]
    d = split(b, [1.0, 0.0, 0.0])
    assert sigma_quadrature(m, b, d, "la") == pytest.approx(sigma_la(m, b, d), rel=1e-8)


def test_limit_check(bases):
    m, _, b = bases["two_state_small"]
    r = variance_limit_check(m, b, default_f("two_state_small"), 25.0)
    assert r["small"]["residual"] <= 1e-6
    assert r["critical"] == {"vacuous": True}
    np.testing.assert_allclose(r["small"]["target"], [5 / 6, 5 / 6])
    m, _, b = bases["two_state_critical"]
    r = variance_limit_check(m, b, default_f("two_state_critical"), 40.0)
    assert r["critical"]["residual"] <= 5e-2


def test_limit_cauchy(bases):
    m, _, b = bases["two_state_small"]
    f = default_f("two_state_small")
    vals = [variance_limit_check(m, b, f, t)["small"]["normalised"][0] for t in (20.0, 25.0, 30.0)]
    assert max(vals) - min(vals) <= 1e-6


def test_moment_inequalities(bases):
    for m, sp, b in bases.values():
        f = np.linspace(1, -1, m.d) + 0.2
        tab = moment_ode(m, f, [0.0, 0.5, 1.0])
        m1, m2, m3, m4 = tab.m
        assert np.all(m2 - m1**2 >= -1e-9 * np.maximum(1, m2))
        assert np.all(m4 * m2 - m3**2 >= -1e-9 * np.maximum(1, m4 * m2))


def test_fixture_default_f_constants(fixture_name):
    m = load_fixture(fixture_name)
    _, b = spectrum_for(m)
    c = variance_constants(m, b, default_f(fixture_name))
    assert all(math.isfinite(x) and x >= 0 for x in (c.sigma_sm_sq, c.sigma_cr_sq, c.sigma_la_sq))
