import math

import numpy as np
import pytest

from branchlil.decompose import (
    CRITICAL,
    LARGE,
    SMALL,
    compensator,
    gamma_zeta,
    large_flow,
    leading_coefficients,
    project,
    split,
    tau_degree,
)
from branchlil.spectral import compute_spectrum, declared_structure

R = 1 / math.sqrt(2)


def test_project_perron(bases):
    for m, sp, b in bases.values():
        proj = project(b, b.phi1)
        assert abs(proj.v[0][0] - 1) < 1e-10
        for k in range(1, sp.count):
            assert np.abs(proj.v[k]).max() < 1e-10


def test_project_zero(bases):
    _, _, b = bases["two_state_small"]
    proj = project(b, np.zeros(2))
    assert all(np.all(v == 0) for v in proj.v)
    assert gamma_zeta(proj) == (math.inf, math.inf)
    assert split(b, np.zeros(2)).tau is None


def test_project_two_state():
    _, b = compute_spectrum(np.array([[0.0, 1.0], [1.0, 0.0]]))
    proj = project(b, [1.0, 0.0])
    assert abs(proj.v[0][0]) == pytest.approx(R)
    assert abs(proj.v[1][0]) == pytest.approx(R)


def test_gamma_zeta(bases):
    _, _, b = bases["three_state_cyclic"]
    assert gamma_zeta(project(b, b.phi1)) == (0, 0)
    # (1,-1,0) has no Perron part and lives on the conjugate pair
    assert gamma_zeta(project(b, [1.0, -1.0, 0.0])) == (1, 2)


def test_tau_and_F_on_block():
    L = np.array([[1.0, 1.0], [0.0, 1.0]])
    _, b = declared_structure(L, [(1.0, (2,))], perron=False)
    Phi = b.Phi[0].real
    f01 = Phi @ np.array([0.0, 1.0])
    p = project(b, f01)
    assert tau_degree(p) == 1
    np.testing.assert_allclose(leading_coefficients(p)[0], [1.0, 0.0], atol=1e-12)
    f10 = Phi @ np.array([1.0, 0.0])
    p = project(b, f10)
    assert tau_degree(p) == 0
    np.testing.assert_allclose(leading_coefficients(p)[0], [1.0, 0.0], atol=1e-12)


def test_tau_zero_for_diagonalizable(bases):
    rng = np.random.default_rng(3)
    for name in ("two_state_small", "two_state_critical", "three_state_cyclic"):
        _, _, b = bases[name]
        f = rng.normal(size=b.d)
        d = split(b, f)
        assert d.tau == 0
        for k, Fk in d.F.items():
            np.testing.assert_allclose(Fk, d.projection.v[k])


def test_jordan_fixture_tau(bases):
    _, _, b = bases["jordan_designed"]
    d = split(b, [1.0, -1.0, 0.0])
    assert d.gamma == 1 and d.tau == 1 and d.tau_cr == 1
    # lower-degree entries of F vanish
    assert d.F[1][1] == 0


def test_split_classes(bases):
    _, _, b = bases["yule"]
    d = split(b, b.phi1)
    np.testing.assert_allclose(d.f_la, b.phi1)
    assert not d.f_cr.any() and not d.f_sm.any()

    _, _, b = bases["two_state_small"]
    f = np.array([R, -R])
    d = split(b, f)
    assert d.classes == (LARGE, SMALL)
    np.testing.assert_allclose(d.f_sm, f, atol=1e-15)
    assert not d.f_la.any() and not d.f_cr.any()

    _, _, b = bases["two_state_critical"]
    d = split(b, f)
    assert d.classes == (LARGE, CRITICAL)
    np.testing.assert_allclose(d.f_cr, f, atol=1e-15)


def test_compensator(bases):
    _, _, b = bases["yule"]
    t = np.array([0.0, 1.0, 2.5])
    np.testing.assert_allclose(compensator(b, {0: np.array([0.7])}, [1.0], t), 0.7 * np.exp(t))
    _, _, b = bases["two_state_small"]
    assert np.all(compensator(b, {}, [R, -R], t) == 0)


def test_compensator_conjugate_pair_real(bases):
    _, _, b = bases["three_state_cyclic"]
    h = 0.3 + 0.4j
    H = {0: np.array([1.1]), 1: np.array([h]), 2: np.array([np.conj(h)])}
    out = compensator(b, H, [1.0, 0.0, 0.0], np.linspace(0, 3, 7))
    assert np.isrealobj(out)


def test_compensator_missing_H(bases):
    _, _, b = bases["yule"]
    with pytest.raises(KeyError):
        compensator(b, {}, [1.0], 1.0)


def test_large_flow(bases):
    _, _, b = bases["yule"]
    np.testing.assert_allclose(large_flow(b, b.phi1, 0.0), b.phi1)
    np.testing.assert_allclose(large_flow(b, b.phi1, 2.0), math.exp(-2) * b.phi1)
    _, _, b = bases["two_state_small"]
    assert not large_flow(b, np.zeros(2), 1.0).any()


def test_to_dict_finite(bases):
    import json

    for m, sp, b in bases.values():
        json.dumps(split(b, np.arange(1.0, m.d + 1)).to_dict(), allow_nan=False)
