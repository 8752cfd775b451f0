"""Exact moments of ``<f, X_t>`` and the limiting variance constants.

Two independent routes compute ``m_k(t, x) = E_x <f, X_t>^k`` for k <= 4:

* convolution formulas evaluated with nested adaptive Gauss-Legendre
  quadrature over the eigen-expansion of ``T_t``;
* the coupled linear moment ODE ``m_k' = L m_k + (lower-order sources)``
  integrated with an explicit Runge-Kutta scheme directly on ``L``.

The variance constants are evaluated in closed form: every integrand is a
finite sum of ``s^n exp(b s)`` terms with ``Re b < 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad, solve_ivp

from .decompose import CRITICAL, LARGE, SMALL, Decomposition, leading_coefficients, split
from .model import BranchingModel, branching_moments, mean_generator
from .spectral import EigenBasis

GL_ORDER = 16
_GL_X, _GL_W = np.polynomial.legendre.leggauss(GL_ORDER)


class QuadratureError(RuntimeError):
    pass


def _panel_nodes(panels: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes and weights on [0, 1]."""
    edges = np.linspace(0.0, 1.0, panels + 1)
    half = 0.5 / panels
    mid = 0.5 * (edges[:-1] + edges[1:])
    x = (mid[:, None] + half * _GL_X[None, :]).ravel()
    w = np.tile(half * _GL_W, panels)
    return x, w


def integrate_01(fun, rtol: float = 1e-10, atol: float = 1e-300, max_panels: int = 64) -> np.ndarray:
    """Adaptive composite Gauss-Legendre integral of ``fun`` over [0, 1].

    ``fun(x)`` receives nodes of shape ``(n,)`` and returns an array whose
    axis ``-2`` runs over the nodes.  The panel count doubles until two
    successive estimates agree to ``rtol`` everywhere.
    """
    panels = 1
    x, w = _panel_nodes(panels)
    prev = np.tensordot(w, np.moveaxis(fun(x), -2, 0), axes=1)
    while True:
        panels *= 2
        x, w = _panel_nodes(panels)
        cur = np.tensordot(w, np.moveaxis(fun(x), -2, 0), axes=1)
        err = np.abs(cur - prev)
        if np.all(err <= rtol * np.abs(cur) + atol):
            return cur
        if panels >= max_panels:
            raise QuadratureError(f"Gauss-Legendre did not converge (err {err.max():.2e})")
        prev = cur


class ConvolutionMoments:
    """Moment formulas evaluated by nested quadrature for one test function.

    Every method accepts an array of times ``t`` and returns ``t.shape + (d,)``.
    """

    def __init__(self, model: BranchingModel, basis: EigenBasis, f, rtol: float = 1e-11):
        self.A = branching_moments(model)
        self.basis = basis
        self.f = np.asarray(f, dtype=float)
        self.rtol = rtol

    def T(self, t, g) -> np.ndarray:
        """``T_t g`` with ``g`` of shape ``t.shape + (d,)``."""
        M = self.basis.semigroup_matrix(t)
        return np.einsum("...ij,...j->...i", M, g)

    def m1(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.T(t, np.broadcast_to(self.f, t.shape + self.f.shape))

    def _tail(self, t, power: int) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.T(t, np.broadcast_to(self.f**power, t.shape + self.f.shape))

    def m2(self, t) -> np.ndarray:
        # int_0^t T_s[A2 (T_{t-s} f)^2] ds + T_t(f^2)
        t = np.asarray(t, dtype=float)
        A2 = self.A.A2

        def integrand(x):
            s = t[..., None] * x
            inner = self.m1(t[..., None] - s)
            return self.T(s, A2 * inner**2)

        return t[..., None] * integrate_01(integrand, self.rtol) + self._tail(t, 2)

    def m3(self, t) -> np.ndarray:
        # int_0^t T_{t-s}[A3 (T_s f)^3 + 3 A2 m2(s) T_s f] ds + T_t(f^3)
        t = np.asarray(t, dtype=float)
        A2, A3 = self.A.A2, self.A.A3

        def integrand(x):
            s = t[..., None] * x
            m1 = self.m1(s)
            src = A3 * m1**3
            if np.any(A2):
                src = src + 3 * A2 * self.m2(s) * m1
            return self.T(t[..., None] - s, src)

        return t[..., None] * integrate_01(integrand, self.rtol) + self._tail(t, 3)

    def m4(self, t) -> np.ndarray:
        # int_0^t T_{t-s}[A4 m1^4 + 6 A3 m1^2 m2 + 4 A2 m3 m1 + 3 A2 m2^2] ds + T_t(f^4)
        t = np.asarray(t, dtype=float)
        A2, A3, A4 = self.A.A2, self.A.A3, self.A.A4

        def integrand(x):
            s = t[..., None] * x
            m1 = self.m1(s)
            src = A4 * m1**4
            if np.any(A2) or np.any(A3):
                m2 = self.m2(s)
                src = src + 6 * A3 * m1**2 * m2 + 3 * A2 * m2**2
                if np.any(A2):
                    src = src + 4 * A2 * self.m3(s) * m1
            return self.T(t[..., None] - s, src)

        return t[..., None] * integrate_01(integrand, self.rtol) + self._tail(t, 4)


def second_moment(model: BranchingModel, basis: EigenBasis, f, t: float) -> np.ndarray:
    """``E_x <f, X_t>^2`` for every starting state x."""
    _check_time(t)
    return ConvolutionMoments(model, basis, f).m2(t)


def third_moment(model: BranchingModel, basis: EigenBasis, f, t: float) -> np.ndarray:
    _check_time(t)
    return ConvolutionMoments(model, basis, f).m3(t)


def fourth_moment(model: BranchingModel, basis: EigenBasis, f, t: float) -> np.ndarray:
    _check_time(t)
    return ConvolutionMoments(model, basis, f).m4(t)


def _check_time(t):
    if np.any(np.asarray(t) < 0):
        raise ValueError("moments need t >= 0")


@dataclass(frozen=True)
class MomentTable:
    """``m[k-1][i, x] = E_x <f, X_{t_i}>^k``."""

    t: np.ndarray
    m: np.ndarray

    @property
    def order(self) -> int:
        return self.m.shape[0]

    def rows(self):
        """``(t, x, m1, ..., m_order)`` tuples for CSV output."""
        for i, ti in enumerate(self.t):
            for x in range(self.m.shape[2]):
                yield (float(ti), x, *(float(v) for v in self.m[:, i, x]))


def moment_ode(model: BranchingModel, f, t_grid, order: int = 4, atol: float = 1e-10, rtol: float = 1e-12) -> MomentTable:
    """Integrate the coupled moment equations on the generator itself.

    With ``u`` the moment generating function, expanding the backward equation
    in powers of the dummy variable gives

        m1' = L m1
        m2' = L m2 + A2 m1^2
        m3' = L m3 + 3 A2 m1 m2 + A3 m1^3
        m4' = L m4 + A2 (4 m1 m3 + 3 m2^2) + 6 A3 m1^2 m2 + A4 m1^4

    from ``m_k(0) = f^k``.
    """
    if order not in (1, 2, 3, 4):
        raise ValueError("order must be 1..4")
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0) or t_grid[0] < 0:
        raise ValueError("t_grid must be increasing and non-negative")
    L = np.array(mean_generator(model))
    A = branching_moments(model)
    f = np.asarray(f, dtype=float)
    d = model.d

    def rhs(_, y):
        m = y.reshape(order, d)
        out = np.empty_like(m)
        out[0] = L @ m[0]
        if order >= 2:
            out[1] = L @ m[1] + A.A2 * m[0] ** 2
        if order >= 3:
            out[2] = L @ m[2] + 3 * A.A2 * m[0] * m[1] + A.A3 * m[0] ** 3
        if order >= 4:
            out[3] = (
                L @ m[3]
                + A.A2 * (4 * m[0] * m[2] + 3 * m[1] ** 2)
                + 6 * A.A3 * m[0] ** 2 * m[1]
                + A.A4 * m[0] ** 4
            )
        return out.ravel()

    y0 = np.concatenate([f**k for k in range(1, order + 1)])
    if t_grid[-1] == 0:
        ys = np.repeat(y0[:, None], len(t_grid), axis=1)
    else:
        sol = solve_ivp(rhs, (0.0, t_grid[-1]), y0, method="DOP853", t_eval=t_grid, rtol=rtol, atol=atol)
        if not sol.success:
            raise RuntimeError(f"moment ODE failed: {sol.message}")
        ys = sol.y
    m = ys.reshape(order, d, len(t_grid)).transpose(0, 2, 1)
    return MomentTable(t=t_grid, m=m)


# --------------------------------------------------------------------------
# variance constants


@dataclass(frozen=True)
class VarianceConstants:
    sigma_sm_sq: float
    sigma_cr_sq: float
    sigma_la_sq: float
    tau_cr: int | None

    def to_dict(self) -> dict:
        return {
            "sigma_sm_sq": self.sigma_sm_sq,
            "sigma_cr_sq": self.sigma_cr_sq,
            "sigma_la_sq": self.sigma_la_sq,
            "tau_cr": self.tau_cr,
        }


def _poly_terms(basis: EigenBasis, proj, ks, sign: float):
    """Expand ``sum_k exp(-sign*lam_k s) Phi_k D_k(sign*s) v_k`` as terms.

    Returns ``(rate, power, vector)`` with the function equal to
    ``sum rate-exp(rate*s) * s^power * vector``.
    """
    sp = basis.spectrum
    terms = []
    for k in ks:
        v = proj.v[k]
        if not np.any(np.abs(v) > 0):
            continue
        n = len(v)
        start = 0
        for s in sp.blocks[k]:
            for a in range(s):
                w = np.zeros(n, dtype=complex)
                for p in range(s - a):
                    w[start + p] = v[start + p + a] * sign**a / math.factorial(a)
                if np.any(w):
                    terms.append((-sign * sp.lam[k], a, basis.Phi[k] @ w))
            start += s
    return terms


def _weighted_square_integral(terms, weight, shift: float) -> complex:
    """``int_0^inf exp(shift s) <weight, |sum_terms|^2> ds`` in closed form."""
    total = 0.0 + 0.0j
    for ra, pa, ca in terms:
        for rb, pb, cb in terms:
            b = ra + np.conj(rb) + shift
            if b.real >= 0:
                raise ArithmeticError("divergent variance integral; component misclassified")
            n = pa + pb
            total += np.sum(weight * ca * np.conj(cb)) * math.factorial(n) / (-b) ** (n + 1)
    return total


def _check_real(z: complex, what: str) -> float:
    if abs(z.imag) > 1e-9 * max(1.0, abs(z.real)):
        raise ArithmeticError(f"{what} has imaginary part {z.imag:.2e}")
    return float(z.real)


def sigma_sm(model: BranchingModel, basis: EigenBasis, dec: Decomposition) -> float:
    A = branching_moments(model)
    if A.deterministic or not np.any(dec.f_sm):
        return 0.0
    proj = dec.part(SMALL)
    terms = _poly_terms(basis, proj, range(basis.spectrum.count), +1.0)
    w = A.A2 * basis.phi1_hat
    val = _weighted_square_integral(terms, w, basis.lambda1)
    val += np.sum(dec.f_sm**2 * basis.phi1_hat)
    return _check_real(val, "sigma_sm^2")


def sigma_cr(model: BranchingModel, basis: EigenBasis, dec: Decomposition) -> float:
    A = branching_moments(model)
    if A.deterministic or not np.any(dec.f_cr):
        return 0.0
    proj = dec.part(CRITICAL)
    tau = dec.tau_cr
    F = leading_coefficients(proj)
    total = 0.0
    for k, Fk in F.items():
        g = basis.Phi[k] @ Fk
        total += np.sum(A.A2 * np.abs(g) ** 2 * basis.phi1_hat)
    return float(total / (1 + 2 * tau))


def sigma_la(model: BranchingModel, basis: EigenBasis, dec: Decomposition) -> float:
    A = branching_moments(model)
    if A.deterministic or not np.any(dec.f_la):
        return 0.0
    proj = dec.part(LARGE)
    terms = _poly_terms(basis, proj, dec.indices(LARGE), -1.0)
    w = A.A2 * basis.phi1_hat
    val = _weighted_square_integral(terms, w, -basis.lambda1)
    val -= np.sum(dec.f_la**2 * basis.phi1_hat)
    return _check_real(val, "sigma_la^2")


def variance_constants(model: BranchingModel, basis: EigenBasis, f) -> VarianceConstants:
    dec = split(basis, f)
    return VarianceConstants(
        sigma_sm_sq=sigma_sm(model, basis, dec),
        sigma_cr_sq=sigma_cr(model, basis, dec),
        sigma_la_sq=sigma_la(model, basis, dec),
        tau_cr=dec.tau_cr,
    )


def sigma_quadrature(model: BranchingModel, basis: EigenBasis, dec: Decomposition, which: str) -> float:
    """Quadrature evaluation of the small or large constant (cross-check path).

    The integral is truncated at ``S`` where the slowest decaying exponential
    in the integrand drops below 1e-14.
    """
    from .decompose import large_flow
    from .spectral import semigroup_apply

    A = branching_moments(model)
    sp = basis.spectrum
    lam1 = sp.lambda1
    if which == "sm":
        if not np.any(dec.f_sm):
            return 0.0
        ks = [k for k in range(sp.count) if dec.part(SMALL).nonzero(k)]
        rate = min(2 * sp.lam[k].real - lam1 for k in ks)

        def g(s):
            return np.exp(lam1 * s) * np.sum(A.A2 * semigroup_apply(basis, dec.f_sm, s) ** 2 * basis.phi1_hat)

        base = np.sum(dec.f_sm**2 * basis.phi1_hat)
    elif which == "la":
        if not np.any(dec.f_la):
            return 0.0
        ks = [k for k in dec.indices(LARGE) if dec.projection.nonzero(k)]
        rate = min(lam1 - 2 * sp.lam[k].real for k in ks)

        def g(s):
            return np.exp(-lam1 * s) * np.sum(A.A2 * large_flow(basis, dec.f_la, s) ** 2 * basis.phi1_hat)

        base = -np.sum(dec.f_la**2 * basis.phi1_hat)
    else:
        raise ValueError("which must be 'sm' or 'la'")
    S = math.log(1e14) / rate
    # polynomial factors from Jordan blocks slow the decay; extend generously
    S *= 1 + max(sp.sizes)
    val, _ = quad(g, 0.0, S, epsabs=1e-14, epsrel=1e-12, limit=500)
    return float(val + base)


def variance_limit_check(model: BranchingModel, basis: EigenBasis, f, t: float) -> dict:
    """Compare normalised second moments at time ``t`` with the limit constants.

    Small part: ``exp(lam1 t) E_x <f_sm, X_t>^2`` against ``sigma_sm^2 phi1(x)``.
    Critical part: ``t^-(1+2 tau) exp(lam1 t) Var_x <f_cr, X_t>`` against
    ``sigma_cr^2 phi1(x)``.
    """
    dec = split(basis, f)
    lam1 = basis.lambda1
    phi1 = basis.phi1
    report: dict = {"t": t}

    if np.any(np.abs(dec.f_sm) > 1e-12):
        s2 = sigma_sm(model, basis, dec)
        tab = moment_ode(model, dec.f_sm, [0.0, t], order=2)
        lhs = math.exp(lam1 * t) * tab.m[1, -1]
        target = s2 * phi1
        report["small"] = {
            "sigma_sq": s2,
            "normalised": lhs.tolist(),
            "target": target.tolist(),
            "residual": float(np.max(np.abs(lhs - target) / np.abs(target))),
        }
    else:
        report["small"] = {"vacuous": True}

    if np.any(np.abs(dec.f_cr) > 1e-12):
        s2 = sigma_cr(model, basis, dec)
        tau = dec.tau_cr
        tab = moment_ode(model, dec.f_cr, [0.0, t], order=2)
        var = tab.m[1, -1] - tab.m[0, -1] ** 2
        lhs = t ** -(1 + 2 * tau) * math.exp(lam1 * t) * var
        target = s2 * phi1
        report["critical"] = {
            "sigma_sq": s2,
            "tau": tau,
            "normalised": lhs.tolist(),
            "target": target.tolist(),
            "residual": float(np.max(np.abs(lhs - target) / np.abs(target))),
        }
    else:
        report["critical"] = {"vacuous": True}
    return report
