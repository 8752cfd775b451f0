"""Closed-form references for single-type models.

These use classical formulas only and deliberately share no code with the
spectral or moment machinery they are used to check.
"""

from __future__ import annotations

import math


def yule_moments(beta: float, t: float, order: int = 4) -> tuple[float, ...]:
    """Raw moments ``E Z_t^j``, ``j = 1..order``, of a Yule process from one particle.

    ``Z_t`` is geometric on {1, 2, ...} with success probability ``q = exp(-beta t)``.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    if not 1 <= order <= 4:
        raise ValueError("order must be between 1 and 4")
    q = math.exp(-beta * t)
    m = (
        1 / q,
        (2 - q) / q**2,
        (6 - 6 * q + q**2) / q**3,
        (24 - 36 * q + 14 * q**2 - q**3) / q**4,
    )
    return m[:order]


def yule_w_variance(beta: float, t: float) -> float:
    """``Var(exp(-beta t) Z_t) = 1 - exp(-beta t)``."""
    return -math.expm1(-beta * t)


def birth_death_extinction(beta: float, p0: float, p2: float, t: float) -> float:
    """``P(Z_t = 0)`` for the binary process: at rate ``beta`` a particle dies
    (prob. ``p0``) or splits in two (prob. ``p2``)."""
    if abs(p0 + p2 - 1) > 1e-12:
        raise ValueError("p0 + p2 must equal 1")
    mu, lam = beta * p0, beta * p2
    if math.isinf(t):
        return 1.0 if lam <= mu else mu / lam
    if lam == mu:
        return lam * t / (1 + lam * t)
    e = math.exp(-(lam - mu) * t)
    return mu * (1 - e) / (lam - mu * e)


def heyde_sigma2(pmf) -> float:
    """``(E Z_1^2 - m^2) / (m^2 - m)`` for a Galton-Watson offspring law ``pmf[k]``."""
    m = sum(k * p for k, p in enumerate(pmf))
    if m <= 1:
        raise ValueError(f"offspring mean {m} is not supercritical")
    ez2 = sum(k * k * p for k, p in enumerate(pmf))
    return (ez2 - m * m) / (m * m - m)


def yule_skeleton_heyde(beta: float, t: float = 1.0) -> float:
    """Heyde's constant for the time-``t`` skeleton of a Yule process.

    ``m = 1/q`` and ``E Z^2 = (2 - q)/q^2`` with ``q = exp(-beta t)`` give
    ``(1 - q)/q^2 / ((1 - q)/q^2) = 1`` for every ``t > 0``.
    """
    m1, m2 = yule_moments(beta, t, 2)
    return (m2 - m1 * m1) / (m1 * m1 - m1)
