"""Projection of test functions on the eigenbasis and the large/critical/small split.

Indices ``k`` are zero-based positions in the ordered spectrum (``k = 0`` is
the Perron eigenvalue).  ``gamma`` is ``math.inf`` for the zero function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .spectral import EigenBasis

ZERO_TOL = 1e-10

LARGE, CRITICAL, SMALL = "large", "critical", "small"


@dataclass(frozen=True)
class Projection:
    basis: EigenBasis
    v: tuple[np.ndarray, ...]
    zero_tol: float = ZERO_TOL

    def reconstruct(self, ks=None) -> np.ndarray:
        ks = range(len(self.v)) if ks is None else ks
        out = np.zeros(self.basis.d, dtype=complex)
        for k in ks:
            out += self.basis.Phi[k] @ self.v[k]
        return out

    def restricted(self, ks) -> "Projection":
        ks = set(ks)
        v = tuple(vk if k in ks else np.zeros_like(vk) for k, vk in enumerate(self.v))
        return Projection(self.basis, v, self.zero_tol)

    def nonzero(self, k: int) -> bool:
        return bool(np.linalg.norm(self.v[k]) > self.zero_tol)


def project(basis: EigenBasis, f, zero_tol: float = ZERO_TOL) -> Projection:
    """``v_k = <f, PhiHat_k>`` for every eigenvalue index."""
    f = np.asarray(f)
    v = tuple(P.conj().T @ f for P in basis.PhiHat)
    return Projection(basis, v, zero_tol)


def classify(basis: EigenBasis, k: int) -> str:
    sp = basis.spectrum
    gap = 2 * sp.lam[k].real - sp.lambda1
    if abs(gap) <= sp.cluster_tol:
        return CRITICAL
    return LARGE if gap < 0 else SMALL


def gamma_zeta(projection: Projection) -> tuple[float, float]:
    """First index with non-zero projection and last index on the same real level."""
    sp = projection.basis.spectrum
    nz = [k for k in range(sp.count) if projection.nonzero(k)]
    if not nz:
        return math.inf, math.inf
    g = nz[0]
    z = max(k for k in range(sp.count) if sp.same_level(k, g))
    return g, z


def _component_degrees(projection: Projection, k: int) -> np.ndarray:
    """Polynomial degree in t of each entry of ``D_k(t) v_k`` (-1 for identically zero)."""
    sp = projection.basis.spectrum
    v = projection.v[k]
    alive = np.abs(v) > projection.zero_tol
    deg = np.full(len(v), -1)
    start = 0
    for s in sp.blocks[k]:
        for p in range(s):
            for q in range(s - 1, p - 1, -1):
                if alive[start + q]:
                    deg[start + p] = q - p
                    break
        start += s
    return deg


def tau_degree(projection: Projection) -> int:
    """Largest polynomial degree of ``D_k(t) v_k`` over the leading real level."""
    g, z = gamma_zeta(projection)
    if g == math.inf:
        raise ValueError("tau is undefined for the zero function")
    return int(max(_component_degrees(projection, k).max() for k in range(g, z + 1)))


def leading_coefficients(projection: Projection) -> dict[int, np.ndarray]:
    """Coefficient of ``t^tau`` in ``D_k(t) v_k`` for each k on the leading level."""
    g, z = gamma_zeta(projection)
    if g == math.inf:
        raise ValueError("leading coefficients are undefined for the zero function")
    tau = tau_degree(projection)
    sp = projection.basis.spectrum
    out = {}
    for k in range(g, z + 1):
        v = np.where(np.abs(projection.v[k]) > projection.zero_tol, projection.v[k], 0)
        F = np.zeros(len(v), dtype=complex)
        start = 0
        for s in sp.blocks[k]:
            for p in range(s - tau):
                F[start + p] = v[start + p + tau] / math.factorial(tau)
            start += s
        out[k] = F
    return out


@dataclass(frozen=True)
class Decomposition:
    f: np.ndarray
    f_la: np.ndarray
    f_cr: np.ndarray
    f_sm: np.ndarray
    projection: Projection
    classes: tuple[str, ...]
    gamma: float
    zeta: float
    tau: int | None
    F: dict

    def indices(self, cls: str) -> list[int]:
        return [k for k, c in enumerate(self.classes) if c == cls]

    def part(self, cls: str) -> Projection:
        """Projection of the large, critical or small component alone."""
        return self.projection.restricted([k for k in self.indices(cls) if self.projection.nonzero(k)])

    @property
    def tau_cr(self) -> int | None:
        p = self.part(CRITICAL)
        return None if gamma_zeta(p)[0] == math.inf else tau_degree(p)

    def to_dict(self) -> dict:
        def c(a):
            a = np.asarray(a)
            return {"re": a.real.tolist(), "im": a.imag.tolist()}

        g = None if self.gamma == math.inf else int(self.gamma)
        z = None if self.zeta == math.inf else int(self.zeta)
        return {
            "v": [c(vk) for vk in self.projection.v],
            "classes": list(self.classes),
            "gamma": g,
            "zeta": z,
            "tau": self.tau,
            "tau_cr": self.tau_cr,
            "F": {str(k): c(Fk) for k, Fk in self.F.items()},
            "f_la": self.f_la.tolist(),
            "f_cr": self.f_cr.tolist(),
            "f_sm": self.f_sm.tolist(),
        }


def _real(z: np.ndarray, what: str) -> np.ndarray:
    if np.abs(z.imag).max(initial=0.0) > 1e-10 * max(1.0, np.abs(z).max(initial=0.0)):
        raise ValueError(f"{what} is not real (imaginary part {np.abs(z.imag).max():.2e})")
    return z.real


def split(basis: EigenBasis, f, zero_tol: float = ZERO_TOL) -> Decomposition:
    """``f = f_la + f_cr + f_sm`` with indices and leading coefficients."""
    f = np.asarray(f, dtype=float)
    proj = project(basis, f, zero_tol)
    classes = tuple(classify(basis, k) for k in range(basis.spectrum.count))
    # indices whose projection is below zero_tol are structural zeros
    la = [k for k, c in enumerate(classes) if c == LARGE and proj.nonzero(k)]
    cr = [k for k, c in enumerate(classes) if c == CRITICAL and proj.nonzero(k)]
    f_la = _real(proj.reconstruct(la), "f_la")
    f_cr = _real(proj.reconstruct(cr), "f_cr")
    f_sm = f - f_la - f_cr
    g, z = gamma_zeta(proj)
    if g == math.inf:
        tau, F = None, {}
    else:
        tau, F = tau_degree(proj), leading_coefficients(proj)
    return Decomposition(f, f_la, f_cr, f_sm, proj, classes, g, z, tau, F)


def compensator(basis: EigenBasis, H_inf: dict, f, t) -> np.ndarray:
    """``E_t(f_la) = sum_{large k} exp(-lam_k t) H_inf[k] D_k(t) v_k`` (real).

    ``H_inf[k]`` has shape ``(..., n_k)``; ``t`` broadcasts against the
    leading dimensions.
    """
    sp = basis.spectrum
    proj = project(basis, f)
    t = np.asarray(t, dtype=float)
    total = 0.0
    for k in range(sp.count):
        if classify(basis, k) != LARGE or not proj.nonzero(k):
            continue
        if k not in H_inf:
            raise KeyError(f"missing H_inf for large index {k}")
        H = np.asarray(H_inf[k])
        Dv = _propagate(sp, k, t, proj.v[k])  # shape t.shape + (n_k,)
        total = total + np.exp(-sp.lam[k] * t) * np.sum(H * Dv, axis=-1)
    total = np.asarray(total, dtype=complex)
    return _real(total, "compensator")


def _propagate(spectrum, k: int, t: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``D_k(t) v`` for an array of times."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape + (len(v),), dtype=complex)
    start = 0
    for s in spectrum.blocks[k]:
        for p in range(s):
            for q in range(p, s):
                m = q - p
                out[..., start + p] += t**m / math.factorial(m) * v[start + q]
        start += s
    return out


def large_flow(basis: EigenBasis, f_la, s: float) -> np.ndarray:
    """``I_s f_la = sum_{large k} exp(lam_k s) Phi_k D_k(s)^-1 v_k``."""
    sp = basis.spectrum
    proj = project(basis, f_la)
    out = np.zeros(basis.d, dtype=complex)
    for k in range(sp.count):
        if classify(basis, k) == LARGE:
            out += np.exp(sp.lam[k] * s) * (basis.Phi[k] @ _propagate(sp, k, np.asarray(-s), proj.v[k]))
    return _real(out, "I_s f_la")
