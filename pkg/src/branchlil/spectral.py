"""Eigenstructure of the mean generator and the mean semigroup it generates.

Eigenvalues of ``L`` are written ``-lam[k]``; index 0 here is the Perron
eigenvalue (the dominant, simple, real one).  For each eigenvalue the right
basis ``Phi[k]`` holds Jordan chains as columns, ordered so that
``L @ Phi[k] = Phi[k] @ (-lam[k] I + N_k)`` with ``N_k`` the nilpotent
superdiagonal implied by the block sizes.  ``PhiHat[k]`` is the dual basis,
``<phi_j, phihat_n> = sum_x phi_j(x) conj(phihat_n(x)) = delta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

CLUSTER_TOL = 1e-8
RANK_TOL = 1e-8
MAX_CONDITION = 1e12


class SpectralError(RuntimeError):
    pass


def jordan_block(size: int, t: float) -> np.ndarray:
    """``(J(t))_{p,q} = t^(q-p) / (q-p)!`` for ``q >= p``, zero below."""
    J = np.zeros((size, size))
    for m in range(size):
        coef = t**m / math.factorial(m)
        J += coef * np.eye(size, k=m)
    return J


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues ``-lam[k]`` with their Jordan block sizes.

    ``lam`` uses the sign convention in which the Perron value ``lam[0]`` is
    negative for a supercritical process.
    """

    lam: np.ndarray
    blocks: tuple[tuple[int, ...], ...]
    conjugate: np.ndarray
    cluster_tol: float = CLUSTER_TOL

    @property
    def eigenvalues(self) -> np.ndarray:
        return -self.lam

    @property
    def count(self) -> int:
        return len(self.lam)

    @property
    def lambda1(self) -> float:
        return float(self.lam[0].real)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(sum(b) for b in self.blocks)

    @property
    def n_blocks(self) -> tuple[int, ...]:
        return tuple(len(b) for b in self.blocks)

    @property
    def real_parts(self) -> np.ndarray:
        return self.lam.real

    def nilpotent(self, k: int) -> np.ndarray:
        n = self.sizes[k]
        N = np.zeros((n, n))
        start = 0
        for s in self.blocks[k]:
            N[start : start + s, start : start + s] = np.eye(s, k=1)
            start += s
        return N

    def propagator(self, k: int, t: float) -> np.ndarray:
        return scipy.linalg.block_diag(*[jordan_block(s, t) for s in self.blocks[k]])

    def chain_position(self, k: int) -> np.ndarray:
        """Zero-based position of each basis column inside its Jordan chain."""
        return np.concatenate([np.arange(s) for s in self.blocks[k]])

    def chain_length(self, k: int) -> np.ndarray:
        return np.concatenate([np.full(s, s) for s in self.blocks[k]])

    def same_level(self, a: int, b: int) -> bool:
        return abs(self.lam[a].real - self.lam[b].real) <= self.cluster_tol


def propagator(spectrum: Spectrum, k: int, t: float) -> np.ndarray:
    """Jordan propagator ``D_k(t)``; note ``D_k(t)^-1 = D_k(-t)``."""
    return spectrum.propagator(k, t)


@dataclass(frozen=True)
class EigenBasis:
    spectrum: Spectrum
    Phi: tuple[np.ndarray, ...]
    PhiHat: tuple[np.ndarray, ...]
    L: np.ndarray = field(repr=False)

    @cached_property
    def P(self) -> np.ndarray:
        return np.hstack(self.Phi)

    @cached_property
    def PH(self) -> np.ndarray:
        return np.hstack(self.PhiHat)

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.spectrum.sizes)])

    @property
    def phi1(self) -> np.ndarray:
        return self.Phi[0][:, 0].real

    @property
    def phi1_hat(self) -> np.ndarray:
        return self.PhiHat[0][:, 0].real

    @property
    def lambda1(self) -> float:
        return self.spectrum.lambda1

    @property
    def d(self) -> int:
        return self.L.shape[0]

    def residuals(self) -> dict:
        """Measured departures from the basis invariants."""
        sp = self.spectrum
        bio = np.abs(self.P.T @ self.PH.conj() - np.eye(self.d)).max()
        action = 0.0
        for k in range(sp.count):
            J = -sp.lam[k] * np.eye(sp.sizes[k]) + sp.nilpotent(k)
            r = np.abs(self.L @ self.Phi[k] - self.Phi[k] @ J).max()
            action = max(action, r / max(1.0, np.abs(self.L).max()))
        return {
            "biorthogonality": float(bio),
            "action": float(action),
            "phi1_norm": float(abs(np.linalg.norm(self.phi1) - 1.0)),
            "phi1_pairing": float(abs(self.phi1 @ self.phi1_hat - 1.0)),
            "condition": float(np.linalg.cond(self.P)),
        }

    def block_matrix(self, t) -> np.ndarray:
        """``diag_k(exp(-lam_k t) D_k(t))`` for a scalar or array of times.

        Returns shape ``t.shape + (d, d)``.
        """
        t = np.asarray(t, dtype=float)
        sp = self.spectrum
        out = np.zeros(t.shape + (self.d, self.d), dtype=complex)
        for k in range(sp.count):
            a, b = self.offsets[k], self.offsets[k + 1]
            # entries of D_k(t): t^(q-p)/(q-p)! within each block
            start = 0
            for s in sp.blocks[k]:
                for p in range(s):
                    for q in range(p, s):
                        m = q - p
                        out[..., a + start + p, a + start + q] = t**m / math.factorial(m)
                start += s
            out[..., a:b, a:b] *= np.exp(-sp.lam[k] * t)[..., None, None]
        return out

    def semigroup_matrix(self, t) -> np.ndarray:
        """Matrix of ``T_t`` (real) for a scalar or array of times."""
        M = self.P @ self.block_matrix(t) @ self.PH.conj().T
        return M.real

    def coefficients(self, f) -> np.ndarray:
        """All projections ``<f, phihat_j>`` stacked (length d, complex)."""
        return self.PH.conj().T @ np.asarray(f)


def semigroup_apply(basis: EigenBasis, f, t: float) -> np.ndarray:
    """``T_t f = sum_k exp(-lam_k t) Phi_k D_k(t) <f, PhiHat_k>``.

    ``f`` may be a vector or a ``(d, m)`` array of column vectors.  The
    result is real; a non-negligible imaginary part signals a broken basis.
    """
    if t < 0:
        raise ValueError("semigroup_apply needs t >= 0")
    f = np.asarray(f)
    v = basis.coefficients(f)
    out = basis.P @ (basis.block_matrix(t) @ v)
    scale = max(1.0, np.abs(out).max())
    if np.isrealobj(f) and np.abs(out.imag).max() > 1e-10 * scale:
        raise SpectralError(f"semigroup output has imaginary part {np.abs(out.imag).max():.2e}")
    return out.real if np.isrealobj(f) else out


def expm_apply(L: np.ndarray, f, t: float) -> np.ndarray:
    """Reference ``exp(tL) f`` by scaling and squaring (Pade)."""
    return scipy.linalg.expm(t * np.asarray(L)) @ np.asarray(f)


# --------------------------------------------------------------------------
# construction


def _null_basis(M: np.ndarray, nullity: int) -> np.ndarray:
    if nullity == 0:
        return np.zeros((M.shape[0], 0), dtype=M.dtype)
    _, _, vh = np.linalg.svd(M)
    return vh[-nullity:].conj().T


def _nullities(M: np.ndarray, upto: int, tol: float = RANK_TOL) -> list[int]:
    """Numerical nullity of ``M^j`` for j = 0..upto."""
    d = M.shape[0]
    out = [0]
    Mp = np.eye(d, dtype=M.dtype)
    scale = max(1.0, np.linalg.norm(M, 2))
    for j in range(1, upto + 1):
        Mp = Mp @ M
        s = np.linalg.svd(Mp, compute_uv=False)
        out.append(int(np.sum(s <= tol * scale**j)))
    return out


def _sizes_from_nullities(nu: list[int]) -> list[int]:
    # number of blocks of size >= j is nu[j] - nu[j-1]
    sizes = []
    m = len(nu) - 1
    for j in range(1, m + 1):
        at_least_j = nu[j] - nu[j - 1]
        at_least_next = (nu[j + 1] - nu[j]) if j < m else 0
        sizes += [j] * (at_least_j - at_least_next)
    return sorted(sizes, reverse=True)


def _expected_nullities(sizes, upto: int) -> list[int]:
    return [sum(min(j, s) for s in sizes) for j in range(upto + 1)]


def _phase_fix(v: np.ndarray) -> complex:
    """Unit-modulus factor making the first non-negligible entry positive real."""
    idx = np.nonzero(np.abs(v) > 1e-10 * np.abs(v).max())[0][0]
    z = v[idx]
    return abs(z) / z


def _jordan_chains(M: np.ndarray, sizes: list[int]) -> np.ndarray:
    """Columns ``[phi_1 .. phi_s]`` per chain with ``M phi_i = phi_{i-1}``.

    ``M = L - mu I`` restricted to its generalised eigenspace must have the
    Jordan structure given by ``sizes``.  Chains are emitted longest first.
    """
    d = M.shape[0]
    smax = max(sizes)
    nu = _expected_nullities(sizes, smax)
    powers = [np.eye(d, dtype=M.dtype)]
    for _ in range(smax):
        powers.append(powers[-1] @ M)
    kernels = [_null_basis(powers[j], nu[j]) for j in range(smax + 1)]

    chains: list[list[np.ndarray]] = []
    for s in sorted(set(sizes), reverse=True):
        count = sizes.count(s)
        avoid = [kernels[s - 1]] + [c[s - 1][:, None] for c in chains]
        A = np.hstack(avoid) if avoid else np.zeros((d, 0), dtype=M.dtype)
        if A.shape[1]:
            Qa, _ = np.linalg.qr(A)
            ra = np.linalg.matrix_rank(A, tol=1e-10)
            Qa = Qa[:, :ra]
            K = kernels[s] - Qa @ (Qa.conj().T @ kernels[s])
        else:
            K = kernels[s]
        U, sv, _ = np.linalg.svd(K, full_matrices=False)
        if len(sv) < count or sv[count - 1] < 1e-8:
            raise SpectralError("could not extend Jordan chains; declared structure inconsistent")
        for i in range(count):
            v = U[:, i]
            chain = [np.linalg.matrix_power(M, s - 1 - q) @ v for q in range(s)]
            head = chain[0]
            c = _phase_fix(head) / np.linalg.norm(head)
            chains.append([c * x for x in chain])
    return np.column_stack([x for c in chains for x in c])


def _cluster(values: np.ndarray, tol: float) -> list[np.ndarray]:
    """Single-linkage grouping with a relative gap test."""
    n = len(values)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            gap = abs(values[i] - values[j])
            if gap <= tol * max(1.0, abs(values[i]), abs(values[j])):
                parent[find(i)] = find(j)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return [np.array(g) for g in groups.values()]


def _order(mus: list[complex], tol: float) -> list[int]:
    """Descending real part; equal real parts by imaginary part of lam ascending."""
    idx = sorted(range(len(mus)), key=lambda i: -mus[i].real)
    out, i = [], 0
    while i < len(idx):
        j = i
        while j + 1 < len(idx) and abs(mus[idx[j + 1]].real - mus[idx[i]].real) <= tol:
            j += 1
        group = sorted(idx[i : j + 1], key=lambda m: mus[m].imag, reverse=True)
        out += group
        i = j + 1
    return out


def _assemble(
    L: np.ndarray, structure: list[tuple[complex, list[int]]], tol: float, perron: bool = True
) -> tuple[Spectrum, EigenBasis]:
    """Build chains for every (mu, sizes) entry and the dual basis.

    With ``perron`` the leading eigenvalue must be real, simple and strictly
    dominant with a positive eigenvector (true for every irreducible model).
    """
    d = L.shape[0]
    mus = [mu for mu, _ in structure]
    order = _order(mus, tol)
    structure = [structure[i] for i in order]
    mus = [mu for mu, _ in structure]

    # conjugate partners
    conj = np.arange(len(mus))
    for i, mu in enumerate(mus):
        if mu.imag != 0:
            partner = [j for j, nu in enumerate(mus) if j != i and abs(nu - mu.conjugate()) <= tol * max(1, abs(mu))]
            if len(partner) != 1:
                raise SpectralError(f"eigenvalue {mu} has no unique conjugate partner")
            conj[i] = partner[0]
            structure[partner[0]] = (mu.conjugate(), list(structure[i][1]))

    lead, sizes0 = structure[0]
    if perron and (lead.imag != 0 or list(sizes0) != [1]):
        raise SpectralError("dominant eigenvalue is not real and simple")
    if perron and len(mus) > 1 and mus[1].real >= lead.real - tol:
        raise SpectralError("dominant eigenvalue is not strictly dominant")

    Phi: list[np.ndarray | None] = [None] * len(mus)
    for i, (mu, sizes) in enumerate(structure):
        if Phi[i] is not None:
            continue
        if mu.imag == 0:
            M = L - mu.real * np.eye(d)
            Phi[i] = _jordan_chains(M, sizes).real.astype(complex)
        else:
            M = L.astype(complex) - mu * np.eye(d)
            Phi[i] = _jordan_chains(M, sizes)
            Phi[conj[i]] = Phi[i].conj()

    P = np.hstack(Phi)
    cond = np.linalg.cond(P)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SpectralError(
            f"generalised eigenbasis is ill-conditioned (cond {cond:.2e}); "
            "supply the Jordan structure via declared_structure"
        )
    if perron:
        # Perron normalisation: positive, unit 2-norm
        phi1 = Phi[0][:, 0].real
        if np.all(phi1 <= 0):
            phi1 = -phi1
        if np.any(phi1 <= 0):
            raise SpectralError("Perron eigenvector is not strictly positive (is Q irreducible?)")
        Phi[0] = (phi1 / np.linalg.norm(phi1))[:, None].astype(complex)
        P = np.hstack(Phi)

    PH = np.linalg.inv(P).conj().T
    offsets = np.concatenate([[0], np.cumsum([sum(s) for _, s in structure])])
    PhiHat: list[np.ndarray | None] = [None] * len(mus)
    for i, (mu, _) in enumerate(structure):
        block = PH[:, offsets[i] : offsets[i + 1]]
        if mu.imag == 0:
            PhiHat[i] = block.real.astype(complex)
        elif PhiHat[i] is None:
            PhiHat[i] = block
            PhiHat[conj[i]] = block.conj()

    spectrum = Spectrum(
        lam=np.array([-mu for mu in mus], dtype=complex),
        blocks=tuple(tuple(s) for _, s in structure),
        conjugate=conj,
        cluster_tol=tol,
    )
    frozen = []
    for arrs in (Phi, PhiHat):
        tup = []
        for a in arrs:
            a = np.array(a)
            a.setflags(write=False)
            tup.append(a)
        frozen.append(tuple(tup))
    L = np.array(L, dtype=float)
    L.setflags(write=False)
    return spectrum, EigenBasis(spectrum=spectrum, Phi=frozen[0], PhiHat=frozen[1], L=L)


def compute_spectrum(L, cluster_tol: float = CLUSTER_TOL, perron: bool = True) -> tuple[Spectrum, EigenBasis]:
    """Numerical eigen-decomposition with Jordan chain recovery.

    Eigenvalues are taken from a Schur factorisation, clustered with a
    relative gap test, and each cluster's block sizes are read off the rank
    profile of ``(L - mu I)^j``.
    """
    L = np.asarray(L, dtype=float)
    d = L.shape[0]
    T, _ = scipy.linalg.schur(L, output="complex")
    w = np.diag(T)
    structure = []
    for idx in _cluster(w, cluster_tol):
        mu = complex(w[idx].mean())
        if abs(mu.imag) <= cluster_tol * max(1.0, abs(mu)):
            mu = complex(mu.real, 0.0)
        m = len(idx)
        M = L - mu.real * np.eye(d) if mu.imag == 0 else L - mu * np.eye(d)
        nu = _nullities(M, m)
        nu = [min(n, m) for n in nu]
        if nu[-1] != m:
            nu[-1] = m
        structure.append((mu, _sizes_from_nullities(nu)))
    spectrum, basis = _assemble(L, structure, cluster_tol, perron)
    res = basis.residuals()
    if res["biorthogonality"] > 1e-9 or res["action"] > 1e-9:
        raise SpectralError(
            f"eigenbasis residuals too large ({res}); supply the Jordan structure via declared_structure"
        )
    return spectrum, basis


def declared_structure(
    L, declaration, cluster_tol: float = CLUSTER_TOL, perron: bool = True
) -> tuple[Spectrum, EigenBasis]:
    """Build the basis from a declared list of ``(eigenvalue of L, block sizes)``.

    The declaration is verified against the rank profile of ``(L - mu I)^j``.
    A complex eigenvalue declared without its conjugate gets the conjugate
    added with the same blocks.
    """
    L = np.asarray(L, dtype=float)
    d = L.shape[0]
    entries = [(complex(mu), sorted((int(b) for b in blocks), reverse=True)) for mu, blocks in declaration]
    for mu, blocks in list(entries):
        if mu.imag != 0 and not any(abs(nu - mu.conjugate()) <= cluster_tol for nu, _ in entries):
            entries.append((mu.conjugate(), list(blocks)))
    total = sum(sum(b) for _, b in entries)
    if total != d:
        raise SpectralError(f"declared multiplicities sum to {total}, expected {d}")
    for mu, blocks in entries:
        if min(blocks) < 1:
            raise SpectralError("block sizes must be positive")
        M = L - mu.real * np.eye(d) if mu.imag == 0 else L - mu * np.eye(d)
        upto = max(blocks) + 1
        got = _nullities(M, upto)
        want = _expected_nullities(blocks, upto)
        if got != want:
            raise SpectralError(
                f"declared blocks {blocks} for eigenvalue {mu} do not match rank profile: "
                f"nullities {got[1:]} vs expected {want[1:]}"
            )
    spectrum, basis = _assemble(L, entries, cluster_tol, perron)
    res = basis.residuals()
    if res["biorthogonality"] > 1e-9 or res["action"] > 1e-9:
        raise SpectralError(f"declared basis residuals too large: {res}")
    return spectrum, basis


def spectrum_for(model, cluster_tol: float = CLUSTER_TOL) -> tuple[Spectrum, EigenBasis]:
    """Use the model's declared structure when it has one, else compute."""
    from .model import mean_generator

    L = mean_generator(model)
    if model.declared_spectrum is not None:
        return declared_structure(L, model.declared_spectrum, cluster_tol)
    return compute_spectrum(L, cluster_tol)


def spectrum_report(spectrum: Spectrum, basis: EigenBasis) -> dict:
    def cplx(a):
        a = np.asarray(a)
        return {"re": a.real.tolist(), "im": a.imag.tolist()}

    return {
        "lambda": cplx(spectrum.lam),
        "eigenvalues": cplx(spectrum.eigenvalues),
        "lambda_1": spectrum.lambda1,
        "blocks": [list(b) for b in spectrum.blocks],
        "conjugate": spectrum.conjugate.tolist(),
        "Phi": [cplx(p) for p in basis.Phi],
        "PhiHat": [cplx(p) for p in basis.PhiHat],
        "phi1": basis.phi1.tolist(),
        "phi1_hat": basis.phi1_hat.tolist(),
        "residuals": basis.residuals(),
    }
