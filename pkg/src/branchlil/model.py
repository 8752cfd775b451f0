"""Finite-state branching Markov models.

A model is a conservative generator ``Q`` for the spatial motion on
``E = {0, ..., d-1}`` (counting measure), a branching rate ``beta`` and one
offspring law per state.  Everything downstream (mean generator, spectrum,
moments, simulation) is derived from these three objects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Any

import numpy as np
from scipy.linalg import expm
from scipy.sparse.csgraph import connected_components

STRUCTURAL_TOL = 1e-12
MAX_OFFSPRING = 64

_ALLOWED_KEYS = {"d", "Q", "beta", "offspring", "declared_spectrum"}
_REQUIRED_KEYS = ("d", "Q", "beta", "offspring")


class ModelValidationError(ValueError):
    """Raised when a model document violates one or more invariants.

    ``problems`` lists every violation found, not only the first.
    """

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid model: " + "; ".join(self.problems))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BranchingModel:
    """Branching Markov process on ``d`` states.

    ``offspring[x, k]`` is the probability that a particle branching at
    ``x`` leaves ``k`` children.  ``declared_spectrum`` optionally carries an
    eigenvalue/Jordan-block declaration for
    :func:`branchlil.spectral.declared_structure`.
    """

    d: int
    Q: np.ndarray
    beta: np.ndarray
    offspring: np.ndarray
    declared_spectrum: tuple | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "Q", _frozen(self.Q))
        object.__setattr__(self, "beta", _frozen(self.beta))
        object.__setattr__(self, "offspring", _frozen(self.offspring))
        problems = _validate(self.d, self.Q, self.beta, self.offspring)
        if problems:
            raise ModelValidationError(problems)

    def __eq__(self, other):
        if not isinstance(other, BranchingModel):
            return NotImplemented
        return (
            self.d == other.d
            and np.array_equal(self.Q, other.Q)
            and np.array_equal(self.beta, other.beta)
            and self.offspring.shape == other.offspring.shape
            and np.array_equal(self.offspring, other.offspring)
        )

    __hash__ = None

    @property
    def kmax(self) -> int:
        return self.offspring.shape[1] - 1

    @property
    def offspring_mean(self) -> np.ndarray:
        return self.offspring @ np.arange(self.kmax + 1)

    def permuted(self, perm) -> "BranchingModel":
        """Relabel states so that new state ``i`` is old state ``perm[i]``."""
        perm = np.asarray(perm)
        return BranchingModel(
            d=self.d,
            Q=self.Q[np.ix_(perm, perm)],
            beta=self.beta[perm],
            offspring=self.offspring[perm],
        )

    def to_dict(self) -> dict:
        doc: dict[str, Any] = {
            "d": self.d,
            "Q": self.Q.tolist(),
            "beta": self.beta.tolist(),
            "offspring": [
                [[int(k), float(p)] for k, p in enumerate(row) if p > 0]
                for row in self.offspring
            ],
        }
        if self.declared_spectrum is not None:
            doc["declared_spectrum"] = [
                {"eigenvalue": [z.real, z.imag], "blocks": list(b)}
                for z, b in self.declared_spectrum
            ]
        return doc


@dataclass(frozen=True)
class BranchingMoments:
    """Derivatives ``A^(k)(x)`` of the branching mechanism at ``z = 1``."""

    A1: np.ndarray
    A2: np.ndarray
    A3: np.ndarray
    A4: np.ndarray

    def __getitem__(self, k: int) -> np.ndarray:
        return (self.A1, self.A2, self.A3, self.A4)[k - 1]

    @property
    def deterministic(self) -> bool:
        """True when no offspring law has any spread (all A^(k), k >= 2, vanish)."""
        return bool(np.all(self.A2 == 0) and np.all(self.A3 == 0) and np.all(self.A4 == 0))


def _validate(d, Q, beta, offspring) -> list[str]:
    problems = []
    if not isinstance(d, (int, np.integer)) or d < 1:
        return [f"d must be a positive integer, got {d!r}"]
    if Q.shape != (d, d):
        problems.append(f"Q has shape {Q.shape}, expected ({d}, {d})")
    if beta.shape != (d,):
        problems.append(f"beta has shape {beta.shape}, expected ({d},)")
    if offspring.ndim != 2 or offspring.shape[0] != d:
        problems.append(f"offspring table has shape {offspring.shape}, expected ({d}, K+1)")
    if problems:
        return problems

    for name, arr in (("Q", Q), ("beta", beta), ("offspring", offspring)):
        if not np.all(np.isfinite(arr)):
            problems.append(f"{name} contains non-finite entries")
    if problems:
        return problems

    off = Q - np.diag(np.diag(Q))
    if np.any(off < 0):
        bad = [(int(i), int(j)) for i, j in zip(*np.nonzero(off < 0))]
        problems.append(f"Q has negative off-diagonal entries at {bad}")
    rows = Q.sum(axis=1)
    for x in np.nonzero(np.abs(rows) > STRUCTURAL_TOL)[0]:
        problems.append(f"Q row {x} sums to {rows[x]:.3g}, not 0 (non-conservative)")
    for x in np.nonzero(beta < 0)[0]:
        problems.append(f"negative branching rate beta[{x}] = {beta[x]}")
    if offspring.shape[1] - 1 > MAX_OFFSPRING:
        problems.append(f"offspring support exceeds K_max = {MAX_OFFSPRING}")
    if np.any(offspring < 0):
        problems.append("offspring pmf has negative masses")
    totals = offspring.sum(axis=1)
    for x in np.nonzero(np.abs(totals - 1.0) > STRUCTURAL_TOL)[0]:
        problems.append(f"offspring pmf at state {x} sums to {totals[x]:.12g}, not 1")
    if d > 1 and not is_irreducible(Q):
        problems.append("Q is reducible")
    return problems


def is_irreducible(Q: np.ndarray) -> bool:
    if Q.shape[0] == 1:
        return True
    adj = (Q - np.diag(np.diag(Q))) > 0
    n, _ = connected_components(adj, directed=True, connection="strong")
    return n == 1


def _parse_declaration(raw) -> tuple:
    out = []
    for entry in raw:
        if set(entry) - {"eigenvalue", "blocks"}:
            raise ModelValidationError([f"unknown keys in declared_spectrum entry: {sorted(set(entry) - {'eigenvalue', 'blocks'})}"])
        z = entry["eigenvalue"]
        z = complex(z[0], z[1]) if isinstance(z, (list, tuple)) else complex(z)
        out.append((z, tuple(int(b) for b in entry["blocks"])))
    return tuple(out)


def model_from_dict(doc: dict) -> BranchingModel:
    """Build a model from the parsed JSON document, rejecting unknown keys."""
    problems = []
    if not isinstance(doc, dict):
        raise ModelValidationError(["model document must be a JSON object"])
    unknown = set(doc) - _ALLOWED_KEYS
    if unknown:
        problems.append(f"unknown keys: {sorted(unknown)}")
    missing = [k for k in _REQUIRED_KEYS if k not in doc]
    if missing:
        problems.append(f"missing keys: {missing}")
    if problems:
        raise ModelValidationError(problems)

    d = doc["d"]
    if isinstance(d, bool) or not isinstance(d, int) or d < 1:
        raise ModelValidationError([f"d must be a positive integer, got {d!r}"])
    try:
        Q = np.array(doc["Q"], dtype=float)
        beta = np.array(doc["beta"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelValidationError([f"Q/beta not numeric arrays: {exc}"]) from None

    rows = doc["offspring"]
    if not isinstance(rows, list) or len(rows) != d:
        raise ModelValidationError([f"offspring must list {d} pmfs"])
    kmax = 0
    for x, row in enumerate(rows):
        for pair in row:
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                problems.append(f"offspring[{x}] entry {pair!r} is not a [k, prob] pair")
                continue
            k = pair[0]
            if isinstance(k, bool) or not isinstance(k, int) or k < 0:
                problems.append(f"offspring[{x}] has invalid count {k!r}")
                continue
            kmax = max(kmax, k)
    if problems:
        raise ModelValidationError(problems)
    if kmax > MAX_OFFSPRING:
        raise ModelValidationError([f"offspring support exceeds K_max = {MAX_OFFSPRING}"])
    table = np.zeros((d, kmax + 1))
    for x, row in enumerate(rows):
        for k, p in row:
            table[x, k] += float(p)

    declared = _parse_declaration(doc["declared_spectrum"]) if "declared_spectrum" in doc else None
    return BranchingModel(d=d, Q=Q, beta=beta, offspring=table, declared_spectrum=declared)


def load_model(config: str | PathLike | dict) -> BranchingModel:
    """Load and validate a model from a JSON file path, JSON text, or dict."""
    if isinstance(config, dict):
        return model_from_dict(config)
    text = None
    if isinstance(config, PathLike) or (isinstance(config, str) and not config.lstrip().startswith("{")):
        text = Path(config).read_text()
    else:
        text = config
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelValidationError([f"JSON parse failure: {exc}"]) from None
    return model_from_dict(doc)


def branching_moments(model: BranchingModel) -> BranchingMoments:
    """Factorial-moment coefficients of the branching mechanism.

    ``A1 = beta (m - 1)`` and ``Ak = beta * E[N (N-1) ... (N-k+1)]`` for k >= 2.
    """
    k = np.arange(model.kmax + 1, dtype=float)
    fact = [k, k * (k - 1), k * (k - 1) * (k - 2), k * (k - 1) * (k - 2) * (k - 3)]
    m = [model.offspring @ w for w in fact]
    b = model.beta
    return BranchingMoments(
        A1=_frozen(b * (m[0] - 1.0)),
        A2=_frozen(b * m[1]),
        A3=_frozen(b * m[2]),
        A4=_frozen(b * m[3]),
    )


def mean_generator(model: BranchingModel) -> np.ndarray:
    """Generator ``L = Q + diag(A1)`` of the first-moment semigroup."""
    L = model.Q + np.diag(branching_moments(model).A1)
    L.setflags(write=False)
    return L


def check_hypotheses(model: BranchingModel, probe_time: float = 1.0) -> dict:
    """Diagnostic report on the standing assumptions at finite scale.

    Violations are warnings; nothing here raises.
    """
    A = branching_moments(model)
    L = mean_generator(model)
    eig = np.linalg.eigvals(L)
    lead = eig[np.argmax(eig.real)]
    lam1 = -float(lead.real)
    k = np.arange(model.kmax + 1, dtype=float)
    P = expm(probe_time * model.Q)
    T = expm(probe_time * L)

    warnings = []
    irreducible = is_irreducible(model.Q)
    if not irreducible:
        warnings.append("Q is reducible: the Perron eigenvalue may be non-simple")
    col_sums = P.sum(axis=0)
    h1a = bool(np.all(col_sums <= 1 + 1e-12))
    if not h1a:
        warnings.append(
            "column sums of exp(tQ) exceed 1; this analytic condition is not needed for finite type spaces"
        )
    supercritical = lam1 < 0
    if not supercritical:
        warnings.append(f"not supercritical: lambda_1 = {lam1:.6g} >= 0")

    return {
        "d": model.d,
        "irreducible": irreducible,
        "beta_bounded": True,
        "beta_max": float(model.beta.max()),
        "lambda_1": lam1,
        "supercritical": supercritical,
        "offspring_moment_2": float((model.offspring @ k**2).max()),
        "offspring_moment_4": float((model.offspring @ k**4).max()),
        "moments_finite": True,
        "probe_time": probe_time,
        "column_sum_condition": h1a,
        "a_t": (P**2).sum(axis=1).tolist(),
        "a_hat_t": (P**2).sum(axis=0).tolist(),
        "b_t": (T**2).sum(axis=1).tolist(),
        "b_hat_t": (T**2).sum(axis=0).tolist(),
        "integrability_note": (
            "on a finite state space with counting measure every function is in L^1 and L^2; "
            "the integrability conditions on a_t, b_t carry no further content"
        ),
        "deterministic_branching": A.deterministic,
        "warnings": warnings,
    }


def yule_model(rate: float = 1.0) -> BranchingModel:
    return BranchingModel(d=1, Q=np.zeros((1, 1)), beta=np.array([rate]), offspring=np.array([[0.0, 0.0, 1.0]]))


def binary_model(Q, beta, p0: float = 0.0) -> BranchingModel:
    """Model with the same binary offspring law (0 or 2 children) everywhere."""
    Q = np.asarray(Q, dtype=float)
    d = Q.shape[0]
    table = np.zeros((d, 3))
    table[:, 0] = p0
    table[:, 2] = 1.0 - p0
    return BranchingModel(d=d, Q=Q, beta=np.broadcast_to(np.asarray(beta, float), (d,)), offspring=table)


__all__ = [
    "BranchingModel",
    "BranchingMoments",
    "ModelValidationError",
    "binary_model",
    "branching_moments",
    "check_hypotheses",
    "is_irreducible",
    "load_model",
    "mean_generator",
    "model_from_dict",
    "yule_model",
]
