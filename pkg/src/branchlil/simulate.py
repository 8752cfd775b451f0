"""Exact event-driven simulation of the branching Markov process.

Particles are aggregated by state.  With ``n_x`` particles at ``x`` the total
event rate is ``R = sum_x n_x (q_x + beta_x)``; the next event comes after an
Exp(R) time and is either a jump ``x -> y`` (probability ``n_x Q[x, y] / R``)
or a branching at ``x`` (probability ``n_x beta_x / R``), in which case one
particle at ``x`` is replaced by ``k ~ p(x)`` particles at ``x``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .decompose import LARGE, _propagate, classify, compensator, project
from .model import BranchingModel
from .rng import nb_uniform, stream_key
from .spectral import EigenBasis

DEFAULT_CAP = 10_000_000

OK, OVERFLOW = 0, 1


class PopulationOverflow(RuntimeError):
    def __init__(self, time: float, cap: int):
        self.time = time
        self.cap = cap
        super().__init__(f"population exceeded {cap} particles at t = {time:.6g}")


def _tables(model: BranchingModel):
    d = model.d
    Q = np.array(model.Q)
    out_rate = -np.diag(Q).copy()
    jump_cdf = np.zeros((d, d))
    for x in range(d):
        row = Q[x].copy()
        row[x] = 0.0
        if out_rate[x] > 0:
            jump_cdf[x] = np.cumsum(row) / out_rate[x]
            jump_cdf[x, -1] = 1.0
    support = [np.nonzero(model.offspring[x])[0] for x in range(d)]
    width = max(len(s) for s in support)
    off_val = np.zeros((d, width), dtype=np.int64)
    off_cdf = np.ones((d, width))
    off_len = np.zeros(d, dtype=np.int64)
    for x, s in enumerate(support):
        off_len[x] = len(s)
        off_val[x, : len(s)] = s
        c = np.cumsum(model.offspring[x, s])
        c[-1] = 1.0
        off_cdf[x, : len(s)] = c
    return out_rate, np.array(model.beta), jump_cdf, off_val, off_cdf, off_len


@njit(cache=True)
def _run_one(out_rate, beta, jump_cdf, off_val, off_cdf, off_len, init, grid, key, cap, out):
    d = init.shape[0]
    G = grid.shape[0]
    n = init.copy()
    total = 0
    for x in range(d):
        total += n[x]
    w = out_rate + beta
    # destination of a jump when it is forced, else -1
    jump_only = np.full(d, -1)
    for x in range(d):
        hits = 0
        for j in range(d):
            if jump_cdf[x, j] > (jump_cdf[x, j - 1] if j > 0 else 0.0):
                hits += 1
                jump_only[x] = j
        if hits != 1:
            jump_only[x] = -1
    t = 0.0
    g = 0
    c = np.uint64(0)
    one = np.uint64(1)
    events = 0
    # one state without jumps: every event is a branching at that state
    single = d == 1 and out_rate[0] == 0.0
    while g < G:
        R = 0.0
        for x in range(d):
            R += n[x] * w[x]
        if R <= 0.0:
            break
        u = nb_uniform(key, c)
        c += one
        t_next = t - math.log(1.0 - u) / R
        while g < G and grid[g] < t_next:
            for x in range(d):
                out[g, x] = n[x]
            g += 1
        if g >= G:
            break
        t = t_next
        events += 1
        chosen = d - 1
        branch = True
        if single:
            target = 0.0
        else:
            target = nb_uniform(key, c) * R
            c += one
        acc = 0.0
        for x in range(d):
            if single:
                break
            acc += n[x] * out_rate[x]
            if target < acc:
                chosen = x
                branch = False
                break
            acc += n[x] * beta[x]
            if target < acc:
                chosen = x
                break
        x = chosen
        if n[x] == 0:
            # floating round-off at the top of the cumulative sum; pick the last occupied state
            for y in range(d - 1, -1, -1):
                if n[y] > 0:
                    x = y
                    break
            branch = beta[x] > 0
        if branch:
            k = off_val[x, 0]
            m = off_len[x]
            if m > 1:
                u = nb_uniform(key, c)
                c += one
                for i in range(m):
                    if u < off_cdf[x, i]:
                        k = off_val[x, i]
                        break
            n[x] += k - 1
            total += k - 1
            if total > cap:
                for h in range(g, G):
                    for y in range(d):
                        out[h, y] = -1
                return events, 1, t
        else:
            y = jump_only[x]
            if y < 0:
                u = nb_uniform(key, c)
                c += one
                y = d - 1
                for j in range(d):
                    if u < jump_cdf[x, j]:
                        y = j
                        break
            n[x] -= 1
            n[y] += 1
    # extinct or frozen: the state no longer changes
    for h in range(g, G):
        for y in range(d):
            out[h, y] = n[y]
    return events, 0, math.nan


@njit(cache=True)
def _run_many(out_rate, beta, jump_cdf, off_val, off_cdf, off_len, init, grid, keys, cap, out, events, status, when):
    for r in range(keys.shape[0]):
        e, s, tt = _run_one(out_rate, beta, jump_cdf, off_val, off_cdf, off_len, init, grid, keys[r], cap, out[r])
        events[r] = e
        status[r] = s
        when[r] = tt


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0 or grid[0] < 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be a non-empty strictly increasing list of times >= 0")
    return grid


def _check_init(model, initial) -> np.ndarray:
    init = np.asarray(initial, dtype=np.int64)
    if init.shape != (model.d,) or np.any(init < 0):
        raise ValueError(f"initial counts must be {model.d} non-negative integers")
    return init


@dataclass(frozen=True)
class Trajectory:
    seed: int
    grid: np.ndarray
    counts: np.ndarray
    event_count: int

    @property
    def states(self):
        return [(float(t), c) for t, c in zip(self.grid, self.counts)]


def simulate(model: BranchingModel, initial, grid, seed: int, cap: int = DEFAULT_CAP) -> Trajectory:
    """One trajectory, recorded at the grid times.  ``seed`` is the stream key."""
    grid = _check_grid(grid)
    init = _check_init(model, initial)
    out = np.zeros((len(grid), model.d), dtype=np.int64)
    events, status, when = _run_one(*_tables(model), init, grid, np.uint64(seed), cap, out)
    if status == OVERFLOW:
        raise PopulationOverflow(when, cap)
    return Trajectory(seed=int(seed), grid=grid, counts=out, event_count=int(events))


@dataclass(frozen=True)
class Ensemble:
    """Independent replicates; replicate ``r`` uses ``stream_key(master_seed, r)``."""

    master_seed: int
    grid: np.ndarray
    initial: np.ndarray
    counts: np.ndarray  # (reps, grid, d); -1 after an overflow
    events: np.ndarray
    status: np.ndarray
    overflow_time: np.ndarray
    errors: list = field(default_factory=list)
    replicates: np.ndarray | None = None  # replicate index of each row

    def __post_init__(self):
        if self.replicates is None:
            object.__setattr__(self, "replicates", np.arange(self.counts.shape[0]))

    @property
    def n_reps(self) -> int:
        return self.counts.shape[0]

    @property
    def ok(self) -> np.ndarray:
        return self.status == OK

    def trajectory(self, r: int) -> Trajectory:
        return Trajectory(
            stream_key(self.master_seed, int(self.replicates[r])), self.grid, self.counts[r], int(self.events[r])
        )

    def grid_index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.grid - t)))
        if abs(self.grid[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the grid")
        return i


def ensemble(
    model: BranchingModel,
    initial,
    grid,
    n_reps: int,
    master_seed: int,
    cap: int = DEFAULT_CAP,
    indices=None,
) -> Ensemble:
    """Run ``n_reps`` replicates, or only the replicate ``indices`` of that run.

    Replicate ``r`` depends on ``(master_seed, r)`` alone, so a subset
    reproduces the matching rows of the full ensemble exactly.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    grid = _check_grid(grid)
    init = _check_init(model, initial)
    idx = np.arange(n_reps) if indices is None else np.asarray(indices, dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= n_reps:
        raise ValueError("replicate indices must lie in [0, n_reps)")
    keys = np.array([stream_key(master_seed, int(r)) for r in idx], dtype=np.uint64)
    out = np.zeros((len(idx), len(grid), model.d), dtype=np.int64)
    events = np.zeros(len(idx), dtype=np.int64)
    status = np.zeros(len(idx), dtype=np.int64)
    when = np.full(len(idx), np.nan)
    _run_many(*_tables(model), init, grid, keys, cap, out, events, status, when)
    errors = [
        {"rep": int(idx[r]), "error": "population overflow", "time": float(when[r]), "cap": int(cap)}
        for r in np.nonzero(status == OVERFLOW)[0]
    ]
    return Ensemble(master_seed, grid, init, out, events, status, when, errors, idx)


# --------------------------------------------------------------------------
# observables


@dataclass(frozen=True)
class ObservablePath:
    """Observables on the grid; leading axis is the replicate when batched."""

    grid: np.ndarray
    value: np.ndarray  # <f, X_t>
    phi1_mass: np.ndarray  # <phi_1, X_t>
    W: np.ndarray
    H: dict  # k -> complex array (..., grid, n_k)
    total: np.ndarray  # <1, X_t>


def martingale_H(basis: EigenBasis, counts, grid, k: int) -> np.ndarray:
    """``H_t^(k) = exp(lam_k t) (<phi_j^(k), X_t>)_j D_k(t)^-1`` (row vectors)."""
    sp = basis.spectrum
    grid = np.asarray(grid, dtype=float)
    raw = np.asarray(counts, dtype=float) @ basis.Phi[k]  # (..., G, n_k)
    n = sp.sizes[k]
    Dinv = np.zeros((len(grid), n, n), dtype=complex)
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        Dinv[:, :, j] = _propagate(sp, k, -grid, e)
    return np.exp(sp.lam[k] * grid)[:, None] * np.einsum("...gi,gij->...gj", raw, Dinv)


def observe(counts, grid, basis: EigenBasis, f, requested_k=()) -> ObservablePath:
    """Observables for one trajectory ``(G, d)`` or an ensemble ``(R, G, d)``."""
    counts = np.asarray(counts, dtype=float)
    grid = np.asarray(grid, dtype=float)
    value = counts @ np.asarray(f, dtype=float)
    mass = counts @ basis.phi1
    W = np.exp(basis.lambda1 * grid) * mass
    H = {k: martingale_H(basis, counts, grid, k) for k in requested_k}
    return ObservablePath(grid, value, mass, W, H, counts.sum(axis=-1))


def fluctuation(path: ObservablePath, basis: EigenBasis, f, horizon_index: int = -1) -> np.ndarray:
    """``exp(lam1 t / 2) (<f, X_t> - E_t(f_la))`` with ``H_inf`` replaced by ``H_T``.

    ``T`` is the grid time at ``horizon_index``.
    """
    proj = project(basis, f)
    horizon_index = range(len(path.grid))[horizon_index]
    large = [k for k in range(basis.spectrum.count) if classify(basis, k) == LARGE and proj.nonzero(k)]
    H_T = {}
    for k in large:
        H = path.H[k] if k in path.H else None
        if H is None:
            raise KeyError(f"observe() must be asked for H of large index {k}")
        H_T[k] = H[..., horizon_index : horizon_index + 1, :] if H.ndim == 3 else H[horizon_index]
    t = path.grid
    if large:
        E = compensator(basis, H_T, f, t)
    else:
        E = 0.0
    return np.exp(basis.lambda1 * t / 2) * (path.value - E)


def ensemble_summary(ens: Ensemble, path: ObservablePath) -> dict:
    ok = ens.ok
    v = path.value[ok]
    W = path.W[ok]
    alive = path.total[ok] > 0
    G = len(ens.grid)

    def mean(a):
        # every replicate may have overflowed
        return a.mean(axis=0).tolist() if len(a) else [None] * G

    return {
        "n_reps": ens.n_reps,
        "n_failed": int((~ok).sum()),
        "grid": ens.grid.tolist(),
        "mean": mean(v),
        "variance": v.var(axis=0, ddof=1).tolist() if len(v) > 1 else [0.0] * G,
        "second_moment": mean(v**2),
        "W_mean": mean(W),
        "W_variance": W.var(axis=0, ddof=1).tolist() if len(W) > 1 else [0.0] * G,
        "survivors": alive.sum(axis=0).astype(int).tolist(),
        "errors": ens.errors,
    }


def _fmt(x: float) -> str:
    return repr(float(x))


def ensemble_csv(ens: Ensemble, path: ObservablePath, ks=()) -> str:
    """Per-replicate rows: rep, t, counts..., f, W, H components (re/im)."""
    d = ens.counts.shape[2]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["rep", "t"] + [f"n{x}" for x in range(d)] + ["f", "W"]
    for k in ks:
        n = path.H[k].shape[-1]
        for j in range(n):
            header += [f"H{k}_{j}_re", f"H{k}_{j}_im"]
    w.writerow(header)
    for r in range(ens.n_reps):
        for i, t in enumerate(ens.grid):
            row = [int(ens.replicates[r]), _fmt(t)] + [int(c) for c in ens.counts[r, i]]
            row += [_fmt(path.value[r, i]), _fmt(path.W[r, i])]
            for k in ks:
                for z in path.H[k][r, i]:
                    row += [_fmt(z.real), _fmt(z.imag)]
            w.writerow(row)
    return buf.getvalue()


def read_ensemble_csv(text: str):
    """Parse :func:`ensemble_csv` output back into ``(replicates, grid, counts)``."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:2] != ["rep", "t"]:
        raise ValueError("not an ensemble CSV (expected a 'rep,t,...' header)")
    header, body = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("n") and h[1:].isdigit())
    reps = sorted({int(r[0]) for r in body})
    times = sorted({float(r[1]) for r in body})
    counts = np.zeros((len(reps), len(times), d), dtype=np.int64)
    ri = {r: i for i, r in enumerate(reps)}
    ti = {t: i for i, t in enumerate(times)}
    for r in body:
        counts[ri[int(r[0])], ti[float(r[1])]] = [int(c) for c in r[2 : 2 + d]]
    return np.array(reps), np.array(times), counts
