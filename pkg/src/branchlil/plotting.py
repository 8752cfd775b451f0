"""Figures written next to the CSV/JSON reports (non-interactive backend)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy import stats  # noqa: E402

# fixed metadata keeps PNG bytes stable between runs
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def plot_spectrum(spectrum, path) -> Path:
    """Eigenvalues ``-lam_k`` of the mean generator, with the critical line ``Re = -lam_1/2``."""
    z = -np.asarray(spectrum.lam)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.axvline(-spectrum.lambda1 / 2, color="0.6", ls="--", lw=1, label="critical line")
    for k, (w, s) in enumerate(zip(z, spectrum.sizes)):
        ax.scatter(w.real, w.imag, s=40 + 30 * (s - 1), color="C0" if k else "C3")
        ax.annotate(f"{k}" + (f" ({s})" if s > 1 else ""), (w.real, w.imag), textcoords="offset points", xytext=(5, 5))
    ax.set_xlabel("Re")
    ax.set_ylabel("Im")
    ax.set_title("spectrum of the mean generator")
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def plot_moments(table, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for j in range(table.order):
        ax.semilogy(table.t, np.abs(table.m[j]), marker="o", ms=3, label=f"m{j + 1}")
    ax.set_xlabel("t")
    ax.set_ylabel("|moment|")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_paths(grid, W, path, max_paths: int = 50) -> Path:
    """Sample paths of the additive martingale ``W_t``."""
    W = np.atleast_2d(W)
    fig, ax = plt.subplots(figsize=(5, 4))
    for w in W[:max_paths]:
        ax.plot(grid, w, lw=0.7, alpha=0.6)
    ax.set_xlabel("t")
    ax.set_ylabel("W_t")
    return _save(fig, path)


def plot_clt(report, path) -> Path:
    S = report.statistic
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 4))
    sd = math.sqrt(report.target_variance)
    if S is not None and len(S):
        a.hist(S, bins=80, density=True, color="C0", alpha=0.6)
        x = np.linspace(S.min(), S.max(), 400)
        a.plot(x, stats.norm.pdf(x, scale=sd), color="C3")
        s = np.sort(S)
        b.plot(s, np.arange(1, len(s) + 1) / len(s), lw=1, label="empirical")
        b.plot(s, stats.norm.cdf(s, scale=sd), lw=1, color="C3", label="normal")
        b.legend(fontsize=8)
    a.set_title(f"{report.component} component, t = {report.t:g}")
    ks = "n/a" if report.ks_statistic is None else f"{report.ks_statistic:.4f}"
    b.set_title(f"KS = {ks}")
    return _save(fig, path)


def plot_lil(report, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    if report.n_counted:
        ax.hist(report.ratios, bins=40, color="C0", alpha=0.7)
    for v in report.band:
        ax.axvline(v, color="C3", ls="--", lw=1)
    ax.set_xlabel("envelope ratio")
    ax.set_title(f"{report.fraction_in_band:.0%} in band (sanity envelope)")
    return _save(fig, path)


def plot_martingale(report: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    rows = report["rows"]
    keys = sorted({(r["part"], r["component"]) for r in rows})
    for part, j in keys:
        sel = [r for r in rows if r["part"] == part and r["component"] == j]
        t = np.array([r["t"] for r in sel])
        m = np.array([r["mean"] for r in sel])
        se = np.array([r["se"] for r in sel])
        ax.errorbar(t, m, yerr=report["z_crit"] * se, capsize=3, marker="o", ms=3, label=f"{part} [{j}]")
    ax.set_xlabel("t")
    ax.set_ylabel(f"mean H^({report['k']})")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_lln(report: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar(report["t"], report["mean_residual"], yerr=report["se"], marker="o", capsize=3)
    ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel("mean LLN residual")
    return _save(fig, path)
