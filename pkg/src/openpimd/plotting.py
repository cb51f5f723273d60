"""Figures written next to the CSV outputs (file output only, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_distributions(path, ntilde, npd, reference=None):
    """Two panels: n~(x) and n(p), with 1-sigma bands and an optional exact n(p)."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(5.0, 6.0))
    ax1.plot(ntilde.grid, ntilde.values, color="C0")
    ax1.fill_between(ntilde.grid, ntilde.values - ntilde.errors, ntilde.values + ntilde.errors,
                     color="C0", alpha=0.3, lw=0)
    ax1.set_xlabel("x (bohr)")
    ax1.set_ylabel("n~(x)")
    ax2.plot(npd.grid, npd.values, color="C0", label=npd.source)
    ax2.fill_between(npd.grid, npd.values - npd.errors, npd.values + npd.errors, color="C0", alpha=0.3, lw=0)
    if reference is not None:
        ax2.plot(reference.grid, reference.values, "k--", lw=1, label=reference.source)
    ax2.set_xlabel("p (a.u.)")
    ax2.set_ylabel("n(p)")
    ax2.legend(frameon=False)
    _save(fig, path)


def plot_convergence(path, records, start=None):
    it = np.array([r.iteration for r in records])
    alpha = np.array([r.alpha_avg for r in records])
    grad = np.array([r.grad_norm for r in records])
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(5.0, 5.5), sharex=True)
    ax1.plot(it, alpha, lw=0.8)
    ax1.set_ylabel("running-mean coefficients")
    ax2.semilogy(it, grad, lw=0.8, color="k")
    ax2.set_ylabel("|gradient|")
    ax2.set_xlabel("iteration")
    if start is not None:
        for ax in (ax1, ax2):
            ax.axvline(it[0] + start, color="r", ls=":")
    _save(fig, path)


def plot_spectrum(path, eigenvalues, errors, xgrid, curves):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.5))
    n = np.arange(1, len(eigenvalues) + 1)
    ax1.errorbar(n, eigenvalues, yerr=errors, fmt="o", ms=4)
    ax1.set_xlabel("index")
    ax1.set_ylabel("eigenvalue")
    for k, c in enumerate(curves):
        ax2.plot(xgrid, c, label=f"n = {k}")
    ax2.set_xlabel("x (bohr)")
    ax2.set_ylabel("<T_x>")
    ax2.legend(frameon=False, fontsize=8)
    _save(fig, path)
