"""Figure rendering for the report paths; the CSVs remain the contract."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["plot_convergence", "plot_adapt_traces"]


def plot_convergence(ks, error_columns: dict, path, title: str, ref_order: float = 2.0):
    """Log-log error-vs-step plot with a reference slope."""
    ks = np.asarray(ks, dtype=float)
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    for label, errs in error_columns.items():
        ax.loglog(ks, errs, "o-", label=label)
    anchor = max(v[0] for v in error_columns.values())
    ax.loglog(ks, anchor * (ks / ks[0]) ** ref_order, "k--", lw=0.8,
              label=f"slope {ref_order:g}")
    ax.set_xlabel("k")
    ax.set_ylabel("error")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_adapt_traces(ledger, tol: float, path, title: str):
    """Panel figure over accepted steps: energy, its error, dissipations,
    criterion versus tolerance, and the step-size trace."""
    acc = ledger.accepted_rows
    t = np.array([r.t_n + r.k_n for r in acc])
    energy = np.array([r.energy for r in acc])
    e_exact = np.array([r.extra.get("energy_exact", np.nan) for r in acc])
    e_nd = np.array([r.e_nd for r in acc])
    e_vd = np.array([r.e_vd for r in acc])
    est = np.array([r.estimator for r in acc])
    ks = np.array([r.k_n for r in acc])

    def log10s(x):
        return np.log10(np.maximum(np.abs(x), 1e-300))

    fig, axes = plt.subplots(3, 2, figsize=(9, 9))
    ax = axes[0, 0]
    ax.plot(t, energy, label="computed")
    if np.any(np.isfinite(e_exact)):
        ax.plot(t, e_exact, "--", label="exact")
    ax.set_title("energy")
    ax.legend(fontsize=8)

    ax = axes[0, 1]
    if np.any(np.isfinite(e_exact)):
        ax.plot(t, log10s(energy - e_exact))
    ax.set_title("log10 |energy error|")

    axes[1, 0].plot(t, log10s(e_nd))
    axes[1, 0].set_title("log10 numerical dissipation")
    axes[1, 1].plot(t, e_vd)
    axes[1, 1].set_title("viscous dissipation")

    ax = axes[2, 0]
    ax.plot(t, log10s(est), ".", ms=2)
    ax.axhline(np.log10(tol), color="r", lw=0.8, label="Tol")
    ax.set_title("log10 criterion")
    ax.legend(fontsize=8)

    axes[2, 1].plot(t, np.log10(ks), ".", ms=2)
    axes[2, 1].set_title("log10 step size")

    for a in axes.flat:
        a.grid(True, alpha=0.3)
        a.set_xlabel("t")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
