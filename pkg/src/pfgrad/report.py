"""Figure rendering for study outputs.

Each study subcommand writes its figure next to the delimited output.
Rendering is best effort and never part of any numerical contract.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .harness import RateCurve, RmlTrace, VarianceCurve


def render_variance_figure(curve: VarianceCurve, theta_names, path) -> None:
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    for r, name in enumerate(theta_names):
        ax.plot(curve.grid, curve.variances[:, r], "o-", label=f"d/d{name}")
        fit = curve.fits[r]
        ax.plot(
            curve.grid,
            curve.variances[:, r].mean() + fit.slope * (curve.grid - curve.grid.mean()),
            "--",
            alpha=0.6,
        )
    ax.set_xlabel("block start time n")
    ax.set_ylabel(f"variance over {curve.n_reps_used} replications")
    ax.set_title(f"{curve.estimator} estimator, N={curve.n_particles}, L={curve.block_len}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_rate_figure(curve: RateCurve, path) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.loglog(curve.n_grid, curve.rmse_zeta, "o-", label="derivative integral")
    ax.loglog(curve.n_grid, curve.rmse_eta, "s-", label="filter integral")
    anchor = curve.rmse_zeta[0] if curve.rmse_zeta[0] > 0 else 1.0
    ref = anchor * np.sqrt(curve.n_grid[0] / curve.n_grid)
    ax.loglog(curve.n_grid, ref, "k--", alpha=0.5, label="slope -1/2")
    ax.set_xlabel("particles N")
    ax.set_ylabel(f"RMSE at n={curve.horizon} ({curve.n_reps} replications)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_rml_figure(trace: RmlTrace, path, theta_star=None) -> None:
    d = trace.thetas.shape[1]
    fig, axes = plt.subplots(d, 1, figsize=(7.0, 2.2 * d), sharex=True)
    axes = np.atleast_1d(axes)
    steps = np.arange(1, trace.thetas.shape[0] + 1)
    for r in range(d):
        axes[r].plot(steps, trace.thetas[:, r], lw=0.7)
        if theta_star is not None:
            axes[r].axhline(theta_star[r], color="k", ls="--", lw=0.8)
        axes[r].set_ylabel(trace.theta_names[r])
    axes[-1].set_xlabel("observations consumed")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
