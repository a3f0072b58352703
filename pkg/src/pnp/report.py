"""Figure rendering for the experiment report.

Every figure is written next to its CSV counterpart so `pnp run`'s
output directory is self-contained: the delimited tables for downstream
tooling, the PNGs for a quick look.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_COLORS = {"nominal": "tab:gray", "vanilla_gp": "tab:orange", "gpdphs": "tab:blue"}
_LABELS = {"nominal": "nominal (linear AR)", "vanilla_gp": "vanilla GP",
           "gpdphs": "GP-dPHS"}


def render_mse_over_time(report, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for method, mse in report.mse_over_time.items():
        ax.semilogy(report.test_times, mse, label=_LABELS.get(method, method),
                    color=_COLORS.get(method))
    ax.set_xlabel("time [s]")
    ax.set_ylabel("normalized MSE")
    ax.set_title("Forecast error over the held-out window")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_scores(report, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    idx = np.arange(report.scores.size)
    flags = report.scores > report.threshold_C
    ax.plot(idx[~flags], report.scores[~flags], ".", color="tab:green",
            label="window score (ID)")
    ax.plot(idx[flags], report.scores[flags], ".", color="tab:red",
            label="window score (OOD)")
    ax.axhline(report.threshold_C, color="k", linestyle="--",
               label="conformal threshold C")
    ax.set_xlabel("window index")
    ax.set_ylabel("nonconformity score")
    ax.set_title(f"Gate verdict: {report.verdict} "
                 f"({report.flagged_fraction:.0%} windows flagged)")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_prediction_surface(report, truth_test, path: Path) -> None:
    methods = [m for m in ("gpdphs", "vanilla_gp", "nominal")
               if m in report.predictions]
    n_panels = 1 + len(methods)
    fig, axes = plt.subplots(1, n_panels, figsize=(3.4 * n_panels, 3.6),
                             sharey=True)
    axes = np.atleast_1d(axes)
    extent = (float(truth_test.grid.z_min), float(truth_test.grid.z_max),
              float(report.test_times[0]), float(report.test_times[-1]))
    vmax = float(np.abs(report.truth_test).max())
    if vmax == 0:
        vmax = 1.0
    im = axes[0].imshow(report.truth_test, origin="lower", aspect="auto",
                        extent=extent, cmap="RdBu_r", vmin=-vmax, vmax=vmax)
    axes[0].set_title("ground truth")
    axes[0].set_xlabel("z")
    axes[0].set_ylabel("time [s]")
    for ax, m in zip(axes[1:], methods):
        ax.imshow(report.predictions[m], origin="lower", aspect="auto",
                  extent=extent, cmap="RdBu_r", vmin=-vmax, vmax=vmax)
        ax.set_title(_LABELS.get(m, m))
        ax.set_xlabel("z")
    fig.colorbar(im, ax=list(axes), shrink=0.85, label="deflection")
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_all(report, truth_test, out_dir: Path) -> None:
    render_mse_over_time(report, out_dir / "mse_over_time.png")
    render_scores(report, out_dir / "scores.png")
    render_prediction_surface(report, truth_test, out_dir / "prediction_surface.png")
