"""Matplotlib rendering of benchmark reports: one trend figure per metric
plus a conditioning figure, written next to the CSV/JSON tables."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .bench import METRIC_NAMES, BenchReport

_AXIS_LABEL = {
    "exposure": "exposure (ms)",
    "overlap_delta": "spectral shift (nm)",
    "band_count_same_snr": "bands (same per-band SNR)",
    "band_count_same_budget": "bands (same photon budget)",
}

_METRIC_LABEL = {
    "psnr_ri": "range-invariant PSNR (dB)",
    "ms_ssim_ri": "range-invariant MS-SSIM",
    "pearson": "Pearson correlation",
    "snr": "SNR of unmixed channels",
}


def _finite(series):
    return [v if np.isfinite(v) else np.nan for v in series]


def render_report(report: BenchReport, out_dir) -> list[str]:
    """Render metric-vs-condition curves (mean +- std over replicates) for
    every solver, plus the condition-number curve when it is finite."""
    agg = report.aggregate()
    values = [c.value for c in report.conditions]
    axis = report.spec.axis
    xlabel = _AXIS_LABEL.get(axis, axis)
    written = []

    for metric in METRIC_NAMES:
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for solver in report.spec.solvers:
            means = [agg[(v, solver)]["mean"][metric][0] for v in values]
            stds = [agg[(v, solver)]["mean"][metric][1] for v in values]
            ax.errorbar(values, _finite(means), yerr=_finite(stds), marker="o",
                        capsize=3, label=solver)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(_METRIC_LABEL[metric])
        ax.set_title(f"{report.spec.dataset}: {axis}")
        if axis == "exposure" or max(values) / max(min(values), 1e-12) > 12:
            ax.set_xscale("log")
            ax.set_xticks(values)
            ax.get_xaxis().set_major_formatter(matplotlib.ticker.ScalarFormatter())
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, f"fig_{axis}_{metric}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    kappas = [c.kappa for c in report.conditions]
    if all(np.isfinite(k) for k in kappas):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        ax.plot(values, kappas, marker="s", color="tab:red")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("condition number of mixing matrix")
        ax.set_yscale("log")
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        path = os.path.join(out_dir, f"fig_{axis}_kappa.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
