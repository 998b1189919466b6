"""Figures for the validation reports (written to files, never shown)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_vst_validation(records, path, std_bound: float = 0.03, bias_bound: float = 0.08) -> Path:
    chi = np.array([r.parameters["chi"] for r in records])
    added = np.array([r.measured["added_std"] for r in records])
    rel = np.array([r.measured["relative_residual_bias"] for r in records])
    exact = np.array([r.measured["exact_bias"] for r in records])
    resid = np.array([r.measured["residual_bias"] for r in records])
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.8))
    axes[0].semilogx(chi, exact, label="plain GAT bias")
    axes[0].semilogx(chi, resid, label="after bias pre-correction")
    axes[0].axhline(0.0, color="k", lw=0.5)
    axes[0].set(xlabel="signal (electrons)", ylabel="bias (GAT units)")
    axes[0].legend()
    axes[1].semilogx(chi, 100 * rel, marker=".")
    axes[1].axhline(100 * bias_bound, color="r", ls="--")
    axes[1].set(xlabel="signal (electrons)", ylabel="residual bias (% of plain bias)")
    axes[2].semilogx(chi, 100 * added, marker=".")
    axes[2].axhline(100 * std_bound, color="r", ls="--")
    axes[2].set(xlabel="signal (electrons)", ylabel="added std (% of unit noise)")
    return _save(fig, path)


def plot_estimation_boxplot(trials, path) -> Path:
    """Box plots of estimate / truth - 1 per sensor setting, coarse and fine side by side."""
    labels = sorted({t["label"] for t in trials}, key=lambda s: [t["label"] for t in trials].index(s))
    fig, axes = plt.subplots(1, 2, figsize=(12, 4), sharey=False)
    for ax, param in zip(axes, ("alpha", "sigma")):
        data, ticks = [], []
        for lab in labels:
            rows = [t for t in trials if t["label"] == lab]
            for stage in ("coarse", "fine"):
                data.append([r[f"{stage}_{param}_dev"] for r in rows])
                ticks.append(f"{lab}\n{stage}")
        ax.boxplot(data)
        ax.set_xticks(range(1, len(ticks) + 1), ticks, rotation=90, fontsize=7)
        ax.axhline(0.0, color="k", ls="--", lw=0.8)
        ax.set_title(f"{param} deviation")
    return _save(fig, path)


def plot_psnr_pairs(rows, path) -> Path:
    blind = np.array([r["psnr_blind"] for r in rows])
    oracle = np.array([r["psnr_oracle"] for r in rows])
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(oracle, blind, s=12)
    lo, hi = float(min(blind.min(), oracle.min())), float(max(blind.max(), oracle.max()))
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set(xlabel="PSNR with true parameters (dB)", ylabel="PSNR blind (dB)")
    return _save(fig, path)


def plot_samples(samples, params, path, title: str = "") -> Path:
    """Scatter of (mean, variance) samples with the fitted line."""
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(samples.mean, samples.variance, s=6, alpha=0.6)
    x = np.linspace(0.0, max(float(np.max(samples.mean, initial=0.0)), 1e-6), 50)
    ax.plot(x, params.alpha * x + params.sigma ** 2, "r")
    ax.set(xlabel="local mean", ylabel="local variance", title=title)
    return _save(fig, path)


def plot_lut(lut, path) -> Path:
    """Bias surface over log signal and log read-noise."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    im = ax.pcolormesh(lut.log_chi, lut.log_sigma, lut.values, shading="auto", cmap="viridis")
    fig.colorbar(im, ax=ax, label="bias (GAT units)")
    ax.set(xlabel="log10 signal (electrons)", ylabel="log10 read noise (electrons)")
    return _save(fig, path)
