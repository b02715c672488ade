"""Render reconstructed spectra, joint spectra and raw histograms to image files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_spectrum(spec, path, fringe_fit=None, title=None) -> None:
    """Corrected spectrum with statistical error bars; optional fringe-fit overlay."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    keep = ~spec.masked
    ax.errorbar(
        spec.lambda_bins[keep],
        spec.corrected[keep],
        yerr=spec.stat_sigma[keep],
        fmt=".",
        ms=3,
        lw=0.8,
        color="tab:blue",
        ecolor="0.7",
        label="corrected counts",
    )
    if spec.masked.any():
        ax.plot(
            spec.lambda_bins[spec.masked],
            spec.raw[spec.masked],
            "x",
            ms=3,
            color="0.6",
            label="masked (raw)",
        )
    if fringe_fit is not None:
        from .reconstruct import _fringe_model

        lam = np.linspace(spec.lambda_bins[keep].min(), spec.lambda_bins[keep].max(), 2000)
        env = fringe_fit.envelope
        amp = spec.corrected[keep].max() / (1.0 + fringe_fit.visibility)
        model = _fringe_model(
            lam,
            amp,
            env.center,
            env.sigma,
            fringe_fit.visibility,
            fringe_fit.phase,
            fringe_fit.period,
            fringe_fit.anchor,
        )
        ax.plot(lam, model, "-", lw=1.0, color="tab:red", label="fringe fit")
    ax.set_xlabel("wavelength (nm)")
    ax.set_ylabel("counts per bin")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_jsi(grid, path, title=None) -> None:
    """Joint spectral intensity heat map (corrected counts per bin)."""
    fig, ax = plt.subplots(figsize=(4.8, 4.0))
    shown = np.where(grid.masked, np.nan, grid.corrected)
    mesh = ax.pcolormesh(
        grid.idler_bins,
        grid.signal_bins,
        shown,
        shading="nearest",
        cmap="viridis",
    )
    fig.colorbar(mesh, ax=ax, label="coincidences per bin")
    ax.set_xlabel("idler wavelength (nm)")
    ax.set_ylabel("signal wavelength (nm)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_histogram(hist, path, title=None) -> None:
    """Raw start-stop histogram in the time domain."""
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    ax.step(hist.bin_centers() / 1000.0, hist.counts, where="mid", lw=0.9)
    ax.set_xlabel("delay (ns)")
    ax.set_ylabel("counts per bin")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
