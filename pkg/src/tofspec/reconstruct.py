"""Efficiency-corrected spectra and joint spectra from calibrated histograms.

Every time bin maps back to a wavelength through the calibrated linear
dispersion; counts are divided by the interpolated efficiency density and
then rescaled once, globally, so the corrected total over unmasked bins
equals the raw total (count conservation).  Bins where the efficiency falls
below 5% of its peak are masked, never extrapolated.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from .calibrate import CalibrationResult
from .errors import AnalysisError, CalibrationError, ConfigError, FitError
from .sources import FWHM_TO_SIGMA, GaussianLine
from .timetag import Histogram, JointHistogram, build_joint_histogram

# Efficiency mask threshold, as a fraction of the curve's peak.
ETA_MASK_FRACTION = 0.05


@dataclass(frozen=True)
class ReconstructedSpectrum:
    """Efficiency-corrected single-photon spectrum on wavelength bin centers."""

    lambda_bins: np.ndarray
    corrected: np.ndarray
    raw: np.ndarray
    stat_sigma: np.ndarray
    masked: np.ndarray
    bin_width_nm: float

    def unmasked_raw_total(self) -> int:
        return int(self.raw[~self.masked].sum())

    def unmasked_corrected_total(self) -> float:
        return float(self.corrected[~self.masked].sum())


@dataclass(frozen=True)
class JsiGrid:
    """Efficiency-corrected joint spectral intensity on a wavelength grid."""

    signal_bins: np.ndarray
    idler_bins: np.ndarray
    corrected: np.ndarray
    raw: np.ndarray
    masked: np.ndarray
    dropped: int = 0

    def unmasked_raw_total(self) -> int:
        return int(self.raw[~self.masked].sum())

    def unmasked_corrected_total(self) -> float:
        return float(self.corrected[~self.masked].sum())

    def marginal(self, axis: str):
        """(lambda_bins, corrected_counts) marginal along 'signal' or 'idler'."""
        if axis == "signal":
            return self.signal_bins, self.corrected.sum(axis=1)
        if axis == "idler":
            return self.idler_bins, self.corrected.sum(axis=0)
        raise ConfigError(f"axis must be 'signal' or 'idler', got {axis!r}")


def _correct_counts(raw: np.ndarray, eta: np.ndarray, eta_peak: float):
    """Shared masking + division + count-conserving rescale."""
    masked = eta < ETA_MASK_FRACTION * eta_peak
    if masked.all():
        raise CalibrationError(
            "calibration efficiency does not overlap the histogram wavelength range"
        )
    inv = np.zeros_like(raw, dtype=float)
    inv[~masked] = 1.0 / eta[~masked]
    corrected = raw * inv
    raw_total = float(raw[~masked].sum())
    corr_total = float(corrected[~masked].sum())
    scale = raw_total / corr_total if corr_total > 0 else 1.0
    corrected *= scale
    sigma = np.sqrt(raw) * inv * scale
    return corrected, sigma, masked


def reconstruct_spectrum(hist: Histogram, calib: CalibrationResult) -> ReconstructedSpectrum:
    """Apply the calibrated inverse map and efficiency correction to a histogram."""
    tau = hist.bin_centers()
    lam = np.asarray(calib.wavelength_at(tau), dtype=float)
    raw = hist.counts.astype(np.int64)
    order = np.argsort(lam)
    lam, raw = lam[order], raw[order]
    eta = calib.efficiency.interp(lam)
    corrected, sigma, masked = _correct_counts(raw.astype(float), eta, calib.efficiency.peak())
    return ReconstructedSpectrum(
        lambda_bins=lam,
        corrected=corrected,
        raw=raw,
        stat_sigma=sigma,
        masked=masked,
        bin_width_nm=hist.bin_width / abs(calib.gdd_d),
    )


def reconstruct_jsi(
    pairs,
    calib_a: CalibrationResult,
    calib_b: CalibrationResult,
    bin_widths: tuple[int, int],
    n_chunks: int = 1,
) -> JsiGrid:
    """Grid per-trigger delay pairs into an efficiency-corrected joint spectrum.

    The grid spans each channel's calibrated efficiency support; pairs
    falling outside are counted in ``dropped``.  The per-cell correction is
    the product of the two per-axis efficiencies, masked where either falls
    below 5% of its peak, with one global count-conserving rescale.
    """
    bw_a, bw_b = int(bin_widths[0]), int(bin_widths[1])
    joint = build_joint_histogram(
        np.asarray(pairs, dtype=np.int64),
        bin_width_a=bw_a,
        bin_width_b=bw_b,
        origin_a=_axis_origin(calib_a, bw_a),
        origin_b=_axis_origin(calib_b, bw_b),
        n_bins_a=_axis_bins(calib_a, bw_a),
        n_bins_b=_axis_bins(calib_b, bw_b),
        n_chunks=n_chunks,
    )
    return jsi_from_joint_histogram(joint, calib_a, calib_b)


def jsi_from_joint_histogram(
    joint: JointHistogram,
    calib_a: CalibrationResult,
    calib_b: CalibrationResult,
) -> JsiGrid:
    lam_a = np.asarray(calib_a.wavelength_at(joint.bin_centers_a()), dtype=float)
    lam_b = np.asarray(calib_b.wavelength_at(joint.bin_centers_b()), dtype=float)
    raw = joint.counts
    order_a, order_b = np.argsort(lam_a), np.argsort(lam_b)
    lam_a, lam_b = lam_a[order_a], lam_b[order_b]
    raw = raw[np.ix_(order_a, order_b)]
    eta = np.outer(calib_a.efficiency.interp(lam_a), calib_b.efficiency.interp(lam_b))
    peak = calib_a.efficiency.peak() * calib_b.efficiency.peak()
    corrected, _, masked = _correct_counts(raw.astype(float), eta, peak)
    return JsiGrid(
        signal_bins=lam_a,
        idler_bins=lam_b,
        corrected=corrected,
        raw=raw,
        masked=masked,
        dropped=joint.dropped,
    )


def _axis_origin(calib: CalibrationResult, bin_width: int) -> int:
    times = np.asarray(calib.time_at(calib.efficiency.grid[[0, -1]]))
    return int(math.floor(times.min() / bin_width) * bin_width)


def _axis_bins(calib: CalibrationResult, bin_width: int) -> int:
    times = np.asarray(calib.time_at(calib.efficiency.grid[[0, -1]]))
    origin = _axis_origin(calib, bin_width)
    return max(int(math.ceil((times.max() - origin) / bin_width)), 1)


@dataclass(frozen=True)
class FringeFit:
    """Fitted Gaussian envelope with sinusoidal spectral modulation."""

    period: float
    visibility: float
    phase: float
    envelope: GaussianLine
    goodness: float
    converged: bool = True
    anchor: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.visibility <= 1.0 + 1e-9):
            raise ConfigError(f"fitted visibility out of range: {self.visibility}")


def _fringe_model(lam, amp, mu, sig, vis, phase, period, anchor):
    gauss = amp * np.exp(-0.5 * ((lam - mu) / sig) ** 2)
    return gauss * (1.0 + vis * np.cos(2.0 * math.pi * (lam - anchor) / period + phase))


def _dominant_period(lam: np.ndarray, y: np.ndarray, envelope_fwhm: float) -> float:
    """Initial fringe period from the dominant high-frequency Fourier component."""
    step = float(np.mean(np.diff(lam)))
    amp = np.abs(np.fft.rfft(y - y.mean()))
    freqs = np.fft.rfftfreq(y.size, d=step)
    # Ignore frequencies slower than the envelope scale; they describe the
    # envelope itself, not the fringes.
    floor = 1.0 / max(envelope_fwhm, 4.0 * step)
    candidates = freqs > floor
    if not candidates.any():
        raise AnalysisError("no fringe frequency found above the envelope scale")
    k = np.flatnonzero(candidates)[np.argmax(amp[candidates])]
    return 1.0 / float(freqs[k])


def fit_fringes(spec: ReconstructedSpectrum, fixed_period: float | None = None) -> FringeFit:
    """Least-squares fit of Gaussian envelope x (1 + V cos(2 pi lam / period + phi)).

    With ``fixed_period`` supplied only the envelope, visibility and phase
    float; otherwise the period floats too, seeded from the spectrum's
    dominant Fourier component.  Non-convergence raises FitError carrying the
    best-so-far parameters flagged invalid.
    """
    keep = ~spec.masked
    lam = spec.lambda_bins[keep]
    y = spec.corrected[keep]
    if lam.size < 8:
        raise AnalysisError("too few unmasked bins for a fringe fit")
    sigma = spec.stat_sigma[keep]
    positive = sigma[sigma > 0]
    floor = float(positive.min()) if positive.size else 1.0
    sigma = np.maximum(sigma, floor)

    total = y.sum()
    mu0 = float((y * lam).sum() / total)
    sig0 = float(np.sqrt(max((y * (lam - mu0) ** 2).sum() / total, 1e-12)))
    amp0 = float(y.max())
    anchor = round(mu0)
    fwhm0 = sig0 / FWHM_TO_SIGMA
    period0 = fixed_period if fixed_period is not None else _dominant_period(lam, y, fwhm0)
    if fixed_period is not None and not (fixed_period > 0):
        raise ConfigError(f"fixed fringe period must be positive, got {fixed_period}")
    if lam.size < 4.0 * (lam[-1] - lam[0]) / period0:
        raise AnalysisError("fewer than 4 unmasked bins per fringe period")

    span = lam[-1] - lam[0]
    if fixed_period is None:

        def model(x, amp, mu, sig, vis, phase, period):
            return _fringe_model(x, amp, mu, sig, vis, phase, period, anchor)

        lower = [0.0, lam[0], 1e-6, 0.0, -2.0 * math.pi, 0.5 * period0]
        upper = [np.inf, lam[-1], span, 1.0, 2.0 * math.pi, 2.0 * period0]
        extra0 = [period0]
    else:

        def model(x, amp, mu, sig, vis, phase):
            return _fringe_model(x, amp, mu, sig, vis, phase, fixed_period, anchor)

        lower = [0.0, lam[0], 1e-6, 0.0, -2.0 * math.pi]
        upper = [np.inf, lam[-1], span, 1.0, 2.0 * math.pi]
        extra0 = []

    best = None
    best_cost = math.inf
    # The phase is periodic; several starts avoid the local minimum at V ~ 0
    # with the wrong phase.
    for phase0 in (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi):
        p0 = [amp0, mu0, sig0, 0.5, phase0] + extra0
        try:
            popt, _ = curve_fit(
                model,
                lam,
                y,
                p0=p0,
                sigma=sigma,
                absolute_sigma=True,
                bounds=(lower, upper),
                maxfev=20000,
            )
        except RuntimeError:
            continue
        cost = float(np.sum(((y - model(lam, *popt)) / sigma) ** 2))
        if cost < best_cost:
            best, best_cost = popt, cost

    n_params = 5 + len(extra0)
    if best is None:
        raise FitError(
            "fringe fit did not converge",
            best=FringeFit(
                period=period0,
                visibility=0.0,
                phase=0.0,
                envelope=GaussianLine(mu0, fwhm0),
                goodness=math.inf,
                converged=False,
                anchor=anchor,
            ),
        )
    amp, mu, sig, vis, phase = best[:5]
    period = float(best[5]) if fixed_period is None else float(fixed_period)
    dof = max(lam.size - n_params, 1)
    phase = float((phase + math.pi) % (2.0 * math.pi) - math.pi)
    return FringeFit(
        period=period,
        visibility=float(min(vis, 1.0)),
        phase=phase,
        envelope=GaussianLine(float(mu), float(sig / FWHM_TO_SIGMA)),
        goodness=best_cost / dof,
        converged=True,
        anchor=anchor,
    )


def fringe_contrast_factor(
    period_nm: float,
    resolution_fwhm_nm: float,
    bin_width_nm: float = 0.0,
) -> float:
    """Visibility attenuation of fringes at ``period_nm`` through the instrument.

    The Gaussian timing response multiplies fringe contrast by
    exp(-2 pi^2 sigma^2 / period^2) and finite histogram bins by
    sinc(bin_width / period); the returned factor converts a fitted
    visibility back to the source value.  This is a single-frequency
    contrast transfer evaluation, not a spectral deconvolution.
    """
    sig = resolution_fwhm_nm * FWHM_TO_SIGMA
    gauss = math.exp(-2.0 * math.pi**2 * sig**2 / period_nm**2)
    box = float(np.sinc(bin_width_nm / period_nm)) if bin_width_nm > 0 else 1.0
    return gauss * box


def fwhm_linear(x: np.ndarray, y: np.ndarray) -> float:
    """Full width at half maximum by linear interpolation of the crossings.

    Raises AnalysisError when the half-maximum level is crossed more or fewer
    than twice (multimodal or unbracketed peak); the error lists the crossing
    positions it found.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3:
        raise AnalysisError("need at least three points to measure a width")
    half = y.max() / 2.0
    d = y - half
    crossings = []
    for i in np.flatnonzero(np.diff(np.sign(d)) != 0):
        x0, x1, d0, d1 = x[i], x[i + 1], d[i], d[i + 1]
        crossings.append(float(x0) if d1 == d0 else float(x0 - d0 * (x1 - x0) / (d1 - d0)))
    if len(crossings) != 2:
        raise AnalysisError(
            f"spectrum is not unimodal at half maximum ({len(crossings)} crossings)",
            crossings=crossings,
        )
    return crossings[1] - crossings[0]


def measure_fwhm(spec: ReconstructedSpectrum) -> float:
    """FWHM (nm) of a unimodal reconstructed spectrum."""
    keep = ~spec.masked
    return fwhm_linear(spec.lambda_bins[keep], spec.corrected[keep])


# --- table export ------------------------------------------------------------


def _meta_lines(meta: dict) -> list[str]:
    return [f"# {k}={v}" for k, v in meta.items()]


def write_spectrum_table(path, spec: ReconstructedSpectrum, fmt="csv", meta=None) -> None:
    """Write (lambda_nm, raw, corrected, sigma, masked) rows as CSV or JSON."""
    meta = dict(meta or {})
    if fmt == "csv":
        lines = ["# tofspec spectrum table"] + _meta_lines(meta)
        lines.append("lambda_nm,raw,corrected,sigma,masked")
        for lam, raw, corr, sig, masked in zip(
            spec.lambda_bins, spec.raw, spec.corrected, spec.stat_sigma, spec.masked
        ):
            lines.append(f"{float(lam)!r},{int(raw)},{float(corr)!r},{float(sig)!r},{int(masked)}")
        payload = "\n".join(lines) + "\n"
    elif fmt == "json":
        payload = json.dumps(
            {
                "kind": "spectrum",
                "meta": meta,
                "lambda_nm": spec.lambda_bins.tolist(),
                "raw": spec.raw.tolist(),
                "corrected": spec.corrected.tolist(),
                "sigma": spec.stat_sigma.tolist(),
                "masked": spec.masked.astype(int).tolist(),
            },
            sort_keys=True,
            indent=1,
        )
    else:
        raise ConfigError(f"unknown table format {fmt!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(payload)


def write_jsi_table(path, grid: JsiGrid, fmt="csv", meta=None) -> None:
    """Write (lambda_s, lambda_i, raw, corrected) rows as CSV or JSON."""
    meta = dict(meta or {})
    if fmt == "csv":
        lines = ["# tofspec jsi table"] + _meta_lines(meta)
        lines.append("lambda_s_nm,lambda_i_nm,raw,corrected")
        for i, lam_s in enumerate(grid.signal_bins):
            for j, lam_i in enumerate(grid.idler_bins):
                lines.append(
                    f"{float(lam_s)!r},{float(lam_i)!r},"
                    f"{int(grid.raw[i, j])},{float(grid.corrected[i, j])!r}"
                )
        payload = "\n".join(lines) + "\n"
    elif fmt == "json":
        payload = json.dumps(
            {
                "kind": "jsi",
                "meta": meta,
                "lambda_s_nm": grid.signal_bins.tolist(),
                "lambda_i_nm": grid.idler_bins.tolist(),
                "raw": grid.raw.tolist(),
                "corrected": grid.corrected.tolist(),
                "masked": grid.masked.astype(int).tolist(),
            },
            sort_keys=True,
            indent=1,
        )
    else:
        raise ConfigError(f"unknown table format {fmt!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(payload)
