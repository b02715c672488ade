import numpy as np
import pytest

from tofspec.calibrate import CalibrationResult
from tofspec.instrument import EfficiencyCurve, InstrumentConfig


@pytest.fixture
def flat_config():
    """Perfect-detection channel: flat unit-acceptance efficiency, D=950."""
    eff = EfficiencyCurve.flat(825.0, 835.0, 1.0)
    return InstrumentConfig(
        gdd_d=950.0,
        lambda0=830.0,
        delta_tau=6000.0,
        window=(825.0, 835.0),
        efficiency=eff,
        jitter_fwhm=52.0,
    )


def ideal_calibration(cfg: InstrumentConfig) -> CalibrationResult:
    """Calibration that matches a simulation config exactly (ground truth)."""
    return CalibrationResult(
        gdd_d=cfg.gdd_d,
        intercept=0.0,
        delta_tau=cfg.delta_tau,
        lambda0=cfg.lambda0,
        efficiency=cfg.efficiency,
        fit_residual_rms=0.0,
        sigma_d=0.0,
        sigma_delta_tau=0.0,
    )


def gaussian_fit_fwhm(x: np.ndarray, y: np.ndarray) -> float:
    """Independent linewidth oracle: direct Gaussian least squares."""
    from scipy.optimize import curve_fit

    def gauss(t, amp, mu, sig):
        return amp * np.exp(-0.5 * ((t - mu) / sig) ** 2)

    total = y.sum()
    mu0 = float((x * y).sum() / total)
    sig0 = float(np.sqrt((y * (x - mu0) ** 2).sum() / total))
    popt, _ = curve_fit(gauss, x, y, p0=(y.max(), mu0, sig0), maxfev=10000)
    return abs(popt[2]) * 2.0 * np.sqrt(2.0 * np.log(2.0))


def convolved_bin_probabilities(density_fn, eta_fn, lam_edges, sigma_blur):
    """Quadrature oracle for detected-bin probabilities.

    Detected wavelengths follow density S(lam) * eta(lam); arrival smearing
    adds a Gaussian of width sigma_blur.  The probability of landing in bin
    [e_i, e_i+1] is the integral of S * eta * [Phi(hi) - Phi(lo)], evaluated
    on a fine quadrature grid, normalized over all bins.
    """
    from scipy.stats import norm

    lam_edges = np.asarray(lam_edges, dtype=float)
    lo, hi = lam_edges[0] - 8 * sigma_blur, lam_edges[-1] + 8 * sigma_blur
    grid = np.linspace(lo, hi, 40001)
    weight = np.asarray(density_fn(grid)) * np.asarray(eta_fn(grid))
    probs = np.empty(lam_edges.size - 1)
    for i in range(probs.size):
        if sigma_blur > 0:
            frac = norm.cdf((lam_edges[i + 1] - grid) / sigma_blur) - norm.cdf(
                (lam_edges[i] - grid) / sigma_blur
            )
        else:
            frac = ((grid >= lam_edges[i]) & (grid < lam_edges[i + 1])).astype(float)
        probs[i] = np.trapezoid(weight * frac, grid)
    return probs / probs.sum()
