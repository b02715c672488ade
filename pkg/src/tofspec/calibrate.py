"""Channel calibration: dispersion slope, time offset, and efficiency curve.

Three independent estimates are combined into a CalibrationResult that is
sufficient to invert the wavelength-to-time map:

  * the dispersion D from a weighted polynomial fit of measured delay vs
    wavelength (linear by default, quadratic as a diagnostic),
  * the time offset delta_tau from the peak of a narrowband reference
    histogram, whose known center wavelength anchors the map,
  * the efficiency density eta(lam) from the ratio of detected counts to an
    independently measured input spectrum, normalized so its integral equals
    the total heralding efficiency H.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from .errors import CalibrationError, ConfigError, FormatError
from .instrument import EfficiencyCurve
from .sources import Tabulated
from .timetag import Histogram

CALIBRATION_FORMAT_VERSION = 1

# Peak-location fit window: at least +-3 bins around the argmax, widened to
# the contiguous half-maximum core when the calibration peak is broader than
# the binning.  A bounded window keeps the estimate insensitive to structure
# elsewhere in the histogram; the widening keeps sub-bin accuracy for
# calibration lines wider than the detector response.
_PEAK_HALF_WINDOW = 3

# Reference-spectrum bins below 1% of its peak are excluded from the
# efficiency ratio to avoid division blow-up at the window edges.
_REFERENCE_FLOOR = 0.01


@dataclass(frozen=True)
class DelayPoint:
    """One measured (wavelength, delay) calibration point, optional 1-sigma error."""

    lambda_nm: float
    delay_ps: float
    sigma_ps: float | None = None

    def __post_init__(self):
        if self.sigma_ps is not None and not (self.sigma_ps > 0):
            raise ConfigError(f"delay uncertainty must be positive, got {self.sigma_ps}")


@dataclass(frozen=True)
class GddFit:
    """Result of the delay-vs-wavelength fit."""

    gdd_d: float
    intercept: float
    residual_rms: float
    sigma_d: float
    lambda0: float
    quadratic: float | None = None
    quadratic_sigma: float | None = None


def fit_gdd(points, degree: int = 1, lambda0: float | None = None) -> GddFit:
    """Weighted least-squares polynomial fit of delay against (lam - lambda0).

    The linear coefficient is the dispersion in ps/nm.  Degree 2 additionally
    reports the quadratic term so its negligibility can be checked.  Weights
    are 1/sigma**2 when every point carries an uncertainty, unity otherwise.
    """
    points = list(points)
    if degree not in (1, 2):
        raise ConfigError(f"fit degree must be 1 or 2, got {degree}")
    if len(points) < degree + 1:
        raise ConfigError(f"need at least {degree + 1} points for a degree-{degree} fit")
    lam = np.array([p.lambda_nm for p in points], dtype=float)
    delay = np.array([p.delay_ps for p in points], dtype=float)
    if lambda0 is None:
        lambda0 = float(lam.mean())
    x = lam - lambda0
    if np.unique(x).size < degree + 1:
        raise CalibrationError("delay points are degenerate: not enough distinct wavelengths")

    sigmas = [p.sigma_ps for p in points]
    if all(s is not None for s in sigmas):
        w = 1.0 / np.asarray(sigmas, dtype=float)
    else:
        w = np.ones_like(x)

    design = np.vander(x, degree + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(design * w[:, None], delay * w, rcond=None)
    residuals = delay - design @ coef
    residual_rms = float(np.sqrt(np.mean(residuals**2)))

    # Covariance of the weighted LSQ estimate; scaled by the residual
    # variance when no per-point uncertainties were supplied.
    normal = (design * w[:, None]).T @ (design * w[:, None])
    cov = np.linalg.inv(normal)
    dof = len(points) - (degree + 1)
    if not all(s is not None for s in sigmas):
        scale = float((residuals * w) @ (residuals * w) / dof) if dof > 0 else 0.0
        cov = cov * scale
    sigma_d = float(np.sqrt(max(cov[1, 1], 0.0)))

    quad = float(coef[2]) if degree == 2 else None
    quad_sigma = float(np.sqrt(max(cov[2, 2], 0.0))) if degree == 2 else None
    return GddFit(
        gdd_d=float(coef[1]),
        intercept=float(coef[0]),
        residual_rms=residual_rms,
        sigma_d=sigma_d,
        lambda0=lambda0,
        quadratic=quad,
        quadratic_sigma=quad_sigma,
    )


def _gauss(t, amp, mu, sig):
    return amp * np.exp(-0.5 * ((t - mu) / sig) ** 2)


def find_offset(
    hist: Histogram,
    reference_lambda: float,
    gdd_d: float,
    lambda0: float,
) -> tuple[float, float]:
    """Time offset delta_tau from a narrowband calibration histogram.

    Locates the histogram peak with a Gaussian least-squares fit over the
    bins within +-3 bins of the argmax (centroid fallback), then subtracts
    the dispersion delay of the known reference wavelength:
    delta_tau = peak_time - gdd_d * (reference_lambda - lambda0).
    """
    counts = hist.counts.astype(float)
    if counts.sum() <= 0:
        raise CalibrationError("no calibration peak: histogram is empty")
    if counts.max() <= 2.0 * np.median(counts):
        raise CalibrationError("no calibration peak: histogram has no dominant peak")

    centers = hist.bin_centers()
    i0 = int(np.argmax(counts))
    half = counts[i0] / 2.0
    lo = i0
    while lo > 0 and counts[lo - 1] >= half:
        lo -= 1
    hi = i0
    while hi < counts.size - 1 and counts[hi + 1] >= half:
        hi += 1
    lo = min(lo, max(i0 - _PEAK_HALF_WINDOW, 0))
    hi = max(hi, min(i0 + _PEAK_HALF_WINDOW, counts.size - 1))
    t = centers[lo : hi + 1]
    c = counts[lo : hi + 1]

    peak_time, sigma = _fit_peak(t, c, hist.bin_width)
    return float(peak_time - gdd_d * (reference_lambda - lambda0)), float(sigma)


def _fit_peak(t, c, bin_width):
    """Sub-bin peak position via Gaussian fit; centroid of the window on failure."""
    total = c.sum()
    centroid = float((c * t).sum() / total)
    spread = float(np.sqrt(max((c * (t - centroid) ** 2).sum() / total, 0.0)))
    if np.count_nonzero(c) >= 3:
        p0 = (float(c.max()), centroid, max(spread, bin_width / 2.0))
        try:
            popt, pcov = curve_fit(_gauss, t, c, p0=p0, maxfev=2000)
            mu_err = math.sqrt(pcov[1][1]) if np.isfinite(pcov[1][1]) else bin_width / 2.0
            if t.min() - bin_width <= popt[1] <= t.max() + bin_width:
                return float(popt[1]), mu_err
        except RuntimeError:
            pass
    # Centroid fallback: statistical error of the mean, floored at half a bin
    # width of systematic uncertainty.
    err = spread / math.sqrt(total) if total > 0 else bin_width / 2.0
    return centroid, max(err, bin_width / 4.0)


def estimate_efficiency(
    lambda_grid,
    counts,
    reference: Tabulated,
    total_h: float,
) -> EfficiencyCurve:
    """Efficiency density from detected counts against a known input spectrum.

    Computes the pointwise ratio counts / reference on the counts grid, masks
    points where the reference falls below 1% of its peak, and rescales the
    rest so the integral over the surviving grid equals ``total_h``.
    """
    grid = np.asarray(lambda_grid, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if grid.shape != counts.shape or grid.ndim != 1:
        raise ConfigError("efficiency inputs need matching 1D grid and counts")
    ref = np.asarray(reference.eval(grid), dtype=float)
    keep = ref >= _REFERENCE_FLOOR * ref.max() if ref.max() > 0 else np.zeros_like(ref, bool)
    if np.count_nonzero(keep) < 2:
        raise CalibrationError(
            "reference spectrum and detected counts have disjoint wavelength support"
        )
    ratio = counts[keep] / ref[keep]
    return EfficiencyCurve.from_shape(grid[keep], ratio, total_h)


@dataclass(frozen=True)
class CalibrationResult:
    """Everything needed to invert the wavelength-to-time map of one channel."""

    gdd_d: float
    intercept: float
    delta_tau: float
    lambda0: float
    efficiency: EfficiencyCurve
    fit_residual_rms: float
    sigma_d: float
    sigma_delta_tau: float
    file_sha256: str | None = None

    def time_at(self, lam):
        return self.gdd_d * (np.asarray(lam, dtype=float) - self.lambda0) + self.delta_tau

    def wavelength_at(self, tau):
        return self.lambda0 + (np.asarray(tau, dtype=float) - self.delta_tau) / self.gdd_d


def save_calibration(path, result: CalibrationResult) -> None:
    """Write a calibration to the versioned key=value text format."""
    lines = [
        "# tofspec calibration file",
        f"format_version={CALIBRATION_FORMAT_VERSION}",
        f"gdd_d_ps_per_nm={float(result.gdd_d)!r}",
        f"intercept_ps={float(result.intercept)!r}",
        f"delta_tau_ps={float(result.delta_tau)!r}",
        f"lambda0_nm={float(result.lambda0)!r}",
        f"fit_residual_rms_ps={float(result.fit_residual_rms)!r}",
        f"sigma_d_ps_per_nm={float(result.sigma_d)!r}",
        f"sigma_delta_tau_ps={float(result.sigma_delta_tau)!r}",
        f"total_h={float(result.efficiency.total_h)!r}",
        "[efficiency]",
        "# lambda_nm eta_per_nm",
    ]
    for lam, eta in zip(result.efficiency.grid, result.efficiency.eta):
        lines.append(f"{float(lam)!r} {float(eta)!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_calibration(path) -> CalibrationResult:
    """Read a calibration file; records the file's SHA-256 for provenance."""
    with open(path, "rb") as fh:
        raw = fh.read()
    digest = hashlib.sha256(raw).hexdigest()
    keys: dict[str, float] = {}
    grid, eta = [], []
    section = "header"
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if text == "[efficiency]":
            section = "efficiency"
            continue
        if section == "header":
            if "=" not in text:
                raise FormatError(f"{path}:{lineno}: expected key=value, got {text!r}")
            key, value = text.split("=", 1)
            keys[key.strip()] = float(value)
        else:
            parts = text.split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected two columns, got {text!r}")
            grid.append(float(parts[0]))
            eta.append(float(parts[1]))
    if int(keys.get("format_version", -1)) != CALIBRATION_FORMAT_VERSION:
        raise FormatError(
            f"{path}: unsupported calibration format version {keys.get('format_version')}"
        )
    required = [
        "gdd_d_ps_per_nm",
        "intercept_ps",
        "delta_tau_ps",
        "lambda0_nm",
        "fit_residual_rms_ps",
        "sigma_d_ps_per_nm",
        "sigma_delta_tau_ps",
        "total_h",
    ]
    missing = [k for k in required if k not in keys]
    if missing:
        raise FormatError(f"{path}: missing calibration keys {missing}")
    if len(grid) < 2:
        raise FormatError(f"{path}: efficiency table needs at least two rows")
    efficiency = EfficiencyCurve(
        grid=np.asarray(grid), eta=np.asarray(eta), total_h=keys["total_h"]
    )
    return CalibrationResult(
        gdd_d=keys["gdd_d_ps_per_nm"],
        intercept=keys["intercept_ps"],
        delta_tau=keys["delta_tau_ps"],
        lambda0=keys["lambda0_nm"],
        efficiency=efficiency,
        fit_residual_rms=keys["fit_residual_rms_ps"],
        sigma_d=keys["sigma_d_ps_per_nm"],
        sigma_delta_tau=keys["sigma_delta_tau_ps"],
        file_sha256=digest,
    )


def load_delay_points(path) -> list[DelayPoint]:
    """Read delay points from CSV: lambda_nm,delay_ps[,sigma_ps]; '#' comments ok."""
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = [p.strip() for p in text.replace(",", " ").split()]
            try:
                values = [float(p) for p in parts]
            except ValueError:
                if not points:
                    continue  # header line
                raise FormatError(f"{path}:{lineno}: cannot parse delay row {text!r}")
            if len(values) == 2:
                points.append(DelayPoint(values[0], values[1]))
            elif len(values) >= 3:
                points.append(DelayPoint(values[0], values[1], values[2]))
            else:
                raise FormatError(f"{path}:{lineno}: expected 2 or 3 columns, got {text!r}")
    if not points:
        raise FormatError(f"{path}: no delay points found")
    return points
