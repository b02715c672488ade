"""Parametric spectral sources: single lines, two-pulse interference, photon pairs.

All spectra are intensity densities per nanometre of wavelength, and every 1D
source integrates to one over its support.  Sampling goes through inverse-CDF
lookup on a 1 pm tabulation of the density, fine enough that the sampling
granularity is invisible next to any realistic instrument resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import ConfigError, FormatError

C_NM_PER_PS = 299_792.458
"""Speed of light in nm/ps."""

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))

# Inverse-CDF tabulation step (nm).  1 pm is ~50x finer than the best
# achievable spectral resolution, so draws are effectively continuous.
SAMPLING_STEP_NM = 1e-3

# Tabulated support half-width for Gaussian envelopes, in units of FWHM.
_SUPPORT_FWHM = 5.0


def fringe_period(delay_t: float, center: float) -> float:
    """Spectral fringe period (nm) of a two-pulse state with group delay ``delay_t``.

    A pair of pulses separated by ``delay_t`` picoseconds interferes with a
    wavelength-domain modulation period of center**2 / (c * delay_t).
    """
    if not (delay_t > 0):
        raise ConfigError(f"two-pulse delay must be positive, got {delay_t} ps")
    return center * center / (C_NM_PER_PS * delay_t)


@dataclass(frozen=True)
class GaussianLine:
    """Normalized Gaussian spectral line, parameterized by center and FWHM in nm."""

    center: float
    fwhm: float

    def __post_init__(self):
        if not (math.isfinite(self.center) and self.center > 0):
            raise ConfigError(f"line center must be finite and positive, got {self.center}")
        if not (math.isfinite(self.fwhm) and self.fwhm > 0):
            raise ConfigError(f"line FWHM must be finite and positive, got {self.fwhm}")

    @property
    def sigma(self) -> float:
        return self.fwhm * FWHM_TO_SIGMA

    def density(self, lam):
        lam = np.asarray(lam, dtype=float)
        sig = self.sigma
        out = np.exp(-0.5 * ((lam - self.center) / sig) ** 2) / (sig * math.sqrt(2.0 * math.pi))
        return float(out) if out.ndim == 0 else out

    def support(self) -> tuple[float, float]:
        half = _SUPPORT_FWHM * self.fwhm
        return self.center - half, self.center + half


@dataclass(frozen=True)
class FringeParams:
    """Descriptive fringe parameters of a two-pulse spectrum."""

    period: float
    visibility: float
    phase: float
    envelope_center: float
    envelope_fwhm: float

    def __post_init__(self):
        if not (self.period > 0):
            raise ConfigError(f"fringe period must be positive, got {self.period}")
        if not (0.0 <= self.visibility <= 1.0):
            raise ConfigError(f"visibility must lie in [0, 1], got {self.visibility}")


@dataclass(frozen=True)
class DoublePulse:
    """Single photon in a two-pulse mode: Gaussian envelope with spectral fringes.

    The density is envelope(lam) * (1 + V*cos(2*pi*(lam - center)/period + phi)),
    renormalized to unit integral, with period = center**2 / (c * delay_t).
    """

    envelope: GaussianLine
    delay_t: float
    visibility: float
    phase: float = 0.0

    def __post_init__(self):
        if not (self.delay_t > 0):
            raise ConfigError(f"two-pulse delay must be positive, got {self.delay_t} ps")
        if not (0.0 <= self.visibility <= 1.0):
            raise ConfigError(f"visibility must lie in [0, 1], got {self.visibility}")

    @property
    def period(self) -> float:
        return fringe_period(self.delay_t, self.envelope.center)

    def fringe_params(self) -> FringeParams:
        return FringeParams(
            period=self.period,
            visibility=self.visibility,
            phase=self.phase,
            envelope_center=self.envelope.center,
            envelope_fwhm=self.envelope.fwhm,
        )

    def _modulation(self, lam):
        arg = 2.0 * math.pi * (lam - self.envelope.center) / self.period + self.phase
        return 1.0 + self.visibility * np.cos(arg)

    def _norm(self) -> float:
        cached = getattr(self, "_norm_cache", None)
        if cached is None:
            grid = _support_grid(self)
            cached = float(np.trapezoid(self.envelope.density(grid) * self._modulation(grid), grid))
            object.__setattr__(self, "_norm_cache", cached)
        return cached

    def density(self, lam):
        lam = np.asarray(lam, dtype=float)
        out = self.envelope.density(lam) * self._modulation(lam) / self._norm()
        return float(out) if np.ndim(out) == 0 else out

    def support(self) -> tuple[float, float]:
        return self.envelope.support()


@dataclass(frozen=True)
class Tabulated:
    """Spectral density given on an explicit wavelength grid, zero outside it.

    ``density`` values are linearly interpolated and renormalized to unit
    integral; the raw values therefore only need a consistent relative scale.
    """

    grid: np.ndarray
    density: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        dens = np.asarray(self.density, dtype=float)
        if grid.ndim != 1 or grid.size < 2:
            raise ConfigError("tabulated source needs at least two grid points")
        if grid.shape != dens.shape:
            raise ConfigError("grid and density lengths differ")
        if not np.all(np.diff(grid) > 0):
            raise ConfigError("tabulated wavelength grid must be strictly increasing")
        if not np.all(np.isfinite(grid)) or not np.all(np.isfinite(dens)):
            raise ConfigError("tabulated source contains non-finite values")
        if np.any(dens < 0):
            raise ConfigError("tabulated density must be nonnegative")
        norm = float(np.trapezoid(dens, grid))
        if norm <= 0:
            raise ConfigError("tabulated density has zero total mass")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "density", dens)
        object.__setattr__(self, "_norm_cache", norm)

    def eval(self, lam):
        lam = np.asarray(lam, dtype=float)
        out = np.interp(lam, self.grid, self.density, left=0.0, right=0.0) / self._norm_cache
        return float(out) if out.ndim == 0 else out

    def support(self) -> tuple[float, float]:
        return float(self.grid[0]), float(self.grid[-1])


@dataclass(frozen=True)
class PairGaussian:
    """Photon-pair joint spectrum: correlated bivariate Gaussian in (signal, idler)."""

    signal: GaussianLine
    idler: GaussianLine
    correlation_rho: float = 0.0

    def __post_init__(self):
        if not abs(self.correlation_rho) < 1.0:
            raise ConfigError(
                f"pair correlation must satisfy |rho| < 1, got {self.correlation_rho}"
            )

    def density(self, lam_s, lam_i):
        zs = (np.asarray(lam_s, dtype=float) - self.signal.center) / self.signal.sigma
        zi = (np.asarray(lam_i, dtype=float) - self.idler.center) / self.idler.sigma
        rho = self.correlation_rho
        quad = (zs * zs - 2.0 * rho * zs * zi + zi * zi) / (1.0 - rho * rho)
        norm = 2.0 * math.pi * self.signal.sigma * self.idler.sigma * math.sqrt(1.0 - rho * rho)
        out = np.exp(-0.5 * quad) / norm
        return float(out) if np.ndim(out) == 0 else out


SpectralSource = GaussianLine | DoublePulse | Tabulated | PairGaussian
Source1D = GaussianLine | DoublePulse | Tabulated


def eval_density(source, lam):
    """Spectral density of a 1D source at ``lam`` (per nm); zero out of support."""
    if isinstance(source, Tabulated):
        return source.eval(lam)
    if isinstance(source, (GaussianLine, DoublePulse)):
        return source.density(lam)
    raise ConfigError(f"eval_density needs a 1D source, got {type(source).__name__}")


def _support_grid(source) -> np.ndarray:
    lo, hi = source.support()
    n = max(int(round((hi - lo) / SAMPLING_STEP_NM)) + 1, 9)
    return np.linspace(lo, hi, n)


def _sampling_table(source):
    cached = getattr(source, "_cdf_cache", None)
    if cached is None:
        grid = _support_grid(source)
        dens = eval_density(source, grid)
        cdf = cumulative_trapezoid(dens, grid, initial=0.0)
        total = cdf[-1]
        if total <= 0:
            raise ConfigError("source density has zero total mass on its support")
        cdf /= total
        cached = (grid, cdf)
        object.__setattr__(source, "_cdf_cache", cached)
    return cached


def sample_wavelength(source, rng: np.random.Generator, size=None):
    """Draw wavelengths from a 1D source by inverse-CDF lookup.

    Parameters
    ----------
    source : GaussianLine | DoublePulse | Tabulated
        1D spectral model to sample.
    rng : numpy.random.Generator
        Explicit generator; draws are deterministic given its state.
    size : int, optional
        Number of draws; None returns a scalar.
    """
    if isinstance(source, PairGaussian):
        raise ConfigError("sample_wavelength needs a 1D source; use sample_pair for pairs")
    grid, cdf = _sampling_table(source)
    u = rng.random(size)
    lam = np.interp(u, cdf, grid)
    return float(lam) if size is None else lam


def sample_pair(source: PairGaussian, rng: np.random.Generator, size=None):
    """Draw (signal, idler) wavelength pairs from a PairGaussian source."""
    if not isinstance(source, PairGaussian):
        raise ConfigError(f"sample_pair needs a PairGaussian source, got {type(source).__name__}")
    n = 1 if size is None else int(size)
    z = rng.standard_normal((n, 2))
    rho = source.correlation_rho
    lam_s = source.signal.center + source.signal.sigma * z[:, 0]
    lam_i = source.idler.center + source.idler.sigma * (
        rho * z[:, 0] + math.sqrt(1.0 - rho * rho) * z[:, 1]
    )
    if size is None:
        return float(lam_s[0]), float(lam_i[0])
    return lam_s, lam_i


def load_tabulated(path) -> Tabulated:
    """Load a tabulated source from a two-column text file (wavelength_nm, density).

    Comma or whitespace separated; an optional single header line and ``#``
    comments are skipped.  Decimal separators are locale-independent periods.
    """
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.replace(",", " ").split()
            try:
                values = [float(p) for p in parts]
            except ValueError:
                if not rows:
                    continue  # header line
                raise FormatError(f"{path}:{lineno + 1}: cannot parse spectrum row {text!r}")
            if len(values) < 2:
                raise FormatError(f"{path}:{lineno + 1}: expected two columns, got {text!r}")
            rows.append(values[:2])
    if len(rows) < 2:
        raise ConfigError(f"{path}: need at least two data rows for a tabulated source")
    data = np.asarray(rows, dtype=float)
    return Tabulated(grid=data[:, 0], density=data[:, 1])
