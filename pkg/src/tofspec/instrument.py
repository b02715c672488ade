"""Single spectrometer channel: dispersive wavelength-to-time mapping and detection.

One channel is a chirped-grating reflector feeding a timing detector.  The
grating imparts a nearly constant group-delay dispersion D (ps/nm) over its
reflection window, so a photon's wavelength maps linearly onto its arrival
time; detector jitter then sets the spectral resolution via dl = dt / D.

The Monte Carlo here turns sampled photon wavelengths into clock-referenced
integer-picosecond tag streams: channel 0 carries the experiment clock,
channel 1 the dispersed signal detector, channel 2 the herald (or the idler
detector in two-channel runs).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from importlib import resources

import numpy as np

from . import timetag
from .errors import ConfigError
from .sources import FWHM_TO_SIGMA, PairGaussian, sample_pair, sample_wavelength

# Cycles per vectorized simulation chunk.  Fixed (not configurable) so that a
# given seed always yields a bit-identical stream.
_CHUNK_CYCLES = 1 << 16

# Fixed width of the optional splice back-reflection bump on the efficiency
# curve; the feature is narrower than the fast-detector resolution.
_SPLICE_FWHM_NM = 0.1


@dataclass(frozen=True)
class EfficiencyCurve:
    """Wavelength-dependent detection efficiency of one channel.

    ``eta`` is a density per nm: its integral over ``grid`` equals
    ``total_h``, the overall heralded detection probability for a flat
    spectrum filling the window.  The per-photon acceptance probability at a
    wavelength is eta(lam) * window_width, so a flat curve with total_h = H
    accepts every in-window photon with probability H.
    """

    grid: np.ndarray
    eta: np.ndarray
    total_h: float

    def __post_init__(self):
        grid = np.ascontiguousarray(self.grid, dtype=float)
        eta = np.ascontiguousarray(self.eta, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or grid.shape != eta.shape:
            raise ConfigError("efficiency curve needs matching 1D grid and eta arrays")
        if not np.all(np.diff(grid) > 0):
            raise ConfigError("efficiency grid must be strictly increasing")
        if np.any(eta < 0) or not np.all(np.isfinite(eta)):
            raise ConfigError("efficiency values must be finite and nonnegative")
        if not (0.0 <= self.total_h <= 1.0):
            raise ConfigError(f"total heralding efficiency must lie in [0, 1], got {self.total_h}")
        integral = float(np.trapezoid(eta, grid))
        if abs(integral - self.total_h) > 1e-6:
            raise ConfigError(
                f"efficiency integral {integral:.9g} does not match total_h {self.total_h:.9g}"
            )
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "total_h", float(self.total_h))

    @classmethod
    def flat(cls, lambda_min: float, lambda_max: float, total_h: float) -> "EfficiencyCurve":
        level = total_h / (lambda_max - lambda_min)
        return cls(np.array([lambda_min, lambda_max]), np.array([level, level]), total_h)

    @classmethod
    def from_shape(cls, grid, shape, total_h: float) -> "EfficiencyCurve":
        """Rescale an arbitrary nonnegative shape so it integrates to total_h."""
        grid = np.asarray(grid, dtype=float)
        shape = np.asarray(shape, dtype=float)
        norm = float(np.trapezoid(shape, grid))
        if norm <= 0:
            raise ConfigError("efficiency shape has zero integral")
        return cls(grid, shape * (total_h / norm), total_h)

    def interp(self, lam):
        return np.interp(lam, self.grid, self.eta, left=0.0, right=0.0)

    def peak(self) -> float:
        return float(self.eta.max())


@dataclass(frozen=True)
class DetectorPreset:
    """Named timing-detector parameters: jitter FWHM (ps) and quantum efficiency."""

    name: str
    jitter_fwhm: float
    quantum_efficiency: float


FAST_DETECTOR = DetectorPreset("fast", jitter_fwhm=52.0, quantum_efficiency=0.10)
SLOW_DETECTOR = DetectorPreset("slow", jitter_fwhm=200.0, quantum_efficiency=0.40)


@dataclass(frozen=True)
class InstrumentConfig:
    """All physical parameters of one dispersive spectrometer channel.

    ``reflectivity_r`` records the grating reflectivity but is informational:
    all losses, including it, are folded into ``efficiency``.  ``delta_tau``
    must place the mapped window at positive delays inside the clock period.
    ``tdc_resolution`` is the converter's interval digitization step: stop
    tags are recorded on a lattice of that pitch anchored at their trigger.
    """

    gdd_d: float
    lambda0: float
    delta_tau: float
    window: tuple[float, float]
    efficiency: EfficiencyCurve
    jitter_fwhm: float
    reflectivity_r: float = 0.5
    dark_rate: float = 0.0
    dead_time: float = 0.0
    clock_period: int = 12500
    histogram_bin: int = 32
    tdc_resolution: int = 1
    splice_artifact: tuple[float, float] | None = None

    def __post_init__(self):
        if self.gdd_d == 0 or not math.isfinite(self.gdd_d):
            raise ConfigError("dispersion gdd_d must be finite and nonzero")
        lo, hi = self.window
        if not (lo < self.lambda0 < hi):
            raise ConfigError(
                f"window {self.window} must bracket the center wavelength {self.lambda0}"
            )
        if self.jitter_fwhm < 0:
            raise ConfigError("jitter FWHM must be nonnegative")
        if self.dark_rate < 0:
            raise ConfigError("dark rate must be nonnegative")
        if self.dead_time < 0:
            raise ConfigError("dead time must be nonnegative")
        if not (0.0 <= self.reflectivity_r <= 1.0):
            raise ConfigError("reflectivity must lie in [0, 1]")
        if int(self.clock_period) <= 0 or int(self.histogram_bin) <= 0:
            raise ConfigError("clock period and histogram bin must be positive")
        if int(self.tdc_resolution) < 1:
            raise ConfigError("TDC resolution must be >= 1 ps")
        object.__setattr__(self, "window", (float(lo), float(hi)))
        object.__setattr__(self, "clock_period", int(self.clock_period))
        object.__setattr__(self, "histogram_bin", int(self.histogram_bin))
        object.__setattr__(self, "tdc_resolution", int(self.tdc_resolution))
        if self.splice_artifact is not None:
            center, amp = self.splice_artifact
            if amp < 0:
                raise ConfigError("splice artifact amplitude must be nonnegative")
            object.__setattr__(self, "splice_artifact", (float(center), float(amp)))

    @property
    def window_width(self) -> float:
        return self.window[1] - self.window[0]


def map_wavelength_to_time(cfg: InstrumentConfig, lam):
    """Arrival delay (ps) of a photon at ``lam``: gdd_d*(lam - lambda0) + delta_tau.

    Positive dispersion makes longer wavelengths arrive later.
    """
    return cfg.gdd_d * (np.asarray(lam, dtype=float) - cfg.lambda0) + cfg.delta_tau


def invert_time_to_wavelength(cfg: InstrumentConfig, tau):
    """Exact inverse of map_wavelength_to_time."""
    if cfg.gdd_d == 0:
        raise ConfigError("cannot invert a channel with zero dispersion")
    return cfg.lambda0 + (np.asarray(tau, dtype=float) - cfg.delta_tau) / cfg.gdd_d


def resolution(cfg: InstrumentConfig) -> float:
    """Spectral resolution (nm FWHM) set by timing jitter: jitter / |D|."""
    return cfg.jitter_fwhm / abs(cfg.gdd_d)


def acceptance_probability(cfg: InstrumentConfig, lam):
    """Per-photon detection probability at ``lam``: eta(lam) * window_width."""
    eta = cfg.efficiency.interp(lam)
    if cfg.splice_artifact is not None:
        center, amp = cfg.splice_artifact
        sig = _SPLICE_FWHM_NM * FWHM_TO_SIGMA
        lam = np.asarray(lam, dtype=float)
        eta = eta + amp * cfg.efficiency.peak() * np.exp(-0.5 * ((lam - center) / sig) ** 2)
    return eta * cfg.window_width


def _validate_acceptance(cfg: InstrumentConfig) -> None:
    lo, hi = cfg.window
    if cfg.splice_artifact is not None:
        lo = min(lo, cfg.splice_artifact[0] - 3.0 * _SPLICE_FWHM_NM)
        hi = max(hi, cfg.splice_artifact[0] + 3.0 * _SPLICE_FWHM_NM)
    lo = min(lo, float(cfg.efficiency.grid[0]))
    hi = max(hi, float(cfg.efficiency.grid[-1]))
    probe = np.union1d(cfg.efficiency.grid, np.linspace(lo, hi, 2001))
    worst = float(acceptance_probability(cfg, probe).max())
    if worst > 1.0 + 1e-9:
        raise ConfigError(
            f"efficiency curve implies acceptance probability {worst:.4g} > 1; "
            "lower total_h or flatten the curve"
        )


def _mapped_time_extent(cfg: InstrumentConfig) -> tuple[float, float]:
    lams = [cfg.efficiency.grid[0], cfg.efficiency.grid[-1]]
    if cfg.splice_artifact is not None:
        lams.append(cfg.splice_artifact[0] - 3.0 * _SPLICE_FWHM_NM)
        lams.append(cfg.splice_artifact[0] + 3.0 * _SPLICE_FWHM_NM)
    times = map_wavelength_to_time(cfg, np.asarray(lams))
    guard = 6.0 * cfg.jitter_fwhm * FWHM_TO_SIGMA + 1.0
    return float(times.min()) - guard, float(times.max()) + guard


def _check_positive_times(cfg: InstrumentConfig, start_time: int) -> None:
    lo, hi = _mapped_time_extent(cfg)
    if start_time + lo < 0:
        raise ConfigError(
            f"delta_tau {cfg.delta_tau} ps maps part of the window to negative "
            "timestamps; increase delta_tau or start_time"
        )
    if hi - lo >= cfg.clock_period:
        raise ConfigError(
            f"mapped window span {hi - lo:.0f} ps exceeds the clock period "
            f"{cfg.clock_period} ps; arrival cycles would be ambiguous"
        )


def _chunk_rng(seed: int, chunk_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(chunk_index,)))


def _earliest_per_cycle(cycles: np.ndarray, times: np.ndarray):
    """Keep the earliest event per cycle; inputs need not be sorted."""
    if cycles.size == 0:
        return cycles, times
    order = np.lexsort((times, cycles))
    cycles, times = cycles[order], times[order]
    _, first = np.unique(cycles, return_index=True)
    return cycles[first], times[first]


def _apply_dead_time(times: np.ndarray, dead_time: float) -> np.ndarray:
    """Non-paralyzable dead time on a sorted event-time array."""
    if dead_time <= 0 or times.size == 0:
        return times
    keep = np.zeros(times.size, dtype=bool)
    t_last = -math.inf
    for i, t in enumerate(times):
        if t - t_last >= dead_time:
            keep[i] = True
            t_last = float(t)
    return times[keep]


def _dark_events(rng, n_cycles: int, dark_rate: float, period: int):
    """Poisson dark counts per cycle, uniform in time over the cycle."""
    if dark_rate <= 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=float)
    mean = dark_rate * period * 1e-12
    n_dark = rng.poisson(mean, n_cycles)
    total = int(n_dark.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=float)
    cyc = np.repeat(np.arange(n_cycles, dtype=np.int64), n_dark)
    offs = rng.random(total) * period
    return cyc, offs


def _detect_channel(rng, cfg, cycle_idx, lam, cycle_offset, start_time):
    """Map accepted photons of one chunk to (cycle, absolute time) candidates."""
    u_acc = rng.random(lam.size)
    accepted = u_acc < np.minimum(acceptance_probability(cfg, lam), 1.0)
    cyc = cycle_idx[accepted]
    lam = lam[accepted]
    sigma = cfg.jitter_fwhm * FWHM_TO_SIGMA
    jitter = rng.standard_normal(lam.size) * sigma if sigma > 0 else 0.0
    t = (
        start_time
        + (cyc + cycle_offset).astype(float) * cfg.clock_period
        + map_wavelength_to_time(cfg, lam)
        + jitter
    )
    return cyc, t


def _finalize_channel(cfg, photon_cyc, photon_t, dark_cyc, dark_off, cycle_offset, start_time):
    """Merge photon and dark candidates, keep earliest per cycle, round to ps.

    A coarse TDC (tdc_resolution > 1) records each stop as its trigger time
    plus a floor multiple of the resolution: start-stop converters digitize
    the interval from the start input, so the quantization lattice is
    anchored to the trigger, not to an absolute clock.
    """
    if dark_cyc.size:
        dark_t = (
            start_time
            + (dark_cyc + cycle_offset).astype(float) * cfg.clock_period
            + dark_off
        )
        cyc = np.concatenate([photon_cyc, dark_cyc])
        t = np.concatenate([photon_t, dark_t])
    else:
        cyc, t = photon_cyc, photon_t
    cyc, t = _earliest_per_cycle(cyc, t)
    t = np.rint(t).astype(np.int64)
    if cfg.tdc_resolution > 1:
        trig = start_time + (cyc + cycle_offset) * cfg.clock_period
        res = cfg.tdc_resolution
        t = trig + ((t - trig) // res) * res
    return t[t >= 0]


def simulate_run(
    source,
    herald_efficiency: float,
    cfg: InstrumentConfig,
    n_cycles: int,
    seed: int,
    start_time: int = 0,
) -> timetag.TagStream:
    """Simulate a heralded single-photon run of ``n_cycles`` clock cycles.

    Per cycle: a herald fires with probability ``herald_efficiency`` (channel
    2, at the cycle start); if heralded, a wavelength is drawn from ``source``
    and detected with probability eta(lam)*window_width, producing a channel-1
    tag at cycle_start + D*(lam - lambda0) + delta_tau + Gaussian jitter,
    rounded to integer ps.  Dark counts are superimposed on channel 1 at
    ``cfg.dark_rate``; at most one channel-1 tag survives per cycle (earliest
    wins) and a non-paralyzable dead time applies across cycles.  Channel 0
    carries one trigger per cycle.

    Identical (seed, config, source) always yields a bit-identical stream;
    cycles are processed in fixed-size chunks whose generators are keyed by
    (seed, chunk_index).
    """
    n_cycles = int(n_cycles)
    if n_cycles < 0:
        raise ConfigError(f"cycle count must be nonnegative, got {n_cycles}")
    if not (0.0 <= herald_efficiency <= 1.0):
        raise ConfigError(f"herald efficiency must lie in [0, 1], got {herald_efficiency}")
    _validate_acceptance(cfg)
    _check_positive_times(cfg, start_time)

    sig_t_parts, her_cyc_parts = [], []
    for chunk_index, lo in enumerate(range(0, n_cycles, _CHUNK_CYCLES)):
        n = min(_CHUNK_CYCLES, n_cycles - lo)
        rng = _chunk_rng(seed, chunk_index)
        u_her = rng.random(n)
        heralded = np.flatnonzero(u_her < herald_efficiency)
        lam = np.asarray(sample_wavelength(source, rng, size=heralded.size))
        cyc, t = _detect_channel(rng, cfg, heralded, lam, lo, start_time)
        dark_cyc, dark_off = _dark_events(rng, n, cfg.dark_rate, cfg.clock_period)
        sig_t_parts.append(_finalize_channel(cfg, cyc, t, dark_cyc, dark_off, lo, start_time))
        her_cyc_parts.append(heralded + lo)
    # np.unique both sorts and removes the (vanishingly rare) exact-ps
    # collisions of dark counts straddling a cycle boundary.
    signal_times = (
        np.unique(np.concatenate(sig_t_parts)) if sig_t_parts else np.empty(0, np.int64)
    )
    signal_times = _apply_dead_time(signal_times, cfg.dead_time)

    triggers = start_time + np.arange(n_cycles, dtype=np.int64) * cfg.clock_period
    heralds = (
        start_time + np.concatenate(her_cyc_parts) * cfg.clock_period
        if her_cyc_parts
        else np.empty(0, np.int64)
    )
    channels = np.concatenate(
        [
            np.zeros(triggers.size, dtype=np.uint8),
            np.ones(signal_times.size, dtype=np.uint8),
            np.full(heralds.size, timetag.IDLER_CHANNEL, dtype=np.uint8),
        ]
    )
    times = np.concatenate([triggers, signal_times, heralds]).astype(np.uint64)
    return timetag.sort_tags(cfg.clock_period, channels, times)


def simulate_pair_run(
    source: PairGaussian,
    pair_rate: float,
    cfg_signal: InstrumentConfig,
    cfg_idler: InstrumentConfig,
    n_cycles: int,
    seed: int,
    start_time: int = 0,
) -> timetag.TagStream:
    """Simulate a two-channel photon-pair run.

    Per cycle, a pair is generated with probability ``pair_rate``; each photon
    independently passes its channel's efficiency curve and is mapped and
    jittered as in simulate_run.  Channel 1 carries the signal detector,
    channel 2 the idler detector, channel 0 the shared clock trigger.
    """
    n_cycles = int(n_cycles)
    if n_cycles < 0:
        raise ConfigError(f"cycle count must be nonnegative, got {n_cycles}")
    if not (0.0 <= pair_rate <= 1.0):
        raise ConfigError(f"pair rate must lie in [0, 1], got {pair_rate}")
    if not isinstance(source, PairGaussian):
        raise ConfigError("simulate_pair_run needs a PairGaussian source")
    if cfg_signal.clock_period != cfg_idler.clock_period:
        raise ConfigError("signal and idler channels must share a clock period")
    if cfg_signal.tdc_resolution != cfg_idler.tdc_resolution:
        raise ConfigError("signal and idler channels must share a TDC resolution")
    for cfg in (cfg_signal, cfg_idler):
        _validate_acceptance(cfg)
        _check_positive_times(cfg, start_time)

    sig_parts, idl_parts = [], []
    for chunk_index, lo in enumerate(range(0, n_cycles, _CHUNK_CYCLES)):
        n = min(_CHUNK_CYCLES, n_cycles - lo)
        rng = _chunk_rng(seed, chunk_index)
        u_pair = rng.random(n)
        pair_cycles = np.flatnonzero(u_pair < pair_rate)
        lam_s, lam_i = sample_pair(source, rng, size=pair_cycles.size)
        cyc_s, t_s = _detect_channel(rng, cfg_signal, pair_cycles, np.asarray(lam_s), lo, start_time)
        cyc_i, t_i = _detect_channel(rng, cfg_idler, pair_cycles, np.asarray(lam_i), lo, start_time)
        dark_s = _dark_events(rng, n, cfg_signal.dark_rate, cfg_signal.clock_period)
        dark_i = _dark_events(rng, n, cfg_idler.dark_rate, cfg_idler.clock_period)
        sig_parts.append(_finalize_channel(cfg_signal, cyc_s, t_s, *dark_s, lo, start_time))
        idl_parts.append(_finalize_channel(cfg_idler, cyc_i, t_i, *dark_i, lo, start_time))

    signal_times = np.unique(np.concatenate(sig_parts)) if sig_parts else np.empty(0, np.int64)
    idler_times = np.unique(np.concatenate(idl_parts)) if idl_parts else np.empty(0, np.int64)
    signal_times = _apply_dead_time(signal_times, cfg_signal.dead_time)
    idler_times = _apply_dead_time(idler_times, cfg_idler.dead_time)

    period = cfg_signal.clock_period
    triggers = start_time + np.arange(n_cycles, dtype=np.int64) * period
    channels = np.concatenate(
        [
            np.zeros(triggers.size, dtype=np.uint8),
            np.ones(signal_times.size, dtype=np.uint8),
            np.full(idler_times.size, timetag.IDLER_CHANNEL, dtype=np.uint8),
        ]
    )
    times = np.concatenate([triggers, signal_times, idler_times]).astype(np.uint64)
    return timetag.sort_tags(period, channels, times)


# --- preset / config file handling -----------------------------------------

_CONFIG_FIELDS = {f.name for f in fields(InstrumentConfig)}


def config_from_dict(data: dict) -> InstrumentConfig:
    """Build an InstrumentConfig from a dict whose keys mirror the field names."""
    data = dict(data)
    data.pop("name", None)
    unknown = set(data) - _CONFIG_FIELDS
    if unknown:
        raise ConfigError(f"unknown instrument config keys: {sorted(unknown)}")
    missing = {"gdd_d", "lambda0", "delta_tau", "window", "efficiency", "jitter_fwhm"} - set(data)
    if missing:
        raise ConfigError(f"instrument config missing keys: {sorted(missing)}")
    eff = data["efficiency"]
    if isinstance(eff, dict):
        data["efficiency"] = EfficiencyCurve(
            grid=np.asarray(eff["grid"], dtype=float),
            eta=np.asarray(eff["eta"], dtype=float),
            total_h=float(eff["total_h"]),
        )
    data["window"] = tuple(data["window"])
    if data.get("splice_artifact") is not None:
        data["splice_artifact"] = tuple(data["splice_artifact"])
    return InstrumentConfig(**data)


def config_to_dict(cfg: InstrumentConfig) -> dict:
    return {
        "gdd_d": cfg.gdd_d,
        "lambda0": cfg.lambda0,
        "delta_tau": cfg.delta_tau,
        "window": list(cfg.window),
        "efficiency": {
            "grid": cfg.efficiency.grid.tolist(),
            "eta": cfg.efficiency.eta.tolist(),
            "total_h": cfg.efficiency.total_h,
        },
        "jitter_fwhm": cfg.jitter_fwhm,
        "reflectivity_r": cfg.reflectivity_r,
        "dark_rate": cfg.dark_rate,
        "dead_time": cfg.dead_time,
        "clock_period": cfg.clock_period,
        "histogram_bin": cfg.histogram_bin,
        "tdc_resolution": cfg.tdc_resolution,
        "splice_artifact": list(cfg.splice_artifact) if cfg.splice_artifact else None,
    }


def load_config_file(path) -> InstrumentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def list_presets() -> list[str]:
    pkg = resources.files(__package__).joinpath("presets")
    return sorted(p.name[: -len(".json")] for p in pkg.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> InstrumentConfig:
    """Load one of the shipped channel presets by name (case-insensitive)."""
    fname = f"{name.lower()}.json"
    pkg = resources.files(__package__).joinpath("presets")
    candidate = pkg.joinpath(fname)
    if not candidate.is_file():
        raise ConfigError(f"unknown instrument preset {name!r}; available: {list_presets()}")
    return config_from_dict(json.loads(candidate.read_text(encoding="utf-8")))
