import math

import numpy as np
import pytest
from scipy.stats import chi2 as chi2_dist

from tofspec.calibrate import CalibrationResult
from tofspec.errors import AnalysisError, CalibrationError
from tofspec.instrument import (
    EfficiencyCurve,
    InstrumentConfig,
    resolution,
    simulate_pair_run,
    simulate_run,
)
from tofspec.reconstruct import (
    ReconstructedSpectrum,
    fit_fringes,
    fringe_contrast_factor,
    fwhm_linear,
    measure_fwhm,
    reconstruct_jsi,
    reconstruct_spectrum,
    write_jsi_table,
    write_spectrum_table,
)
from tofspec.sources import (
    FWHM_TO_SIGMA,
    DoublePulse,
    GaussianLine,
    PairGaussian,
    fringe_period,
)
from tofspec.timetag import Histogram, build_histogram, coincidence_pairs

from conftest import convolved_bin_probabilities, gaussian_fit_fwhm, ideal_calibration


def make_config(**overrides):
    params = dict(
        gdd_d=950.0,
        lambda0=830.0,
        delta_tau=6000.0,
        window=(825.0, 835.0),
        efficiency=EfficiencyCurve.flat(825.0, 835.0, 1.0),
        jitter_fwhm=52.0,
        histogram_bin=8,
    )
    params.update(overrides)
    return InstrumentConfig(**params)


def synthetic_spectrum(lam, counts, masked=None):
    counts = np.asarray(counts, dtype=float)
    masked = np.zeros(lam.size, dtype=bool) if masked is None else masked
    return ReconstructedSpectrum(
        lambda_bins=np.asarray(lam, dtype=float),
        corrected=counts,
        raw=np.rint(counts).astype(np.int64),
        stat_sigma=np.sqrt(np.maximum(counts, 1.0)),
        masked=masked,
        bin_width_nm=float(lam[1] - lam[0]),
    )


def test_flat_efficiency_leaves_counts_unchanged():
    counts = np.zeros(200, dtype=np.int64)
    counts[40:160] = np.arange(120)
    hist = Histogram(bin_width=32, origin=2000, counts=counts)
    calib = CalibrationResult(
        950.0, 0.0, 6000.0, 830.0, EfficiencyCurve.flat(820.0, 845.0, 0.5), 0.0, 0.0, 0.0
    )
    spec = reconstruct_spectrum(hist, calib)
    np.testing.assert_allclose(spec.corrected, spec.raw.astype(float), rtol=1e-12)
    assert not spec.masked.any()


def test_count_conservation_randomized():
    rng = np.random.default_rng(50)
    for _ in range(200):
        n = int(rng.integers(20, 200))
        counts = rng.poisson(rng.uniform(0.0, 50.0), size=n).astype(np.int64)
        hist = Histogram(bin_width=int(rng.integers(8, 120)), origin=0, counts=counts)
        grid = np.linspace(820.0, 845.0, int(rng.integers(5, 40)))
        shape = rng.uniform(0.02, 1.0, size=grid.size)
        shape[: int(rng.integers(0, 3))] = 1e-4  # force some masking sometimes
        curve = EfficiencyCurve.from_shape(grid, shape, total_h=0.3)
        calib = CalibrationResult(950.0, 0.0, 1000.0, 830.0, curve, 0.0, 0.0, 0.0)
        try:
            spec = reconstruct_spectrum(hist, calib)
        except CalibrationError:
            continue  # fully masked draw
        assert abs(spec.unmasked_corrected_total() - spec.unmasked_raw_total()) <= 0.5


def test_masked_bins_are_reported_not_extrapolated():
    counts = np.full(300, 10, dtype=np.int64)
    hist = Histogram(bin_width=32, origin=1000, counts=counts)
    grid = np.linspace(828.0, 832.0, 9)
    curve = EfficiencyCurve.from_shape(grid, np.ones(9), total_h=0.2)
    calib = CalibrationResult(950.0, 0.0, 6000.0, 830.0, curve, 0.0, 0.0, 0.0)
    spec = reconstruct_spectrum(hist, calib)
    assert spec.masked.any() and (~spec.masked).any()
    assert np.all(spec.corrected[spec.masked] == 0.0)
    assert np.all(spec.raw[spec.masked] >= 0)


def test_disjoint_calibration_raises():
    counts = np.full(10, 5, dtype=np.int64)
    hist = Histogram(bin_width=32, origin=0, counts=counts)  # maps near 823.7 nm
    curve = EfficiencyCurve.flat(825.0, 835.0, 0.1)
    calib = CalibrationResult(950.0, 0.0, 6000.0, 830.0, curve, 0.0, 0.0, 0.0)
    with pytest.raises(CalibrationError):
        reconstruct_spectrum(hist, calib)


@pytest.mark.parametrize("width", [1e-4, 0.5, 2.0, 8.0])
def test_width_quadrature(width):
    cfg = make_config()
    n_cycles = 200_000
    stream = simulate_run(GaussianLine(830.0, width), 1.0, cfg, n_cycles, seed=30)
    hist = build_histogram(stream, 1, 8)
    spec = reconstruct_spectrum(hist, ideal_calibration(cfg))
    keep = ~spec.masked & (spec.corrected > 0)
    measured = gaussian_fit_fwhm(spec.lambda_bins[keep], spec.corrected[keep])
    # Quadrature oracle: source width + jitter resolution + bin/rounding terms.
    sigma_t = math.sqrt(
        (cfg.jitter_fwhm * FWHM_TO_SIGMA) ** 2 + 8.0**2 / 12.0 + 1.0 / 12.0
    )
    res = sigma_t / FWHM_TO_SIGMA / cfg.gdd_d
    expected = math.sqrt(width**2 + res**2)
    tolerance = 0.10 if width < 0.1 else 0.03
    assert measured == pytest.approx(expected, rel=tolerance)


def test_monochromatic_through_trsps1_resolution():
    from tofspec.instrument import load_preset

    cfg = load_preset("trsps1")
    stream = simulate_run(GaussianLine(830.0, 1e-4), 1.0, cfg, 100_000, seed=31)
    hist = build_histogram(stream, 1, 8)
    spec = reconstruct_spectrum(hist, ideal_calibration(cfg))
    assert measure_fwhm(spec) == pytest.approx(0.055, rel=0.10)


def test_monochromatic_through_slow_preset_resolution():
    cfg = make_config(
        gdd_d=958.0,
        jitter_fwhm=200.0,
        tdc_resolution=81,
        histogram_bin=81,
        delta_tau=6034.5,
    )
    stream = simulate_run(GaussianLine(830.0, 1e-4), 1.0, cfg, 100_000, seed=32)
    hist = build_histogram(stream, 1, 81)
    spec = reconstruct_spectrum(hist, ideal_calibration(cfg))
    assert measure_fwhm(spec) == pytest.approx(0.209, rel=0.10)


def test_fwhm_of_exact_gaussian_tabulation():
    lam = np.arange(824.0, 836.0, 0.01)
    counts = 1000.0 * np.exp(-0.5 * ((lam - 830.0) / (2.0 * FWHM_TO_SIGMA)) ** 2)
    spec = synthetic_spectrum(lam, counts)
    assert measure_fwhm(spec) == pytest.approx(2.0, abs=0.01)


def test_fwhm_multimodal_lists_crossings():
    lam = np.linspace(825.0, 835.0, 500)
    two_peaks = np.exp(-0.5 * ((lam - 828.0) / 0.3) ** 2) + np.exp(
        -0.5 * ((lam - 832.0) / 0.3) ** 2
    )
    with pytest.raises(AnalysisError) as err:
        fwhm_linear(lam, two_peaks)
    assert len(err.value.crossings) == 4


def test_fit_fringes_noiseless_exact():
    period = fringe_period(11.0, 830.0)
    lam = np.arange(826.0, 834.0, 0.0341)
    model = 400.0 * np.exp(-0.5 * ((lam - 830.0) / (2.0 * FWHM_TO_SIGMA)) ** 2) * (
        1.0 + 0.24 * np.cos(2.0 * math.pi * (lam - 830.0) / period + 0.6)
    )
    spec = synthetic_spectrum(lam, model)
    fixed = fit_fringes(spec, fixed_period=period)
    assert fixed.visibility == pytest.approx(0.24, abs=1e-6)
    assert fixed.phase == pytest.approx(0.6, abs=1e-5)
    assert fixed.envelope.fwhm == pytest.approx(2.0, rel=1e-6)

    free = fit_fringes(spec)
    assert free.period == pytest.approx(period, rel=1e-6)
    assert free.visibility == pytest.approx(0.24, abs=1e-4)


def test_fit_fringes_needs_sampling_below_period():
    lam = np.arange(826.0, 834.0, 0.2)  # ~1 bin per 0.209 nm period
    model = 400.0 * np.exp(-0.5 * ((lam - 830.0) / (2.0 * FWHM_TO_SIGMA)) ** 2)
    spec = synthetic_spectrum(lam, model)
    with pytest.raises(AnalysisError, match="per fringe period"):
        fit_fringes(spec, fixed_period=fringe_period(11.0, 830.0))


def test_fit_fringes_needs_unmasked_bins():
    lam = np.arange(826.0, 834.0, 0.034)
    spec = synthetic_spectrum(lam, np.ones_like(lam), masked=np.ones(lam.size, dtype=bool))
    with pytest.raises(AnalysisError, match="unmasked"):
        fit_fringes(spec)


def test_double_pulse_fringe_params_round_trip():
    pulse = DoublePulse(GaussianLine(830.0, 2.0), delay_t=11.0, visibility=0.24, phase=0.6)
    params = pulse.fringe_params()
    assert params.period == pytest.approx(pulse.period, rel=1e-12)
    assert params.visibility == 0.24
    assert params.envelope_fwhm == 2.0


def test_fit_fringes_null_visibility():
    rng = np.random.default_rng(33)
    lam = np.arange(826.0, 834.0, 0.0341)
    mean = 900.0 * np.exp(-0.5 * ((lam - 830.0) / (2.0 * FWHM_TO_SIGMA)) ** 2)
    spec = synthetic_spectrum(lam, rng.poisson(mean).astype(float))
    fit = fit_fringes(spec, fixed_period=fringe_period(11.0, 830.0))
    assert fit.visibility < 0.02


def test_fit_fringes_unbiased_over_seeds():
    period = fringe_period(11.0, 830.0)
    lam = np.arange(826.5, 833.5, 0.0341)
    mean = 70.0 * np.exp(-0.5 * ((lam - 830.0) / (2.0 * FWHM_TO_SIGMA)) ** 2) * (
        1.0 + 0.24 * np.cos(2.0 * math.pi * (lam - 830.0) / period + 1.1)
    )
    rng = np.random.default_rng(34)
    recovered = []
    for _ in range(100):
        spec = synthetic_spectrum(lam, rng.poisson(mean).astype(float))
        recovered.append(fit_fringes(spec, fixed_period=period).visibility)
    assert float(np.mean(recovered)) == pytest.approx(0.24, abs=0.01)


def test_fringe_contrast_factor_against_numerical_convolution():
    # Oracle: blur a pure fringe numerically, read the amplitude ratio.
    period, res_fwhm = 0.209, 0.055
    lam = np.arange(-2.0, 2.0, 1e-4)
    fringe = np.cos(2.0 * math.pi * lam / period)
    sig = res_fwhm * FWHM_TO_SIGMA
    kernel_x = np.arange(-6.0 * sig, 6.0 * sig, 1e-4)
    kernel = np.exp(-0.5 * (kernel_x / sig) ** 2)
    kernel /= kernel.sum()
    blurred = np.convolve(fringe, kernel, mode="same")
    middle = (lam > -1.0) & (lam < 1.0)
    ratio = blurred[middle].max()
    assert fringe_contrast_factor(period, res_fwhm) == pytest.approx(ratio, rel=1e-3)


def test_fringe_visibility_through_instrument():
    # 3000-event double-pulse run; the fitted visibility equals the set value
    # times the instrument contrast factor at the fringe period.
    cfg = make_config(gdd_d=938.0, histogram_bin=32)
    src = DoublePulse(GaussianLine(830.0, 2.0), delay_t=11.0, visibility=0.8, phase=0.4)
    stream = simulate_run(src, 0.06, cfg, 1_000_000, seed=35)
    hist = build_histogram(stream, 1, 32)
    spec = reconstruct_spectrum(hist, ideal_calibration(cfg))
    period = fringe_period(11.0, 830.0)
    fit = fit_fringes(spec, fixed_period=period)
    contrast = fringe_contrast_factor(period, resolution(cfg), 32.0 / cfg.gdd_d)
    assert hist.total() > 2000
    assert fit.visibility / contrast == pytest.approx(0.8, abs=0.08)


def test_reconstructed_spectrum_chi_square_against_oracle():
    grid = np.linspace(825.0, 835.0, 21)
    ramp = np.linspace(0.006, 0.014, 21)
    curve = EfficiencyCurve(grid, ramp, total_h=float(np.trapezoid(ramp, grid)))
    cfg = make_config(efficiency=curve, histogram_bin=32)
    src = GaussianLine(830.0, 2.0)
    stream = simulate_run(src, 1.0, cfg, 500_000, seed=36)
    hist = build_histogram(stream, 1, 32)
    calib = ideal_calibration(cfg)
    spec = reconstruct_spectrum(hist, calib)

    # Oracle: quadrature probabilities of the efficiency-weighted source
    # blurred by the timing response, corrected back by eta at bin centers.
    tau_edges = hist.origin + np.arange(hist.n_bins + 1) * hist.bin_width
    lam_edges = np.sort(np.asarray(calib.wavelength_at(tau_edges)))
    sigma_blur = math.sqrt(
        (cfg.jitter_fwhm * FWHM_TO_SIGMA) ** 2 + hist.bin_width**2 / 12.0 * 0.0 + 1.0 / 12.0
    ) / cfg.gdd_d
    probs = convolved_bin_probabilities(
        lambda x: np.asarray([src.density(v) for v in np.atleast_1d(x)]).reshape(np.shape(x)),
        lambda x: curve.interp(x),
        lam_edges,
        sigma_blur,
    )
    eta_centers = curve.interp(spec.lambda_bins)
    keep = (~spec.masked) & (spec.raw >= 10) & (probs > 0)
    expected_raw = probs / probs[keep].sum() * spec.raw[keep].sum()
    expected_corr = expected_raw / np.where(eta_centers > 0, eta_centers, np.inf)
    scale = spec.corrected[keep].sum() / expected_corr[keep].sum()
    chi2 = float(
        np.sum(((spec.corrected[keep] - scale * expected_corr[keep]) / spec.stat_sigma[keep]) ** 2)
    )
    dof = int(np.count_nonzero(keep)) - 1
    assert dof >= 50
    assert 0.7 <= chi2 / dof <= 1.3


def test_jsi_separable_for_uncorrelated_pairs():
    cfg_s = make_config(efficiency=EfficiencyCurve.flat(825.0, 835.0, 0.6))
    cfg_i = make_config(gdd_d=958.0, efficiency=EfficiencyCurve.flat(825.0, 835.0, 0.6))
    pair = PairGaussian(GaussianLine(830.0, 2.0), GaussianLine(830.0, 5.0), correlation_rho=0.0)
    stream = simulate_pair_run(pair, 0.5, cfg_s, cfg_i, 300_000, seed=37)
    pairs = coincidence_pairs(stream, 1, 2)
    grid = reconstruct_jsi(pairs, ideal_calibration(cfg_s), ideal_calibration(cfg_i), (64, 64))

    # Weighted correlation of the corrected grid ~ 0.
    w = grid.corrected
    ls = grid.signal_bins[:, None]
    li = grid.idler_bins[None, :]
    total = w.sum()
    mean_s = (w * ls).sum() / total
    mean_i = (w * li).sum() / total
    cov = (w * (ls - mean_s) * (li - mean_i)).sum() / total
    var_s = (w * (ls - mean_s) ** 2).sum() / total
    var_i = (w * (li - mean_i) ** 2).sum() / total
    corr = cov / math.sqrt(var_s * var_i)
    assert abs(corr) < 0.02

    # G-test of independence on raw counts (cells with expectation >= 5).
    raw = grid.raw
    row = raw.sum(axis=1, keepdims=True)
    col = raw.sum(axis=0, keepdims=True)
    total_raw = raw.sum()
    expected = row * col / total_raw
    cells = expected >= 5.0
    g_stat = 2.0 * np.sum(raw[cells] * np.log(raw[cells] / expected[cells], where=raw[cells] > 0))
    dof = (np.count_nonzero(row.sum(axis=1) > 0) - 1) * (np.count_nonzero(col.sum(axis=0) > 0) - 1)
    assert chi2_dist.sf(g_stat, dof) > 1e-3


def test_jsi_conservation_and_dropped():
    rng = np.random.default_rng(38)
    # Calibrated window maps to delays [1250, 10750]; stay inside it.
    pairs = np.stack(
        [rng.integers(1300, 10700, 5000), rng.integers(1300, 10700, 5000)], axis=1
    )
    pairs[0] = (50_000, 50_000)  # far outside both calibrated windows
    curve = EfficiencyCurve.flat(825.0, 835.0, 0.4)
    calib = CalibrationResult(950.0, 0.0, 6000.0, 830.0, curve, 0.0, 0.0, 0.0)
    grid = reconstruct_jsi(pairs, calib, calib, (128, 128))
    assert grid.dropped == 1
    assert abs(grid.unmasked_corrected_total() - grid.unmasked_raw_total()) <= 0.5
    assert grid.raw.sum() == 4999


def test_spectrum_table_round_trip(tmp_path):
    lam = np.linspace(828.0, 832.0, 40)
    spec = synthetic_spectrum(lam, 100.0 * np.exp(-(((lam - 830.0) / 1.0) ** 2)))
    csv_path = tmp_path / "spec.csv"
    write_spectrum_table(csv_path, spec, fmt="csv", meta={"calibration_sha256": "abc123"})
    text = csv_path.read_text()
    assert "# calibration_sha256=abc123" in text
    assert text.count("\n") == 2 + 1 + 40  # comments + header + rows
    data = np.loadtxt(csv_path, delimiter=",", skiprows=3)
    np.testing.assert_allclose(data[:, 0], lam, rtol=1e-12)

    json_path = tmp_path / "spec.json"
    write_spectrum_table(json_path, spec, fmt="json", meta={"calibration_sha256": "abc123"})
    import json

    payload = json.loads(json_path.read_text())
    assert payload["meta"]["calibration_sha256"] == "abc123"
    assert len(payload["lambda_nm"]) == 40


def test_jsi_table_round_trip(tmp_path):
    curve = EfficiencyCurve.flat(825.0, 835.0, 0.4)
    calib = CalibrationResult(950.0, 0.0, 6000.0, 830.0, curve, 0.0, 0.0, 0.0)
    rng = np.random.default_rng(39)
    pairs = np.stack([rng.integers(1300, 10700, 500), rng.integers(1300, 10700, 500)], axis=1)
    grid = reconstruct_jsi(pairs, calib, calib, (512, 512))
    path = tmp_path / "grid.csv"
    write_jsi_table(path, grid, fmt="csv", meta={"calibration_sha256": "xyz"})
    rows = np.loadtxt(path, delimiter=",", skiprows=3)
    assert rows.shape[1] == 4
    assert int(rows[:, 2].sum()) == grid.raw.sum()
