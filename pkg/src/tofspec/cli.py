"""Command-line front end: simulate -> calibrate -> reconstruct -> analyze.

Exit codes are machine-parsable: 0 on success, 2 on usage or configuration
errors (including missing input files), 1 on runtime errors in otherwise
valid inputs.  All randomness flows from the mandatory --seed, and identical
configurations reproduce byte-identical tag files and tables.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__, calibrate, instrument, reconstruct, sources, timetag
from .errors import AnalysisError, CalibrationError, ConfigError, FitError, FormatError


def _parse_scaled(value: str, suffixes: tuple[str, ...]) -> float:
    text = value.strip().lower()
    for suffix in suffixes:
        if text.endswith(suffix):
            text = text[: -len(suffix)]
            break
    return float(text)


def parse_source(spec: str):
    """Parse a source descriptor like 'doublepulse:center=830,fwhm=2,t=11ps,v=0.8'.

    Known kinds: gaussian, doublepulse, tabulated, pair.  Numeric values may
    carry ps/nm unit suffixes, which are stripped.
    """
    kind, _, rest = spec.partition(":")
    kind = kind.strip().lower()
    params: dict[str, str] = {}
    if rest:
        for item in rest.split(","):
            if not item.strip():
                continue
            if "=" not in item:
                raise ConfigError(f"source parameter {item!r} is not key=value")
            key, value = item.split("=", 1)
            params[key.strip().lower()] = value.strip()

    def num(key, default=None):
        if key not in params:
            if default is None:
                raise ConfigError(f"source {kind!r} needs parameter {key!r}")
            return default
        return _parse_scaled(params.pop(key), ("ps", "nm", "rad"))

    if kind == "gaussian":
        out = sources.GaussianLine(center=num("center", 830.0), fwhm=num("fwhm", 2.0))
    elif kind == "doublepulse":
        out = sources.DoublePulse(
            envelope=sources.GaussianLine(center=num("center", 830.0), fwhm=num("fwhm", 2.0)),
            delay_t=num("t", 11.0),
            visibility=num("v", 1.0),
            phase=num("phi", 0.0),
        )
    elif kind == "tabulated":
        path = params.pop("path", None)
        if path is None:
            raise ConfigError("tabulated source needs path=FILE")
        out = sources.load_tabulated(path)
    elif kind == "pair":
        out = sources.PairGaussian(
            signal=sources.GaussianLine(
                center=num("signal_center", 830.0), fwhm=num("signal_fwhm", 2.0)
            ),
            idler=sources.GaussianLine(
                center=num("idler_center", 830.0), fwhm=num("idler_fwhm", 8.0)
            ),
            correlation_rho=num("rho", 0.0),
        )
    else:
        raise ConfigError(
            f"unknown source kind {kind!r}; expected gaussian, doublepulse, tabulated or pair"
        )
    if params:
        raise ConfigError(f"unused source parameters for {kind!r}: {sorted(params)}")
    return out


def _load_channel(preset: str | None, config_path: str | None) -> instrument.InstrumentConfig:
    if (preset is None) == (config_path is None):
        raise ConfigError("specify exactly one of --preset or --config")
    if preset is not None:
        return instrument.load_preset(preset)
    return instrument.load_config_file(config_path)


def _write_manifest(out_path: str, payload: dict) -> None:
    with open(out_path + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def cmd_simulate(args) -> int:
    cfg = _load_channel(args.preset, args.config)
    source = parse_source(args.source)
    n_cycles = int(float(args.cycles))
    if isinstance(source, sources.PairGaussian):
        idler_cfg = (
            _load_channel(args.idler_preset, args.idler_config)
            if (args.idler_preset or args.idler_config)
            else cfg
        )
        stream = instrument.simulate_pair_run(
            source, args.pair_rate, cfg, idler_cfg, n_cycles, seed=args.seed
        )
    else:
        stream = instrument.simulate_run(
            source, args.herald_efficiency, cfg, n_cycles, seed=args.seed
        )
    timetag.write_tags(args.out, stream)
    _write_manifest(
        args.out,
        {
            "tool": f"tofspec {__version__}",
            "command": "simulate",
            "seed": args.seed,
            "cycles": n_cycles,
            "source": args.source,
            "herald_efficiency": args.herald_efficiency,
            "pair_rate": args.pair_rate,
            "preset": args.preset,
            "instrument": instrument.config_to_dict(cfg),
        },
    )
    counts = np.bincount(stream.channels, minlength=3) if len(stream) else np.zeros(3, int)
    print(
        f"wrote {args.out}: {len(stream)} tags "
        f"(triggers {counts[0]}, signal {counts[1]}, herald/idler {counts[2]})"
    )
    return 0


def cmd_calibrate(args) -> int:
    points = calibrate.load_delay_points(args.delays)
    fit = calibrate.fit_gdd(points, degree=args.degree, lambda0=args.lambda0)

    narrowband = timetag.read_tags(args.narrowband)
    hist = timetag.build_histogram(narrowband, timetag.SIGNAL_CHANNEL, args.bin)
    delta_tau, sigma_tau = calibrate.find_offset(
        hist, args.reference_lambda, fit.gdd_d, args.lambda0
    )

    reference = sources.load_tabulated(args.reference)
    broadband = timetag.read_tags(args.broadband)
    bb_hist = timetag.build_histogram(broadband, timetag.SIGNAL_CHANNEL, args.bin)
    lam = args.lambda0 + (bb_hist.bin_centers() - delta_tau) / fit.gdd_d
    efficiency = calibrate.estimate_efficiency(lam, bb_hist.counts, reference, args.total_h)

    result = calibrate.CalibrationResult(
        gdd_d=fit.gdd_d,
        intercept=fit.intercept,
        delta_tau=delta_tau,
        lambda0=args.lambda0,
        efficiency=efficiency,
        fit_residual_rms=fit.residual_rms,
        sigma_d=fit.sigma_d,
        sigma_delta_tau=sigma_tau,
    )
    calibrate.save_calibration(args.out, result)
    print(f"gdd_d = {fit.gdd_d:.4f} +- {fit.sigma_d:.4f} ps/nm")
    print(f"delta_tau = {delta_tau:.2f} +- {sigma_tau:.2f} ps")
    print(f"fit residual rms = {fit.residual_rms:.4f} ps")
    if args.degree == 2:
        print(f"quadratic term = {fit.quadratic:.6f} +- {fit.quadratic_sigma:.6f} ps/nm^2")
    print(f"wrote {args.out}")
    return 0


def _has_dispersed_idler(stream) -> bool:
    """True when channel 2 holds dispersed detections rather than heralds.

    Herald tags sit exactly at their trigger time; a second spectrometer
    channel produces nonzero trigger-relative delays.
    """
    triggers = stream.channel_times(timetag.TRIGGER_CHANNEL).astype(np.int64)
    others = stream.channel_times(timetag.IDLER_CHANNEL).astype(np.int64)
    if triggers.size == 0 or others.size == 0:
        return False
    idx = np.searchsorted(triggers, others, side="right") - 1
    ok = idx >= 0
    if not ok.any():
        return False
    delays = others[ok] - triggers[idx[ok]]
    return float(np.median(delays)) > 0.0


def _spectrum_meta(calib, hist, extra=None):
    meta = {
        "tool": f"tofspec {__version__}",
        "calibration_sha256": calib.file_sha256,
        "bin_width_ps": hist.bin_width if hasattr(hist, "bin_width") else None,
    }
    meta.update(extra or {})
    return meta


def cmd_reconstruct(args) -> int:
    stream = timetag.read_tags(args.tagfile)
    calib = calibrate.load_calibration(args.calibration)
    fmt = args.format
    suffix = "csv" if fmt == "csv" else "json"

    if args.mode == "spectrum":
        if _has_dispersed_idler(stream):
            print(
                "note: stream carries two detector channels; spectrum mode uses channel 1 only",
                file=sys.stderr,
            )
        hist = timetag.build_histogram(stream, timetag.SIGNAL_CHANNEL, args.bin)
        spec = reconstruct.reconstruct_spectrum(hist, calib)
        table = f"{args.out}.spectrum.{suffix}"
        reconstruct.write_spectrum_table(
            table, spec, fmt=fmt, meta=_spectrum_meta(calib, hist, {"dropped": hist.dropped})
        )
        summary = [
            f"total counts {hist.total()}",
            f"unmasked raw {spec.unmasked_raw_total()}",
        ]
        fit = None
        try:
            summary.append(f"fwhm {reconstruct.measure_fwhm(spec):.4f} nm")
        except AnalysisError:
            pass
        if args.fit_fringes:
            period = (
                sources.fringe_period(args.fringe_delay, calib.lambda0)
                if args.fringe_delay
                else None
            )
            fit = reconstruct.fit_fringes(spec, fixed_period=period)
            summary.append(
                f"fringe period {fit.period:.4f} nm, visibility {fit.visibility:.3f}, "
                f"phase {fit.phase:.3f} rad"
            )
        print(f"wrote {table}; " + ", ".join(summary))
        if args.plot:
            from . import plots

            plots.plot_spectrum(spec, f"{args.out}.spectrum.png", fringe_fit=fit)
            print(f"wrote {args.out}.spectrum.png")
        return 0

    # jsi mode
    calib_idler = (
        calibrate.load_calibration(args.idler_calibration) if args.idler_calibration else calib
    )
    pairs = timetag.coincidence_pairs(stream, timetag.SIGNAL_CHANNEL, timetag.IDLER_CHANNEL)
    bins = (args.bin, args.idler_bin or args.bin)
    grid = reconstruct.reconstruct_jsi(pairs, calib, calib_idler, bins, n_chunks=args.chunks)
    table = f"{args.out}.jsi.{suffix}"
    reconstruct.write_jsi_table(
        table,
        grid,
        fmt=fmt,
        meta={
            "tool": f"tofspec {__version__}",
            "calibration_sha256": calib.file_sha256,
            "idler_calibration_sha256": calib_idler.file_sha256,
            "dropped": grid.dropped,
        },
    )
    print(
        f"wrote {table}; coincidences {grid.raw.sum()}, "
        f"unmasked raw {grid.unmasked_raw_total()}, dropped {grid.dropped}"
    )
    if args.plot:
        from . import plots

        plots.plot_jsi(grid, f"{args.out}.jsi.png")
        print(f"wrote {args.out}.jsi.png")
    return 0


def cmd_analyze(args) -> int:
    stream = timetag.read_tags(args.tagfile)
    n_chan = stream.n_channels()
    counts = np.bincount(stream.channels, minlength=max(n_chan, 3))
    duration_s = (
        float(stream.timestamps[-1] - stream.timestamps[0]) * 1e-12 if len(stream) else 0.0
    )
    pairs = timetag.coincidence_pairs(stream, timetag.SIGNAL_CHANNEL, timetag.IDLER_CHANNEL)
    info = {
        "file": args.tagfile,
        "clock_period_ps": stream.clock_period,
        "tags": len(stream),
        "duration_s": duration_s,
        "channel_counts": {str(c): int(n) for c, n in enumerate(counts) if n},
        "coincidences_1_2": int(pairs.shape[0]),
    }
    if args.format == "json":
        print(json.dumps(info, sort_keys=True, indent=1))
    else:
        for key, value in info.items():
            print(f"{key}: {value}")
    if args.plot:
        from . import plots

        hist = timetag.build_histogram(stream, timetag.SIGNAL_CHANNEL, args.bin)
        plots.plot_histogram(hist, f"{args.tagfile}.hist.png")
        print(f"wrote {args.tagfile}.hist.png")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tofspec",
        description="Time-of-flight single-photon spectrometer toolkit",
    )
    parser.add_argument("--version", action="version", version=f"tofspec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="simulate a run and write a tag file")
    sim.add_argument("--preset", help="shipped instrument preset name (e.g. trsps1)")
    sim.add_argument("--config", help="instrument config JSON file")
    sim.add_argument("--idler-preset", help="idler channel preset for pair sources")
    sim.add_argument("--idler-config", help="idler channel config JSON for pair sources")
    sim.add_argument("--source", required=True, help="source spec, e.g. doublepulse:t=11ps")
    sim.add_argument("--cycles", required=True, help="number of clock cycles (float ok, e.g. 2.4e7)")
    sim.add_argument("--seed", required=True, type=int, help="rng seed (mandatory)")
    sim.add_argument("--herald-efficiency", type=float, default=1.0)
    sim.add_argument("--pair-rate", type=float, default=0.1, help="pair probability per cycle")
    sim.add_argument("--out", required=True, help="output tag file path")
    sim.set_defaults(func=cmd_simulate)

    cal = sub.add_parser("calibrate", help="fit dispersion, offset and efficiency")
    cal.add_argument("--delays", required=True, help="CSV of lambda_nm,delay_ps[,sigma_ps]")
    cal.add_argument("--narrowband", required=True, help="tag file of the narrowband run")
    cal.add_argument("--broadband", required=True, help="tag file of the broadband run")
    cal.add_argument("--reference", required=True, help="two-column input spectrum of broadband run")
    cal.add_argument("--total-h", required=True, type=float, help="total heralding efficiency H")
    cal.add_argument("--reference-lambda", type=float, default=830.0)
    cal.add_argument("--lambda0", type=float, default=830.0)
    cal.add_argument("--degree", type=int, default=1, choices=(1, 2))
    cal.add_argument("--bin", type=int, default=32, help="histogram bin width (ps)")
    cal.add_argument("--out", required=True, help="output calibration file")
    cal.set_defaults(func=cmd_calibrate)

    rec = sub.add_parser("reconstruct", help="turn a tag file into spectrum/JSI tables")
    rec.add_argument("tagfile")
    rec.add_argument("--calibration", required=True, help="calibration file (signal channel)")
    rec.add_argument("--idler-calibration", help="calibration file for the idler channel")
    rec.add_argument("--mode", choices=("spectrum", "jsi"), default="spectrum")
    rec.add_argument("--bin", type=int, default=32, help="histogram bin width (ps)")
    rec.add_argument("--idler-bin", type=int, help="idler bin width for jsi mode (ps)")
    rec.add_argument("--chunks", type=int, default=1, help="parallel accumulation chunks")
    rec.add_argument("--format", choices=("csv", "json"), default="csv")
    rec.add_argument("--fit-fringes", action="store_true")
    rec.add_argument("--fringe-delay", type=float, help="two-pulse delay (ps) fixing the period")
    rec.add_argument("--plot", action="store_true", help="render figures next to the tables")
    rec.add_argument("--out", required=True, help="output path prefix")
    rec.set_defaults(func=cmd_reconstruct)

    ana = sub.add_parser("analyze", help="summarize a tag file")
    ana.add_argument("tagfile")
    ana.add_argument("--format", choices=("text", "json"), default="text")
    ana.add_argument("--bin", type=int, default=32)
    ana.add_argument("--plot", action="store_true")
    ana.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, CalibrationError, FitError, AnalysisError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
