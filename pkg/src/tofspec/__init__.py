"""tofspec: time-of-flight single-photon spectrometer simulation and analysis.

The toolkit simulates clock-referenced photon time-tag streams from
configurable spectral sources and dispersive-channel models, then calibrates
and reconstructs single-photon spectra and two-photon joint spectral
intensities from those streams.
"""

__version__ = "0.1.0"

from .calibrate import (
    CalibrationResult,
    DelayPoint,
    GddFit,
    estimate_efficiency,
    find_offset,
    fit_gdd,
    load_calibration,
    save_calibration,
)
from .errors import AnalysisError, CalibrationError, ConfigError, FitError, FormatError
from .instrument import (
    FAST_DETECTOR,
    SLOW_DETECTOR,
    DetectorPreset,
    EfficiencyCurve,
    InstrumentConfig,
    invert_time_to_wavelength,
    list_presets,
    load_preset,
    map_wavelength_to_time,
    resolution,
    simulate_pair_run,
    simulate_run,
)
from .reconstruct import (
    FringeFit,
    JsiGrid,
    ReconstructedSpectrum,
    fit_fringes,
    fringe_contrast_factor,
    measure_fwhm,
    reconstruct_jsi,
    reconstruct_spectrum,
)
from .sources import (
    C_NM_PER_PS,
    DoublePulse,
    FringeParams,
    GaussianLine,
    PairGaussian,
    Tabulated,
    eval_density,
    fringe_period,
    load_tabulated,
    sample_pair,
    sample_wavelength,
)
from .timetag import (
    Histogram,
    JointHistogram,
    TagStream,
    TimeTag,
    build_histogram,
    build_histogram_chunked,
    build_joint_histogram,
    coincidence_pairs,
    merge_histograms,
    quantize_timestamps,
    read_tags,
    write_tags,
)

__all__ = [name for name in dir() if not name.startswith("_")]
