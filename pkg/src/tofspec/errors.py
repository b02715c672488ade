"""Exception types shared across the toolkit."""


class ConfigError(ValueError):
    """Invalid configuration, preset, or parameter combination."""


class FormatError(ValueError):
    """Malformed data file: tag stream, calibration file, or table."""


class CalibrationError(RuntimeError):
    """Calibration inputs cannot support the requested estimate."""


class FitError(RuntimeError):
    """Least-squares fit failed to converge.

    ``best`` carries the best-so-far parameter object, flagged invalid.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class AnalysisError(RuntimeError):
    """Spectrum analysis precondition violated (e.g. multimodal input).

    ``crossings`` lists the offending half-maximum crossings when relevant.
    """

    def __init__(self, message, crossings=None):
        super().__init__(message)
        self.crossings = crossings
