"""Exception hierarchy shared by the whole package."""


class HcnError(Exception):
    """Base class for package-specific failures."""


class ShapeError(HcnError, ValueError):
    """Tensor shapes are inconsistent; message names the offending axis."""


class NonFiniteError(HcnError, ValueError):
    """A tensor contains NaN or Inf where finite values are required."""


class DataError(HcnError, ValueError):
    """A dataset record violates the on-disk or in-memory contract."""


class ConfigError(HcnError, ValueError):
    """A run configuration is malformed or internally inconsistent."""


class CheckpointError(HcnError, ValueError):
    """A checkpoint file cannot be read back."""


class TrainingDiverged(HcnError, RuntimeError):
    """Training hit non-finite values; the last good checkpoint was kept."""
