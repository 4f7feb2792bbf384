"""Exception types shared across the toolkit."""


class VamodError(Exception):
    """Base class for all toolkit errors."""


class DomainError(VamodError):
    """An argument is outside its valid domain."""


class ShapeError(VamodError):
    """Array shapes are inconsistent with the operation's contract."""


class NumericsError(VamodError):
    """A computation produced non-finite values."""


class FormatError(VamodError):
    """Unsupported file encoding or container."""


class ChannelCountError(FormatError):
    """Audio file is not mono."""


class CorruptFileError(VamodError):
    """File is truncated or structurally inconsistent."""


class IoError(VamodError):
    """Filesystem read/write failure."""


class SteadyStateError(VamodError):
    """Device output never settled to a periodic steady state."""


class SilentTargetError(VamodError):
    """Target signal has zero energy; error-to-signal ratio is undefined."""


class DatasetError(VamodError):
    """Dataset is empty or internally inconsistent."""


class ConfigError(VamodError):
    """Invalid model or run configuration."""


class ModelFileError(VamodError):
    """Model file is malformed."""


class LeakageError(VamodError):
    """Test material overlaps the training set."""
