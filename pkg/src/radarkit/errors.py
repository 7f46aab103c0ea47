"""Exception hierarchy shared across the toolkit.

Exit codes used by the CLI: 0 ok, 2 config error, 3 data/format error,
4 runtime error.
"""


class RadarkitError(Exception):
    """Base class; carries the CLI exit code and a short category tag."""

    exit_code = 4
    category = "runtime"


class ConfigError(RadarkitError):
    """Invalid configuration value or combination."""

    exit_code = 2
    category = "config"


class DataFormatError(RadarkitError):
    """Corrupt, truncated, or malformed data file."""

    exit_code = 3
    category = "data"


class ShapeError(RadarkitError):
    """Tensor shape mismatch or invalid extent."""

    exit_code = 4
    category = "shape"


class UsageError(RadarkitError):
    """API misuse, e.g. backward on a spent tape."""

    exit_code = 4
    category = "usage"
