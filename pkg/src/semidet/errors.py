"""Exception taxonomy shared by the library and the CLI exit-code mapping."""


class SemidetError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(SemidetError):
    """Invalid configuration: bad key, bad value, violated precondition."""


class DataError(SemidetError):
    """Broken dataset artifact: malformed file, missing image, bad record."""


class NumericError(SemidetError):
    """Numerical failure during training (non-finite loss or parameters)."""
