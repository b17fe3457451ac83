"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1,
numerical failures exit 2, I/O problems exit 3.
"""


class PfsplitError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(PfsplitError):
    """Invalid configuration: bad config file, unknown preset, bad CLI flags."""


class NumericError(PfsplitError):
    """A numerical computation failed: divergence, non-finite states,
    an unresolvable reference solve, or degenerate estimator input."""
