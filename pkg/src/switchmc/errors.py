"""Exception types shared across the package."""


class SwitchMCError(Exception):
    """Base class for all package errors."""


class NumericalOverflow(SwitchMCError):
    """A state update produced a non-finite value."""

    def __init__(self, message, step=None, paths=None):
        super().__init__(message)
        self.step = step
        self.paths = paths


class SingularInverse(SwitchMCError):
    """The one-step map cannot be inverted (e.g. mean reversion too strong for the step)."""


class UnsupportedSpec(SwitchMCError):
    """The diffusion spec does not support the requested operation."""


class InvalidPartition(SwitchMCError):
    """Partition request cannot be satisfied (e.g. more cells than points)."""


class InvalidCosts(SwitchMCError):
    """Switching cost structure violates the problem contract."""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class TerminalValueError(SwitchMCError):
    """Terminal value function returned non-finite values."""


class UnsupportedProblem(SwitchMCError):
    """Problem lacks declarations required by the requested fast path."""


class InstanceTooLarge(SwitchMCError):
    """Brute-force oracle invoked outside its tiny-instance envelope."""


class DegenerateKnit(SwitchMCError):
    """Knitting endpoints do not define an increasing hyperbolic segment."""


class ConfigError(SwitchMCError):
    """Invalid or unknown configuration entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
