"""Exception types shared across the package."""


class DemoRLError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(DemoRLError, ValueError):
    """Invalid configuration or incompatible shapes."""


class UsageError(DemoRLError, RuntimeError):
    """An API was called out of order or with an invalid argument."""


class TrainingError(DemoRLError, ArithmeticError):
    """Non-finite values appeared during optimization."""


class DemonstratorError(DemoRLError):
    """The scripted demonstrator could not reach the goal."""


class CheckpointError(DemoRLError, IOError):
    """A checkpoint is missing, truncated or inconsistent with its manifest."""
