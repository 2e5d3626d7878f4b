"""Exception types shared across the package.

The CLI maps these onto process exit codes (2 for configuration problems,
3 for bad data), so library code raises them instead of exiting.
"""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class DataError(ValueError):
    """Input data violates a contract (non-finite values, out of range...)."""


class VolumeFormatError(DataError):
    """File does not look like an ``.octav`` volume."""


class TruncationError(DataError):
    """Payload length disagrees with the header dimensions."""


class ShapeError(ValueError):
    """Array shapes do not agree."""


class CapacityError(ValueError):
    """Requested corruption blocks cannot be placed disjointly."""


class TrainingDivergedError(RuntimeError):
    """A loss component became non-finite during training."""

    def __init__(self, step, component, value):
        self.step = step
        self.component = component
        self.value = value
        super().__init__(f"non-finite loss at step {step}: {component}={value!r}")
