"""Exception types shared across the package."""


class PruneKitError(Exception):
    """Base class for all prunekit errors."""


class ManifestError(PruneKitError):
    """Model directory is malformed: bad manifest, bad blob, checksum mismatch."""


class GraphValidationError(PruneKitError):
    """A model graph violates a structural invariant (shapes, cycles, arity)."""


class ConfigError(PruneKitError):
    """A criterion/regularizer/scheduler configuration is invalid for the model."""


class InfeasibleTargetError(PruneKitError):
    """The FLOPs target cannot be reached without breaching protection floors."""

    def __init__(self, message, binding_groups=()):
        super().__init__(message)
        self.binding_groups = tuple(binding_groups)


class NumericsError(PruneKitError):
    """Training or evaluation produced a non-finite value."""
