"""Exception types shared across the package."""


class InvalidQuery(ValueError):
    """A circuit query leaves some variable neither assigned nor marginalized."""


class ZeroEvidence(ArithmeticError):
    """The circuit assigns (numerically) zero mass to the conditioning event."""


class EmptyData(ValueError):
    """An operation that needs data rows received none."""


class DegenerateLikelihood(ArithmeticError):
    """A training row has numerically zero likelihood under the current circuit."""


class LengthMismatch(ValueError):
    """Two sequences that must have equal length do not."""


class DimensionMismatch(ValueError):
    """An input vector does not match the expected dimensionality."""


class SearchExhausted(RuntimeError):
    """Randomized search gave up after the configured number of retries."""


class SpaceTooLarge(ValueError):
    """The attribute space exceeds the configured enumeration cap."""


class ZeroPartition(ArithmeticError):
    """The class-wise partition function is numerically zero."""


class ZeroMass(ArithmeticError):
    """A neighborhood carries numerically zero probability mass."""


class MissingArtifacts(FileNotFoundError):
    """A pipeline stage requires artifacts that are not present."""
