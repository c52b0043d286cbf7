"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class RankError(ShapeError):
    """A scalar (rank-0 / single element) tensor was required."""


class SequenceTooShortError(ShapeError):
    """A sequence is shorter than the convolution window in valid mode."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


class CapacityError(ValueError):
    """A position index exceeds the capacity of a learned table."""


class ReconstructionError(ValueError):
    """Segmentation metadata does not match the chunk tensor being rebuilt."""


class WavFormatError(ValueError):
    """A WAV file could not be parsed; ``offset`` points at the bad byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the model config."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. silent reference)."""
