"""Exception and warning types raised by the mmgfrog package."""


class MMGFrogError(Exception):
    """Base class for all package errors."""


class GridError(MMGFrogError, ValueError):
    """Invalid grid parameters or a delay that is not commensurate with dt."""


class GridMismatchError(GridError):
    """Two objects that must share a sampling grid do not."""


class UnderResolvedError(GridError):
    """A mode or pulse is too short to be resolved by the time step."""


class StateError(MMGFrogError, ValueError):
    """Invalid Gaussian state description."""


class GateError(MMGFrogError, ValueError):
    """Invalid gate pulse."""


class UndefinedLossError(MMGFrogError, ValueError):
    """The measured spectrogram is identically zero under the mask."""


class EmptyMaskError(MMGFrogError, ValueError):
    """A zeroing mask selected no pixels."""


class ConfigError(MMGFrogError, ValueError):
    """Run configuration failed validation.

    Attributes:
        pointer: JSON pointer to the offending value (e.g. "/state/modes/0/var_x")
    """

    def __init__(self, pointer: str, message: str):
        self.pointer = pointer or "/"
        super().__init__(f"{self.pointer}: {message}")


class SpectrogramFormatError(MMGFrogError, ValueError):
    """A spectrogram or result file could not be parsed."""


class NonFiniteGradientError(MMGFrogError, RuntimeError):
    """The mode gradient contains NaN or infinite values."""


class WrapAroundWarning(UserWarning):
    """A circular delay shift wrapped significant energy across the grid edge."""


class ReseedWarning(UserWarning):
    """Gram-Schmidt found a dependent mode and reseeded it."""


class LossTrendWarning(UserWarning):
    """The retrieval loss rose over a trend window."""


class LowGainWarning(UserWarning):
    """Peak gain is too low for the high-gain approximation."""
