"""Exception types raised across the package.

Every error is a subclass of :class:`UGformerError` so callers can catch the
whole family; the CLI maps subfamilies onto exit codes.
"""


class UGformerError(Exception):
    """Base class for all package-specific errors."""


# --- network blocks ---------------------------------------------------------

class OddSpatialDim(UGformerError):
    """Spatial dims must be even before a stride-2 block."""


class NonFiniteInput(UGformerError):
    """NaN or Inf found where only finite values are allowed."""


class HeadMismatch(UGformerError):
    """Channel count incompatible with the attention head layout."""


class ShapeMismatch(UGformerError):
    """Operand shapes are inconsistent."""


class SkipShapeMismatch(UGformerError):
    """Skip feature map does not match the decoder stage contract."""


class BadSpatialDivisibility(UGformerError):
    """Input height/width not divisible by the model's total stride."""


class NegativeAdjacency(UGformerError):
    """Adjacency matrix entries must be non-negative."""


# --- pipeline ---------------------------------------------------------------

class AllBlackImage(UGformerError):
    """Every pixel fell below the margin-crop threshold."""


class ZeroTargetSize(UGformerError):
    """Resize target must have positive extent."""


class EmptyMask(UGformerError):
    """Mask has no foreground pixel where one is required."""


class RoiOutOfBounds(UGformerError):
    """ROI rectangle exceeds the image bounds."""


class PatchRoiMismatch(UGformerError):
    """Patch dimensions do not equal the ROI dimensions."""


# --- training ---------------------------------------------------------------

class EmptyDataset(UGformerError):
    """Training or validation set is empty."""


class NonFiniteGradient(UGformerError):
    """Gradient check found a NaN/Inf gradient."""


# --- serialization / datasets ----------------------------------------------

class BadMagic(UGformerError):
    """Tensor file does not start with the expected magic bytes."""


class TruncatedFile(UGformerError):
    """Tensor file ended before the declared payload."""


class UnknownDtype(UGformerError):
    """Tensor file declares an unsupported dtype code."""


class MissingFile(UGformerError):
    """A manifest entry points at a file that does not exist."""


class BadSplit(UGformerError):
    """Manifest split labels are invalid or splits overlap."""


class SpecOutOfBounds(UGformerError):
    """Phantom geometry violates the canvas margin constraints."""


# --- CLI --------------------------------------------------------------------

class UsageError(UGformerError):
    """Bad command line (unknown flag or subcommand)."""


class ConfigError(UGformerError):
    """Config file is malformed or contains unknown keys."""
