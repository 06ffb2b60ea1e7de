"""Exception and warning types shared across the package."""
from __future__ import annotations


class SplatAlignError(Exception):
    """Base class for all library errors."""


class AllOpacitiesZeroError(SplatAlignError):
    """Weight normalization is undefined when every opacity is zero."""


class NotSymmetricError(SplatAlignError):
    """A matrix expected to be symmetric exceeds the asymmetry tolerance."""


class DimensionMismatchError(SplatAlignError):
    """Operand shapes are incompatible."""


class LengthMismatchError(SplatAlignError):
    """Paired sequences differ in length."""


class TooLargeError(SplatAlignError):
    """Instance exceeds the size regime the exact oracle supports."""


class BehindCameraError(SplatAlignError):
    """Gaussian center is behind the camera near plane."""


class MissingCamerasError(SplatAlignError):
    """Rendering losses were requested without any camera."""


class EmptyMaskError(SplatAlignError):
    """A rendered valid-depth mask covers too few pixels."""


class DivergedError(SplatAlignError):
    """Optimization loss exploded past the divergence guard."""


class ParseError(SplatAlignError):
    """Malformed input file; message carries line/record context."""


class UnsupportedLayoutError(ParseError):
    """PLY header misses required splat properties (listed in message)."""

    def __init__(self, missing: list[str]):
        super().__init__(f"unsupported PLY layout, missing properties: {', '.join(missing)}")
        self.missing = list(missing)


class SchemaError(SplatAlignError):
    """Manifest/report JSON violates the schema; message carries a JSON pointer."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer}: {message}")
        self.pointer = pointer


class NotConvergedWarning(UserWarning):
    """Sinkhorn hit the iteration cap before the marginal tolerance."""


class EmptyIntersectionWarning(UserWarning):
    """Depth loss evaluated on an empty mask intersection (returned 0)."""
