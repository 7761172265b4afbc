"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes; everything else raises them
directly.  Plain ``ValueError`` is reserved for malformed arguments to
library functions (bad shapes, out-of-range scalars).
"""


class GeowmError(Exception):
    """Base class for package-specific failures."""


class ConfigError(GeowmError):
    """Malformed or inconsistent configuration."""


class MissingInputError(GeowmError):
    """Required input file/directory absent or structurally invalid."""


class FormatError(MissingInputError):
    """An on-disk artifact does not match its documented format."""


class NumericalError(GeowmError):
    """Non-finite values or divergence in a numeric pipeline."""


class GroundingError(GeowmError):
    """Scene grounding produced no usable target or end-effector evidence."""


class BehindCameraError(GeowmError):
    """A projected point has non-positive depth in the camera frame."""
