"""Exception taxonomy shared across the package."""


class OrientError(Exception):
    """Base class for all package-specific errors."""


class DegenerateQuaternion(OrientError):
    """Raised when a quaternion with (near-)zero norm cannot be canonicalized."""


class InvalidConfig(OrientError):
    """Raised for out-of-range or structurally invalid configuration values."""


class CameraInsideScene(OrientError):
    """Raised when a camera would be placed inside the unit scene sphere."""


class ShapeMismatch(OrientError):
    """Raised when tensor shapes are incompatible for an operation."""


class InvalidBackward(OrientError):
    """Raised for a non-scalar loss or a second backward pass on the same tape."""


class InvalidTimestep(OrientError):
    """Raised when a diffusion timestep falls outside [1, T]."""


class InvalidStep(OrientError):
    """Raised when a solver step does not move backward in time."""


class MissingModel(OrientError):
    """Raised when a required trained checkpoint is absent."""


class InvalidInput(OrientError):
    """Raised when a metric receives an empty or malformed input set."""


class IoError(OrientError):
    """Raised for unreadable/unwritable paths and missing run artifacts."""
