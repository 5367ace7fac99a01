"""Exception hierarchy for the rcmact package."""


class RcmactError(Exception):
    """Base class for all package errors."""


# geometry

class ZeroAxisError(RcmactError):
    """Rotation axis has (near-)zero length."""


# calibration

class DegenerateTriadError(RcmactError):
    """Fiducial triad is collinear or has coincident points."""


class ReflectionRequiredError(RcmactError):
    """Best-fit orthogonal alignment is a reflection; correspondences are corrupt."""


class AlreadyCalibratedError(RcmactError):
    """Episode is already flagged as realigned to the global frame."""


# simulator / expert

class InvalidConfigError(RcmactError):
    """World configuration violates its invariants."""


class BehindCameraError(RcmactError):
    """A landmark fell on or behind a camera's image plane."""


class UnreachableLayoutError(RcmactError):
    """Ring layout cannot be served by waypoints inside the workspace."""


class ExpertFailureError(RcmactError):
    """Scripted expert rollout did not end in task success."""


# dataset / model files

class CorruptHeaderError(RcmactError):
    """File does not start with the expected magic bytes or has a bad header."""


class FormatVersionMismatchError(RcmactError):
    """File format version is not supported."""


class TruncatedPayloadError(RcmactError):
    """File ends before the declared payload is complete."""


class EmptyDatasetError(RcmactError):
    """Operation requires at least one episode."""


class UncalibratedEpisodeError(RcmactError):
    """Raw local-frame episode where a calibrated one is required."""


# policy

class ShapeMismatchError(RcmactError):
    """Array shape is inconsistent with the policy configuration."""


class NonFiniteLossError(RcmactError):
    """Training loss became NaN or infinite."""


# inference / evaluation

class EmptyBufferError(RcmactError):
    """No buffered predictions exist for the requested timestep."""


class EmptyTrajectoryError(RcmactError):
    """Trajectory metric called with an empty trajectory."""


# configuration files

class UnknownKeyError(RcmactError):
    """Configuration file contains a key that is not recognised."""
