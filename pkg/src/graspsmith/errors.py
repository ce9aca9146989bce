"""Exception types shared across the toolkit."""


class GraspsmithError(Exception):
    """Base class for all toolkit errors."""


class InvalidPose(GraspsmithError):
    """Grasp vector does not match the hand model (wrong dimension,
    non-finite values, or out-of-limit joints under strict validation)."""


class EmptyInput(GraspsmithError):
    """An operation that requires a nonempty point set received an empty one."""


class NormalsRequired(GraspsmithError):
    """Wrench construction needs surface normals and none were available."""


class InsufficientSamples(GraspsmithError):
    """Batch statistic requested on fewer samples than it is defined for."""


class GrammarError(GraspsmithError):
    """Token sequence violates the contact/action grammar where a valid
    fragment was required (encode/decode paths, not validation)."""


class UnknownLink(GraspsmithError):
    """A link name has no registered token or does not exist in the hand."""


class InvalidSteering(GraspsmithError):
    """Steering prefix asked for more contacts than the partial set holds."""


class LayoutError(GraspsmithError):
    """Segment layout spans overlap, are out of order, or are malformed."""


class InsufficientPoints(GraspsmithError):
    """Point cloud has fewer points than the encoder needs centroids."""


class TruncationError(GraspsmithError):
    """A training sequence exceeds the model's maximum length."""


class OracleFailure(GraspsmithError):
    """The synthetic grasp oracle could not produce a valid grasp."""


class CheckpointError(GraspsmithError):
    """Checkpoint file is malformed or inconsistent with the model config
    or codec vocabulary."""


class ConfigError(GraspsmithError):
    """Run configuration file or override could not be parsed."""
