"""graspsmith: contact-reasoned dexterous grasp generation at desk scale.

A hand model with capsule collision geometry, geometric contact
annotation, a discrete contact+action grammar, a small numpy transformer
with a hybrid attention mask, a synthetic dataset oracle, and the
geometric evaluation metrics to close the loop.
"""

from . import codec, config, evaluation, geometry, hand, pipeline, quality, \
    reasoning, synthetic
from .errors import (CheckpointError, ConfigError, EmptyInput, GrammarError,
                     GraspsmithError, InsufficientPoints,
                     InsufficientSamples, InvalidPose, InvalidSteering,
                     LayoutError, NormalsRequired, OracleFailure,
                     TruncationError, UnknownLink)

__version__ = "0.1.0"
