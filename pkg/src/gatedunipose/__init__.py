"""GatedUniPose: a numpy pose-estimation network with verifiable building blocks."""
from .exceptions import (
    AnnotationError,
    CheckpointError,
    ConfigError,
    GatedUniPoseError,
    InvalidSpecError,
    ShapeError,
    StateError,
    UndefinedOKSError,
    UsageError,
)
from .model import (
    GatedUniPoseModel,
    ModelConfig,
    build_model,
    load_checkpoint,
    parameter_breakdown,
    save_checkpoint,
    switch_to_deploy,
)
from .tensor import Tensor, get_precision, precision, set_precision

__version__ = "0.1.0"
