"""Attend-Fusion and FC late-fusion audio-visual classifiers with hand-derived gradients."""

from avfusion.errors import (
    AVFusionError,
    AxisOutOfRange,
    BackwardBeforeForward,
    CorruptFile,
    EmptyEvaluationSet,
    InvalidConfig,
    InvalidFraction,
    InvalidSpec,
    LabelOutOfRange,
    MIsZero,
    NonFiniteInput,
    RankError,
    ShapeMismatch,
    VersionMismatch,
)

__version__ = "0.1.0"

__all__ = [
    "AVFusionError",
    "AxisOutOfRange",
    "BackwardBeforeForward",
    "CorruptFile",
    "EmptyEvaluationSet",
    "InvalidConfig",
    "InvalidFraction",
    "InvalidSpec",
    "LabelOutOfRange",
    "MIsZero",
    "NonFiniteInput",
    "RankError",
    "ShapeMismatch",
    "VersionMismatch",
]
