"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class carries the code it
should produce.
"""


class AVFusionError(Exception):
    exit_code = 1


class ValidationError(AVFusionError):
    exit_code = 2


class ShapeMismatch(AVFusionError, ValueError):
    exit_code = 4


class RankError(ShapeMismatch):
    pass


class AxisOutOfRange(ShapeMismatch):
    pass


class NonFiniteInput(ValidationError, ValueError):
    pass


class BackwardBeforeForward(AVFusionError, RuntimeError):
    pass


class InvalidConfig(ValidationError, ValueError):
    pass


class InvalidSpec(ValidationError, ValueError):
    pass


class InvalidFraction(ValidationError, ValueError):
    pass


class LabelOutOfRange(ValidationError, ValueError):
    pass


class EmptyEvaluationSet(ValidationError, ValueError):
    pass


class MIsZero(ValidationError, ValueError):
    """Raised when an evaluation set contains no positive labels at all."""


class CorruptFile(AVFusionError, OSError):
    exit_code = 3


class VersionMismatch(CorruptFile):
    pass
