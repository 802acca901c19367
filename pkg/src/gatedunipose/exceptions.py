"""Exception hierarchy shared by every subpackage."""


class GatedUniPoseError(Exception):
    pass


class ShapeError(GatedUniPoseError, ValueError):
    """Operand extents do not agree with what the operation needs."""


class InvalidSpecError(GatedUniPoseError, ValueError):
    """A layer or kernel specification is internally inconsistent."""


class StateError(GatedUniPoseError, RuntimeError):
    """Operation called in the wrong lifecycle state (e.g. merging twice)."""


class ConfigError(GatedUniPoseError, ValueError):
    """Configuration value rejected; ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class CheckpointError(GatedUniPoseError, ValueError):
    pass


class AnnotationError(GatedUniPoseError, ValueError):
    pass


class UsageError(GatedUniPoseError, RuntimeError):
    pass


class UndefinedOKSError(GatedUniPoseError, ValueError):
    pass
