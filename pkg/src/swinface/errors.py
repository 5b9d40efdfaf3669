"""Exception types raised across the package."""


class SwinFaceError(Exception):
    pass


class ConfigError(SwinFaceError, ValueError):
    pass


class ShapeError(SwinFaceError, ValueError):
    pass


class RegistryError(SwinFaceError, KeyError):
    def __str__(self):  # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class AllocationError(SwinFaceError, ValueError):
    pass


class SamplingError(SwinFaceError, ValueError):
    pass


class ContractError(SwinFaceError, ValueError):
    pass


class ManifestError(SwinFaceError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class AlignmentError(SwinFaceError, ValueError):
    pass


class CompositionError(SwinFaceError, ValueError):
    pass


class ProtocolError(SwinFaceError, ValueError):
    pass


class NonFiniteLossError(SwinFaceError, FloatingPointError):
    def __init__(self, task, value):
        super().__init__(f"non-finite loss for task {task!r}: {value}")
        self.task = task
