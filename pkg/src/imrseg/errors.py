class IMRSegError(Exception):
    """Base class for package errors."""


class ShapeError(IMRSegError, ValueError):
    pass


class ConfigError(IMRSegError, ValueError):
    pass


class DomainError(IMRSegError, ValueError):
    pass


class UnknownClassError(IMRSegError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown class"


class CapabilityError(IMRSegError, TypeError):
    pass


class DatasetLoadError(IMRSegError, ValueError):
    pass


class SamplingError(IMRSegError, ValueError):
    pass


class TrainingError(IMRSegError, RuntimeError):
    pass


class TensorFormatError(IMRSegError, ValueError):
    pass
