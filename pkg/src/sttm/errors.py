"""Exception types shared across the package."""


class SttmError(Exception):
    """Base class for all package errors."""


class ShapeError(SttmError, ValueError):
    pass


class NumericError(SttmError, FloatingPointError):
    pass


class ContractError(SttmError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(SttmError, ValueError):
    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class DomainError(SttmError, ValueError):
    pass


class ParseError(SttmError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CompatibilityError(SttmError, ValueError):
    """Artifacts built from incompatible inputs were combined."""


class TrainingAborted(SttmError, RuntimeError):
    def __init__(self, message, step=None, batch_hash=None):
        self.step = step
        self.batch_hash = batch_hash
        super().__init__(f"{message} (step={step}, batch={batch_hash})")
