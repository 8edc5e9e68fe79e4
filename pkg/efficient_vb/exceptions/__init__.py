from pydantic import BaseModel, ValidationError


class EfficientVBError(Exception):
    """Base class of every error raised by the package."""


class ParameterDomainError(EfficientVBError, ValueError):
    """An input lies outside the domain an operation accepts."""


class CalibrationDegeneracyError(EfficientVBError):
    """The kernel at time `t` implies a precision that is not positive definite.

    Attributes:
        t: Zero-based time index of the offending kernel.
    """

    def __init__(self, t: int, message: str = ""):
        self.t = t
        super().__init__(message or f"Kernel precision is not positive definite at t={t}")


class CapabilityError(EfficientVBError):
    """The model does not provide a capability the caller needs."""


class ConfigurationError(EfficientVBError):
    """Invalid experiment configuration or incompatible method/model pair."""


class SingularCovarianceError(EfficientVBError):
    """A covariance matrix that has to be inverted is singular."""


def domain_error(error: ValidationError) -> EfficientVBError:
    """The package error behind a pydantic validation failure.

    Validators raise `ParameterDomainError`, which pydantic wraps because it is a `ValueError`.
    The first wrapped package error is returned as is; anything else (a wrong field type, a
    missing field) becomes a `ParameterDomainError` carrying pydantic's message.
    """
    for detail in error.errors():
        cause = detail.get("ctx", {}).get("error")
        if isinstance(cause, EfficientVBError):
            return cause
    return ParameterDomainError(str(error))


class DomainModel(BaseModel):
    """A pydantic model whose construction fails with the package's own errors."""

    def __init__(self, **data):
        try:
            super().__init__(**data)
        except ValidationError as error:
            raise domain_error(error) from error
