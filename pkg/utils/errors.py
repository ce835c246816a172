from typing import Any, Dict, Optional

from models.schemas import ErrorType


class VarinvError(Exception):
    error_type = ErrorType.GENERAL_ERROR

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.details = details or {}


class ConfigError(VarinvError):
    error_type = ErrorType.CONFIG_ERROR


class DimensionError(VarinvError):
    error_type = ErrorType.DIMENSION_ERROR


class JetError(VarinvError):
    error_type = ErrorType.JET_ERROR


class CharacterError(VarinvError):
    error_type = ErrorType.CHARACTER_ERROR


class SupportError(VarinvError):
    error_type = ErrorType.SUPPORT_ERROR


class EnergyDomainError(VarinvError):
    error_type = ErrorType.ENERGY_DOMAIN_ERROR


class QuadratureError(VarinvError):
    error_type = ErrorType.QUADRATURE_ERROR


class RangeEscapeError(VarinvError):
    error_type = ErrorType.RANGE_ESCAPE


class HessianUnavailableError(VarinvError):
    error_type = ErrorType.HESSIAN_UNAVAILABLE
