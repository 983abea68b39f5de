"""Core module - configuration, logger, error hierarchy and random streams."""

from app.core.config import Settings, get_settings, reload_settings
from app.core.exceptions import NumericalError, PreconditionError, SelektorError
from app.core.logger import get_module_logger, init_logger, logger
from app.core.rng import derive_rng

__all__ = [
    "Settings", "get_settings", "reload_settings",
    "SelektorError", "PreconditionError", "NumericalError",
    "init_logger", "logger", "get_module_logger",
    "derive_rng",
]
