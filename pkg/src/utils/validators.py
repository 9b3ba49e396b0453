"""
Validators Module

Contains validation functions for run parameters. Each validator returns
an error message when the value is invalid and None when it is valid.
"""

import math
from typing import Iterable, Optional

AP_MODES = ("voc07", "all-points")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def validate_unit_interval(name: str, value: float) -> Optional[str]:
    """
    Validate that a value lies in [0, 1]

    Args:
        name: Parameter name used in the message
        value: The value to validate

    Returns:
        Error message if invalid, None if valid
    """
    if not isinstance(value, (int, float)) or not math.isfinite(value) or not (0.0 <= value <= 1.0):
        return f"{name} must lie in [0, 1], got {value!r}"
    return None


def validate_half_open_unit(name: str, value: float) -> Optional[str]:
    """Validate that a value lies in [0, 1)"""
    if not isinstance(value, (int, float)) or not math.isfinite(value) or not (0.0 <= value < 1.0):
        return f"{name} must lie in [0, 1), got {value!r}"
    return None


def validate_positive(name: str, value: float) -> Optional[str]:
    if not isinstance(value, (int, float)) or not math.isfinite(value) or value <= 0:
        return f"{name} must be a finite value > 0, got {value!r}"
    return None


def validate_non_negative(name: str, value: float) -> Optional[str]:
    if not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
        return f"{name} must be a finite value >= 0, got {value!r}"
    return None


def validate_count(name: str, value: int, minimum: int = 1) -> Optional[str]:
    """
    Validate an integer count

    Args:
        name: Parameter name used in the message
        value: The count to validate
        minimum: Smallest accepted value

    Returns:
        Error message if invalid, None if valid
    """
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        return f"{name} must be an integer >= {minimum}, got {value!r}"
    return None


def validate_range(name: str, low: float, high: float) -> Optional[str]:
    """Validate a non-empty (low <= high) numeric range"""
    if not (math.isfinite(low) and math.isfinite(high)) or low > high:
        return f"{name} must be a non-empty range, got [{low}, {high}]"
    return None


def validate_grid(name: str, values: Iterable[float], positive: bool = False) -> Optional[str]:
    """Validate a non-empty list of finite, non-negative (or positive) numbers"""
    values = list(values)
    if not values:
        return f"{name} must not be empty"
    for value in values:
        error = validate_positive(name, value) if positive else validate_non_negative(name, value)
        if error:
            return error
    return None


def validate_ap_mode(mode: str) -> Optional[str]:
    if mode not in AP_MODES:
        return f"ap_mode must be one of {', '.join(AP_MODES)}, got {mode!r}"
    return None


def validate_log_level(level: str) -> Optional[str]:
    if str(level).upper() not in LOG_LEVELS:
        return f"log level must be one of {', '.join(LOG_LEVELS)}, got {level!r}"
    return None
