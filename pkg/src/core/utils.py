"""
Utility functions and error types shared across the S2AP pipeline.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, TypeVar, Union

# Configure logging
logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class S2APError(Exception):
    """Base exception for errors raised by the S2AP pipeline."""

    code = "s2ap_error"

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        self.message = message
        self.details = details or {}
        super().__init__(self.message)

    def to_dict(self) -> Dict[str, Any]:
        """Machine-readable form of the error."""
        return {"code": self.code, "message": self.message, "details": self.details}


class InvalidInputError(S2APError, ValueError):
    """Raised when an operation receives arguments violating its preconditions."""

    code = "invalid_input"


class SingularFitError(S2APError):
    """Raised when a landmark configuration cannot determine a similarity transform."""

    code = "singular_fit"


class OutOfBoundsError(S2APError):
    """Raised when a box lies entirely outside the image."""

    code = "out_of_bounds"


class TrainingDivergedError(S2APError):
    """Raised when the training loss becomes non-finite."""

    code = "training_diverged"


class NotAchievableError(S2APError):
    """Raised when no swept threshold reaches the requested recall."""

    code = "not_achievable"

    def __init__(self, message: str, best_point: Any = None):
        self.best_point = best_point
        details = {"best_point": best_point.to_dict()} if best_point is not None else {}
        super().__init__(message, details)


class GenerationError(S2APError):
    """Raised when synthetic scene generation cannot place the requested faces."""

    code = "generation_failed"


def ordered_map(func: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """
    Apply func to every item, optionally on a thread pool.

    Results are always returned in input order, so the output does not depend
    on the worker count.

    Args:
        func: Function applied to each item
        items: Items to process
        workers: Number of threads; 1 or fewer runs serially

    Returns:
        List of results in the order of items
    """
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    logger.debug(f"Mapping {len(items)} items over {workers} workers")
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, items))


def chunk_bounds(total: int, parts: int) -> Iterable[range]:
    """Split range(total) into at most `parts` contiguous, non-empty ranges."""
    parts = max(1, min(parts, total))
    step, extra = divmod(total, parts)
    start = 0
    for i in range(parts):
        stop = start + step + (1 if i < extra else 0)
        if stop > start:
            yield range(start, stop)
        start = stop


def format_response(
    success: bool,
    data: Optional[Union[Dict[str, Any], List[Any]]] = None,
    error: Optional[str] = None,
    code: Optional[str] = None,
    details: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Format a standardized response.

    Args:
        success: Whether the operation was successful
        data: Response data
        error: Error message if not successful
        code: Machine-readable error code
        details: Extra error context

    Returns:
        Formatted response dictionary
    """
    response: Dict[str, Any] = {"success": success}

    if data is not None:
        response["data"] = data

    if error:
        response["error"] = error
        response["code"] = code or S2APError.code
        if details:
            response["details"] = details

    return response


def error_response(exc: S2APError) -> Dict[str, Any]:
    """Wrap an S2APError in the standard response envelope."""
    return format_response(False, error=exc.message, code=exc.code, details=exc.details)
