from __future__ import annotations

import inspect
from functools import wraps
from typing import TYPE_CHECKING, Any, Callable

import numpy as np

from satrestore.errors import NumericalError

if TYPE_CHECKING:
    from numpy.typing import NDArray


def _validate_solver_signature(function: Callable[..., tuple[Any, Any]]) -> None:
    """
    Validate the signature of a solver function.

    The first parameter must be 'y', the measurement. The last parameter must be 'return_report' with type 'bool'.

    Parameters
    ----------
    function : Callable
        The solver function to validate.

    Raises
    ------
    ValueError
        If the signature of the solver function is invalid.
    """

    signature = inspect.signature(function)
    first_parameter, *_, last_parameter = signature.parameters

    if first_parameter != "y":
        raise ValueError("The first parameter of a solver function must be 'y'.")

    if last_parameter != "return_report":
        raise ValueError("The last parameter of a solver function must be 'return_report'.")

    if signature.parameters["return_report"].annotation != "bool":
        raise ValueError(
            f"The last parameter of a solver function must have type 'bool', "
            f"got '{signature.parameters['return_report'].annotation}'"
        )


def solver(function: Callable[..., tuple[Any, Any]]) -> Callable:
    """
    Decorator for solver functions.

    Solver functions return their estimate together with a report of the run. The decorated function returns the
    estimate alone, or the pair when called with ``return_report=True``.

    Parameters
    ----------
    function : Callable
        The solver function.

    Returns
    -------
    Callable
        The solver function.
    """
    _validate_solver_signature(function)

    @wraps(function)
    def solver_wrapper(y: Any, *args: Any, return_report: bool = False, **kwargs: Any) -> Any:
        result, report = function(y, *args, return_report=return_report, **kwargs)

        if return_report:
            return result, report

        return result

    return solver_wrapper


def ensure_finite(x: NDArray[np.float64], what: str) -> NDArray[np.float64]:
    """Return `x`, or raise a `NumericalError` if it holds NaN or infinite values."""
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"The {what} contains NaN or infinite values.")
    return x
