"""
Global Error Handler
Maps exceptions to exit codes and a JSON error payload on stderr.

Exit codes:
    0  success
    1  usage, config or path error
    2  runtime numeric failure (non-finite values, diverged training, undefined metric)
"""

import json
import logging
import sys
import traceback
from typing import Callable

from engine.errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    LoadError,
    MetricError,
    MorphGuardError,
    NumericError,
    TrainingError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

RUNTIME_ERRORS = (NumericError, TrainingError, MetricError)
USAGE_ERRORS = (ConfigError, LoadError, FormatError, ContractError, DimensionError, FileNotFoundError)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, RUNTIME_ERRORS):
        return EXIT_RUNTIME
    if isinstance(exc, USAGE_ERRORS):
        return EXIT_USAGE
    if isinstance(exc, (FloatingPointError, ArithmeticError)):
        return EXIT_RUNTIME
    return EXIT_USAGE


def error_payload(exc: BaseException) -> dict:
    if isinstance(exc, MorphGuardError):
        error = exc.to_dict()
    elif isinstance(exc, FileNotFoundError):
        error = {"code": "LOAD_ERROR", "message": str(exc)}
    else:
        error = {"code": "INTERNAL_ERROR", "message": f"{type(exc).__name__}: {exc}"}
    return {"error": error, "exit_code": exit_code_for(exc)}


def report_error(exc: BaseException) -> int:
    payload = error_payload(exc)
    if payload["error"]["code"] == "INTERNAL_ERROR":
        logger.debug(traceback.format_exc())
    logger.error(f"{payload['error']['code']}: {payload['error']['message']}")
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return payload["exit_code"]


def run_guarded(command: Callable[[], None]) -> int:
    """Run a command, converting any failure into an exit code."""
    try:
        command()
    except Exception as exc:  # every failure leaves through the payload
        return report_error(exc)
    return EXIT_OK
