"""Helpers around the standalone sandbox test runner.

The runner itself (harness.py) never imports this package: hosts copy it
into a fresh temp dir and invoke it bare as

    <interpreter> harness.py <solution-file> <tests-file>

This package exists for tooling on the host side of that boundary. It
locates the canonical script, ships the verdict-line JSON schema, and
validates parsed verdicts, including the one cross-field invariant a
schema language cannot express (tests_passed <= tests_run).
"""

import json
import os

__all__ = [
    "EXIT_INTERNAL",
    "EXIT_MEMORY",
    "EXIT_VIOLATION",
    "MODES",
    "MSG_LIMIT",
    "VerdictError",
    "harness_path",
    "load_schema",
    "parse_verdict",
    "schema_path",
    "validate_verdict",
]

_HERE = os.path.dirname(os.path.abspath(__file__))

# exit codes the script reserves for verdict-less terminations
EXIT_MEMORY = 57
EXIT_VIOLATION = 58
EXIT_INTERNAL = 59

MSG_LIMIT = 512
MODES = ("functions", "asserts", "none")

_REQUIRED = ("tests_run", "tests_passed", "failures", "mode")
_OPTIONAL = ("load_error",)
_FAILURE_KEYS = {"test_name", "message"}


def harness_path() -> str:
    """Filesystem path of the canonical runner script."""
    return os.path.join(_HERE, "harness.py")


def schema_path() -> str:
    """Filesystem path of the verdict-line JSON schema."""
    return os.path.join(_HERE, "verdict_schema.json")


def load_schema() -> dict:
    with open(schema_path(), "r", encoding="utf-8") as fh:
        return json.load(fh)


class VerdictError(ValueError):
    """A verdict line is missing, unparseable, or violates the protocol."""


def _count(obj, key):
    value = obj.get(key)
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise VerdictError(f"{key} must be a non-negative integer, got {value!r}")
    return value


def validate_verdict(obj: dict) -> dict:
    """Check one parsed verdict object; returns it unchanged on success."""
    if not isinstance(obj, dict):
        raise VerdictError(f"verdict must be an object, got {type(obj).__name__}")
    unknown = set(obj) - set(_REQUIRED) - set(_OPTIONAL)
    if unknown:
        raise VerdictError(f"unknown verdict fields: {sorted(unknown)}")
    missing = [key for key in _REQUIRED if key not in obj]
    if missing:
        raise VerdictError(f"missing verdict fields: {missing}")

    run = _count(obj, "tests_run")
    passed = _count(obj, "tests_passed")
    if passed > run:
        raise VerdictError(f"tests_passed {passed} exceeds tests_run {run}")

    if obj["mode"] not in MODES:
        raise VerdictError(f"mode must be one of {MODES}, got {obj['mode']!r}")

    failures = obj["failures"]
    if not isinstance(failures, list):
        raise VerdictError("failures must be a list")
    for entry in failures:
        if not isinstance(entry, dict) or set(entry) != _FAILURE_KEYS:
            raise VerdictError(f"malformed failure entry: {entry!r}")
        if not isinstance(entry["test_name"], str) or not isinstance(
            entry["message"], str
        ):
            raise VerdictError(f"failure fields must be strings: {entry!r}")
        if len(entry["message"]) > MSG_LIMIT:
            raise VerdictError(f"failure message exceeds {MSG_LIMIT} chars")

    if "load_error" in obj and not isinstance(obj["load_error"], str):
        raise VerdictError("load_error must be a string")
    return obj


def parse_verdict(stdout_text: str) -> dict:
    """Extract and validate the verdict from a finished run's stdout.

    The protocol puts the verdict on the final non-empty line; everything
    before it is free-form output from the tests under execution.
    """
    lines = [line for line in stdout_text.splitlines() if line.strip()]
    if not lines:
        raise VerdictError("no verdict line: stdout is empty")
    try:
        obj = json.loads(lines[-1])
    except json.JSONDecodeError as exc:
        raise VerdictError(f"final stdout line is not JSON: {exc}") from exc
    return validate_verdict(obj)
