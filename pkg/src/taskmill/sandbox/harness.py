#!/usr/bin/env python3
"""In-sandbox test runner.

Invoked as: python harness.py <solution-file> <tests-file>, cwd = the run's
temp dir. Loads the solution module, executes the tests against its public
names, and prints exactly one JSON verdict line as the final line of stdout:

    {"tests_run": N, "tests_passed": M, "failures": [{"test_name", "message"}],
     "mode": "functions" | "asserts" | "none", "load_error": "..."?}

Exit codes:
    0   verdict line emitted (tests passing, failing, or solution load error)
    57  memory limit hit (MemoryError escaped; no verdict line)
    58  sandbox guard violation, e.g. socket construction (no verdict line)
    59  harness-internal fault (no verdict line)

Test modes: a tests file defining top-level `def test_*` functions runs them
in definition order, one test per function; otherwise every top-level assert
statement counts as one test and execution continues past failures. Failure
messages are truncated to 512 characters.

The script is standalone on purpose: it runs inside the sandbox with no
access to the parent package. Guards are installed before any user code
loads: socket construction raises, and writes outside the working directory
are denied. These are defense-in-depth inside the process; the hard limits
live in the parent's rlimit setup.
"""

import ast
import builtins
import importlib.util
import io
import json
import os
import sys

EXIT_MEMORY = 57
EXIT_VIOLATION = 58
EXIT_INTERNAL = 59
MSG_LIMIT = 512

# freed on MemoryError so the verdict-less exit path itself has headroom
_RESERVE = None


class SandboxViolation(BaseException):
    """Raised by guards; BaseException so user except-Exception can't eat it."""


def _install_socket_guard():
    def deny(*args, **kwargs):
        raise SandboxViolation("socket construction blocked by sandbox")

    import socket

    socket.socket = deny
    socket.socketpair = deny
    socket.fromfd = deny
    socket.create_connection = deny
    try:
        import _socket

        _socket.socket = deny
    except ImportError:
        pass


def _install_write_guard(root):
    real_open = builtins.open
    real_os_open = os.open
    allowed_root = os.path.realpath(root)

    def _write_allowed(path):
        target = os.path.realpath(os.fspath(path))
        if target == os.devnull or target == "/dev/null":
            return True
        return target == allowed_root or target.startswith(allowed_root + os.sep)

    def guarded_open(file, mode="r", *args, **kwargs):
        wants_write = bool(set(mode) & set("wax+"))
        if wants_write and not isinstance(file, int) and not _write_allowed(file):
            raise PermissionError(f"write outside working directory denied: {file}")
        return real_open(file, mode, *args, **kwargs)

    write_flags = os.O_WRONLY | os.O_RDWR | os.O_APPEND | os.O_CREAT | os.O_TRUNC

    def guarded_os_open(path, flags, *args, **kwargs):
        if flags & write_flags and not _write_allowed(path):
            raise PermissionError(f"write outside working directory denied: {path}")
        return real_os_open(path, flags, *args, **kwargs)

    builtins.open = guarded_open
    io.open = guarded_open
    os.open = guarded_os_open


def _truncate(exc):
    return ("%s: %s" % (type(exc).__name__, exc))[:MSG_LIMIT]


def _emit(verdict):
    sys.stdout.flush()
    sys.stdout.write(json.dumps(verdict, separators=(",", ":")) + "\n")
    sys.stdout.flush()


def _load_solution(path):
    spec = importlib.util.spec_from_file_location("solution", path)
    module = importlib.util.module_from_spec(spec)
    sys.modules["solution"] = module
    spec.loader.exec_module(module)
    return module


def _run_function_mode(tree, source, tests_path, namespace):
    test_names = [
        node.name
        for node in tree.body
        if isinstance(node, ast.FunctionDef) and node.name.startswith("test_")
    ]
    failures = []
    run = passed = 0
    try:
        exec(compile(source, tests_path, "exec"), namespace)
    except MemoryError:
        raise
    except (Exception, SystemExit) as exc:
        failures.append({"test_name": "<module>", "message": _truncate(exc)})
        return run, passed, failures
    for name in test_names:
        fn = namespace.get(name)
        if not callable(fn):
            continue
        run += 1
        try:
            fn()
            passed += 1
        except MemoryError:
            raise
        except (Exception, SystemExit) as exc:
            failures.append({"test_name": name, "message": _truncate(exc)})
    return run, passed, failures


def _run_assert_mode(tree, tests_path, namespace):
    counters = {"run": 0, "passed": 0}
    failures = []

    def _tm_ran():
        counters["run"] += 1

    def _tm_pass():
        counters["passed"] += 1

    def _tm_fail(label, exc):
        failures.append({"test_name": label, "message": _truncate(exc)})

    namespace["__tm_ran"] = _tm_ran
    namespace["__tm_pass"] = _tm_pass
    namespace["__tm_fail"] = _tm_fail

    new_body = []
    for node in tree.body:
        if isinstance(node, ast.Assert):
            label = "assert:%d" % node.lineno
            ran = ast.Expr(
                value=ast.Call(func=ast.Name("__tm_ran", ast.Load()), args=[], keywords=[])
            )
            ok = ast.Expr(
                value=ast.Call(func=ast.Name("__tm_pass", ast.Load()), args=[], keywords=[])
            )
            handler_mem = ast.ExceptHandler(
                type=ast.Name("MemoryError", ast.Load()),
                name=None,
                body=[ast.Raise(exc=None, cause=None)],
            )
            handler_rest = ast.ExceptHandler(
                type=ast.Tuple(
                    elts=[
                        ast.Name("Exception", ast.Load()),
                        ast.Name("SystemExit", ast.Load()),
                    ],
                    ctx=ast.Load(),
                ),
                name="__tm_exc",
                body=[
                    ast.Expr(
                        value=ast.Call(
                            func=ast.Name("__tm_fail", ast.Load()),
                            args=[
                                ast.Constant(label),
                                ast.Name("__tm_exc", ast.Load()),
                            ],
                            keywords=[],
                        )
                    )
                ],
            )
            wrapped = ast.Try(
                body=[node, ok],
                handlers=[handler_mem, handler_rest],
                orelse=[],
                finalbody=[],
            )
            new_body.append(ran)
            new_body.append(wrapped)
        else:
            new_body.append(node)
    module = ast.Module(body=new_body, type_ignores=[])
    ast.fix_missing_locations(module)
    try:
        exec(compile(module, tests_path, "exec"), namespace)
    except MemoryError:
        raise
    except (Exception, SystemExit) as exc:
        failures.append({"test_name": "<module>", "message": _truncate(exc)})
    return counters["run"], counters["passed"], failures


def main(argv):
    if len(argv) != 3:
        return EXIT_INTERNAL
    solution_path, tests_path = argv[1], argv[2]
    if not os.path.exists(solution_path) or not os.path.exists(tests_path):
        return EXIT_INTERNAL

    sys.dont_write_bytecode = True
    _install_socket_guard()
    _install_write_guard(os.getcwd())

    try:
        module = _load_solution(solution_path)
    except MemoryError:
        raise
    except (Exception, SystemExit) as exc:
        _emit(
            {
                "tests_run": 0,
                "tests_passed": 0,
                "failures": [],
                "mode": "none",
                "load_error": _truncate(exc),
            }
        )
        return 0

    namespace = {
        name: getattr(module, name) for name in dir(module) if not name.startswith("_")
    }
    namespace["solution"] = module

    with open(tests_path, "r", encoding="utf-8") as fh:
        source = fh.read()
    try:
        tree = ast.parse(source)
    except SyntaxError as exc:
        _emit(
            {
                "tests_run": 0,
                "tests_passed": 0,
                "failures": [{"test_name": "<module>", "message": _truncate(exc)}],
                "mode": "asserts",
            }
        )
        return 0

    has_test_functions = any(
        isinstance(node, ast.FunctionDef) and node.name.startswith("test_")
        for node in tree.body
    )
    if has_test_functions:
        mode = "functions"
        run, passed, failures = _run_function_mode(tree, source, tests_path, namespace)
    else:
        mode = "asserts"
        run, passed, failures = _run_assert_mode(tree, tests_path, namespace)

    _emit(
        {
            "tests_run": run,
            "tests_passed": passed,
            "failures": failures,
            "mode": mode,
        }
    )
    return 0


if __name__ == "__main__":
    _RESERVE = bytearray(8 * 1024 * 1024)
    try:
        code = main(sys.argv)
    except SandboxViolation:
        os._exit(EXIT_VIOLATION)
    except MemoryError:
        _RESERVE = None
        os._exit(EXIT_MEMORY)
    except BaseException:
        os._exit(EXIT_INTERNAL)
    sys.exit(code)
