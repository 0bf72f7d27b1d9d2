"""Resource-limited execution of candidate solution/test pairs.

Each run gets a fresh temp directory holding solution.py, tests.py, and a
copy of the vendored harness script; the harness runs as a child process in
its own session with CPU-time, address-space, and file-size rlimits. A wall
timer kills the whole process group on overrun. Network egress is blocked by
the harness's in-process socket guard (plus an optional container wrapper
via command_prefix for stronger isolation).

Outcome classification, in precedence order:
  killed by our wall timer            -> timeout
  SIGXCPU (cpu rlimit)                -> timeout
  exit 57 (harness MemoryError trap)  -> memory_exceeded
  exit 58 (harness guard violation)   -> sandbox_violation
  exit 59 (harness-internal fault)    -> harness_error
  SIGKILL not sent by us (kernel OOM) -> memory_exceeded
  exit 0 + verdict line               -> pass / test_failure / runtime_error
  exit 0, no verdict line             -> harness_error
  anything else                       -> runtime_error
"""

from __future__ import annotations

import math
import os
import resource
import shutil
import signal
import subprocess
import sys
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from ..model import (
    CandidatePair,
    ExecutionVerdict,
    SchemaError,
    VerdictStatus,
    check_candidate_triple,
)

try:
    import psutil
except ImportError:  # peak-memory telemetry is optional
    psutil = None

HARNESS_PATH = os.path.join(os.path.dirname(__file__), "harness.py")

EXIT_MEMORY = 57
EXIT_VIOLATION = 58
EXIT_INTERNAL = 59

FSIZE_LIMIT_BYTES = 32 * 1024 * 1024


@dataclass(frozen=True)
class SandboxPolicy:
    wall_timeout_ms: int = 10_000
    cpu_timeout_ms: int = 8_000
    memory_limit_bytes: int = 512 * 1024 * 1024
    max_output_bytes: int = 1024 * 1024
    network_allowed: bool = False
    temp_root: Optional[str] = None
    parallelism: int = field(default_factory=lambda: os.cpu_count() or 1)
    command_prefix: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.network_allowed:
            raise ValueError("SandboxPolicy: network_allowed cannot be enabled")
        for name in ("wall_timeout_ms", "cpu_timeout_ms", "memory_limit_bytes", "max_output_bytes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"SandboxPolicy: {name} must be positive")
        if self.parallelism < 1:
            raise ValueError("SandboxPolicy: parallelism must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "SandboxPolicy":
        kwargs = dict(data)
        if "command_prefix" in kwargs:
            kwargs["command_prefix"] = tuple(kwargs["command_prefix"])
        return cls(**kwargs)


@dataclass(frozen=True)
class SelectionResult:
    selected_index: Optional[int]
    verdicts: tuple[ExecutionVerdict, ExecutionVerdict, ExecutionVerdict]

    def __post_init__(self) -> None:
        if len(self.verdicts) != 3:
            raise SchemaError("SelectionResult: exactly 3 verdicts required")
        if self.selected_index is not None:
            if self.selected_index not in (0, 1, 2):
                raise SchemaError("SelectionResult: selected_index out of range")
            if self.verdicts[self.selected_index].status is not VerdictStatus.PASS:
                raise SchemaError("SelectionResult: selected verdict must be pass")
            for earlier in self.verdicts[: self.selected_index]:
                if earlier.status is VerdictStatus.PASS:
                    raise SchemaError("SelectionResult: earlier pass was not selected")


class _TailReader(threading.Thread):
    """Drains a pipe keeping only the last `cap` bytes, so hostile output
    floods cannot exhaust parent memory."""

    def __init__(self, stream, cap: int):
        super().__init__(daemon=True)
        self.stream = stream
        self.cap = cap
        self.buf = bytearray()
        self.truncated = False
        self.start()

    def run(self) -> None:
        try:
            while True:
                chunk = self.stream.read(65536)
                if not chunk:
                    break
                self.buf += chunk
                if len(self.buf) > self.cap:
                    del self.buf[: len(self.buf) - self.cap]
                    self.truncated = True
        except ValueError:
            pass

    def text(self) -> str:
        return self.buf.decode("utf-8", errors="replace")

    def excerpt(self, cap: int = 4096) -> str:
        out = self.text()
        if self.truncated or len(out) > cap:
            return "[truncated] " + out[-cap:]
        return out


class _PeakMemoryPoller(threading.Thread):
    def __init__(self, pid: int):
        super().__init__(daemon=True)
        self.pid = pid
        self.peak: Optional[int] = None
        self.start()

    def run(self) -> None:
        if psutil is None:
            return
        try:
            proc = psutil.Process(self.pid)
            while proc.is_running():
                rss = proc.memory_info().rss
                if self.peak is None or rss > self.peak:
                    self.peak = rss
                time.sleep(0.02)
        except Exception:
            pass


def _make_limit_setter(policy: SandboxPolicy):
    cpu_s = max(1, math.ceil(policy.cpu_timeout_ms / 1000))
    mem = policy.memory_limit_bytes

    def set_limits():
        resource.setrlimit(resource.RLIMIT_CPU, (cpu_s, cpu_s + 1))
        resource.setrlimit(resource.RLIMIT_AS, (mem, mem))
        resource.setrlimit(resource.RLIMIT_FSIZE, (FSIZE_LIMIT_BYTES, FSIZE_LIMIT_BYTES))
        resource.setrlimit(resource.RLIMIT_CORE, (0, 0))

    return set_limits


def _last_json_line(text: str) -> Optional[dict]:
    import json

    for line in reversed(text.splitlines()):
        line = line.strip()
        if not line:
            continue
        if not line.startswith("{"):
            return None
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            return None
        return obj if isinstance(obj, dict) else None
    return None


def _classify(
    rc: int,
    we_killed: bool,
    verdict_line: Optional[dict],
) -> tuple[VerdictStatus, int, int]:
    """Map (exit status, kill reason, parsed verdict) to a status plus
    test counters. Returns (status, tests_run, tests_passed)."""
    if we_killed:
        return VerdictStatus.TIMEOUT, 0, 0
    if rc == -signal.SIGXCPU:
        return VerdictStatus.TIMEOUT, 0, 0
    if rc == EXIT_MEMORY:
        return VerdictStatus.MEMORY_EXCEEDED, 0, 0
    if rc == EXIT_VIOLATION:
        return VerdictStatus.SANDBOX_VIOLATION, 0, 0
    if rc == EXIT_INTERNAL:
        return VerdictStatus.HARNESS_ERROR, 0, 0
    if rc == -signal.SIGKILL:
        # we did not send it; the kernel's OOM path did
        return VerdictStatus.MEMORY_EXCEEDED, 0, 0
    if rc == 0:
        if verdict_line is None:
            return VerdictStatus.HARNESS_ERROR, 0, 0
        try:
            run = int(verdict_line["tests_run"])
            passed = int(verdict_line["tests_passed"])
            failures = verdict_line["failures"]
        except (KeyError, TypeError, ValueError):
            return VerdictStatus.HARNESS_ERROR, 0, 0
        if not isinstance(failures, list) or passed > run or run < 0 or passed < 0:
            return VerdictStatus.HARNESS_ERROR, 0, 0
        if "load_error" in verdict_line:
            return VerdictStatus.RUNTIME_ERROR, run, passed
        if run >= 1 and passed == run:
            return VerdictStatus.PASS, run, passed
        return VerdictStatus.TEST_FAILURE, run, passed
    return VerdictStatus.RUNTIME_ERROR, 0, 0


def run_one(pair: CandidatePair, policy: SandboxPolicy) -> ExecutionVerdict:
    """Execute one candidate in a fresh temp dir and classify the outcome."""
    if not os.path.exists(HARNESS_PATH):
        return ExecutionVerdict(
            status=VerdictStatus.HARNESS_ERROR,
            stderr_excerpt="harness script missing",
        )
    tmpdir = tempfile.mkdtemp(prefix="tm-sbx-", dir=policy.temp_root)
    try:
        with open(os.path.join(tmpdir, "solution.py"), "w", encoding="utf-8") as fh:
            fh.write(pair.solution_source)
        with open(os.path.join(tmpdir, "tests.py"), "w", encoding="utf-8") as fh:
            fh.write(pair.test_source)
        shutil.copyfile(HARNESS_PATH, os.path.join(tmpdir, "harness.py"))

        cmd = list(policy.command_prefix) + [
            sys.executable,
            "harness.py",
            "solution.py",
            "tests.py",
        ]
        env = {
            "PATH": os.environ.get("PATH", ""),
            "HOME": tmpdir,
            "TMPDIR": tmpdir,
            "PYTHONDONTWRITEBYTECODE": "1",
            "PYTHONIOENCODING": "utf-8",
        }
        started = time.monotonic()
        proc = subprocess.Popen(
            cmd,
            cwd=tmpdir,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            env=env,
            start_new_session=True,
            preexec_fn=_make_limit_setter(policy),
        )
        out_reader = _TailReader(proc.stdout, policy.max_output_bytes)
        err_reader = _TailReader(proc.stderr, policy.max_output_bytes)
        poller = _PeakMemoryPoller(proc.pid)

        we_killed = False
        try:
            rc = proc.wait(timeout=policy.wall_timeout_ms / 1000)
        except subprocess.TimeoutExpired:
            we_killed = True
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            rc = proc.wait()
        duration_ms = int((time.monotonic() - started) * 1000)
        out_reader.join(timeout=5)
        err_reader.join(timeout=5)
        poller.join(timeout=0.1)

        verdict_line = _last_json_line(out_reader.text()) if rc == 0 else None
        status, run, passed = _classify(rc, we_killed, verdict_line)
        return ExecutionVerdict(
            status=status,
            duration_ms=duration_ms,
            peak_memory_bytes=poller.peak,
            stdout_excerpt=out_reader.excerpt(),
            stderr_excerpt=err_reader.excerpt(),
            tests_run=run,
            tests_passed=passed,
        )
    finally:
        shutil.rmtree(tmpdir, ignore_errors=True)


def validate_candidates(
    candidates: tuple[CandidatePair, ...],
    policy: SandboxPolicy,
) -> SelectionResult:
    """Run candidates in index order, stopping at the first pass. Skipped
    candidates get a verdict with status unset so the audit trail shows
    they were never executed."""
    check_candidate_triple(tuple(candidates))
    verdicts: list[ExecutionVerdict] = []
    selected: Optional[int] = None
    for pair in candidates:
        if selected is not None:
            verdicts.append(ExecutionVerdict.skipped())
            continue
        verdict = run_one(pair, policy)
        verdicts.append(verdict)
        if verdict.status is VerdictStatus.PASS:
            selected = pair.index
    return SelectionResult(
        selected_index=selected,
        verdicts=(verdicts[0], verdicts[1], verdicts[2]),
    )


def validate_many(
    triples: list[tuple[CandidatePair, ...]],
    policy: SandboxPolicy,
) -> list[SelectionResult]:
    """Validate independent candidate triples concurrently, results in
    input order. Each triple still short-circuits internally."""
    if not triples:
        return []
    workers = min(policy.parallelism, len(triples))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda t: validate_candidates(t, policy), triples))
