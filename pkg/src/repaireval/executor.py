"""Sandboxed execution of candidate code against a problem's tests.

The harness never executes candidate code in-process. A runner program is
spawned per attempt with two file arguments (candidate, tests) and must write
exactly one JSON line to stdout:

    {"status":"pass"}
    {"status":"fail","exception":"<Name>","traceback":"<text>","duration_ms":<int>}

and always exit 0. Anything else (nonzero exit, zero or multiple lines,
unparseable line) is a protocol violation recorded as category "other". The
wall-clock timeout is enforced here by killing the runner's process group;
the runner itself never self-limits.
"""

from __future__ import annotations

import json
import logging
import os
import shlex
import shutil
import signal
import subprocess
import tempfile
import time
from dataclasses import dataclass
from enum import Enum

from .benchmarks import Problem
from .errors import InfrastructureError

logger = logging.getLogger(__name__)

PASS = "pass"
FAIL = "fail"

_DIAGNOSTIC_LIMIT = 500


class ErrorCategory(str, Enum):
    ASSERTION = "assertion"
    SYNTAX = "syntax"
    TYPE = "type"
    VALUE = "value"
    NAME = "name"
    INDEX = "index"
    KEY = "key"
    TIMEOUT = "timeout"
    EXTRACTION_FAILURE = "extraction_failure"
    API_ERROR = "api_error"
    OTHER = "other"


# Exception-name classification. timeout, extraction_failure and api_error
# are assigned by the orchestrator, never derived from an exception name.
_EXCEPTION_TABLE = {
    "AssertionError": ErrorCategory.ASSERTION,
    "SyntaxError": ErrorCategory.SYNTAX,
    "IndentationError": ErrorCategory.SYNTAX,
    "TabError": ErrorCategory.SYNTAX,
    "TypeError": ErrorCategory.TYPE,
    "ValueError": ErrorCategory.VALUE,
    "NameError": ErrorCategory.NAME,
    "UnboundLocalError": ErrorCategory.NAME,
    "IndexError": ErrorCategory.INDEX,
    "KeyError": ErrorCategory.KEY,
}


def classify(exception_name: str) -> ErrorCategory:
    """Map an exception type name to its error category (total function)."""
    if not exception_name:
        raise ValueError("exception_name must be non-empty")
    return _EXCEPTION_TABLE.get(exception_name, ErrorCategory.OTHER)


@dataclass(frozen=True)
class ExecutionLimits:
    wall_clock_timeout: float = 15.0
    max_feedback_bytes: int = 2048

    def __post_init__(self) -> None:
        if self.wall_clock_timeout <= 0:
            raise ValueError("wall_clock_timeout must be positive")
        if self.max_feedback_bytes <= 0:
            raise ValueError("max_feedback_bytes must be positive")


@dataclass(frozen=True)
class ExecutionOutcome:
    status: str
    category: ErrorCategory | None
    exception_name: str | None
    feedback: str
    duration_ms: int

    @property
    def passed(self) -> bool:
        return self.status == PASS


@dataclass(frozen=True)
class RunnerSpec:
    """Command prefix used to invoke the runner program."""

    argv: tuple[str, ...]

    @classmethod
    def from_string(cls, command: str) -> "RunnerSpec":
        parts = tuple(shlex.split(command))
        if not parts:
            raise ValueError("runner command must not be empty")
        return cls(argv=parts)


NO_CODE_FEEDBACK = (
    "No Python code could be extracted from the model response. "
    "Reply with the complete function definition."
)


def timeout_feedback(limits: ExecutionLimits) -> str:
    return (
        f"Execution did not finish within the {limits.wall_clock_timeout:g}-second "
        "wall-clock limit and was terminated. The code may contain an infinite "
        "loop or be excessively slow."
    )


def format_feedback(raw_traceback: str, limits: ExecutionLimits, exception_name: str | None = None) -> str:
    """Bound feedback to max_feedback_bytes, keeping the tail.

    Python puts the exception line last and the frame nearest the fault just
    above it, so truncating from the front preserves what the repair prompt
    needs most. The result is never empty for a failure.
    """
    text = raw_traceback.rstrip("\n")
    if not text.strip():
        text = exception_name or "execution failed with no traceback"
    data = text.encode("utf-8")
    if len(data) <= limits.max_feedback_bytes:
        return text
    tail = data[-limits.max_feedback_bytes :]
    return tail.decode("utf-8", errors="ignore")


def _minimal_env(scratch: str) -> dict[str, str]:
    env = {
        "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
        "HOME": scratch,
        "TMPDIR": scratch,
        "LANG": "C.UTF-8",
        "LC_ALL": "C.UTF-8",
        "PYTHONDONTWRITEBYTECODE": "1",
        "PYTHONIOENCODING": "utf-8",
    }
    # Lets a dev-tree runner resolve its imports; carries no secrets.
    if "PYTHONPATH" in os.environ:
        env["PYTHONPATH"] = os.environ["PYTHONPATH"]
    return env


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError, OSError):
        proc.kill()


def _violation(detail: str, returncode: int | None, stdout: str, stderr: str, duration_ms: int, limits: ExecutionLimits) -> ExecutionOutcome:
    parts = [f"Runner protocol violation: {detail}."]
    if returncode is not None:
        parts.append(f"exit code {returncode}")
    if stdout.strip():
        parts.append("stdout: " + stdout.strip()[:_DIAGNOSTIC_LIMIT])
    if stderr.strip():
        parts.append("stderr: " + stderr.strip()[:_DIAGNOSTIC_LIMIT])
    return ExecutionOutcome(
        status=FAIL,
        category=ErrorCategory.OTHER,
        exception_name=None,
        feedback=format_feedback(" | ".join(parts), limits),
        duration_ms=duration_ms,
    )


def execute(code: str, problem: Problem, limits: ExecutionLimits, runner: RunnerSpec) -> ExecutionOutcome:
    """Run one candidate against the problem's tests inside the runner.

    Empty candidates short-circuit to extraction_failure without spawning
    anything. Each call gets a private scratch directory, removed afterwards,
    so concurrent executions cannot observe each other. Failure to spawn the
    runner at all is an infrastructure error, not an outcome.
    """
    if not code.strip():
        return ExecutionOutcome(
            status=FAIL,
            category=ErrorCategory.EXTRACTION_FAILURE,
            exception_name=None,
            feedback=NO_CODE_FEEDBACK,
            duration_ms=0,
        )
    scratch = tempfile.mkdtemp(prefix="repaireval-exec-")
    try:
        candidate_path = os.path.join(scratch, "candidate.py")
        tests_path = os.path.join(scratch, "tests.py")
        with open(candidate_path, "w", encoding="utf-8") as handle:
            handle.write(code if code.endswith("\n") else code + "\n")
        with open(tests_path, "w", encoding="utf-8") as handle:
            handle.write(problem.test_program)
        argv = [*runner.argv, candidate_path, tests_path]
        started = time.monotonic()
        try:
            proc = subprocess.Popen(
                argv,
                cwd=scratch,
                env=_minimal_env(scratch),
                stdin=subprocess.DEVNULL,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                start_new_session=True,
            )
        except OSError as exc:
            raise InfrastructureError(f"cannot spawn runner {argv[0]!r}: {exc}") from exc
        try:
            stdout, stderr = proc.communicate(timeout=limits.wall_clock_timeout)
        except subprocess.TimeoutExpired:
            _kill_group(proc)
            proc.communicate()
            duration_ms = int((time.monotonic() - started) * 1000)
            logger.debug("task %s timed out after %d ms", problem.task_id, duration_ms)
            return ExecutionOutcome(
                status=FAIL,
                category=ErrorCategory.TIMEOUT,
                exception_name=None,
                feedback=timeout_feedback(limits),
                duration_ms=duration_ms,
            )
        duration_ms = int((time.monotonic() - started) * 1000)
        lines = [line for line in stdout.splitlines() if line.strip()]
        if proc.returncode != 0:
            return _violation(
                "runner exited nonzero", proc.returncode, stdout, stderr, duration_ms, limits
            )
        if len(lines) != 1:
            return _violation(
                f"expected exactly one output line, got {len(lines)}",
                proc.returncode,
                stdout,
                stderr,
                duration_ms,
                limits,
            )
        try:
            record = json.loads(lines[0])
        except json.JSONDecodeError:
            return _violation("unparseable output line", proc.returncode, stdout, stderr, duration_ms, limits)
        if not isinstance(record, dict) or record.get("status") not in (PASS, FAIL):
            return _violation("malformed result record", proc.returncode, stdout, stderr, duration_ms, limits)
        if record["status"] == PASS:
            return ExecutionOutcome(
                status=PASS,
                category=None,
                exception_name=None,
                feedback="",
                duration_ms=duration_ms,
            )
        exception_name = record.get("exception")
        if not exception_name or not isinstance(exception_name, str):
            return _violation("fail record missing exception name", proc.returncode, stdout, stderr, duration_ms, limits)
        raw_traceback = record.get("traceback")
        if not isinstance(raw_traceback, str):
            raw_traceback = ""
        return ExecutionOutcome(
            status=FAIL,
            category=classify(exception_name),
            exception_name=exception_name,
            feedback=format_feedback(raw_traceback, limits, exception_name=exception_name),
            duration_ms=duration_ms,
        )
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
