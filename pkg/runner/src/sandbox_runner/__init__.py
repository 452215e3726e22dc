"""Execute one candidate program plus its tests and report a single line.

The orchestrator invokes this as ``runner <candidate-file> <test-file>`` (or
``runner --parse-only <candidate-file>``) and reads exactly one JSON line
from standard output: ``{"status":"pass"}`` on success, otherwise a fail
record carrying the exception type name, a traceback limited to the
candidate's and tests' own frames, and the wall-clock duration. The exit
code is 0 in both cases; everything the orchestrator needs is in the line.

Timeouts are deliberately not handled here. The orchestrator owns the
clock and kills the whole process group, so this program stays too simple
to wedge in an unkillable state.
"""

import json
import os
import sys
import time
import traceback
from contextlib import contextmanager
from dataclasses import dataclass

__version__ = "0.1.0"

# Sources are compiled under fixed pseudo-filenames: tracebacks stay free
# of temp-directory noise and runner frames are recognizable by filename.
CANDIDATE_FILENAME = "<candidate>"
TEST_FILENAME = "<tests>"
_SOURCE_FILES = (CANDIDATE_FILENAME, TEST_FILENAME)


@dataclass(frozen=True)
class RunnerOutcome:
    """One execution's result as it appears on the wire."""

    status: str
    exception: str | None = None
    traceback: str | None = None
    duration_ms: int | None = None

    def __post_init__(self):
        if self.status == "pass":
            if self.exception is not None or self.traceback is not None:
                raise ValueError("pass outcome must not carry an exception")
        elif self.status == "fail":
            if not self.exception:
                raise ValueError("fail outcome requires an exception name")
        else:
            raise ValueError(f"unknown status: {self.status!r}")

    def to_line(self) -> str:
        if self.status == "pass":
            record = {"status": "pass"}
        else:
            record = {
                "status": "fail",
                "exception": self.exception,
                "traceback": self.traceback or "",
                "duration_ms": int(self.duration_ms or 0),
            }
        return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def _failure_text(exc: BaseException) -> str:
    """Traceback text starting at the first candidate or test frame.

    Syntax errors never executed, so they have no frames worth showing;
    the exception message alone carries the offending line and caret.
    """
    if isinstance(exc, SyntaxError):
        return "".join(traceback.format_exception_only(type(exc), exc))
    tb = exc.__traceback__
    while tb is not None and tb.tb_frame.f_code.co_filename not in _SOURCE_FILES:
        tb = tb.tb_next
    return "".join(traceback.format_exception(type(exc), exc, tb))


def _read_source(path: str) -> str:
    with open(path, "r", encoding="utf-8") as handle:
        return handle.read()


def run(candidate_path: str, test_path: str) -> RunnerOutcome:
    """Execute candidate then tests in one fresh namespace."""
    candidate = _read_source(candidate_path)
    test_source = _read_source(test_path)
    started = time.monotonic()
    try:
        namespace = {"__name__": "__main__"}
        exec(compile(candidate, CANDIDATE_FILENAME, "exec"), namespace)
        exec(compile(test_source, TEST_FILENAME, "exec"), namespace)
    except BaseException as exc:
        return RunnerOutcome(
            status="fail",
            exception=type(exc).__name__,
            traceback=_failure_text(exc),
            duration_ms=int((time.monotonic() - started) * 1000),
        )
    return RunnerOutcome(status="pass")


def parse_only(candidate_path: str) -> RunnerOutcome:
    """Report whether the candidate parses; nothing is executed."""
    candidate = _read_source(candidate_path)
    started = time.monotonic()
    try:
        compile(candidate, CANDIDATE_FILENAME, "exec")
    except BaseException as exc:
        return RunnerOutcome(
            status="fail",
            exception=type(exc).__name__,
            traceback=_failure_text(exc),
            duration_ms=int((time.monotonic() - started) * 1000),
        )
    return RunnerOutcome(status="pass")


@contextmanager
def _candidate_output_to_side_file(candidate_path: str):
    """Send the candidate's stdout and stderr to a side file.

    Redirection happens at the file-descriptor level, so direct writes to
    fd 1 or 2 (and prints from any child process the candidate spawns) land
    in the side file too. The protocol line is written afterwards, once the
    real standard output has been restored.
    """
    try:
        side_fd = os.open(
            candidate_path + ".output",
            os.O_WRONLY | os.O_CREAT | os.O_TRUNC,
            0o600,
        )
    except OSError:
        side_fd = os.open(os.devnull, os.O_WRONLY)
    saved_stdout = os.dup(1)
    saved_stderr = os.dup(2)
    try:
        sys.stdout.flush()
        sys.stderr.flush()
        os.dup2(side_fd, 1)
        os.dup2(side_fd, 2)
        yield
    finally:
        try:
            sys.stdout.flush()
            sys.stderr.flush()
        except Exception:
            pass
        os.dup2(saved_stdout, 1)
        os.dup2(saved_stderr, 2)
        os.close(saved_stdout)
        os.close(saved_stderr)
        os.close(side_fd)


def cli(argv: list[str] | None = None) -> int:
    args = list(sys.argv[1:] if argv is None else argv)
    wants_parse_only = bool(args) and args[0] == "--parse-only"
    if wants_parse_only:
        args = args[1:]
    expected = 1 if wants_parse_only else 2
    if len(args) != expected:
        sys.stderr.write(
            "usage: sandbox-runner <candidate-file> <test-file>\n"
            "       sandbox-runner --parse-only <candidate-file>\n"
        )
        return 2
    if wants_parse_only:
        outcome = parse_only(args[0])
    else:
        with _candidate_output_to_side_file(args[0]):
            outcome = run(args[0], args[1])
    os.write(1, (outcome.to_line() + "\n").encode("utf-8"))
    return 0
