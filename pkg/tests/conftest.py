"""Shared fixtures and synthetic-data builders for the test suite."""

from __future__ import annotations

import sys
from pathlib import Path

import pytest

from repaireval.benchmarks import HUMANEVAL, Problem
from repaireval.engine import (
    Attempt,
    Conversation,
    Message,
    ProblemTranscript,
    Terminal,
)
from repaireval.executor import ErrorCategory, ExecutionOutcome, RunnerSpec
from repaireval.extraction import ExtractionMethod, ExtractionResult
from repaireval.providers import TokenUsage

TESTS_DIR = Path(__file__).parent
DATA_DIR = TESTS_DIR / "data"
FAKE_RUNNER = TESTS_DIR / "fake_runner.py"
MISBEHAVING_RUNNER = TESTS_DIR / "misbehaving_runner.py"


@pytest.fixture
def fake_runner() -> RunnerSpec:
    return RunnerSpec(argv=(sys.executable, str(FAKE_RUNNER)))


def misbehaving_runner(mode: str) -> RunnerSpec:
    return RunnerSpec(argv=(sys.executable, str(MISBEHAVING_RUNNER), mode))


def make_problem(
    task_id: str = "demo/0",
    entry_point: str = "foo",
    prompt: str | None = None,
    test_program: str | None = None,
) -> Problem:
    if prompt is None:
        prompt = f"def {entry_point}(x):\n    \"\"\"Return x unchanged.\"\"\"\n"
    if test_program is None:
        test_program = (
            "def check(candidate):\n"
            "    assert candidate(1) == 1\n"
            f"\ncheck({entry_point})\n"
        )
    return Problem(
        task_id=task_id,
        prompt=prompt,
        entry_point=entry_point,
        test_program=test_program,
        source_benchmark=HUMANEVAL,
    )


def _tiny_conversation(task_id: str, round_no: int) -> Conversation:
    return Conversation(
        messages=(Message(role="system", content="s"), Message(role="user", content="u")),
        task_id=task_id,
        round=round_no,
    )


def make_attempt(
    task_id: str,
    round_no: int,
    passed: bool,
    category: ErrorCategory | None = ErrorCategory.ASSERTION,
    usage: TokenUsage = TokenUsage(),
) -> Attempt:
    if passed:
        outcome = ExecutionOutcome(
            status="pass", category=None, exception_name=None, feedback="", duration_ms=1
        )
    else:
        names = {
            ErrorCategory.ASSERTION: "AssertionError",
            ErrorCategory.SYNTAX: "SyntaxError",
            ErrorCategory.TYPE: "TypeError",
            ErrorCategory.VALUE: "ValueError",
            ErrorCategory.NAME: "NameError",
            ErrorCategory.INDEX: "IndexError",
            ErrorCategory.KEY: "KeyError",
        }
        outcome = ExecutionOutcome(
            status="fail",
            category=category,
            exception_name=names.get(category),
            feedback="synthetic failure",
            duration_ms=1,
        )
    return Attempt(
        round=round_no,
        conversation=_tiny_conversation(task_id, round_no),
        raw_completion="def f(x):\n    return x\n",
        extraction=ExtractionResult(
            code="def f(x):\n    return x\n",
            method=ExtractionMethod.BARE,
            stripped_reasoning=False,
        ),
        outcome=outcome,
        usage=usage,
    )


def solved_transcript(
    task_id: str,
    solved_round: int,
    category: ErrorCategory = ErrorCategory.ASSERTION,
    usage: TokenUsage = TokenUsage(),
) -> ProblemTranscript:
    attempts = [
        make_attempt(task_id, r, passed=False, category=category, usage=usage)
        for r in range(solved_round)
    ]
    attempts.append(make_attempt(task_id, solved_round, passed=True, usage=usage))
    return ProblemTranscript(
        task_id=task_id,
        attempts=tuple(attempts),
        first_solved_round=solved_round,
        terminal=Terminal.SOLVED,
    )


def exhausted_transcript(
    task_id: str,
    max_rounds: int = 4,
    category: ErrorCategory = ErrorCategory.ASSERTION,
    usage: TokenUsage = TokenUsage(),
) -> ProblemTranscript:
    attempts = tuple(
        make_attempt(task_id, r, passed=False, category=category, usage=usage)
        for r in range(max_rounds + 1)
    )
    return ProblemTranscript(
        task_id=task_id,
        attempts=attempts,
        first_solved_round=None,
        terminal=Terminal.EXHAUSTED,
    )


def api_error_transcript(task_id: str, at_round: int = 0) -> ProblemTranscript:
    attempts = [
        make_attempt(task_id, r, passed=False, category=ErrorCategory.ASSERTION)
        for r in range(at_round)
    ]
    attempts.append(
        make_attempt(task_id, at_round, passed=False, category=ErrorCategory.API_ERROR)
    )
    return ProblemTranscript(
        task_id=task_id,
        attempts=tuple(attempts),
        first_solved_round=None,
        terminal=Terminal.API_ERROR,
    )


def resample_transcript(task_id: str, n: int, c: int) -> ProblemTranscript:
    attempts = tuple(
        make_attempt(task_id, i, passed=(i < c)) for i in range(n)
    )
    return ProblemTranscript(
        task_id=task_id,
        attempts=attempts,
        first_solved_round=0 if c > 0 else None,
        terminal=Terminal.SOLVED if c > 0 else Terminal.EXHAUSTED,
    )


def population_from_counts(
    counts: list[int],
    never: int,
    max_rounds: int = 4,
    prefix: str = "T",
) -> list[ProblemTranscript]:
    """Build a transcript population with an exact first-solved histogram."""
    transcripts: list[ProblemTranscript] = []
    serial = 0
    for round_no, count in enumerate(counts):
        for _ in range(count):
            transcripts.append(solved_transcript(f"{prefix}/{serial:04d}", round_no))
            serial += 1
    for _ in range(never):
        transcripts.append(exhausted_transcript(f"{prefix}/{serial:04d}", max_rounds))
        serial += 1
    return transcripts
