"""The generate, execute, repair loop.

Round 0 asks the model to solve the problem from its prompt alone. While the
candidate fails and rounds remain, the model is shown its own extracted code
and the execution feedback in a fresh two-message conversation (system plus
one composed user message); conversations are never accumulated across
rounds. The loop stops at the first passing attempt. Resampling mode draws k
independent completions from the identical initial conversation instead, with
no feedback between samples.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

from .benchmarks import Problem, ProblemSet
from .errors import ProviderFailure
from .executor import (
    FAIL,
    ErrorCategory,
    ExecutionLimits,
    ExecutionOutcome,
    RunnerSpec,
    execute,
)
from .extraction import ExtractionMethod, ExtractionResult, extract
from .ledger import AttemptRecord, RunLedger, group_records, resume_plan
from .providers import Completion, DecodingParams, ProviderGateway, TokenUsage

logger = logging.getLogger(__name__)

SYSTEM_PROMPT = (
    "You are an expert Python programmer. Complete the given function. "
    "Return ONLY the Python code, no explanations, no markdown formatting."
)


class RepairStrategy(str, Enum):
    MINIMAL = "minimal"
    EXPLAIN_THEN_FIX = "explain_then_fix"
    CHAIN_OF_THOUGHT = "chain_of_thought"


class RunMode(str, Enum):
    REPAIR = "repair"
    RESAMPLE = "resample"


class Terminal(str, Enum):
    SOLVED = "solved"
    EXHAUSTED = "exhausted"
    API_ERROR = "api_error"


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class Conversation:
    messages: tuple[Message, ...]
    task_id: str
    round: int


@dataclass(frozen=True)
class RunConfig:
    max_rounds: int = 4
    strategy: RepairStrategy = RepairStrategy.MINIMAL
    decoding: DecodingParams = field(default_factory=DecodingParams)
    limits: ExecutionLimits = field(default_factory=ExecutionLimits)
    mode: RunMode = RunMode.REPAIR
    samples_k: int = 5

    def __post_init__(self) -> None:
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")
        if self.samples_k < 1:
            raise ValueError("samples_k must be >= 1")


@dataclass(frozen=True)
class Attempt:
    round: int
    conversation: Conversation
    raw_completion: str
    extraction: ExtractionResult
    outcome: ExecutionOutcome
    usage: TokenUsage


@dataclass(frozen=True)
class ProblemTranscript:
    task_id: str
    attempts: tuple[Attempt, ...]
    first_solved_round: int | None
    terminal: Terminal


@dataclass(frozen=True)
class RunResult:
    run_id: str
    benchmark: str
    model_name: str
    mode: RunMode
    strategy: RepairStrategy
    max_rounds: int
    samples_k: int
    transcripts: tuple[ProblemTranscript, ...]
    run_dir: Path | None = None


def initial_conversation(problem: Problem) -> Conversation:
    return Conversation(
        messages=(
            Message(role="system", content=SYSTEM_PROMPT),
            Message(role="user", content=problem.prompt),
        ),
        task_id=problem.task_id,
        round=0,
    )


_STRATEGY_ASKS = {
    RepairStrategy.MINIMAL: "Provide the corrected function.",
    RepairStrategy.EXPLAIN_THEN_FIX: (
        "First explain the bug in 1-2 sentences, then provide the corrected code."
    ),
    RepairStrategy.CHAIN_OF_THOUGHT: (
        "Reason step by step: (1) what does the error tell us, "
        "(2) what is the root cause, (3) what is the fix. "
        "Then provide the corrected code."
    ),
}


def repair_conversation(
    problem: Problem,
    previous_code: str,
    feedback: str,
    strategy: RepairStrategy,
    round: int,
) -> Conversation:
    """Compose the fresh two-message repair conversation for one round.

    The user message carries the problem, the previously extracted code and
    the execution feedback, in that order, then the strategy's ask. The
    feedback is embedded byte for byte.
    """
    if round < 1:
        raise ValueError("repair rounds start at 1")
    if not feedback:
        raise ValueError("repair requires non-empty feedback")
    user = (
        "Your previous solution to the following problem failed.\n\n"
        f"Problem:\n{problem.prompt}\n\n"
        f"Previous attempt:\n{previous_code}\n\n"
        f"Error:\n{feedback}\n\n"
        f"{_STRATEGY_ASKS[strategy]}"
    )
    return Conversation(
        messages=(
            Message(role="system", content=SYSTEM_PROMPT),
            Message(role="user", content=user),
        ),
        task_id=problem.task_id,
        round=round,
    )


def _api_error_attempt(conversation: Conversation, round: int, error: ProviderFailure) -> Attempt:
    feedback = str(error) or "provider returned no completion"
    return Attempt(
        round=round,
        conversation=conversation,
        raw_completion="",
        extraction=ExtractionResult(code="", method=ExtractionMethod.FAILED, stripped_reasoning=False),
        outcome=ExecutionOutcome(
            status=FAIL,
            category=ErrorCategory.API_ERROR,
            exception_name=None,
            feedback=feedback,
            duration_ms=0,
        ),
        usage=TokenUsage(),
    )


def _transcript(task_id: str, attempts: Sequence[Attempt]) -> ProblemTranscript:
    attempts = tuple(attempts)
    if any(a.outcome.category == ErrorCategory.API_ERROR for a in attempts):
        terminal = Terminal.API_ERROR
        first_solved = None
    else:
        passed = [a.round for a in attempts if a.outcome.passed]
        if passed:
            terminal = Terminal.SOLVED
            first_solved = min(passed)
        else:
            terminal = Terminal.EXHAUSTED
            first_solved = None
    return ProblemTranscript(
        task_id=task_id,
        attempts=attempts,
        first_solved_round=first_solved,
        terminal=terminal,
    )


def run_problem(
    problem: Problem,
    gateway: ProviderGateway,
    config: RunConfig,
    runner: RunnerSpec,
    prior_attempts: Sequence[Attempt] = (),
) -> ProblemTranscript:
    """Drive one problem through round 0 plus up to max_rounds repairs.

    prior_attempts continues a partial transcript recovered from the ledger;
    rounds resume where the records stop.
    """
    if config.mode is not RunMode.REPAIR:
        raise ValueError("run_problem requires repair mode")
    attempts = list(prior_attempts)
    if attempts and attempts[-1].outcome.passed:
        return _transcript(problem.task_id, attempts)
    while len(attempts) <= config.max_rounds:
        round_no = len(attempts)
        if round_no == 0:
            conversation = initial_conversation(problem)
        else:
            previous = attempts[-1]
            conversation = repair_conversation(
                problem,
                previous.extraction.code,
                previous.outcome.feedback,
                config.strategy,
                round_no,
            )
        try:
            completion = gateway.generate(conversation, config.decoding)
        except ProviderFailure as exc:
            logger.warning("task %s round %d: provider failure: %s", problem.task_id, round_no, exc)
            attempts.append(_api_error_attempt(conversation, round_no, exc))
            break
        extraction = extract(completion.text, problem)
        outcome = execute(extraction.code, problem, config.limits, runner)
        attempts.append(
            Attempt(
                round=round_no,
                conversation=conversation,
                raw_completion=completion.text,
                extraction=extraction,
                outcome=outcome,
                usage=completion.usage,
            )
        )
        if outcome.passed:
            break
    return _transcript(problem.task_id, attempts)


def resample_problem(
    problem: Problem,
    gateway: ProviderGateway,
    config: RunConfig,
    runner: RunnerSpec,
    prior_attempts: Sequence[Attempt] = (),
) -> ProblemTranscript:
    """Draw k independent samples from the identical initial conversation.

    Every sample is executed and recorded whether or not an earlier one
    passed; the attempt's round field is the sample index.
    """
    if config.mode is not RunMode.RESAMPLE:
        raise ValueError("resample_problem requires resample mode")
    base = initial_conversation(problem)
    attempts = list(prior_attempts)
    while len(attempts) < config.samples_k:
        index = len(attempts)
        conversation = Conversation(messages=base.messages, task_id=problem.task_id, round=index)
        try:
            completion = gateway.generate(conversation, config.decoding)
        except ProviderFailure as exc:
            logger.warning("task %s sample %d: provider failure: %s", problem.task_id, index, exc)
            attempts.append(_api_error_attempt(conversation, index, exc))
            break
        extraction = extract(completion.text, problem)
        outcome = execute(extraction.code, problem, config.limits, runner)
        attempts.append(
            Attempt(
                round=index,
                conversation=conversation,
                raw_completion=completion.text,
                extraction=extraction,
                outcome=outcome,
                usage=completion.usage,
            )
        )
    return _transcript(problem.task_id, attempts)


def record_from_attempt(run_id: str, task_id: str, attempt: Attempt) -> AttemptRecord:
    return AttemptRecord(
        run_id=run_id,
        task_id=task_id,
        round=attempt.round,
        conversation=tuple(
            {"role": message.role, "content": message.content}
            for message in attempt.conversation.messages
        ),
        raw_completion=attempt.raw_completion,
        code=attempt.extraction.code,
        method=attempt.extraction.method.value,
        stripped_reasoning=attempt.extraction.stripped_reasoning,
        status=attempt.outcome.status,
        category=attempt.outcome.category.value if attempt.outcome.category else None,
        exception_name=attempt.outcome.exception_name,
        feedback=attempt.outcome.feedback,
        prompt_tokens=attempt.usage.prompt_tokens,
        completion_tokens=attempt.usage.completion_tokens,
        reasoning_tokens=attempt.usage.reasoning_tokens,
    )


def attempt_from_record(record: AttemptRecord) -> Attempt:
    return Attempt(
        round=record.round,
        conversation=Conversation(
            messages=tuple(
                Message(role=item["role"], content=item["content"])
                for item in record.conversation
            ),
            task_id=record.task_id,
            round=record.round,
        ),
        raw_completion=record.raw_completion,
        extraction=ExtractionResult(
            code=record.code,
            method=ExtractionMethod(record.method),
            stripped_reasoning=record.stripped_reasoning,
        ),
        outcome=ExecutionOutcome(
            status=record.status,
            category=ErrorCategory(record.category) if record.category else None,
            exception_name=record.exception_name,
            feedback=record.feedback,
            duration_ms=0,
        ),
        usage=TokenUsage(
            prompt_tokens=record.prompt_tokens,
            completion_tokens=record.completion_tokens,
            reasoning_tokens=record.reasoning_tokens,
        ),
    )


def transcripts_from_records(
    records: Sequence[AttemptRecord],
    mode: str,
    max_rounds: int,
    samples_k: int,
) -> list[ProblemTranscript]:
    """Rebuild terminal transcripts from ledger records.

    Non-terminal groups (a run aborted mid-problem) are skipped with a
    warning rather than misreported as exhausted.
    """
    from .ledger import _terminal

    grouped = group_records(records)
    transcripts: list[ProblemTranscript] = []
    for task_id in sorted(grouped):
        task_records = grouped[task_id]
        if _terminal(task_records, mode, max_rounds, samples_k) is None:
            logger.warning("skipping non-terminal transcript for task %s", task_id)
            continue
        attempts = [attempt_from_record(record) for record in task_records]
        transcripts.append(_transcript(task_id, attempts))
    return transcripts


def run_suite(
    problem_set: ProblemSet,
    gateway: ProviderGateway,
    config: RunConfig,
    ledger: RunLedger,
    runner: RunnerSpec,
    workers: int = 1,
) -> RunResult:
    """Run every pending problem and persist attempts to the ledger.

    Transcripts are flushed in task_id order regardless of completion order,
    keeping the ledger bytes deterministic under concurrency. Provider
    failures are data (api_error transcripts); any other exception aborts
    the run after the already-finished prefix is flushed.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    pending = set(resume_plan(ledger, problem_set))
    prior = group_records(ledger.records())
    run_id = ledger.manifest.run_id

    def _one(problem: Problem) -> ProblemTranscript:
        prior_attempts = tuple(
            attempt_from_record(record) for record in prior.get(problem.task_id, [])
        )
        if config.mode is RunMode.RESAMPLE:
            return resample_problem(problem, gateway, config, runner, prior_attempts=prior_attempts)
        return run_problem(problem, gateway, config, runner, prior_attempts=prior_attempts)

    todo = [problem for problem in problem_set if problem.task_id in pending]
    logger.info(
        "run %s: %d of %d problems pending", run_id, len(todo), problem_set.count
    )
    pool = ThreadPoolExecutor(max_workers=workers)
    futures = [(problem, pool.submit(_one, problem)) for problem in todo]
    try:
        for problem, future in futures:
            transcript = future.result()
            already = len(prior.get(problem.task_id, []))
            for attempt in transcript.attempts[already:]:
                ledger.append_attempt(
                    record_from_attempt(run_id, problem.task_id, attempt),
                    duration_ms=attempt.outcome.duration_ms,
                )
    except BaseException:
        for _, future in futures:
            future.cancel()
        pool.shutdown(wait=True, cancel_futures=True)
        ledger.mark_aborted()
        raise
    pool.shutdown(wait=True)
    ledger.mark_complete()
    transcripts = transcripts_from_records(
        ledger.records(),
        mode=config.mode.value,
        max_rounds=config.max_rounds,
        samples_k=config.samples_k,
    )
    return RunResult(
        run_id=run_id,
        benchmark=ledger.manifest.benchmark,
        model_name=ledger.manifest.model_name,
        mode=config.mode,
        strategy=config.strategy,
        max_rounds=config.max_rounds,
        samples_k=config.samples_k,
        transcripts=tuple(transcripts),
        run_dir=ledger.run_dir,
    )


def load_run_result(run_dir: str | Path) -> RunResult:
    """Rebuild a RunResult from a run directory alone."""
    ledger = RunLedger.load(run_dir)
    manifest = ledger.manifest
    transcripts = transcripts_from_records(
        ledger.records(),
        mode=manifest.mode,
        max_rounds=manifest.max_rounds,
        samples_k=manifest.samples_k,
    )
    return RunResult(
        run_id=manifest.run_id,
        benchmark=manifest.benchmark,
        model_name=manifest.model_name,
        mode=RunMode(manifest.mode),
        strategy=RepairStrategy(manifest.strategy),
        max_rounds=manifest.max_rounds,
        samples_k=manifest.samples_k,
        transcripts=tuple(transcripts),
        run_dir=Path(run_dir),
    )
