"""Metric computations over run transcripts.

All aggregation happens on raw integer counts; percentages are derived views
rounded to one decimal at the report boundary with half-up rounding (exact
decimal arithmetic, not float round()). Deltas are computed from counts
before any rounding, so a published-style table reconciles with its own
first-solved histogram.

Category conventions: a transcript's round-0 error category attributes the
problem in error-type breakdowns; timeout, extraction_failure and api_error
are tracked as their own categories and never folded into the
exception-derived ones; api_error transcripts count as unsolved everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Mapping, Sequence

from .engine import ProblemTranscript, Terminal
from .executor import ErrorCategory
from .providers import TokenUsage


def half_up(value: float, ndigits: int = 1) -> float:
    """Round half away from zero, immune to float round()'s banker's ties."""
    quantum = Decimal(1).scaleb(-ndigits)
    return float(Decimal(str(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def percent_1dp(count: int, n: int) -> float:
    """Exact count/n as a percentage rounded half-up to one decimal."""
    if n <= 0:
        raise ValueError("n must be positive")
    value = (Decimal(count) * 100) / Decimal(n)
    return float(value.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def _require(transcripts: Sequence[ProblemTranscript]) -> None:
    if not transcripts:
        raise ValueError("metrics are undefined over zero transcripts")


def first_solved_counts(
    transcripts: Sequence[ProblemTranscript], max_rounds: int = 4
) -> tuple[list[int], int]:
    """Histogram of first-solved rounds plus the never-solved count."""
    _require(transcripts)
    counts = [0] * (max_rounds + 1)
    never = 0
    for transcript in transcripts:
        if transcript.terminal is Terminal.SOLVED and transcript.first_solved_round is not None:
            counts[transcript.first_solved_round] += 1
        else:
            never += 1
    return counts, never


def cumulative_counts(first_counts: Sequence[int]) -> list[int]:
    out: list[int] = []
    total = 0
    for count in first_counts:
        total += count
        out.append(total)
    return out


def cumulative_from_counts(first_counts: Sequence[int], n: int) -> list[float]:
    if n <= 0:
        raise ValueError("n must be positive")
    return [count / n for count in cumulative_counts(first_counts)]


def cumulative_pass_at_1(
    transcripts: Sequence[ProblemTranscript], max_rounds: int = 4
) -> list[float]:
    """Fraction solved by the end of each round, entry i for rounds <= i."""
    counts, _ = first_solved_counts(transcripts, max_rounds)
    return cumulative_from_counts(counts, len(transcripts))


def delta_from_counts(solved_first: int, solved_last: int, n: int) -> float:
    """Percentage-point improvement computed from raw counts."""
    if n <= 0:
        raise ValueError("n must be positive")
    return 100.0 * (solved_last - solved_first) / n


def points_1dp(count: int, n: int) -> float:
    """count/n in percentage points, exact half-up at one decimal."""
    return percent_1dp(count, n)


def repair_delta(transcripts: Sequence[ProblemTranscript], max_rounds: int = 4) -> float:
    counts, _ = first_solved_counts(transcripts, max_rounds)
    cumulative = cumulative_counts(counts)
    return delta_from_counts(cumulative[0], cumulative[-1], len(transcripts))


def marginals_from_counts(first_counts: Sequence[int], n: int) -> list[float]:
    """Per-round gains in percentage points; entry i is round i to i+1."""
    if n <= 0:
        raise ValueError("n must be positive")
    return [100.0 * count / n for count in first_counts[1:]]


def per_round_marginal(
    transcripts: Sequence[ProblemTranscript], max_rounds: int = 4
) -> list[float]:
    counts, _ = first_solved_counts(transcripts, max_rounds)
    return marginals_from_counts(counts, len(transcripts))


def repair_rate_from_counts(first_counts: Sequence[int], n: int) -> float | None:
    """Repaired / initially-failed, or None when nothing failed at round 0."""
    initially_failed = n - first_counts[0]
    if initially_failed == 0:
        return None
    repaired = sum(first_counts[1:])
    return repaired / initially_failed


def repair_success_rate(
    transcripts: Sequence[ProblemTranscript], max_rounds: int = 4
) -> float | None:
    counts, _ = first_solved_counts(transcripts, max_rounds)
    return repair_rate_from_counts(counts, len(transcripts))


def _r0_category(transcript: ProblemTranscript) -> ErrorCategory | None:
    first = transcript.attempts[0]
    return None if first.outcome.passed else first.outcome.category


def r0_error_distribution(
    transcripts: Sequence[ProblemTranscript],
) -> dict[ErrorCategory, int]:
    """Counts of round-0 failure categories (round-0 passes excluded)."""
    _require(transcripts)
    distribution: dict[ErrorCategory, int] = {}
    for transcript in transcripts:
        category = _r0_category(transcript)
        if category is not None:
            distribution[category] = distribution.get(category, 0) + 1
    return distribution


def repair_counts_by_error_type(
    transcripts: Sequence[ProblemTranscript],
) -> dict[ErrorCategory, tuple[int, int]]:
    """(initially failed, eventually repaired) counts per round-0 category."""
    _require(transcripts)
    failed: dict[ErrorCategory, int] = {}
    repaired: dict[ErrorCategory, int] = {}
    for transcript in transcripts:
        category = _r0_category(transcript)
        if category is None:
            continue
        failed[category] = failed.get(category, 0) + 1
        if transcript.terminal is Terminal.SOLVED:
            repaired[category] = repaired.get(category, 0) + 1
    return {
        category: (failed[category], repaired.get(category, 0)) for category in failed
    }


def repair_rate_by_error_type(
    transcripts: Sequence[ProblemTranscript],
) -> dict[ErrorCategory, float]:
    """Fraction eventually solved among problems grouped by round-0 category.

    Categories with no round-0 failures are absent from the mapping.
    """
    return {
        category: repaired / failed
        for category, (failed, repaired) in repair_counts_by_error_type(transcripts).items()
    }


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k: 1 - C(n-c, k) / C(n, k).

    Evaluated exactly in the multiplicative form prod (n-c-i)/(n-i), so no
    factorial ever materializes and n up to 10000 stays precise.
    """
    if not 0 <= c <= n:
        raise ValueError("need 0 <= c <= n")
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= n")
    if n - c < k:
        return 1.0
    miss = Fraction(1)
    for i in range(k):
        miss *= Fraction(n - c - i, n - i)
    return float(1 - miss)


def resample_pass_at_k(transcripts: Sequence[ProblemTranscript], k: int) -> float:
    """Mean unbiased pass@k over problems of a resampling run."""
    _require(transcripts)
    total = 0.0
    for transcript in transcripts:
        n = len(transcript.attempts)
        c = sum(1 for attempt in transcript.attempts if attempt.outcome.passed)
        total += pass_at_k(n, c, k)
    return total / len(transcripts)


def total_usage(transcripts: Sequence[ProblemTranscript]) -> TokenUsage:
    usage = TokenUsage()
    for transcript in transcripts:
        for attempt in transcript.attempts:
            usage = usage + attempt.usage
    return usage


def tokens_per_pp(usage: TokenUsage, delta_pp: float) -> float | None:
    """Prompt plus completion tokens per percentage point gained.

    Reasoning tokens are excluded from the numerator. Undefined (None) when
    the run gained nothing.
    """
    if delta_pp <= 0:
        return None
    return usage.billable / delta_pp


@dataclass(frozen=True)
class MetricsSummary:
    n_problems: int
    max_rounds: int
    first_solved: tuple[int, ...]
    never_solved: int
    cumulative: tuple[float, ...]
    delta_pp: float
    marginal_pp: tuple[float, ...]
    repair_success_rate: float | None
    r0_errors: Mapping[ErrorCategory, int]
    repair_by_error: Mapping[ErrorCategory, float]
    usage: TokenUsage
    tokens_per_pp: float | None


def summarize(
    transcripts: Sequence[ProblemTranscript], max_rounds: int = 4
) -> MetricsSummary:
    """One-stop derivation of every repair-mode metric for a run."""
    _require(transcripts)
    counts, never = first_solved_counts(transcripts, max_rounds)
    n = len(transcripts)
    cumulative = cumulative_counts(counts)
    delta = delta_from_counts(cumulative[0], cumulative[-1], n)
    usage = total_usage(transcripts)
    return MetricsSummary(
        n_problems=n,
        max_rounds=max_rounds,
        first_solved=tuple(counts),
        never_solved=never,
        cumulative=tuple(count / n for count in cumulative),
        delta_pp=delta,
        marginal_pp=tuple(marginals_from_counts(counts, n)),
        repair_success_rate=repair_rate_from_counts(counts, n),
        r0_errors=r0_error_distribution(transcripts),
        repair_by_error=repair_rate_by_error_type(transcripts),
        usage=usage,
        tokens_per_pp=tokens_per_pp(usage, delta),
    )
