"""CSV tables derived from run ledgers.

Every file is a comma-separated table with a header row, UTF-8, LF line
endings, one metric family per file. Exports carry raw integer counts next
to the rounded percentages so published-style numbers can always be audited
against the counts that produced them. Builders for single-benchmark tables
refuse mixed-benchmark input; the cross-benchmark delta table is the one
place benchmarks meet.

In reports the type and value error categories merge into one bucket, as do
index and key; the harness-level categories (timeout, extraction_failure,
api_error) stay separate.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .engine import RunMode, RunResult
from .errors import MixedBenchmarkError
from .executor import ErrorCategory
from .metrics import (
    MetricsSummary,
    cumulative_counts,
    half_up,
    percent_1dp,
    repair_counts_by_error_type,
    resample_pass_at_k,
    summarize,
    tokens_per_pp,
    total_usage,
)

MERGED_BUCKETS = (
    "assertion",
    "syntax",
    "type_value",
    "name",
    "index_key",
    "timeout",
    "extraction_failure",
    "api_error",
    "other",
)

_MERGE = {
    ErrorCategory.TYPE: "type_value",
    ErrorCategory.VALUE: "type_value",
    ErrorCategory.INDEX: "index_key",
    ErrorCategory.KEY: "index_key",
}


def merged_bucket(category: ErrorCategory) -> str:
    return _MERGE.get(category, category.value)


@dataclass(frozen=True)
class Table:
    header: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]

    def to_csv_text(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(self.header)
        writer.writerows(self.rows)
        return buffer.getvalue()


def write_table(table: Table, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(table.to_csv_text())
    return path


def fmt_pct(count: int, n: int) -> str:
    return f"{percent_1dp(count, n):.1f}"


def fmt_delta(first: int, last: int, n: int) -> str:
    value = percent_1dp(last - first, n)
    return f"+{value:.1f}" if value > 0 else f"{value:.1f}"


def _repair_results(results: Sequence[RunResult], table: str) -> list[RunResult]:
    repair = [result for result in results if result.mode is RunMode.REPAIR]
    if not repair:
        raise ValueError(f"{table} table needs at least one repair-mode run")
    return repair


def _same_benchmark(results: Sequence[RunResult], table: str) -> str:
    benchmarks = {result.benchmark for result in results}
    if len(benchmarks) != 1:
        raise MixedBenchmarkError(
            f"{table} table cannot mix benchmarks: {sorted(benchmarks)}"
        )
    return next(iter(benchmarks))


def _same_rounds(results: Sequence[RunResult], table: str) -> int:
    rounds = {result.max_rounds for result in results}
    if len(rounds) != 1:
        raise ValueError(f"{table} table cannot mix round budgets: {sorted(rounds)}")
    return next(iter(rounds))


def _summary(result: RunResult) -> MetricsSummary:
    return summarize(result.transcripts, result.max_rounds)


def build_rounds_table(results: Sequence[RunResult]) -> Table:
    """Cumulative pass@1 per round with the counts that back it."""
    results = _repair_results(results, "rounds")
    benchmark = _same_benchmark(results, "rounds")
    max_rounds = _same_rounds(results, "rounds")
    header = (
        "model",
        "benchmark",
        "n",
        *(f"r{i}_pct" for i in range(max_rounds + 1)),
        "delta_pp",
        *(f"solved_r{i}" for i in range(max_rounds + 1)),
    )
    rows = []
    for result in sorted(results, key=lambda r: r.model_name):
        summary = _summary(result)
        cumulative = cumulative_counts(summary.first_solved)
        rows.append(
            (
                result.model_name,
                benchmark,
                str(summary.n_problems),
                *(fmt_pct(count, summary.n_problems) for count in cumulative),
                fmt_delta(cumulative[0], cumulative[-1], summary.n_problems),
                *(str(count) for count in cumulative),
            )
        )
    return Table(header=header, rows=tuple(rows))


def build_first_solved_table(results: Sequence[RunResult]) -> Table:
    """First-solved-round histogram plus repair success percentage."""
    results = _repair_results(results, "first_solved")
    benchmark = _same_benchmark(results, "first_solved")
    max_rounds = _same_rounds(results, "first_solved")
    header = (
        "model",
        "benchmark",
        "n",
        *(f"first_r{i}" for i in range(max_rounds + 1)),
        "never",
        "repair_pct",
    )
    rows = []
    for result in sorted(results, key=lambda r: r.model_name):
        summary = _summary(result)
        initially_failed = summary.n_problems - summary.first_solved[0]
        repaired = sum(summary.first_solved[1:])
        repair_pct = fmt_pct(repaired, initially_failed) if initially_failed else ""
        rows.append(
            (
                result.model_name,
                benchmark,
                str(summary.n_problems),
                *(str(count) for count in summary.first_solved),
                str(summary.never_solved),
                repair_pct,
            )
        )
    return Table(header=header, rows=tuple(rows))


def build_tokens_table(results: Sequence[RunResult]) -> Table:
    """Token spend and cost per percentage point gained."""
    results = _repair_results(results, "tokens")
    benchmark = _same_benchmark(results, "tokens")
    header = (
        "model",
        "benchmark",
        "prompt_tokens",
        "completion_tokens",
        "reasoning_tokens",
        "billable_tokens",
        "delta_pp",
        "tokens_per_pp",
        "tokens_per_pp_k",
    )
    rows = []
    for result in sorted(results, key=lambda r: r.model_name):
        summary = _summary(result)
        cumulative = cumulative_counts(summary.first_solved)
        cost = tokens_per_pp(summary.usage, summary.delta_pp)
        rows.append(
            (
                result.model_name,
                benchmark,
                str(summary.usage.prompt_tokens),
                str(summary.usage.completion_tokens),
                str(summary.usage.reasoning_tokens),
                str(summary.usage.billable),
                fmt_delta(cumulative[0], cumulative[-1], summary.n_problems),
                f"{half_up(cost, 1):.1f}" if cost is not None else "",
                f"{half_up(cost / 1000, 1):.1f}" if cost is not None else "",
            )
        )
    return Table(header=header, rows=tuple(rows))


def build_error_distribution_table(result: RunResult) -> Table:
    """Round-0 failure categories, merged into reporting buckets."""
    summary = _summary(result)
    buckets: dict[str, int] = {}
    for category, count in summary.r0_errors.items():
        bucket = merged_bucket(category)
        buckets[bucket] = buckets.get(bucket, 0) + count
    rows = tuple(
        (result.model_name, result.benchmark, bucket, str(buckets[bucket]))
        for bucket in MERGED_BUCKETS
        if bucket in buckets
    )
    return Table(header=("model", "benchmark", "category", "count"), rows=rows)


def build_repair_by_error_table(result: RunResult) -> Table:
    """Repair success per round-0 error bucket."""
    counts = repair_counts_by_error_type(result.transcripts)
    failed: dict[str, int] = {}
    repaired: dict[str, int] = {}
    for category, (fail_count, repair_count) in counts.items():
        bucket = merged_bucket(category)
        failed[bucket] = failed.get(bucket, 0) + fail_count
        repaired[bucket] = repaired.get(bucket, 0) + repair_count
    rows = tuple(
        (
            result.model_name,
            result.benchmark,
            bucket,
            str(failed[bucket]),
            str(repaired.get(bucket, 0)),
            fmt_pct(repaired.get(bucket, 0), failed[bucket]),
        )
        for bucket in MERGED_BUCKETS
        if bucket in failed
    )
    return Table(
        header=("model", "benchmark", "category", "initial_failures", "repaired", "repair_pct"),
        rows=rows,
    )


def build_marginals_table(result: RunResult) -> Table:
    """Gain contributed by each repair round."""
    summary = _summary(result)
    rows = tuple(
        (
            result.model_name,
            result.benchmark,
            f"r{i}_to_r{i + 1}",
            str(summary.first_solved[i + 1]),
            fmt_pct(summary.first_solved[i + 1], summary.n_problems),
        )
        for i in range(result.max_rounds)
    )
    return Table(
        header=("model", "benchmark", "transition", "newly_solved", "marginal_pp"),
        rows=rows,
    )


def build_cumulative_table(result: RunResult) -> Table:
    """Per-round cumulative series, one row per round (plot data)."""
    summary = _summary(result)
    cumulative = cumulative_counts(summary.first_solved)
    rows = tuple(
        (
            result.model_name,
            result.benchmark,
            str(i),
            str(cumulative[i]),
            fmt_pct(cumulative[i], summary.n_problems),
        )
        for i in range(result.max_rounds + 1)
    )
    return Table(
        header=("model", "benchmark", "round", "solved", "cumulative_pct"),
        rows=rows,
    )


def build_pass_at_k_table(result: RunResult) -> Table:
    """Mean unbiased pass@k for k up to the sample count."""
    if result.mode is not RunMode.RESAMPLE:
        raise ValueError("pass_at_k table needs a resample-mode run")
    rows = tuple(
        (
            result.model_name,
            result.benchmark,
            str(k),
            f"{half_up(100.0 * resample_pass_at_k(result.transcripts, k), 1):.1f}",
        )
        for k in range(1, result.samples_k + 1)
    )
    return Table(header=("model", "benchmark", "k", "pass_at_k_pct"), rows=rows)


def build_ablation_table(results: Sequence[RunResult]) -> Table:
    """Strategy sweep: one row per run, deltas from each run's own round 0."""
    results = _repair_results(results, "ablation")
    benchmark = _same_benchmark(results, "ablation")
    max_rounds = _same_rounds(results, "ablation")
    header = (
        "model",
        "benchmark",
        "strategy",
        *(f"r{i}_pct" for i in range(max_rounds + 1)),
        "delta_pp",
    )
    rows = []
    for result in sorted(results, key=lambda r: (r.model_name, r.strategy.value)):
        summary = _summary(result)
        cumulative = cumulative_counts(summary.first_solved)
        rows.append(
            (
                result.model_name,
                benchmark,
                result.strategy.value,
                *(fmt_pct(count, summary.n_problems) for count in cumulative),
                fmt_delta(cumulative[0], cumulative[-1], summary.n_problems),
            )
        )
    return Table(header=header, rows=tuple(rows))


def build_resampling_table(results: Sequence[RunResult]) -> Table:
    """Repair vs resampling spend and accuracy, paired by model+benchmark."""
    repair = {
        (result.model_name, result.benchmark): result
        for result in results
        if result.mode is RunMode.REPAIR
    }
    resample = {
        (result.model_name, result.benchmark): result
        for result in results
        if result.mode is RunMode.RESAMPLE
    }
    shared = sorted(set(repair) & set(resample))
    if not shared:
        raise ValueError("resampling table needs a repair run and a resample run for one model")
    rows = []
    for key in shared:
        repair_result, resample_result = repair[key], resample[key]
        summary = _summary(repair_result)
        cumulative = cumulative_counts(summary.first_solved)
        k = resample_result.samples_k
        rows.append(
            (
                key[0],
                key[1],
                fmt_pct(cumulative[-1], summary.n_problems),
                str(summary.usage.billable),
                str(k),
                f"{half_up(100.0 * resample_pass_at_k(resample_result.transcripts, k), 1):.1f}",
                str(total_usage(resample_result.transcripts).billable),
            )
        )
    return Table(
        header=(
            "model",
            "benchmark",
            "repair_final_pct",
            "repair_tokens",
            "k",
            "resample_pass_at_k_pct",
            "resample_tokens",
        ),
        rows=tuple(rows),
    )


def build_cross_benchmark_table(results: Sequence[RunResult]) -> Table:
    """Repair delta per model across benchmarks (wide, one column each)."""
    repair = _repair_results(results, "cross_benchmark")
    benchmarks = sorted({result.benchmark for result in repair})
    if len(benchmarks) < 2:
        raise ValueError("cross_benchmark table needs runs on at least two benchmarks")
    deltas: dict[tuple[str, str], str] = {}
    for result in repair:
        summary = _summary(result)
        cumulative = cumulative_counts(summary.first_solved)
        deltas[(result.model_name, result.benchmark)] = fmt_delta(
            cumulative[0], cumulative[-1], summary.n_problems
        )
    models = sorted({model for model, _ in deltas})
    rows = tuple(
        (model, *(deltas.get((model, benchmark), "") for benchmark in benchmarks))
        for model in models
    )
    header = ("model", *(f"delta_pp_{benchmark}" for benchmark in benchmarks))
    return Table(header=header, rows=rows)


def export_run_reports(result: RunResult, reports_dir: str | Path | None = None) -> list[Path]:
    """Write the per-run report family into the run's reports directory."""
    if reports_dir is None:
        if result.run_dir is None:
            raise ValueError("result has no run_dir; pass reports_dir explicitly")
        reports_dir = Path(result.run_dir) / "reports"
    reports_dir = Path(reports_dir)
    written: list[Path] = []
    if result.mode is RunMode.REPAIR:
        tables = {
            "rounds.csv": build_rounds_table([result]),
            "first_solved.csv": build_first_solved_table([result]),
            "tokens.csv": build_tokens_table([result]),
            "error_distribution.csv": build_error_distribution_table(result),
            "repair_by_error.csv": build_repair_by_error_table(result),
            "marginals.csv": build_marginals_table(result),
            "cumulative.csv": build_cumulative_table(result),
        }
    else:
        tables = {
            "pass_at_k.csv": build_pass_at_k_table(result),
        }
    for name, table in tables.items():
        written.append(write_table(table, reports_dir / name))
    return written


def export_tables(results: Sequence[RunResult], out_dir: str | Path) -> list[Path]:
    """Write cross-run comparison tables for whatever the results support.

    Single-benchmark families are emitted per benchmark (suffixing the file
    name), so mixed inputs never collide inside one table. Empty input is an
    error: silently writing nothing would hide a bad invocation.
    """
    if not results:
        raise ValueError("no run results to export")
    out_dir = Path(out_dir)
    written: list[Path] = []
    repair = [result for result in results if result.mode is RunMode.REPAIR]
    by_benchmark: dict[str, list[RunResult]] = {}
    for result in repair:
        by_benchmark.setdefault(result.benchmark, []).append(result)
    for benchmark, group in sorted(by_benchmark.items()):
        if len(group) < 2:
            continue
        written.append(
            write_table(build_rounds_table(group), out_dir / f"rounds_{benchmark}.csv")
        )
        written.append(
            write_table(
                build_first_solved_table(group), out_dir / f"first_solved_{benchmark}.csv"
            )
        )
        written.append(
            write_table(build_tokens_table(group), out_dir / f"tokens_{benchmark}.csv")
        )
        if len({result.strategy for result in group}) > 1:
            written.append(
                write_table(build_ablation_table(group), out_dir / f"ablation_{benchmark}.csv")
            )
    pairs_possible = {
        (result.model_name, result.benchmark) for result in results if result.mode is RunMode.REPAIR
    } & {
        (result.model_name, result.benchmark)
        for result in results
        if result.mode is RunMode.RESAMPLE
    }
    if pairs_possible:
        written.append(write_table(build_resampling_table(results), out_dir / "resampling.csv"))
    if len({result.benchmark for result in repair}) >= 2:
        written.append(
            write_table(build_cross_benchmark_table(repair), out_dir / "cross_benchmark.csv")
        )
    return written
