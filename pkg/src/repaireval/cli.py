"""Command-line interface.

Subcommands: run, resample, ablate, report, validate, extract-debug. Runs
resume by default when the computed run directory already exists; --fresh
salts the run id to force a new directory. Flag precedence: command line,
then --config file (key=value lines, keys named like the long flags), then
defaults. Credentials are only ever read from the environment variable named
by --credential-env.

Exit codes: 0 success, 1 validation findings, 2 configuration or data error,
3 infrastructure abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import uuid
from pathlib import Path
from typing import Any, Callable, Sequence

from .benchmarks import BENCHMARK_KINDS, Problem, ProblemSet, load_problem_set, validate
from .engine import (
    RepairStrategy,
    RunConfig,
    RunMode,
    RunResult,
    attempt_from_record,
    load_run_result,
    run_suite,
)
from .errors import (
    ConfigurationError,
    DatasetError,
    InfrastructureError,
    LedgerConflictError,
    LedgerCorruptionError,
    MixedBenchmarkError,
    ResumeMismatchError,
    ScriptedGapError,
)
from .executor import ExecutionLimits, RunnerSpec
from .extraction import extract
from .ledger import RunLedger, build_manifest, read_manifest
from .providers import (
    OPENAI_COMPATIBLE,
    PROVIDER_KINDS,
    SCRIPTED,
    DecodingParams,
    ModelSpec,
    OpenAICompatibleProvider,
    ProviderGateway,
    RetryPolicy,
    load_script_file,
)
from .reports import export_run_reports, export_tables

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_CONFIG = 2
EXIT_INFRA = 3

_STRATEGY_ALIASES = {
    "minimal": RepairStrategy.MINIMAL,
    "explain_then_fix": RepairStrategy.EXPLAIN_THEN_FIX,
    "chain_of_thought": RepairStrategy.CHAIN_OF_THOUGHT,
    "cot": RepairStrategy.CHAIN_OF_THOUGHT,
}


def _parse_strategy(name: str) -> RepairStrategy:
    try:
        return _STRATEGY_ALIASES[name.strip()]
    except KeyError:
        raise ConfigurationError(
            f"unknown strategy {name!r} (choose from "
            f"{sorted(set(_STRATEGY_ALIASES))})"
        ) from None


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _read_config_file(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{path}: line {lineno}: expected key=value")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


class _Options:
    """Layered option lookup: flags beat the config file beat defaults."""

    def __init__(self, args: argparse.Namespace, config: dict[str, str]):
        self._args = args
        self._config = config

    def get(self, name: str, default: Any = None, cast: Callable[[str], Any] = str) -> Any:
        flag = getattr(self._args, name.replace("-", "_"), None)
        if flag is not None:
            return flag
        if name in self._config:
            try:
                return cast(self._config[name])
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"config key {name}: {exc}") from exc
        return default

    def require(self, name: str, cast: Callable[[str], Any] = str) -> Any:
        value = self.get(name, default=None, cast=cast)
        if value is None:
            raise ConfigurationError(f"missing required option --{name}")
        return value


def _add_common_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file; flags override it")
    parser.add_argument("--dataset", help="benchmark JSONL file (optionally compressed)")
    parser.add_argument("--benchmark", choices=BENCHMARK_KINDS, help="dataset layout")
    parser.add_argument("--provider", choices=PROVIDER_KINDS, help="model provider kind")
    parser.add_argument("--model", help="model name sent to the provider")
    parser.add_argument("--endpoint", help="chat-completions URL (openai_compatible)")
    parser.add_argument(
        "--credential-env",
        help="name of the environment variable holding the API credential",
    )
    parser.add_argument("--script", help="scripted-provider completions file")
    parser.add_argument("--timeout", type=float, help="execution wall-clock seconds (default 15)")
    parser.add_argument(
        "--max-feedback-bytes", type=int, help="feedback truncation bound (default 2048)"
    )
    parser.add_argument("--temperature", type=float, help="sampling temperature")
    parser.add_argument("--max-output-tokens", type=int, help="completion token cap (default 4096)")
    parser.add_argument("--retry-budget", type=int, help="provider attempts per request (default 5)")
    parser.add_argument(
        "--retry-base-delay", type=float, help="backoff base seconds (default 1.0)"
    )
    parser.add_argument("--rpm", type=float, help="provider requests per minute limit")
    parser.add_argument("--workers", type=int, help="concurrent problems (default 1)")
    parser.add_argument("--out-dir", help="parent directory for run directories (default runs)")
    parser.add_argument("--run-dir", help="existing run directory to resume")
    parser.add_argument("--runner", help="runner command (default: python -m sandbox_runner)")
    parser.add_argument(
        "--fresh", action="store_true", default=None, help="force a new run directory"
    )
    parser.add_argument(
        "--request-override",
        action="append",
        metavar="KEY=JSON",
        help="extra request body field (repeatable)",
    )


def _parse_overrides(pairs: Sequence[str] | None) -> tuple[tuple[str, Any], ...]:
    overrides = []
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigurationError(f"--request-override needs KEY=VALUE, got {pair!r}")
        key, _, raw = pair.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides.append((key, value))
    return tuple(sorted(overrides))


def _build_problem_set(options: _Options) -> ProblemSet:
    dataset = options.require("dataset")
    benchmark = options.require("benchmark")
    if benchmark not in BENCHMARK_KINDS:
        raise ConfigurationError(f"unknown benchmark kind {benchmark!r}")
    return load_problem_set(dataset, benchmark)


def _build_model_spec(options: _Options, strategy: RepairStrategy | None) -> tuple[ModelSpec, Any]:
    provider = options.require("provider")
    if provider == SCRIPTED:
        script = options.require("script")
        model = options.get("model", default="scripted")
        spec = ModelSpec(provider=SCRIPTED, model_name=model)
        instance = load_script_file(script, strategy=strategy.value if strategy else None)
        return spec, instance
    model = options.require("model")
    endpoint = options.require("endpoint")
    credential_env = options.require("credential-env")
    spec = ModelSpec(
        provider=OPENAI_COMPATIBLE,
        model_name=model,
        endpoint=endpoint,
        credential_ref=credential_env,
        request_overrides=_parse_overrides(getattr(options._args, "request_override", None)),
    )
    return spec, OpenAICompatibleProvider(spec)


def _build_gateway(options: _Options, provider_instance: Any) -> ProviderGateway:
    retry = RetryPolicy(
        budget=options.get("retry-budget", default=5, cast=int),
        base_delay=options.get("retry-base-delay", default=1.0, cast=float),
    )
    rpm = options.get("rpm", default=None, cast=float)
    return ProviderGateway(provider_instance, retry=retry, requests_per_minute=rpm)


def _build_runner(options: _Options) -> RunnerSpec:
    command = options.get(
        "runner", default=f"{sys.executable} -m sandbox_runner"
    )
    return RunnerSpec.from_string(command)


def _open_ledger(
    options: _Options,
    problem_set: ProblemSet,
    model_spec: ModelSpec,
    config: RunConfig,
) -> RunLedger:
    run_dir = options.get("run-dir", default=None)
    if run_dir:
        existing = read_manifest(Path(run_dir))
        manifest = build_manifest(problem_set, model_spec, config, salt=existing.salt)
        if manifest.run_id != existing.run_id:
            raise ResumeMismatchError(
                f"{run_dir} was created from a different dataset, model or "
                "configuration; refusing to resume into it"
            )
        return RunLedger.create_or_resume(Path(run_dir).parent, manifest)
    salt = uuid.uuid4().hex if options.get("fresh", default=False, cast=_parse_bool) else ""
    manifest = build_manifest(problem_set, model_spec, config, salt=salt)
    out_dir = Path(options.get("out-dir", default="runs"))
    return RunLedger.create_or_resume(out_dir, manifest)


def _execute_run(options: _Options, mode: RunMode, strategy: RepairStrategy) -> int:
    problem_set = _build_problem_set(options)
    default_temperature = 0.8 if mode is RunMode.RESAMPLE else 0.0
    decoding = DecodingParams(
        temperature=options.get("temperature", default=default_temperature, cast=float),
        max_output_tokens=options.get("max-output-tokens", default=4096, cast=int),
    )
    limits = ExecutionLimits(
        wall_clock_timeout=options.get("timeout", default=15.0, cast=float),
        max_feedback_bytes=options.get("max-feedback-bytes", default=2048, cast=int),
    )
    config = RunConfig(
        max_rounds=options.get("max-rounds", default=4, cast=int),
        strategy=strategy,
        decoding=decoding,
        limits=limits,
        mode=mode,
        samples_k=options.get("samples-k", default=5, cast=int),
    )
    model_spec, provider_instance = _build_model_spec(
        options, strategy if mode is RunMode.REPAIR else None
    )
    gateway = _build_gateway(options, provider_instance)
    runner = _build_runner(options)
    workers = options.get("workers", default=1, cast=int)
    with _open_ledger(options, problem_set, model_spec, config) as ledger:
        result = run_suite(problem_set, gateway, config, ledger, runner, workers=workers)
    paths = export_run_reports(result)
    for path in paths:
        logger.info("wrote %s", path)
    primary = "rounds.csv" if mode is RunMode.REPAIR else "pass_at_k.csv"
    report_path = Path(result.run_dir) / "reports" / primary
    sys.stdout.write(f"run_id: {result.run_id}\n")
    sys.stdout.write(report_path.read_text(encoding="utf-8"))
    return EXIT_OK


def _cmd_run(options: _Options) -> int:
    strategy = _parse_strategy(options.get("strategy", default="minimal"))
    return _execute_run(options, RunMode.REPAIR, strategy)


def _cmd_resample(options: _Options) -> int:
    return _execute_run(options, RunMode.RESAMPLE, RepairStrategy.MINIMAL)


def _cmd_ablate(options: _Options) -> int:
    names = options.get("strategies", default="minimal,explain_then_fix,chain_of_thought")
    strategies = [_parse_strategy(name) for name in names.split(",") if name.strip()]
    if not strategies:
        raise ConfigurationError("--strategies resolved to an empty list")
    problem_set = _build_problem_set(options)
    limits = ExecutionLimits(
        wall_clock_timeout=options.get("timeout", default=15.0, cast=float),
        max_feedback_bytes=options.get("max-feedback-bytes", default=2048, cast=int),
    )
    decoding = DecodingParams(
        temperature=options.get("temperature", default=0.0, cast=float),
        max_output_tokens=options.get("max-output-tokens", default=4096, cast=int),
    )
    runner = _build_runner(options)
    workers = options.get("workers", default=1, cast=int)
    results: list[RunResult] = []
    for strategy in strategies:
        config = RunConfig(
            max_rounds=options.get("max-rounds", default=2, cast=int),
            strategy=strategy,
            decoding=decoding,
            limits=limits,
            mode=RunMode.REPAIR,
            samples_k=5,
        )
        model_spec, provider_instance = _build_model_spec(options, strategy)
        gateway = _build_gateway(options, provider_instance)
        with _open_ledger(options, problem_set, model_spec, config) as ledger:
            result = run_suite(problem_set, gateway, config, ledger, runner, workers=workers)
        export_run_reports(result)
        results.append(result)
    from .reports import build_ablation_table, write_table

    out_dir = Path(options.get("out-dir", default="runs"))
    table = build_ablation_table(results)
    path = write_table(table, out_dir / "ablation.csv")
    sys.stdout.write(f"wrote: {path}\n")
    sys.stdout.write(table.to_csv_text())
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    results = [load_run_result(run_dir) for run_dir in args.run_dirs]
    for result in results:
        for path in export_run_reports(result):
            sys.stdout.write(f"# {path}\n")
            sys.stdout.write(path.read_text(encoding="utf-8"))
    if len(results) > 1:
        out_dir = Path(args.out_dir) if args.out_dir else Path(args.run_dirs[0]).parent
        for path in export_tables(results, out_dir):
            sys.stdout.write(f"# {path}\n")
            sys.stdout.write(path.read_text(encoding="utf-8"))
    return EXIT_OK


def _cmd_validate(args: argparse.Namespace) -> int:
    problem_set = load_problem_set(args.dataset, args.benchmark)
    findings = validate(problem_set)
    for finding in findings:
        sys.stdout.write(finding + "\n")
    if findings:
        sys.stdout.write(f"{len(findings)} finding(s) in {problem_set.count} problems\n")
        return EXIT_FINDINGS
    sys.stdout.write(f"ok: {problem_set.count} problems\n")
    return EXIT_OK


def _cmd_extract_debug(args: argparse.Namespace) -> int:
    problem_set = load_problem_set(args.dataset, args.benchmark)
    ledger = RunLedger.load(args.run_dir)
    problems: dict[str, Problem] = {problem.task_id: problem for problem in problem_set}
    for record in ledger.records():
        if args.task and record.task_id != args.task:
            continue
        if args.round is not None and record.round != args.round:
            continue
        problem = problems.get(record.task_id)
        if problem is None:
            raise DatasetError(f"ledger task {record.task_id!r} is not in the dataset")
        attempt = attempt_from_record(record)
        fresh = extract(record.raw_completion, problem)
        sys.stdout.write(
            json.dumps(
                {
                    "task_id": record.task_id,
                    "round": record.round,
                    "method": fresh.method.value,
                    "stripped_reasoning": fresh.stripped_reasoning,
                    "code": fresh.code,
                    "matches_ledger": fresh == attempt.extraction,
                },
                sort_keys=True,
                ensure_ascii=False,
            )
            + "\n"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repaireval",
        description="Evaluation harness for iterative code self-repair",
    )
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="run the repair loop over a benchmark")
    _add_common_run_flags(run_parser)
    run_parser.add_argument("--strategy", help="repair strategy (minimal, explain_then_fix, cot)")
    run_parser.add_argument("--max-rounds", type=int, help="repair rounds after round 0 (default 4)")

    resample_parser = commands.add_parser(
        "resample", help="draw k independent samples per problem instead of repairing"
    )
    _add_common_run_flags(resample_parser)
    resample_parser.add_argument("--samples-k", type=int, help="samples per problem (default 5)")

    ablate_parser = commands.add_parser("ablate", help="run a repair-strategy sweep")
    _add_common_run_flags(ablate_parser)
    ablate_parser.add_argument("--strategies", help="comma-separated strategy list")
    ablate_parser.add_argument("--max-rounds", type=int, help="repair rounds (default 2)")

    report_parser = commands.add_parser("report", help="regenerate tables from run ledgers")
    report_parser.add_argument("run_dirs", nargs="+", help="run directories")
    report_parser.add_argument("--out-dir", help="where cross-run tables go")

    validate_parser = commands.add_parser("validate", help="check a benchmark file")
    validate_parser.add_argument("--dataset", required=True)
    validate_parser.add_argument("--benchmark", required=True, choices=BENCHMARK_KINDS)

    debug_parser = commands.add_parser(
        "extract-debug", help="re-run extraction over a ledger's raw completions"
    )
    debug_parser.add_argument("--run-dir", required=True)
    debug_parser.add_argument("--dataset", required=True)
    debug_parser.add_argument("--benchmark", required=True, choices=BENCHMARK_KINDS)
    debug_parser.add_argument("--task", help="only this task id")
    debug_parser.add_argument("--round", type=int, help="only this round")

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "run":
            return _cmd_run(_Options(args, _read_config_file(args.config)))
        if args.command == "resample":
            return _cmd_resample(_Options(args, _read_config_file(args.config)))
        if args.command == "ablate":
            return _cmd_ablate(_Options(args, _read_config_file(args.config)))
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "validate":
            return _cmd_validate(args)
        if args.command == "extract-debug":
            return _cmd_extract_debug(args)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except (
        ConfigurationError,
        DatasetError,
        ResumeMismatchError,
        ScriptedGapError,
        MixedBenchmarkError,
    ) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG
    except (InfrastructureError, LedgerConflictError, LedgerCorruptionError, OSError) as exc:
        sys.stderr.write(f"aborted: {exc}\n")
        return EXIT_INFRA


if __name__ == "__main__":
    sys.exit(main())
