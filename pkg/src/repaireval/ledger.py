"""Durable run ledger.

A run directory is named by its run_id, a content hash over the problem-set
digest, the model identity, the run configuration and the harness version,
so the same inputs land in the same directory and resume by default. Layout:

    <out_dir>/<run_id>/
        manifest        key=value text: identity, status, timestamps
        attempts.jsonl  one flat record per attempt, append-only
        timings.jsonl   wall-clock sidecar (excluded from determinism)
        reports/        exported CSV tables

Records are written with a byte-stable JSON encoding (sorted keys, compact
separators, UTF-8, LF) so identical runs produce identical files. A lock
file enforces a single writer per run directory; readers need no lock.
Credentials never reach the ledger: the endpoint contributes to the run_id
hash but is not stored, and credential values are never seen by this module.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import threading
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Iterable

from . import __version__
from .benchmarks import ProblemSet
from .errors import (
    LedgerConflictError,
    LedgerCorruptionError,
    ResumeMismatchError,
)
from .providers import ModelSpec

MANIFEST_NAME = "manifest"
ATTEMPTS_NAME = "attempts.jsonl"
TIMINGS_NAME = "timings.jsonl"
REPORTS_DIR = "reports"
LOCK_NAME = "writer.lock"

STATUS_IN_PROGRESS = "in_progress"
STATUS_COMPLETE = "complete"
STATUS_ABORTED = "aborted"


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    created_at: str
    status: str
    benchmark: str
    problems_digest: str
    problem_count: int
    provider: str
    model_name: str
    strategy: str
    mode: str
    max_rounds: int
    samples_k: int
    temperature: float
    max_output_tokens: int
    wall_clock_timeout: float
    max_feedback_bytes: int
    harness_version: str
    salt: str = ""


def compute_run_id(
    problem_set: ProblemSet,
    model_spec: ModelSpec,
    config: Any,
    salt: str = "",
) -> str:
    """Hash everything that defines a run's identity.

    The endpoint participates here (a different endpoint is a different run)
    but is deliberately absent from the stored manifest.
    """
    material = {
        "problems_digest": problem_set.digest(),
        "benchmark": problem_set.name,
        "provider": model_spec.provider,
        "model_name": model_spec.model_name,
        "endpoint": model_spec.endpoint or "",
        "request_overrides": list(model_spec.request_overrides),
        "strategy": str(config.strategy.value),
        "mode": str(config.mode.value),
        "max_rounds": config.max_rounds,
        "samples_k": config.samples_k,
        "temperature": config.decoding.temperature,
        "max_output_tokens": config.decoding.max_output_tokens,
        "wall_clock_timeout": config.limits.wall_clock_timeout,
        "max_feedback_bytes": config.limits.max_feedback_bytes,
        "harness_version": __version__,
        "salt": salt,
    }
    blob = json.dumps(material, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def build_manifest(
    problem_set: ProblemSet,
    model_spec: ModelSpec,
    config: Any,
    salt: str = "",
) -> RunManifest:
    return RunManifest(
        run_id=compute_run_id(problem_set, model_spec, config, salt=salt),
        created_at=_dt.datetime.now(_dt.timezone.utc).isoformat(),
        status=STATUS_IN_PROGRESS,
        benchmark=problem_set.name,
        problems_digest=problem_set.digest(),
        problem_count=problem_set.count,
        provider=model_spec.provider,
        model_name=model_spec.model_name,
        strategy=str(config.strategy.value),
        mode=str(config.mode.value),
        max_rounds=config.max_rounds,
        samples_k=config.samples_k,
        temperature=config.decoding.temperature,
        max_output_tokens=config.decoding.max_output_tokens,
        wall_clock_timeout=config.limits.wall_clock_timeout,
        max_feedback_bytes=config.limits.max_feedback_bytes,
        harness_version=__version__,
        salt=salt,
    )


_MANIFEST_TYPES: dict[str, Any] = {
    "problem_count": int,
    "max_rounds": int,
    "samples_k": int,
    "max_output_tokens": int,
    "max_feedback_bytes": int,
    "temperature": float,
    "wall_clock_timeout": float,
}


def write_manifest(manifest: RunManifest, run_dir: Path) -> None:
    lines = [f"{key}={value}" for key, value in sorted(asdict(manifest).items())]
    text = "\n".join(lines) + "\n"
    tmp = run_dir / (MANIFEST_NAME + ".tmp")
    with open(tmp, "w", encoding="utf-8") as handle:
        handle.write(text)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(tmp, run_dir / MANIFEST_NAME)


def read_manifest(run_dir: Path) -> RunManifest:
    path = run_dir / MANIFEST_NAME
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LedgerCorruptionError(f"cannot read manifest {path}: {exc}") from exc
    values: dict[str, Any] = {}
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise LedgerCorruptionError(f"{path}: line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        values[key] = _MANIFEST_TYPES.get(key, str)(value)
    try:
        return RunManifest(**values)
    except TypeError as exc:
        raise LedgerCorruptionError(f"{path}: incomplete manifest: {exc}") from exc


@dataclass(frozen=True)
class AttemptRecord:
    """One attempt, flattened for the ledger.

    Wall-clock duration is deliberately not part of the record (it goes to
    the timings sidecar) so that identical configurations yield identical
    attempts.jsonl bytes.
    """

    run_id: str
    task_id: str
    round: int
    conversation: tuple[dict[str, str], ...]
    raw_completion: str
    code: str
    method: str
    stripped_reasoning: bool
    status: str
    category: str | None
    exception_name: str | None
    feedback: str
    prompt_tokens: int
    completion_tokens: int
    reasoning_tokens: int

    def to_json_line(self) -> str:
        payload = asdict(self)
        payload["conversation"] = list(self.conversation)
        return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_json_line(cls, line: str) -> "AttemptRecord":
        payload = json.loads(line)
        payload["conversation"] = tuple(payload["conversation"])
        return cls(**payload)


class RunLedger:
    """Writer/reader for one run directory.

    Use create_or_resume for a writing session (takes the lock) and load for
    read-only access (no lock). Appends are flushed and fsynced before
    returning, and duplicate (task_id, round) keys are refused.
    """

    def __init__(self, run_dir: Path, manifest: RunManifest, records: list[AttemptRecord], writable: bool):
        self.run_dir = run_dir
        self.manifest = manifest
        self._records = records
        self._writable = writable
        self._seen = {(record.task_id, record.round) for record in records}
        self._lock = threading.Lock()
        self._attempts_handle = None
        self._timings_handle = None

    @classmethod
    def create_or_resume(cls, out_dir: str | Path, manifest: RunManifest) -> "RunLedger":
        out_dir = Path(out_dir)
        run_dir = out_dir / manifest.run_id
        if run_dir.exists():
            existing = read_manifest(run_dir)
            if existing.run_id != manifest.run_id:
                raise ResumeMismatchError(
                    f"{run_dir}: manifest run_id {existing.run_id} does not match "
                    f"requested {manifest.run_id}"
                )
            manifest = replace(existing, status=STATUS_IN_PROGRESS)
        else:
            run_dir.mkdir(parents=True)
            write_manifest(manifest, run_dir)
        ledger = cls(run_dir, manifest, [], writable=True)
        ledger._acquire_lock()
        try:
            ledger._records = _read_records(run_dir, manifest.run_id)
            ledger._seen = {(r.task_id, r.round) for r in ledger._records}
            write_manifest(manifest, run_dir)
        except BaseException:
            ledger._release_lock()
            raise
        return ledger

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunLedger":
        run_dir = Path(run_dir)
        manifest = read_manifest(run_dir)
        records = _read_records(run_dir, manifest.run_id)
        return cls(run_dir, manifest, records, writable=False)

    def _acquire_lock(self) -> None:
        lock_path = self.run_dir / LOCK_NAME
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LedgerConflictError(
                f"another writer holds {lock_path} (remove it if that run is dead)"
            ) from None
        with os.fdopen(fd, "w") as handle:
            handle.write(str(os.getpid()))

    def _release_lock(self) -> None:
        try:
            os.unlink(self.run_dir / LOCK_NAME)
        except FileNotFoundError:
            pass

    def records(self) -> list[AttemptRecord]:
        with self._lock:
            return list(self._records)

    def append_attempt(self, record: AttemptRecord, duration_ms: int | None = None) -> None:
        if not self._writable:
            raise LedgerConflictError("ledger opened read-only")
        if record.run_id != self.manifest.run_id:
            raise LedgerConflictError(
                f"record run_id {record.run_id} does not belong to {self.manifest.run_id}"
            )
        key = (record.task_id, record.round)
        with self._lock:
            if key in self._seen:
                raise LedgerConflictError(f"duplicate attempt record {key}")
            if self._attempts_handle is None:
                self._attempts_handle = open(
                    self.run_dir / ATTEMPTS_NAME, "a", encoding="utf-8", newline="\n"
                )
            self._attempts_handle.write(record.to_json_line() + "\n")
            self._attempts_handle.flush()
            os.fsync(self._attempts_handle.fileno())
            if duration_ms is not None:
                if self._timings_handle is None:
                    self._timings_handle = open(
                        self.run_dir / TIMINGS_NAME, "a", encoding="utf-8", newline="\n"
                    )
                self._timings_handle.write(
                    json.dumps(
                        {"task_id": record.task_id, "round": record.round, "duration_ms": duration_ms},
                        sort_keys=True,
                        separators=(",", ":"),
                    )
                    + "\n"
                )
                self._timings_handle.flush()
            self._seen.add(key)
            self._records.append(record)

    def _set_status(self, status: str) -> None:
        self.manifest = replace(self.manifest, status=status)
        write_manifest(self.manifest, self.run_dir)

    def mark_complete(self) -> None:
        self._set_status(STATUS_COMPLETE)

    def mark_aborted(self) -> None:
        self._set_status(STATUS_ABORTED)

    def close(self) -> None:
        for name in ("_attempts_handle", "_timings_handle"):
            handle = getattr(self, name)
            if handle is not None:
                handle.close()
                setattr(self, name, None)
        if self._writable:
            self._release_lock()
            self._writable = False

    def __enter__(self) -> "RunLedger":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    @property
    def reports_dir(self) -> Path:
        return self.run_dir / REPORTS_DIR


def _read_records(run_dir: Path, run_id: str) -> list[AttemptRecord]:
    path = run_dir / ATTEMPTS_NAME
    if not path.exists():
        return []
    records: list[AttemptRecord] = []
    seen: set[tuple[str, int]] = set()
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = AttemptRecord.from_json_line(line)
            except (json.JSONDecodeError, TypeError, KeyError) as exc:
                raise LedgerCorruptionError(f"{path}: line {lineno}: {exc}") from exc
            if record.run_id != run_id:
                raise LedgerCorruptionError(
                    f"{path}: line {lineno}: record run_id {record.run_id} != {run_id}"
                )
            key = (record.task_id, record.round)
            if key in seen:
                raise LedgerCorruptionError(f"{path}: line {lineno}: duplicate record {key}")
            seen.add(key)
            records.append(record)
    return records


def _terminal(records: list[AttemptRecord], mode: str, max_rounds: int, samples_k: int) -> str | None:
    """Terminal state of one task's records, or None when still pending."""
    if any(record.category == "api_error" for record in records):
        return "api_error"
    if mode == "repair":
        if any(record.status == "pass" for record in records):
            return "solved"
        if len(records) >= max_rounds + 1:
            return "exhausted"
        return None
    if len(records) >= samples_k:
        return "solved" if any(record.status == "pass" for record in records) else "exhausted"
    return None


def resume_plan(ledger: RunLedger, problem_set: ProblemSet) -> list[str]:
    """Task ids still needing work, in task_id order.

    Tasks whose transcripts reached a terminal state are skipped; tasks with
    partial records are included so the engine can continue them. Records
    naming tasks outside the problem set mean the ledger and the data file
    no longer agree, which is unrecoverable here.
    """
    manifest = ledger.manifest
    if manifest.problems_digest != problem_set.digest():
        raise ResumeMismatchError(
            "problem set digest does not match the run manifest; "
            "the data file changed since this run was created"
        )
    known = {problem.task_id for problem in problem_set}
    grouped: dict[str, list[AttemptRecord]] = {}
    for record in ledger.records():
        if record.task_id not in known:
            raise LedgerCorruptionError(
                f"ledger names unknown task {record.task_id!r}"
            )
        grouped.setdefault(record.task_id, []).append(record)
    pending: list[str] = []
    for problem in problem_set:
        records = sorted(grouped.get(problem.task_id, []), key=lambda r: r.round)
        if _terminal(records, manifest.mode, manifest.max_rounds, manifest.samples_k) is None:
            pending.append(problem.task_id)
    return pending


def group_records(records: Iterable[AttemptRecord]) -> dict[str, list[AttemptRecord]]:
    grouped: dict[str, list[AttemptRecord]] = {}
    for record in records:
        grouped.setdefault(record.task_id, []).append(record)
    for task_records in grouped.values():
        task_records.sort(key=lambda record: record.round)
    return grouped
