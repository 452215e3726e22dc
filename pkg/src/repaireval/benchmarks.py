"""Benchmark loading and normalization.

Two on-disk formats are understood, both JSON-lines with one record per line
and optional gzip/bz2/xz compression (chosen by file extension):

* HumanEval layout: task_id, prompt, entry_point, test, canonical_solution.
  The prompt is used verbatim. The executable test program is the record's
  test text followed by a single ``check(<entry_point>)`` invocation.
* Sanitized-MBPP layout: task_id, text (or prompt), code, test_list,
  test_imports. The natural-language description gains one instruction line
  naming the required function and signature, the entry point is recovered
  from the reference solution, and the test program is the imports followed
  by the assertions, one per line. Test assertions are never shown to the
  model; they live only in the test program.

Problems iterate in lexicographic task_id order so runs are deterministic.
"""

from __future__ import annotations

import ast
import bz2
import gzip
import hashlib
import json
import lzma
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from .errors import DatasetError

HUMANEVAL = "humaneval"
MBPP_SANITIZED = "mbpp"

BENCHMARK_KINDS = (HUMANEVAL, MBPP_SANITIZED)

_HUMANEVAL_FIELDS = ("task_id", "prompt", "entry_point", "test", "canonical_solution")
_MBPP_FIELDS = ("task_id", "code", "test_list", "test_imports")


@dataclass(frozen=True)
class Problem:
    """One benchmark problem in normalized form."""

    task_id: str
    prompt: str
    entry_point: str
    test_program: str
    source_benchmark: str


@dataclass(frozen=True)
class ProblemSet:
    """An ordered, immutable collection of problems."""

    name: str
    problems: tuple[Problem, ...]

    def __post_init__(self) -> None:
        ordered = tuple(sorted(self.problems, key=lambda p: p.task_id))
        object.__setattr__(self, "problems", ordered)

    @property
    def count(self) -> int:
        return len(self.problems)

    def __iter__(self) -> Iterator[Problem]:
        return iter(self.problems)

    def __len__(self) -> int:
        return len(self.problems)

    def by_id(self, task_id: str) -> Problem:
        for problem in self.problems:
            if problem.task_id == task_id:
                return problem
        raise KeyError(task_id)

    def digest(self) -> str:
        """Content hash of the normalized problems, stable across loads."""
        hasher = hashlib.sha256()
        for problem in self.problems:
            blob = json.dumps(
                {
                    "task_id": problem.task_id,
                    "prompt": problem.prompt,
                    "entry_point": problem.entry_point,
                    "test_program": problem.test_program,
                    "source_benchmark": problem.source_benchmark,
                },
                sort_keys=True,
                ensure_ascii=False,
            )
            hasher.update(blob.encode("utf-8"))
            hasher.update(b"\n")
        return hasher.hexdigest()


def _open_text(path: Path):
    suffix = path.suffix.lower()
    if suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    if suffix == ".bz2":
        return bz2.open(path, "rt", encoding="utf-8")
    if suffix in (".xz", ".lzma"):
        return lzma.open(path, "rt", encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def _iter_records(path: Path) -> Iterable[tuple[int, dict]]:
    try:
        handle = _open_text(path)
    except OSError as exc:
        raise DatasetError(f"cannot open {path}: {exc}") from exc
    with handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: line {lineno}: malformed JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise DatasetError(f"{path}: line {lineno}: record is not an object")
            yield lineno, record


def _require(record: dict, fields: Iterable[str], path: Path, lineno: int) -> None:
    for name in fields:
        if name not in record:
            raise DatasetError(f"{path}: line {lineno}: missing field {name!r}")


def _check_unique(task_id: str, seen: set[str], path: Path, lineno: int) -> None:
    if task_id in seen:
        raise DatasetError(f"{path}: line {lineno}: duplicate task_id {task_id!r}")
    seen.add(task_id)


def load_humaneval(path: str | Path, name: str | None = None) -> ProblemSet:
    """Load a HumanEval-layout JSONL file into a ProblemSet."""
    path = Path(path)
    problems = []
    seen: set[str] = set()
    for lineno, record in _iter_records(path):
        _require(record, _HUMANEVAL_FIELDS, path, lineno)
        task_id = str(record["task_id"])
        _check_unique(task_id, seen, path, lineno)
        entry_point = str(record["entry_point"])
        if not entry_point.isidentifier():
            raise DatasetError(
                f"{path}: line {lineno}: entry_point {entry_point!r} is not an identifier"
            )
        test = str(record["test"])
        test_program = test if test.endswith("\n") else test + "\n"
        test_program += f"\ncheck({entry_point})\n"
        problems.append(
            Problem(
                task_id=task_id,
                prompt=str(record["prompt"]),
                entry_point=entry_point,
                test_program=test_program,
                source_benchmark=HUMANEVAL,
            )
        )
    return ProblemSet(name=name or HUMANEVAL, problems=tuple(problems))


def _called_names(tree: ast.AST) -> set[str]:
    names: set[str] = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
            names.add(node.func.id)
    return names


def _mbpp_entry_point(code: str, test_list: list[str], task_id: str) -> str:
    """Pick the defined function the tests actually invoke.

    Reference solutions sometimes define helpers before the target function,
    so "first def" alone is wrong; the tests are the authority on which name
    is the entry point.
    """
    try:
        tree = ast.parse(code)
    except SyntaxError as exc:
        raise DatasetError(f"task {task_id}: unparseable reference solution: {exc}") from exc
    defs = [
        node.name
        for node in tree.body
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef))
    ]
    if not defs:
        raise DatasetError(f"task {task_id}: reference solution defines no function")
    invoked: set[str] = set()
    for item in test_list:
        try:
            invoked |= _called_names(ast.parse(item))
        except SyntaxError as exc:
            raise DatasetError(f"task {task_id}: unparseable test {item!r}: {exc}") from exc
    for candidate in defs:
        if candidate in invoked:
            return candidate
    raise DatasetError(f"task {task_id}: no defined function is invoked by the tests")


def _def_signature(code: str, entry_point: str, task_id: str) -> str:
    """Return the def line of entry_point through its colon."""
    marker = f"def {entry_point}"
    start = code.find(marker)
    if start < 0:
        raise DatasetError(f"task {task_id}: cannot locate def line for {entry_point!r}")
    depth = 0
    for idx in range(start, len(code)):
        char = code[idx]
        if char in "([{":
            depth += 1
        elif char in ")]}":
            depth -= 1
        elif char == ":" and depth == 0:
            signature = code[start : idx + 1]
            if "\n" in signature:
                signature = " ".join(signature.split())
            return signature
    raise DatasetError(f"task {task_id}: def line for {entry_point!r} has no body colon")


def load_mbpp_sanitized(path: str | Path, name: str | None = None) -> ProblemSet:
    """Load a sanitized-MBPP-layout JSONL file into a ProblemSet."""
    path = Path(path)
    problems = []
    seen: set[str] = set()
    for lineno, record in _iter_records(path):
        _require(record, _MBPP_FIELDS, path, lineno)
        if "text" not in record and "prompt" not in record:
            raise DatasetError(f"{path}: line {lineno}: missing field 'text' (or 'prompt')")
        task_id = str(record["task_id"])
        _check_unique(task_id, seen, path, lineno)
        description = str(record.get("prompt", record.get("text")))
        code = str(record["code"])
        test_list = [str(item) for item in record["test_list"]]
        test_imports = [str(item) for item in record["test_imports"]]
        if not test_list:
            raise DatasetError(f"{path}: line {lineno}: empty test_list")
        entry_point = _mbpp_entry_point(code, test_list, task_id)
        signature = _def_signature(code, entry_point, task_id)
        prompt = (
            f"{description}\n"
            f"Your function must be named `{entry_point}` "
            f"and match the signature `{signature}`"
        )
        test_program = "\n".join([*test_imports, *test_list]) + "\n"
        problems.append(
            Problem(
                task_id=task_id,
                prompt=prompt,
                entry_point=entry_point,
                test_program=test_program,
                source_benchmark=MBPP_SANITIZED,
            )
        )
    return ProblemSet(name=name or MBPP_SANITIZED, problems=tuple(problems))


def load_problem_set(path: str | Path, kind: str, name: str | None = None) -> ProblemSet:
    if kind == HUMANEVAL:
        return load_humaneval(path, name=name)
    if kind == MBPP_SANITIZED:
        return load_mbpp_sanitized(path, name=name)
    raise DatasetError(f"unknown benchmark kind {kind!r} (expected one of {BENCHMARK_KINDS})")


def write_problems(problem_set: ProblemSet, path: str | Path) -> None:
    """Serialize a ProblemSet to normalized JSONL (round-trips losslessly)."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as handle:
        for problem in problem_set:
            handle.write(
                json.dumps(
                    {
                        "task_id": problem.task_id,
                        "prompt": problem.prompt,
                        "entry_point": problem.entry_point,
                        "test_program": problem.test_program,
                        "source_benchmark": problem.source_benchmark,
                    },
                    sort_keys=True,
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_problems(path: str | Path, name: str | None = None) -> ProblemSet:
    """Load a normalized JSONL file written by write_problems."""
    path = Path(path)
    problems = []
    seen: set[str] = set()
    fields = ("task_id", "prompt", "entry_point", "test_program", "source_benchmark")
    for lineno, record in _iter_records(path):
        _require(record, fields, path, lineno)
        task_id = str(record["task_id"])
        _check_unique(task_id, seen, path, lineno)
        problems.append(
            Problem(
                task_id=task_id,
                prompt=str(record["prompt"]),
                entry_point=str(record["entry_point"]),
                test_program=str(record["test_program"]),
                source_benchmark=str(record["source_benchmark"]),
            )
        )
    return ProblemSet(name=name or path.stem, problems=tuple(problems))


def validate(problem_set: ProblemSet) -> list[str]:
    """Report invariant violations as findings; an empty list means pristine.

    Findings are data, not exceptions, so operators can inspect a whole file
    in one pass. Loaders enforce the same rules eagerly; validate re-checks
    sets that arrived by other paths (deserialization, hand construction).
    """
    findings: list[str] = []
    seen: set[str] = set()
    for problem in problem_set:
        if problem.task_id in seen:
            findings.append(f"duplicate task_id: {problem.task_id}")
        seen.add(problem.task_id)
        if not problem.prompt.strip():
            findings.append(f"empty prompt: {problem.task_id}")
        if not problem.entry_point.isidentifier():
            findings.append(f"invalid entry point: {problem.task_id}")
        if not problem.test_program.strip():
            findings.append(f"empty tests: {problem.task_id}")
            continue
        try:
            tree = ast.parse(problem.test_program)
        except (SyntaxError, ValueError):
            findings.append(f"unparseable tests: {problem.task_id}")
            continue
        # HumanEval-style tests pass the entry point into a checker rather
        # than calling it by name, so "referenced" is the right invariant.
        referenced = {
            node.id for node in ast.walk(tree) if isinstance(node, ast.Name)
        }
        if problem.entry_point not in referenced:
            findings.append(f"entry point not referenced by tests: {problem.task_id}")
    return findings
