"""Turning raw model completions into runnable candidate code.

The pipeline, applied in order:

1. Strip reasoning traces wrapped in think tags. An unclosed opening tag
   swallows everything to the end of the text.
2. Prefer fenced code: the first fence whose body defines the entry point,
   otherwise the longest fence. A fence missing its closing marker runs to
   the end of the text. Language tags on fences are ignored.
3. With no usable fence, the whole remaining text is treated as code.
4. If the candidate still lacks a definition of the entry point (a bare
   function body is a common reply shape), the problem's own signature line
   is prepended and the body indented one level. Nothing else is ever
   fabricated.

Extraction is total: it never raises on model output, and running it on its
own output is a no-op.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

from .benchmarks import Problem

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"

_FENCE_MARKER = "```"


class ExtractionMethod(str, Enum):
    FENCED = "fenced"
    FENCED_UNCLOSED = "fenced_unclosed"
    BARE = "bare"
    SIGNATURE_PREPENDED = "signature_prepended"
    FAILED = "failed"


@dataclass(frozen=True)
class ExtractionResult:
    """Extracted candidate code plus how it was obtained."""

    code: str
    method: ExtractionMethod
    stripped_reasoning: bool


def strip_reasoning_traces(text: str) -> str:
    """Remove think-tag spans; an unclosed opening tag consumes to the end."""
    while True:
        start = text.find(THINK_OPEN)
        if start < 0:
            return text
        end = text.find(THINK_CLOSE, start + len(THINK_OPEN))
        if end < 0:
            return text[:start]
        text = text[:start] + text[end + len(THINK_CLOSE) :]


@dataclass(frozen=True)
class _Fence:
    body: str
    closed: bool


def _scan_fences(text: str) -> list[_Fence]:
    fences: list[_Fence] = []
    pos = 0
    while True:
        start = text.find(_FENCE_MARKER, pos)
        if start < 0:
            return fences
        newline = text.find("\n", start + len(_FENCE_MARKER))
        if newline < 0:
            # Opening marker at end of text: nothing after the info string.
            fences.append(_Fence(body="", closed=False))
            return fences
        body_start = newline + 1
        end = text.find(_FENCE_MARKER, body_start)
        if end < 0:
            fences.append(_Fence(body=text[body_start:].strip("\n"), closed=False))
            return fences
        fences.append(_Fence(body=text[body_start:end].strip("\n"), closed=True))
        pos = end + len(_FENCE_MARKER)


def _defines(code: str, entry_point: str) -> bool:
    pattern = rf"(?m)^[ \t]*(?:async[ \t]+)?def[ \t]+{re.escape(entry_point)}[ \t]*\("
    return re.search(pattern, code) is not None


def _select_fence(text: str, entry_point: str | None) -> _Fence | None:
    fences = [fence for fence in _scan_fences(text) if fence.body.strip()]
    if not fences:
        return None
    if entry_point:
        for fence in fences:
            if _defines(fence.body, entry_point):
                return fence
    return max(fences, key=lambda fence: len(fence.body))


def extract_fenced_code(text: str, entry_point: str | None = None) -> str | None:
    """Return the selected fence body, or None when no non-empty fence exists."""
    fence = _select_fence(text, entry_point)
    return fence.body if fence else None


def _signature_from_prompt(prompt: str, entry_point: str) -> str | None:
    """Find the entry point's def line in the problem prompt.

    The last match wins: prompts may quote helper definitions first. The
    signature runs from the def keyword through the colon that closes the
    parameter list (parenthesis-balanced, so annotations with colons inside
    brackets do not end it early).
    """
    pattern = rf"(?:async[ \t]+)?def[ \t]+{re.escape(entry_point)}[ \t]*\("
    matches = list(re.finditer(pattern, prompt))
    if not matches:
        return None
    start = matches[-1].start()
    depth = 0
    for idx in range(start, len(prompt)):
        char = prompt[idx]
        if char in "([{":
            depth += 1
        elif char in ")]}":
            depth -= 1
        elif char == ":" and depth == 0:
            return prompt[start : idx + 1]
    return None


def ensure_function(code: str, problem: Problem) -> str:
    """Wrap a bare function body in the problem's own signature.

    Code that already defines the entry point is returned unchanged, byte for
    byte. A body at indentation zero is indented one level; a body that
    arrives pre-indented is kept as is, so prepending never double-indents.
    Tabs inside lines are preserved.
    """
    if _defines(code, problem.entry_point):
        return code
    signature = _signature_from_prompt(problem.prompt, problem.entry_point)
    if signature is None:
        return code
    lines = code.split("\n")
    indents = [
        len(line) - len(line.lstrip(" \t")) for line in lines if line.strip()
    ]
    if indents and min(indents) == 0:
        body = "\n".join("    " + line if line.strip() else line for line in lines)
    else:
        body = code
    return f"{signature}\n{body}"


def extract(text: str, problem: Problem) -> ExtractionResult:
    """Run the full extraction pipeline for one completion."""
    stripped = strip_reasoning_traces(text)
    stripped_reasoning = stripped != text
    fence = _select_fence(stripped, problem.entry_point)
    if fence is not None:
        code = fence.body
        method = ExtractionMethod.FENCED if fence.closed else ExtractionMethod.FENCED_UNCLOSED
    else:
        code = stripped
        method = ExtractionMethod.BARE
    if not code.strip():
        return ExtractionResult(code="", method=ExtractionMethod.FAILED, stripped_reasoning=stripped_reasoning)
    ensured = ensure_function(code, problem)
    if ensured != code:
        return ExtractionResult(
            code=ensured,
            method=ExtractionMethod.SIGNATURE_PREPENDED,
            stripped_reasoning=stripped_reasoning,
        )
    return ExtractionResult(code=code, method=method, stripped_reasoning=stripped_reasoning)
