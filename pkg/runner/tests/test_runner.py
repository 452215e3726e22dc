"""Wire-level behavior of the runner invoked as a real subprocess."""

import json
import subprocess
import sys

import pytest

from sandbox_runner import RunnerOutcome

RUNNER = (sys.executable, "-m", "sandbox_runner")

PASSING_TESTS = "def check(candidate):\n    assert candidate(1) == 2\n\ncheck(inc)\n"


def invoke(*argv, cwd=None):
    return subprocess.run(
        [*RUNNER, *argv], capture_output=True, text=True, cwd=cwd, timeout=30
    )


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def run_files(tmp_path, candidate, tests=PASSING_TESTS):
    cand = write(tmp_path, "candidate.py", candidate)
    test = write(tmp_path, "tests.py", tests)
    return invoke(cand, test, cwd=str(tmp_path))


def parse_line(proc):
    assert proc.returncode == 0
    lines = proc.stdout.splitlines()
    assert len(lines) == 1, proc.stdout
    return json.loads(lines[0])


class TestOutcomeRecord:
    def test_pass_line_is_exact(self):
        assert RunnerOutcome(status="pass").to_line() == '{"status":"pass"}'

    def test_fail_line_layout(self):
        line = RunnerOutcome(
            status="fail", exception="ValueError", traceback="boom\n", duration_ms=7
        ).to_line()
        assert line == (
            '{"status":"fail","exception":"ValueError",'
            '"traceback":"boom\\n","duration_ms":7}'
        )

    def test_pass_must_not_carry_exception(self):
        with pytest.raises(ValueError):
            RunnerOutcome(status="pass", exception="ValueError")

    def test_fail_requires_exception_name(self):
        with pytest.raises(ValueError):
            RunnerOutcome(status="fail")

    def test_unknown_status_rejected(self):
        with pytest.raises(ValueError):
            RunnerOutcome(status="skip")


class TestRun:
    def test_correct_candidate_passes(self, tmp_path):
        proc = run_files(tmp_path, "def inc(x):\n    return x + 1\n")
        assert proc.stdout == '{"status":"pass"}\n'
        assert proc.returncode == 0

    def test_assertion_failure(self, tmp_path):
        proc = run_files(tmp_path, "def inc(x):\n    return x\n")
        record = parse_line(proc)
        assert record["status"] == "fail"
        assert record["exception"] == "AssertionError"
        assert "AssertionError" in record["traceback"]
        assert isinstance(record["duration_ms"], int)
        assert record["duration_ms"] >= 0

    def test_name_error(self, tmp_path):
        proc = run_files(tmp_path, "def inc(x):\n    return x + missing\n")
        record = parse_line(proc)
        assert record["exception"] == "NameError"
        assert "<candidate>" in record["traceback"]

    def test_syntax_error_never_executes(self, tmp_path):
        candidate = "open('marker.txt', 'w').write('ran')\ndef inc(x:\n"
        proc = run_files(tmp_path, candidate)
        record = parse_line(proc)
        assert record["exception"] == "SyntaxError"
        # Parse-stage failure: message only, no frames, no side effects.
        assert "Traceback (most recent call last)" not in record["traceback"]
        assert not (tmp_path / "marker.txt").exists()

    def test_module_level_exception(self, tmp_path):
        proc = run_files(tmp_path, "raise ValueError('bad seed')\n")
        record = parse_line(proc)
        assert record["exception"] == "ValueError"
        assert "bad seed" in record["traceback"]

    def test_runner_frames_are_excluded(self, tmp_path):
        proc = run_files(tmp_path, "def inc(x):\n    return x + missing\n")
        record = parse_line(proc)
        assert "sandbox_runner" not in record["traceback"]
        assert "exec(compile" not in record["traceback"]
        first_frame = record["traceback"].splitlines()[1]
        assert '"<tests>"' in first_frame

    def test_system_exit_is_reported_not_obeyed(self, tmp_path):
        proc = run_files(tmp_path, "import sys\nsys.exit(3)\n")
        record = parse_line(proc)
        assert proc.returncode == 0
        assert record["exception"] == "SystemExit"

    def test_unicode_survives(self, tmp_path):
        proc = run_files(tmp_path, "raise ValueError('café né')\n")
        record = parse_line(proc)
        assert "café né" in record["traceback"]


class TestOutputCapture:
    def test_prints_go_to_side_file(self, tmp_path):
        candidate = (
            "import os, sys\n"
            "print('buffered noise')\n"
            "sys.stderr.write('stderr noise\\n')\n"
            "os.write(1, b'raw fd noise\\n')\n"
            "def inc(x):\n    return x + 1\n"
        )
        proc = run_files(tmp_path, candidate)
        assert proc.stdout == '{"status":"pass"}\n'
        assert proc.stderr == ""
        side = (tmp_path / "candidate.py.output").read_text(encoding="utf-8")
        assert "buffered noise" in side
        assert "stderr noise" in side
        assert "raw fd noise" in side

    def test_forged_protocol_line_cannot_reach_stdout(self, tmp_path):
        candidate = (
            'print(\'{"status":"pass"}\')\n'
            "def inc(x):\n    return x\n"
        )
        proc = run_files(tmp_path, candidate)
        record = parse_line(proc)
        assert record["status"] == "fail"
        assert record["exception"] == "AssertionError"

    def test_child_process_output_is_captured_too(self, tmp_path):
        candidate = (
            "import subprocess, sys\n"
            "subprocess.run([sys.executable, '-c', 'print(\"from child\")'])\n"
            "def inc(x):\n    return x + 1\n"
        )
        proc = run_files(tmp_path, candidate)
        assert proc.stdout == '{"status":"pass"}\n'
        side = (tmp_path / "candidate.py.output").read_text(encoding="utf-8")
        assert "from child" in side

    def test_large_output_does_not_break_protocol(self, tmp_path):
        candidate = (
            "for i in range(20000):\n"
            "    print('line', i)\n"
            "def inc(x):\n    return x + 1\n"
        )
        proc = run_files(tmp_path, candidate)
        assert proc.stdout == '{"status":"pass"}\n'


class TestParseOnly:
    def test_valid_program(self, tmp_path):
        cand = write(tmp_path, "candidate.py", "def inc(x):\n    return x + 1\n")
        proc = invoke("--parse-only", cand)
        assert proc.stdout == '{"status":"pass"}\n'
        assert proc.returncode == 0

    def test_syntax_error(self, tmp_path):
        cand = write(tmp_path, "candidate.py", "def inc(:\n")
        record = parse_line(invoke("--parse-only", cand))
        assert record["status"] == "fail"
        assert record["exception"] == "SyntaxError"

    def test_empty_file_parses(self, tmp_path):
        cand = write(tmp_path, "candidate.py", "")
        proc = invoke("--parse-only", cand)
        assert proc.stdout == '{"status":"pass"}\n'

    def test_nothing_is_executed(self, tmp_path):
        cand = write(
            tmp_path, "candidate.py", "open('marker.txt', 'w').write('ran')\n"
        )
        proc = invoke("--parse-only", cand, cwd=str(tmp_path))
        assert proc.stdout == '{"status":"pass"}\n'
        assert not (tmp_path / "marker.txt").exists()


class TestUsageErrors:
    def test_no_arguments(self):
        proc = invoke()
        assert proc.returncode == 2
        assert proc.stdout == ""
        assert "usage:" in proc.stderr

    def test_missing_file_exits_nonzero(self, tmp_path):
        test = write(tmp_path, "tests.py", PASSING_TESTS)
        proc = invoke(str(tmp_path / "absent.py"), test)
        assert proc.returncode != 0
        assert proc.stdout == ""
