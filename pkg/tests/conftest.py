from __future__ import annotations

import random
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import pytest

from relaytune.corpus import InstructionPair, write_records

VOCAB = [f"w{i:02d}" for i in range(50)]


def make_pair(i: int, *, task: str = "other", origin: str = "coverage_train",
              cycle: int = 0, instruction: str | None = None,
              response: str | None = None, generator: str | None = None,
              seed_ids: tuple[str, ...] | None = None) -> InstructionPair:
    if origin == "synthetic" and generator is None:
        generator = "mock-gen"
    return InstructionPair(
        id=f"p{i:04d}",
        instruction=instruction if instruction is not None else f"instruction number {i} about topic {i % 7}",
        response=response if response is not None else f"response text {i} covering item {i % 5} fully",
        task=task,
        origin=origin,
        cycle=cycle,
        generator_model=generator,
        seed_ids=seed_ids,
    )


def random_text(rng: random.Random, lo: int = 8, hi: int = 18) -> str:
    return " ".join(rng.choice(VOCAB) for _ in range(rng.randint(lo, hi)))


@pytest.fixture
def dataset_file(tmp_path):
    def write(pairs, name="data.jsonl"):
        path = tmp_path / name
        write_records(path, pairs)
        return path

    return write


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion."""
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, ()):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::test_criterion" in nodeid:
                name = nodeid.split("::")[-1].removeprefix("test_")
                lines[name] = "PASS" if outcome == "passed" else "FAIL"
    for report in terminalreporter.stats.get("skipped", ()):
        nodeid = getattr(report, "nodeid", "")
        if "test_acceptance.py::test_criterion" in nodeid:
            name = nodeid.split("::")[-1].removeprefix("test_")
            lines.setdefault(name, "SKIP")
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        def key(item):
            digits = "".join(c for c in item[0] if c.isdigit())
            return int(digits or 0)
        for name, verdict in sorted(lines.items(), key=key):
            terminalreporter.write_line(f"{name}: {verdict}")
