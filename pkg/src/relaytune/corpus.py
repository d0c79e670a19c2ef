"""Instruction datasets: loading, validation, splitting, persistence, statistics.

Storage is one JSON record per line (UTF-8), field order canonicalized
alphabetically on write:

    {"cycle": int, "generator_model": str?, "id": str, "instruction": str,
     "origin": str, "response": str, "seed_ids": [str]?, "task": str}

``generator_model`` and ``seed_ids`` are omitted when absent.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

from .errors import DatasetFormatError, MissingInputError
from .textutil import TokenCounter, count_tokens

TASKS = ("summarization", "classification", "coding", "closed_qa", "other")
ORIGINS = ("coverage_train", "coverage_test", "synthetic")


@dataclass(frozen=True)
class InstructionPair:
    """One (instruction, response) record with provenance."""

    id: str
    instruction: str
    response: str
    task: str
    origin: str
    cycle: int = 0
    generator_model: str | None = None
    seed_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.id:
            raise DatasetFormatError("record id must be non-empty")
        if not self.instruction.strip():
            raise DatasetFormatError(f"instruction is empty for id {self.id!r}")
        if not self.response.strip():
            raise DatasetFormatError(f"response is empty for id {self.id!r}")
        if self.task not in TASKS:
            raise DatasetFormatError(f"unknown task {self.task!r} for id {self.id!r}")
        if self.origin not in ORIGINS:
            raise DatasetFormatError(f"unknown origin {self.origin!r} for id {self.id!r}")
        if self.cycle < 0:
            raise DatasetFormatError(f"cycle must be >= 0 for id {self.id!r}")
        if self.origin in ("coverage_train", "coverage_test") and self.cycle != 0:
            raise DatasetFormatError(f"coverage record {self.id!r} must have cycle 0")
        if self.origin == "coverage_test" and self.generator_model is not None:
            raise DatasetFormatError(
                f"coverage_test record {self.id!r} must not carry generator_model"
            )
        if self.origin == "synthetic":
            if self.cycle < 1:
                raise DatasetFormatError(f"synthetic record {self.id!r} must have cycle >= 1")
            if not self.generator_model:
                raise DatasetFormatError(f"synthetic record {self.id!r} requires generator_model")

    def to_record(self) -> dict:
        rec = {
            "cycle": self.cycle,
            "id": self.id,
            "instruction": self.instruction,
            "origin": self.origin,
            "response": self.response,
            "task": self.task,
        }
        if self.generator_model is not None:
            rec["generator_model"] = self.generator_model
        if self.seed_ids is not None:
            rec["seed_ids"] = list(self.seed_ids)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "InstructionPair":
        known = {"id", "instruction", "response", "task", "origin", "cycle",
                 "generator_model", "seed_ids"}
        unknown = set(rec) - known
        if unknown:
            raise DatasetFormatError(f"unknown fields: {sorted(unknown)}")
        try:
            return cls(
                id=rec["id"],
                instruction=rec["instruction"],
                response=rec["response"],
                task=rec["task"],
                origin=rec["origin"],
                cycle=int(rec.get("cycle", 0)),
                generator_model=rec.get("generator_model"),
                seed_ids=tuple(rec["seed_ids"]) if rec.get("seed_ids") is not None else None,
            )
        except KeyError as exc:
            raise DatasetFormatError(f"missing field {exc.args[0]!r}") from None


def dumps_record(pair: InstructionPair) -> str:
    return json.dumps(pair.to_record(), ensure_ascii=False, sort_keys=True,
                      separators=(",", ":"))


def write_records(path: str | Path, pairs: list[InstructionPair]) -> None:
    path = Path(path)
    seen: set[str] = set()
    for pair in pairs:
        if pair.id in seen:
            raise DatasetFormatError(f"duplicate id {pair.id!r}", path=str(path))
        seen.add(pair.id)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(dumps_record(pair) + "\n")
    tmp.replace(path)


def read_records(path: str | Path) -> list[InstructionPair]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"dataset file not found: {path}")
    pairs: list[InstructionPair] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"invalid JSON ({exc.msg})",
                                         path=str(path), line=lineno) from None
            if not isinstance(rec, dict):
                raise DatasetFormatError("record is not an object",
                                         path=str(path), line=lineno)
            try:
                pair = InstructionPair.from_record(rec)
            except DatasetFormatError as exc:
                raise DatasetFormatError(str(exc), path=str(path), line=lineno) from None
            if pair.id in seen:
                raise DatasetFormatError(f"duplicate id {pair.id!r}",
                                         path=str(path), line=lineno)
            seen.add(pair.id)
            pairs.append(pair)
    return pairs


@dataclass
class CoverageDataset:
    """A validated instruction dataset plus its train/test split bookkeeping."""

    pairs: list[InstructionPair]
    task: str
    split_ratio: Fraction | None = None
    train_count: int | None = None
    test_count: int | None = None

    def __len__(self) -> int:
        return len(self.pairs)


def load_dataset(path: str | Path, task: str) -> CoverageDataset:
    """Load and validate one task subset; record order is preserved."""
    if task not in TASKS:
        raise DatasetFormatError(f"unknown task {task!r}")
    pairs = read_records(path)
    if not pairs:
        raise DatasetFormatError("dataset is empty", path=str(path))
    for i, pair in enumerate(pairs, start=1):
        if pair.task != task:
            raise DatasetFormatError(
                f"record {pair.id!r} has task {pair.task!r}, expected {task!r}",
                path=str(path), line=i)
    return CoverageDataset(pairs=pairs, task=task)


def split(dataset: CoverageDataset, train_count: int,
          shuffle_seed: int) -> tuple[list[InstructionPair], list[InstructionPair]]:
    """Seeded-shuffle + prefix-take partition into (train, test) views.

    Deterministic for a fixed (pairs, train_count, seed); train records are
    re-tagged ``coverage_train`` and test records ``coverage_test``.
    """
    n = len(dataset.pairs)
    if not 0 < train_count < n:
        raise DatasetFormatError(
            f"train_count must be in (0, {n}), got {train_count}")
    order = list(range(n))
    random.Random(shuffle_seed).shuffle(order)
    train_idx = sorted(order[:train_count])
    test_idx = sorted(order[train_count:])
    train = [replace(dataset.pairs[i], origin="coverage_train", cycle=0)
             for i in train_idx]
    test = [replace(dataset.pairs[i], origin="coverage_test", cycle=0,
                    generator_model=None)
            for i in test_idx]
    dataset.split_ratio = Fraction(train_count, n)
    dataset.train_count = train_count
    dataset.test_count = n - train_count
    return train, test


@dataclass(frozen=True)
class TokenStats:
    min: int
    max: int
    mean: float
    std: float
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not (self.min <= self.mean <= self.max):
            raise ValueError("expected min <= mean <= max")
        if self.std < 0:
            raise ValueError("std must be >= 0")


def token_stats(pairs: list[InstructionPair],
                counter: TokenCounter = count_tokens) -> TokenStats:
    """Stats over per-pair (instruction + response) token counts.

    Uses the population standard deviation. The counter is pluggable so a
    subword tokenizer can be swapped in for model-specific statistics.
    """
    if not pairs:
        raise DatasetFormatError("token_stats requires at least one pair")
    counts = [counter(p.instruction) + counter(p.response) for p in pairs]
    n = len(counts)
    mean = sum(counts) / n
    var = sum((c - mean) ** 2 for c in counts) / n
    return TokenStats(min=min(counts), max=max(counts), mean=mean,
                      std=math.sqrt(var), count=n)
