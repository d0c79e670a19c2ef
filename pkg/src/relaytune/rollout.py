"""Batch inference: K responses per held-out prompt from the tuned model.

Backends share one bound interface. The subprocess flavor mirrors the
executor protocol (``<backend> infer <manifest-path>``, cwd = run directory)
with a JSON manifest ``{"artifact_uri", "prompts_ref", "k", "decoding",
"output_ref", "seed"}``; generations land one JSON record per line:

    {"decoding": {...}, "k_index": int, "model": str, "response": str,
     "test_id": str}
"""

from __future__ import annotations

import json
import logging
import subprocess
from dataclasses import dataclass
from pathlib import Path

from .corpus import InstructionPair, write_records
from .errors import MissingInputError, StageError
from .gateway import CompletionFailure, CompletionRequest, Gateway
from .mocks import format_capability_marker
from .textutil import pseudo_text, stable_seed
from .tuning import ModelHandle

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.7
    top_p: float = 0.95
    max_new_tokens: int = 1024

    def to_dict(self) -> dict:
        return {"max_new_tokens": self.max_new_tokens,
                "temperature": self.temperature, "top_p": self.top_p}

    @classmethod
    def from_dict(cls, data: dict) -> "DecodingParams":
        return cls(temperature=data.get("temperature", 0.7),
                   top_p=data.get("top_p", 0.95),
                   max_new_tokens=int(data.get("max_new_tokens", 1024)))


@dataclass(frozen=True)
class GenerationRecord:
    test_id: str
    k_index: int
    response: str
    model: str
    decoding: dict

    def to_record(self) -> dict:
        return {"decoding": dict(sorted(self.decoding.items())),
                "k_index": self.k_index, "model": self.model,
                "response": self.response, "test_id": self.test_id}

    @classmethod
    def from_record(cls, rec: dict) -> "GenerationRecord":
        return cls(test_id=rec["test_id"], k_index=int(rec["k_index"]),
                   response=rec["response"], model=rec["model"],
                   decoding=dict(rec["decoding"]))


def write_generations(path: str | Path, records: list[GenerationRecord]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for rec in sorted(records, key=lambda r: (r.test_id, r.k_index)):
            fh.write(json.dumps(rec.to_record(), ensure_ascii=False, sort_keys=True)
                     + "\n")
    tmp.replace(path)


def read_generations(path: str | Path) -> list[GenerationRecord]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"generations file not found: {path}")
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(GenerationRecord.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise StageError(f"{path}:{lineno}: bad generation record ({exc})") from None
    return out


def validate_generation_records(records: list[GenerationRecord],
                                test_ids: list[str], k: int) -> None:
    """Cardinality |test| x K, full k coverage per test id, unique keys."""
    expected = {(t, ki) for t in test_ids for ki in range(1, k + 1)}
    seen: set[tuple[str, int]] = set()
    for rec in records:
        key = (rec.test_id, rec.k_index)
        if key in seen:
            raise StageError(f"duplicate generation slot {key}")
        if key not in expected:
            raise StageError(f"unexpected generation slot {key}")
        if not rec.response.strip():
            raise StageError(f"empty response in slot {key}")
        seen.add(key)
    missing = expected - seen
    if missing:
        raise StageError(f"missing generation slots: {sorted(missing)[:5]} "
                         f"({len(missing)} total)")


class MockInferenceBackend:
    """Reads the mock trainer's artifact and embeds its capability score.

    Each (test id, k) slot gets distinct deterministic filler text, seeded by
    k, so the K responses for one prompt are pairwise distinct.
    """

    name = "mock"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def generate(self, model: ModelHandle, pairs: list[InstructionPair], k: int,
                 decoding: DecodingParams, base_dir: Path,
                 workdir: Path | None = None) -> list[GenerationRecord]:
        artifact_path = base_dir / model.artifact_uri
        if not artifact_path.exists():
            raise MissingInputError(f"model artifact not found: {model.artifact_uri}")
        artifact = json.loads(artifact_path.read_text("utf-8"))
        capability = float(artifact.get("capability", 0.0))
        marker = format_capability_marker(capability)
        records = []
        for pair in pairs:
            for ki in range(1, k + 1):
                words = pseudo_text(stable_seed(self.seed, model.handle_id,
                                                pair.id, ki), 10)
                records.append(GenerationRecord(
                    test_id=pair.id, k_index=ki,
                    response=f"{marker} {words}",
                    model=model.handle_id, decoding=decoding.to_dict()))
        return records


class GatewayInferenceBackend:
    """Routes generation through the completion gateway (any registered model)."""

    name = "gateway"

    def __init__(self, gateway: Gateway, model_id: str, max_in_flight: int = 8,
                 retry_rounds: int = 3):
        self.gateway = gateway
        self.model_id = model_id
        self.max_in_flight = max_in_flight
        self.retry_rounds = retry_rounds

    def generate(self, model: ModelHandle, pairs: list[InstructionPair], k: int,
                 decoding: DecodingParams, base_dir: Path,
                 workdir: Path | None = None) -> list[GenerationRecord]:
        slots = [(pair, ki) for pair in pairs for ki in range(1, k + 1)]
        records: dict[tuple[str, int], GenerationRecord] = {}
        pending = slots
        for round_idx in range(self.retry_rounds):
            if not pending:
                break
            requests = [
                CompletionRequest(
                    model_id=self.model_id, prompt=pair.instruction,
                    max_new_tokens=decoding.max_new_tokens,
                    temperature=decoding.temperature, top_p=decoding.top_p,
                    request_tag=f"infer:{pair.id}#k{ki}",
                    seed=ki + 100_000 * round_idx)
                for pair, ki in pending
            ]
            results = self.gateway.complete_many(requests, max_in_flight=self.max_in_flight)
            still = []
            for (pair, ki), result in zip(pending, results):
                if isinstance(result, CompletionFailure):
                    logger.warning("generation failed for %s#k%d: %s",
                                   pair.id, ki, result.message)
                    still.append((pair, ki))
                    continue
                records[(pair.id, ki)] = GenerationRecord(
                    test_id=pair.id, k_index=ki, response=result.text,
                    model=model.handle_id, decoding=decoding.to_dict())
            pending = still
        if pending:
            raise StageError(
                f"{len(pending)} generation slots still empty after "
                f"{self.retry_rounds} rounds")
        return [records[(pair.id, ki)] for pair, ki in slots]


class CommandInferenceBackend:
    """Subprocess backend: ``<argv...> infer <manifest-path>``."""

    name = "command"

    def __init__(self, argv: list[str], timeout_s: float = 3600.0):
        if not argv:
            raise StageError("inference command must not be empty")
        self.argv = list(argv)
        self.timeout_s = timeout_s

    def generate(self, model: ModelHandle, pairs: list[InstructionPair], k: int,
                 decoding: DecodingParams, base_dir: Path,
                 workdir: Path | None = None) -> list[GenerationRecord]:
        if workdir is None:
            raise StageError("command inference backend requires a work directory")
        workdir.mkdir(parents=True, exist_ok=True)
        prompts_rel = (workdir / "infer_prompts").relative_to(base_dir).as_posix()
        output_rel = (workdir / "generations_raw").relative_to(base_dir).as_posix()
        write_records(base_dir / prompts_rel, pairs)
        manifest = {
            "artifact_uri": model.artifact_uri,
            "decoding": decoding.to_dict(),
            "k": k,
            "model": model.handle_id,
            "output_ref": output_rel,
            "prompts_ref": prompts_rel,
            "seed": 0,
        }
        manifest_path = workdir / "infer_manifest"
        manifest_path.write_text(json.dumps(manifest, sort_keys=True) + "\n",
                                 encoding="utf-8")
        cmd = self.argv + ["infer", str(manifest_path.resolve())]
        try:
            proc = subprocess.run(cmd, cwd=base_dir, capture_output=True,
                                  text=True, timeout=self.timeout_s)
        except subprocess.TimeoutExpired as exc:
            raise StageError(f"inference timed out after {self.timeout_s}s") from exc
        if proc.returncode != 0:
            raise StageError(
                f"inference backend exited {proc.returncode}: "
                f"{proc.stderr.strip()[:2000]}")
        return read_generations(base_dir / output_rel)


def batch_infer(model: ModelHandle, test_view: list[InstructionPair], k: int,
                decoding: DecodingParams, backend, base_dir: str | Path,
                workdir: str | Path | None = None) -> list[GenerationRecord]:
    """Exactly ``len(test_view) * k`` validated records, sorted by (test_id, k)."""
    if k < 1:
        raise StageError("k must be >= 1")
    if not test_view:
        raise StageError("batch_infer requires a non-empty test view")
    records = backend.generate(model, test_view, k, decoding, Path(base_dir),
                               Path(workdir) if workdir is not None else None)
    validate_generation_records(records, [p.id for p in test_view], k)
    return sorted(records, key=lambda r: (r.test_id, r.k_index))
