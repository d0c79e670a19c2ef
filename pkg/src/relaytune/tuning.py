"""Fine-tuning as a pluggable executor protocol.

The orchestrator never trains anything itself: it writes a manifest file and
hands it to an executor binding. The subprocess contract is

    <executor> train <manifest-path>        (cwd = run directory)

where the manifest is a JSON document with the fields below, every path
relative to the run directory. The executor must write ``<output_dir>/result``
containing ``{"handle_id", "artifact_uri", "final_loss", "steps"}`` and exit
0 (2 = bad manifest, 3 = resource failure). A mock trainer with a saturating
capability profile ships here so the whole loop runs offline.
"""

from __future__ import annotations

import json
import logging
import math
import subprocess
from dataclasses import dataclass, replace
from pathlib import Path

from .corpus import read_records
from .errors import MissingInputError, StageError, HoldoutLeakError
from .textutil import stable_digest

logger = logging.getLogger(__name__)

# Adapter shape follows cumulative training volume unless overridden.
ADAPTER_SHAPE_SCHEDULE = (
    (16_000, 8, 16),    # up to 16k samples
    (63_999, 16, 32),   # the 32k regime
    (None, 32, 64),     # 64k and beyond
)


def resolve_adapter_shape(total_samples: int) -> tuple[int, int]:
    for upper, rank, alpha in ADAPTER_SHAPE_SCHEDULE:
        if upper is None or total_samples <= upper:
            return rank, alpha
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class ExecutorSpec:
    base_model: str = "mock-lm"
    precision: str = "bf16"
    scheduler: str = "cosine"
    max_tokens: int = 1024
    adapter_method: str = "qlora"
    lora_rank: int | None = None
    lora_alpha: int | None = None
    lora_dropout: float = 0.05
    epochs: int = 3
    learning_rate: float = 2e-4
    batch_size: int = 8

    def to_dict(self) -> dict:
        return {
            "base_model": self.base_model,
            "precision": self.precision,
            "scheduler": self.scheduler,
            "max_tokens": self.max_tokens,
            "adapter_method": self.adapter_method,
            "lora_rank": self.lora_rank,
            "lora_alpha": self.lora_alpha,
            "lora_dropout": self.lora_dropout,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExecutorSpec":
        return cls(**data)


@dataclass(frozen=True)
class ModelHandle:
    handle_id: str
    base_model: str
    cycle: int
    artifact_uri: str
    training_metrics: dict

    def to_dict(self) -> dict:
        return {"handle_id": self.handle_id, "base_model": self.base_model,
                "cycle": self.cycle, "artifact_uri": self.artifact_uri,
                "training_metrics": dict(sorted(self.training_metrics.items()))}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelHandle":
        return cls(handle_id=data["handle_id"], base_model=data["base_model"],
                   cycle=int(data["cycle"]), artifact_uri=data["artifact_uri"],
                   training_metrics=dict(data["training_metrics"]))


@dataclass(frozen=True)
class TrainingManifest:
    cycle: int
    dataset_refs: tuple[str, ...]
    output_dir: str
    spec: ExecutorSpec
    seed: int = 0
    total_samples: int = 0

    def to_dict(self) -> dict:
        return {"cycle": self.cycle, "dataset_refs": list(self.dataset_refs),
                "output_dir": self.output_dir, "spec": self.spec.to_dict(),
                "seed": self.seed, "total_samples": self.total_samples}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingManifest":
        return cls(cycle=int(data["cycle"]),
                   dataset_refs=tuple(data["dataset_refs"]),
                   output_dir=data["output_dir"],
                   spec=ExecutorSpec.from_dict(data["spec"]),
                   seed=int(data.get("seed", 0)),
                   total_samples=int(data.get("total_samples", 0)))

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True,
                          separators=(",", ":")).encode("utf-8")


def write_manifest(path: str | Path, manifest: TrainingManifest) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(manifest.canonical_bytes() + b"\n")
    tmp.replace(path)


def read_manifest(path: str | Path) -> TrainingManifest:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"manifest not found: {path}")
    return TrainingManifest.from_dict(json.loads(path.read_text("utf-8")))


def build_manifest(cycle: int, dataset_refs: list[str], spec: ExecutorSpec,
                   output_dir: str, base_dir: str | Path, seed: int = 0) -> TrainingManifest:
    """Validate refs, enforce the held-out firewall, and resolve adapter shape.

    Every referenced file must exist under ``base_dir``; a single record with
    a held-out (coverage_test) origin anywhere in the refs is a hard error.
    The adapter rank/alpha follows the volume schedule unless the spec pins
    explicit values.
    """
    base = Path(base_dir)
    total = 0
    for ref in dataset_refs:
        path = base / ref
        if not path.exists():
            raise MissingInputError(f"manifest references missing file: {ref}")
        for pair in read_records(path):
            if pair.origin == "coverage_test":
                raise HoldoutLeakError(
                    f"manifest ref {ref} contains held-out record {pair.id!r}")
            total += 1
    if total == 0:
        raise StageError("manifest references no training records")
    if spec.lora_rank is None or spec.lora_alpha is None:
        rank, alpha = resolve_adapter_shape(total)
        spec = replace(spec,
                       lora_rank=spec.lora_rank if spec.lora_rank is not None else rank,
                       lora_alpha=spec.lora_alpha if spec.lora_alpha is not None else alpha)
    return TrainingManifest(cycle=cycle, dataset_refs=tuple(dataset_refs),
                            output_dir=output_dir, spec=spec, seed=seed,
                            total_samples=total)


def validate_result_doc(doc: dict) -> dict:
    """Schema check for an executor result document."""
    if not isinstance(doc, dict):
        raise StageError("executor result is not an object")
    for key in ("handle_id", "artifact_uri", "final_loss", "steps"):
        if key not in doc:
            raise StageError(f"executor result missing {key!r}")
    if not isinstance(doc["handle_id"], str) or not doc["handle_id"]:
        raise StageError("executor result handle_id must be a non-empty string")
    if not isinstance(doc["artifact_uri"], str) or not doc["artifact_uri"]:
        raise StageError("executor result artifact_uri must be a non-empty string")
    loss = doc["final_loss"]
    if isinstance(loss, bool) or not isinstance(loss, (int, float)) or not math.isfinite(loss):
        raise StageError("executor result final_loss must be a finite number")
    steps = doc["steps"]
    if isinstance(steps, bool) or not isinstance(steps, int) or steps < 1:
        raise StageError("executor result steps must be an integer >= 1")
    return doc


@dataclass(frozen=True)
class CapabilityProfile:
    """Saturating score-vs-volume curve the mock trainer writes into artifacts."""

    cap_max: float = 100.0
    half_life: float = 2000.0

    def capability(self, total_samples: int) -> float:
        return self.cap_max * total_samples / (total_samples + self.half_life)


class MockTrainer:
    """Deterministic in-process executor; artifact is a manifest-digest file."""

    name = "mock"

    def __init__(self, seed: int = 0, profile: CapabilityProfile | None = None):
        self.seed = seed
        self.profile = profile or CapabilityProfile()

    def train(self, manifest_path: Path, base_dir: Path) -> None:
        manifest = read_manifest(manifest_path)
        total = 0
        for ref in manifest.dataset_refs:
            total += sum(1 for _ in read_records(base_dir / ref))
        out_dir = base_dir / manifest.output_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        handle_id = "mock-" + stable_digest(manifest.canonical_bytes(), self.seed)
        capability = round(self.profile.capability(total), 4)
        artifact_rel = (Path(manifest.output_dir) / "artifact.json").as_posix()
        artifact = {"capability": capability, "handle_id": handle_id,
                    "samples": total}
        (out_dir / "artifact.json").write_text(
            json.dumps(artifact, sort_keys=True) + "\n", encoding="utf-8")
        steps = max(1, math.ceil(total / manifest.spec.batch_size) * manifest.spec.epochs)
        result = {"handle_id": handle_id, "artifact_uri": artifact_rel,
                  "final_loss": round(3.0 * (1.0 - capability / 100.0) + 0.05, 4),
                  "steps": steps}
        (out_dir / "result").write_text(
            json.dumps(result, sort_keys=True) + "\n", encoding="utf-8")


class CommandExecutor:
    """Invokes an external trainer: ``<argv...> train <manifest-path>``."""

    name = "command"

    def __init__(self, argv: list[str], timeout_s: float = 24 * 3600.0):
        if not argv:
            raise StageError("executor command must not be empty")
        self.argv = list(argv)
        self.timeout_s = timeout_s

    def train(self, manifest_path: Path, base_dir: Path) -> None:
        # The subprocess runs with cwd=base_dir; hand it an absolute manifest
        # path so relative run directories work from any caller cwd.
        cmd = self.argv + ["train", str(Path(manifest_path).resolve())]
        try:
            proc = subprocess.run(cmd, cwd=base_dir, capture_output=True,
                                  text=True, timeout=self.timeout_s)
        except subprocess.TimeoutExpired as exc:
            raise StageError(f"executor timed out after {self.timeout_s}s") from exc
        if proc.returncode == 2:
            raise StageError(f"executor rejected manifest: {proc.stderr.strip()}")
        if proc.returncode == 3:
            raise StageError(f"executor resource failure: {proc.stderr.strip()}")
        if proc.returncode != 0:
            raise StageError(
                f"executor exited {proc.returncode}: {proc.stderr.strip()[:2000]}")


def run_executor(manifest: TrainingManifest, executor, base_dir: str | Path,
                 manifest_path: str | Path | None = None) -> ModelHandle:
    """Write the manifest, run the executor, and validate its result document."""
    base = Path(base_dir)
    if manifest_path is None:
        manifest_path = base / manifest.output_dir / "manifest"
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path = Path(manifest_path)
    write_manifest(manifest_path, manifest)
    executor.train(manifest_path, base)
    result_path = base / manifest.output_dir / "result"
    if not result_path.exists():
        raise StageError(f"executor wrote no result document at {result_path}")
    try:
        doc = validate_result_doc(json.loads(result_path.read_text("utf-8")))
    except json.JSONDecodeError as exc:
        raise StageError(f"executor result is not valid JSON: {exc}") from exc
    artifact_path = base / doc["artifact_uri"]
    if not artifact_path.exists():
        raise StageError(f"executor artifact missing: {doc['artifact_uri']}")
    return ModelHandle(
        handle_id=doc["handle_id"],
        base_model=manifest.spec.base_model,
        cycle=manifest.cycle,
        artifact_uri=doc["artifact_uri"],
        training_metrics={"final_loss": float(doc["final_loss"]),
                          "steps": int(doc["steps"])},
    )
