"""The multi-cycle loop: gate on thresholds, schedule volumes, orchestrate stages.

Cycle 0 trains on the train split alone; every later cycle synthesizes a
scheduled volume of candidates, curates them, retrains on everything
accumulated so far, generates K responses per held-out prompt, judges them,
and decides pass / continue / budget_exhausted. State is persisted after
every phase as a checksummed snapshot (atomic rename), so a run killed at
any point resumes into exactly the same final state.

Run directory layout::

    run_dir/
      config   state   ledger   .lock
      inputs/train   inputs/test
      cycles/<t>/{synth, curated, curation_report, manifest, result,
                  generations, verdicts, summary, artifact.json}
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .corpus import load_dataset, read_records, split, write_records
from .curation import CurationConfig, curate
from .errors import ConfigError, ResumeError, StageError
from .gateway import Gateway
from .judging import EvalSummary, JudgeTemplate, aggregate, evaluate, write_verdicts
from .rollout import DecodingParams, batch_infer, read_generations, write_generations
from .synthesis import SynthesisTemplate, generate_candidates
from .textutil import stable_digest, stable_seed
from .tuning import ExecutorSpec, ModelHandle, build_manifest, run_executor
from .errors import MissingInputError

logger = logging.getLogger(__name__)

DEFAULT_VOLUME_SCHEDULE = tuple(2 ** n * 1000 for n in range(9))  # 1k .. 256k

PHASES = ("initialized", "synthesized", "curated", "trained", "inferred",
          "judged", "decided")
DECISIONS = ("pass", "continue", "budget_exhausted")


class ScheduleExhausted(Exception):
    """The volume schedule has no entry for the requested cycle."""


def next_volume(t: int, schedule: tuple[int, ...] = DEFAULT_VOLUME_SCHEDULE) -> int:
    """Curated-sample target for cycle t (1-based into the schedule)."""
    if t < 1:
        raise StageError("synthetic cycles start at t=1")
    if t > len(schedule):
        raise ScheduleExhausted(f"schedule has {len(schedule)} entries, cycle {t} requested")
    return schedule[t - 1]


@dataclass(frozen=True)
class LoopConfig:
    epsilon_mean: float
    epsilon_coverage: float
    zeta: float = 50
    zeta_list: tuple[float, ...] = (50, 70)
    gate_metric: str = "precision"
    max_cycles: int = 9
    volume_schedule: tuple[int, ...] = DEFAULT_VOLUME_SCHEDULE
    k: int = 4
    m_repeats: int = 10
    samples_per_call: int = 4
    max_in_flight: int = 8
    over_request_factor: float = 1.25

    def __post_init__(self):
        if not 0 <= self.epsilon_mean <= 100:
            raise ConfigError("epsilon_mean must be in [0, 100]")
        if not 0 <= self.epsilon_coverage <= 1:
            raise ConfigError("epsilon_coverage must be in [0, 1]")
        if self.zeta not in self.zeta_list:
            raise ConfigError("gate zeta must be one of zeta_list")
        if self.gate_metric not in ("precision", "similarity", "both"):
            raise ConfigError(f"unknown gate metric {self.gate_metric!r}")
        if self.max_cycles < 1:
            raise ConfigError("max_cycles must be >= 1")
        if any(b < a for a, b in zip(self.volume_schedule, self.volume_schedule[1:])):
            raise ConfigError("volume schedule must be non-decreasing")


def decide(summary: EvalSummary, config: LoopConfig) -> str:
    """'pass' iff every gated metric reaches both thresholds (equality passes)."""
    names = METRIC_BOTH if config.gate_metric == "both" else (config.gate_metric,)
    for name in names:
        ms = summary.metrics[name]
        if ms.mean_score < config.epsilon_mean:
            return "continue"
        if ms.coverage[config.zeta] < config.epsilon_coverage:
            return "continue"
    return "pass"


METRIC_BOTH = ("precision", "similarity")


@dataclass
class RunStack:
    """Everything a run needs, assembled once from configuration."""

    loop: LoopConfig
    gateway: Gateway
    executor: object
    inference_backend: object
    synthesis_template: SynthesisTemplate
    judge_template: JudgeTemplate | None
    executor_spec: ExecutorSpec
    curation: CurationConfig
    decoding: DecodingParams
    dataset_path: str
    task: str
    train_count: int
    split_seed: int
    seed: int
    generator_model: str = "mock-gen"
    judge_model: str = "mock-judge"
    run_id: str | None = None
    config_text: str = ""

    def attach_run_dir(self, run_dir: Path) -> None:
        self.gateway.ledger.path = run_dir / "ledger"


@dataclass
class CycleState:
    run_id: str
    seed: int
    t: int
    phase: str
    volumes: dict[int, int] = field(default_factory=dict)
    model: ModelHandle | None = None
    summary: dict | None = None
    decision: str | None = None
    over_request: float = 1.25
    train_count: int = 0
    test_count: int = 0
    history: list[dict] = field(default_factory=list)

    def to_payload(self) -> dict:
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "t": self.t,
            "phase": self.phase,
            "volumes": {str(k): v for k, v in sorted(self.volumes.items())},
            "model": self.model.to_dict() if self.model else None,
            "summary": self.summary,
            "decision": self.decision,
            "over_request": self.over_request,
            "train_count": self.train_count,
            "test_count": self.test_count,
            "history": self.history,
        }

    @classmethod
    def from_payload(cls, data: dict) -> "CycleState":
        return cls(
            run_id=data["run_id"], seed=int(data["seed"]), t=int(data["t"]),
            phase=data["phase"],
            volumes={int(k): int(v) for k, v in data["volumes"].items()},
            model=ModelHandle.from_dict(data["model"]) if data["model"] else None,
            summary=data["summary"], decision=data["decision"],
            over_request=float(data["over_request"]),
            train_count=int(data["train_count"]), test_count=int(data["test_count"]),
            history=list(data["history"]),
        )


def _canonical(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_state(path: Path, state: CycleState) -> None:
    payload = state.to_payload()
    doc = {"payload": payload,
           "sha256": hashlib.sha256(_canonical(payload)).hexdigest()}
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
                    + b"\n")
    tmp.replace(path)


def read_state(path: Path) -> CycleState:
    if not path.exists():
        raise ResumeError(f"no state file at {path}")
    try:
        doc = json.loads(path.read_text("utf-8"))
        payload, checksum = doc["payload"], doc["sha256"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ResumeError(f"unreadable state file: {exc}") from None
    if hashlib.sha256(_canonical(payload)).hexdigest() != checksum:
        raise ResumeError("state file checksum mismatch (tampered or corrupt)")
    return CycleState.from_payload(payload)


class _RunLock:
    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"

    def __enter__(self):
        if self.path.exists():
            try:
                pid = int(self.path.read_text().strip() or 0)
            except ValueError:
                pid = 0
            if pid and _pid_alive(pid):
                raise ResumeError(f"run directory is locked by live pid {pid}")
        self.path.write_text(str(os.getpid()))
        return self

    def __exit__(self, *exc_info):
        self.path.unlink(missing_ok=True)


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except OSError:
        return False
    return True


class LoopController:
    """Drives one run directory through the loop; one controller per run."""

    def __init__(self, stack: RunStack, run_dir: str | Path,
                 phase_callback: Callable[[str, CycleState], None] | None = None):
        self.stack = stack
        # Resolved once so relative run dirs behave no matter the caller cwd;
        # everything persisted stays run-dir-relative regardless.
        self.run_dir = Path(run_dir).resolve()
        self.phase_callback = phase_callback
        self.paths = _RunPaths(self.run_dir)

    # -- lifecycle -------------------------------------------------------

    def start(self) -> CycleState:
        if self.paths.state.exists():
            raise StageError(f"run directory already initialized: {self.run_dir} "
                             "(use resume)")
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.stack.attach_run_dir(self.run_dir)
        with _RunLock(self.run_dir):
            state = self._initialize()
            return self._run(state)

    def resume(self) -> CycleState:
        state = self.load_state()
        self.stack.attach_run_dir(self.run_dir)
        with _RunLock(self.run_dir):
            return self._run(state)

    def load_state(self) -> CycleState:
        state = read_state(self.paths.state)
        self._check_artifacts(state)
        return state

    # -- internals -------------------------------------------------------

    def _initialize(self) -> CycleState:
        stack = self.stack
        dataset = load_dataset(stack.dataset_path, stack.task)
        train, test = split(dataset, stack.train_count, stack.split_seed)
        self.paths.inputs.mkdir(parents=True, exist_ok=True)
        write_records(self.paths.train, train)
        write_records(self.paths.test, test)
        if stack.config_text:
            self.paths.config.write_text(stack.config_text, encoding="utf-8")
        run_id = stack.run_id or "run-" + stable_digest(stack.seed, stack.train_count,
                                                        stack.task, size=12)
        state = CycleState(run_id=run_id, seed=stack.seed, t=0, phase="initialized",
                           over_request=stack.loop.over_request_factor,
                           train_count=len(train), test_count=len(test))
        self._persist("initialized", state)
        return state

    def _run(self, state: CycleState) -> CycleState:
        while True:
            if state.phase == "decided":
                if state.decision in ("pass", "budget_exhausted"):
                    return state
                advanced = self._advance_cycle(state)
                if advanced.phase == "decided":  # schedule or cycle budget ran out
                    return advanced
                state = advanced
                continue
            state = self._run_phase(state)

    def _advance_cycle(self, state: CycleState) -> CycleState:
        t = state.t + 1
        try:
            if t > self.stack.loop.max_cycles:
                raise ScheduleExhausted(f"max_cycles {self.stack.loop.max_cycles} reached")
            next_volume(t, self.stack.loop.volume_schedule)
        except ScheduleExhausted as exc:
            logger.info("terminating: %s", exc)
            state.t = t
            state.phase = "decided"
            state.decision = "budget_exhausted"
            state.history.append({"t": t, "decision": "budget_exhausted"})
            self._persist("decided", state)
            return state
        state.t = t
        state.phase = "initialized"
        state.decision = None
        state.summary = None
        self._persist("initialized", state)
        return state

    def _run_phase(self, state: CycleState) -> CycleState:
        order = self._phases_for(state.t)
        current = state.phase
        try:
            idx = order.index(current)
        except ValueError:
            raise ResumeError(f"state phase {current!r} not in cycle plan {order}")
        if idx + 1 >= len(order):
            raise StageError(f"no phase after {current!r}")  # pragma: no cover
        nxt = order[idx + 1]
        runner = getattr(self, f"_phase_{nxt}")
        runner(state)
        state.phase = nxt
        self._persist(nxt, state)
        return state

    def _phases_for(self, t: int) -> list[str]:
        if t == 0:
            return ["initialized", "trained", "inferred", "judged", "decided"]
        return list(PHASES)

    def _persist(self, phase: str, state: CycleState) -> None:
        write_state(self.paths.state, state)
        if self.phase_callback is not None:
            self.phase_callback(phase, state)

    # -- phases ----------------------------------------------------------

    def _phase_synthesized(self, state: CycleState) -> None:
        stack = self.stack
        t = state.t
        target = next_volume(t, stack.loop.volume_schedule)
        requested = math.ceil(target * state.over_request)
        seeds = read_records(self.paths.train)
        batch = generate_candidates(
            seeds, requested, stack.generator_model, t,
            gateway=stack.gateway, template=stack.synthesis_template,
            samples_per_call=stack.loop.samples_per_call,
            rng_seed=stable_seed(state.seed, "synth", t),
            max_in_flight=stack.loop.max_in_flight,
            temperature=stack.decoding.temperature, top_p=stack.decoding.top_p,
            max_new_tokens=stack.decoding.max_new_tokens)
        cycle_dir = self.paths.cycle(t)
        cycle_dir.mkdir(parents=True, exist_ok=True)
        write_records(cycle_dir / "synth", batch.candidates)

    def _phase_curated(self, state: CycleState) -> None:
        stack = self.stack
        t = state.t
        target = next_volume(t, stack.loop.volume_schedule)
        candidates = read_records(self.paths.cycle(t) / "synth")
        pool = read_records(self.paths.train)
        for prev in range(1, t):
            pool.extend(read_records(self.paths.cycle(prev) / "curated"))
        test_set = read_records(self.paths.test)
        survivors, report = curate(candidates, pool, test_set, stack.curation)
        kept = survivors[:target]
        if not kept:
            raise StageError(f"cycle {t}: curation left no survivors "
                             f"({report.to_dict()})")
        if len(kept) < target:
            logger.warning("cycle %d: %d/%d curated samples", t, len(kept), target)
        write_records(self.paths.cycle(t) / "curated", kept)
        (self.paths.cycle(t) / "curation_report").write_text(
            json.dumps(report.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
        state.volumes[t] = len(kept)
        accept_rate = max(len(survivors) / max(report.input_count, 1), 1e-3)
        state.over_request = round(min(4.0, max(1.05, 1.1 / accept_rate)), 4)

    def _phase_trained(self, state: CycleState) -> None:
        stack = self.stack
        t = state.t
        refs = ["inputs/train"] + [f"cycles/{i}/curated" for i in range(1, t + 1)]
        cycle_dir = self.paths.cycle(t)
        cycle_dir.mkdir(parents=True, exist_ok=True)
        manifest = build_manifest(t, refs, stack.executor_spec, f"cycles/{t}",
                                  self.run_dir, seed=stable_seed(state.seed, "train", t))
        handle = run_executor(manifest, stack.executor, self.run_dir,
                              manifest_path=cycle_dir / "manifest")
        state.model = handle

    def _phase_inferred(self, state: CycleState) -> None:
        stack = self.stack
        t = state.t
        if state.model is None:
            raise StageError("cannot infer before training")
        test_view = read_records(self.paths.test)
        records = batch_infer(state.model, test_view, stack.loop.k, stack.decoding,
                              stack.inference_backend, self.run_dir,
                              workdir=self.paths.cycle(t))
        write_generations(self.paths.cycle(t) / "generations", records)

    def _phase_judged(self, state: CycleState) -> None:
        stack = self.stack
        t = state.t
        records = read_generations(self.paths.cycle(t) / "generations")
        test_view = read_records(self.paths.test)
        verdicts = evaluate(records, test_view, stack.judge_model,
                            stack.loop.m_repeats, gateway=stack.gateway,
                            template=stack.judge_template,
                            max_in_flight=stack.loop.max_in_flight)
        write_verdicts(self.paths.cycle(t) / "verdicts", verdicts)
        summary = aggregate(verdicts, stack.loop.zeta_list, stack.judge_model)
        (self.paths.cycle(t) / "summary").write_text(
            json.dumps(summary.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
        state.summary = _condense(summary)

    def _phase_decided(self, state: CycleState) -> None:
        stack = self.stack
        t = state.t
        summary = self._summary_for(t)
        state.decision = decide(summary, stack.loop)
        cumulative = state.train_count + sum(state.volumes.values())
        state.history.append({
            "t": t,
            "volume": state.volumes.get(t, 0),
            "cumulative_training": cumulative,
            "decision": state.decision,
            "metrics": _condense(summary),
        })

    def _summary_for(self, t: int) -> EvalSummary:
        path = self.paths.cycle(t) / "summary"
        if not path.exists():
            raise MissingInputError(f"no summary for cycle {t}")
        return EvalSummary.from_dict(json.loads(path.read_text("utf-8")))

    def _check_artifacts(self, state: CycleState) -> None:
        expected = {
            "initialized": [],
            "synthesized": ["synth"],
            "curated": ["synth", "curated"],
            "trained": ["curated", "manifest", "result"] if state.t else ["manifest", "result"],
            "inferred": ["manifest", "result", "generations"],
            "judged": ["manifest", "result", "generations", "verdicts", "summary"],
            "decided": [],
        }
        if not self.paths.train.exists() or not self.paths.test.exists():
            raise ResumeError("run inputs are missing")
        if state.phase == "decided":
            return
        for name in expected.get(state.phase, []):
            path = self.paths.cycle(state.t) / name
            if state.t == 0 and name in ("synth", "curated"):
                continue
            if not path.exists():
                raise ResumeError(
                    f"artifact {path.relative_to(self.run_dir)} missing for "
                    f"phase {state.phase!r}")


def _condense(summary: EvalSummary) -> dict:
    return {
        name: {
            "mean_score": ms.mean_score,
            "coverage": {str(z): c for z, c in sorted(ms.coverage.items())},
        }
        for name, ms in sorted(summary.metrics.items())
    }


class _RunPaths:
    def __init__(self, run_dir: Path):
        self.run_dir = run_dir
        self.state = run_dir / "state"
        self.ledger = run_dir / "ledger"
        self.config = run_dir / "config"
        self.inputs = run_dir / "inputs"
        self.train = run_dir / "inputs" / "train"
        self.test = run_dir / "inputs" / "test"

    def cycle(self, t: int) -> Path:
        return self.run_dir / "cycles" / str(t)


def plan_schedule(loop: LoopConfig, train_count: int,
                  spec: ExecutorSpec) -> list[dict]:
    """Dry-run view: per-cycle volume, cumulative training size, adapter shape."""
    from .tuning import resolve_adapter_shape

    rows = []
    cumulative = train_count
    rank, alpha = ((spec.lora_rank, spec.lora_alpha)
                   if spec.lora_rank is not None and spec.lora_alpha is not None
                   else resolve_adapter_shape(cumulative))
    rows.append({"t": 0, "volume": 0, "cumulative_training": cumulative,
                 "lora_rank": rank, "lora_alpha": alpha})
    for t in range(1, min(loop.max_cycles, len(loop.volume_schedule)) + 1):
        volume = loop.volume_schedule[t - 1]
        cumulative += volume
        if spec.lora_rank is not None and spec.lora_alpha is not None:
            rank, alpha = spec.lora_rank, spec.lora_alpha
        else:
            rank, alpha = resolve_adapter_shape(cumulative)
        rows.append({"t": t, "volume": volume, "cumulative_training": cumulative,
                     "lora_rank": rank, "lora_alpha": alpha})
    return rows
