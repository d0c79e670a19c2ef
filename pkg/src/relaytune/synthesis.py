"""Synthetic candidate generation from train-split seed pairs.

A template carries ``$instruction``, ``$response``, and ``$num_samples``
placeholders (each exactly once). Rendering is a single substitution pass, so
placeholder-looking text inside a seed pair is never re-expanded. Completions
are parsed leniently: any well-formed ``{"instruction", "response"}`` object
found in the text counts, malformed segments are skipped and tallied.
"""

from __future__ import annotations

import json
import logging
import math
import random
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from string import Template

from .corpus import InstructionPair
from .errors import StageError
from .gateway import CompletionFailure, CompletionRequest, Gateway
from .textutil import stable_digest

logger = logging.getLogger(__name__)

PLACEHOLDERS = ("instruction", "response", "num_samples")


@dataclass(frozen=True)
class SynthesisTemplate:
    name: str
    body: str
    task: str

    def __post_init__(self):
        for ph in PLACEHOLDERS:
            n = len(re.findall(rf"\$(?:{ph}\b|\{{{ph}\}})", self.body))
            if n != 1:
                raise StageError(
                    f"template {self.name!r} must contain ${ph} exactly once, found {n}")


def builtin_template(task: str) -> SynthesisTemplate:
    """Summarization has its own template; every other task shares one."""
    name = "synthesis_summarization" if task == "summarization" else "synthesis_general"
    body = resources.files("relaytune.templates").joinpath(f"{name}.txt").read_text("utf-8")
    return SynthesisTemplate(name=name, body=body, task=task)


def load_template(path: str | Path, task: str) -> SynthesisTemplate:
    path = Path(path)
    return SynthesisTemplate(name=path.stem, body=path.read_text("utf-8"), task=task)


def render_synthesis_prompt(template: SynthesisTemplate, seed: InstructionPair,
                            samples_per_call: int) -> str:
    if samples_per_call < 1:
        raise StageError("samples_per_call must be >= 1")
    return Template(template.body).safe_substitute(
        instruction=seed.instruction,
        response=seed.response,
        num_samples=str(samples_per_call),
    )


_DECODER = json.JSONDecoder()
_OBJECT_START = re.compile(r"\{\s*\"")


def parse_synthetic_samples(completion_text: str) -> tuple[list[tuple[str, str]], int]:
    """Extract (instruction, response) string pairs; returns (samples, skipped).

    Scans for JSON objects anywhere in the text (fenced blocks, arrays, and
    surrounding prose are all tolerated). An object that fails to decode or
    lacks non-empty string fields counts as one skipped segment.
    """
    samples: list[tuple[str, str]] = []
    skipped = 0
    pos = 0
    while True:
        match = _OBJECT_START.search(completion_text, pos)
        if match is None:
            break
        start = match.start()
        try:
            obj, end = _DECODER.raw_decode(completion_text, start)
        except json.JSONDecodeError:
            skipped += 1
            pos = start + 1
            continue
        pos = end
        if not isinstance(obj, dict):
            skipped += 1
            continue
        instruction = obj.get("instruction")
        response = obj.get("response")
        if (isinstance(instruction, str) and instruction.strip()
                and isinstance(response, str) and response.strip()):
            samples.append((instruction, response))
        else:
            skipped += 1
    return samples, skipped


@dataclass
class SyntheticBatch:
    cycle: int
    generator_model: str
    candidates: list[InstructionPair]
    requested: int
    seed_sample_policy: str = "uniform_with_replacement"
    calls_made: int = 0
    failed_calls: int = 0
    parse_skipped: int = 0

    @property
    def complete(self) -> bool:
        return len(self.candidates) >= self.requested


def _candidate_id(cycle: int, call_index: int, position: int,
                  instruction: str, response: str) -> str:
    digest = stable_digest(instruction, response)
    return f"syn-c{cycle}-{call_index:05d}-{position:02d}-{digest}"


def generate_candidates(train_seeds: list[InstructionPair], target_count: int,
                        generator_model: str, cycle: int, *,
                        gateway: Gateway, template: SynthesisTemplate,
                        samples_per_call: int = 4, rng_seed: int = 0,
                        max_in_flight: int = 8, call_budget: int | None = None,
                        failure_rate_cap: float = 0.2,
                        temperature: float = 0.7, top_p: float = 0.95,
                        max_new_tokens: int = 1024) -> SyntheticBatch:
    """Fan generation calls out through the gateway until the target is met.

    Seeds are drawn uniformly with replacement, keyed by a per-call index so
    reruns and resumed runs issue identical requests. Returns a partial batch
    flagged incomplete when the call budget runs out; aborts only when the
    terminal-failure rate exceeds ``failure_rate_cap``.
    """
    if target_count < 1:
        raise StageError("target_count must be >= 1")
    if not train_seeds:
        raise StageError("generate_candidates requires non-empty train_seeds")
    if cycle < 1:
        raise StageError("synthetic cycles start at 1")

    minimum_calls = math.ceil(target_count / samples_per_call)
    if call_budget is None:
        call_budget = max(4 * minimum_calls, minimum_calls + 8)

    rng = random.Random(rng_seed)
    batch = SyntheticBatch(cycle=cycle, generator_model=generator_model,
                           candidates=[], requested=target_count)
    call_index = 0
    while len(batch.candidates) < target_count and call_index < call_budget:
        remaining = target_count - len(batch.candidates)
        wave = min(math.ceil(remaining / samples_per_call), call_budget - call_index)
        requests = []
        wave_seeds = []
        for _ in range(wave):
            seed_pair = train_seeds[rng.randrange(len(train_seeds))]
            wave_seeds.append(seed_pair)
            requests.append(CompletionRequest(
                model_id=generator_model,
                prompt=render_synthesis_prompt(template, seed_pair, samples_per_call),
                max_new_tokens=max_new_tokens,
                temperature=temperature,
                top_p=top_p,
                request_tag=f"synth:c{cycle}:{call_index + len(requests):05d}",
                seed=rng_seed + call_index + len(requests),
            ))
        results = gateway.complete_many(requests, max_in_flight=max_in_flight)
        for offset, (seed_pair, result) in enumerate(zip(wave_seeds, results)):
            this_call = call_index + offset
            if isinstance(result, CompletionFailure):
                batch.failed_calls += 1
                logger.warning("synthesis call %d failed: %s", this_call, result.message)
                continue
            samples, skipped = parse_synthetic_samples(result.text)
            batch.parse_skipped += skipped
            for position, (instruction, response) in enumerate(samples):
                batch.candidates.append(InstructionPair(
                    id=_candidate_id(cycle, this_call, position, instruction, response),
                    instruction=instruction,
                    response=response,
                    task=template.task,
                    origin="synthetic",
                    cycle=cycle,
                    generator_model=generator_model,
                    seed_ids=(seed_pair.id,),
                ))
        call_index += wave
        batch.calls_made = call_index
        if (batch.failed_calls / call_index) > failure_rate_cap and batch.failed_calls >= 2:
            raise StageError(
                f"synthesis aborted: {batch.failed_calls}/{call_index} calls failed "
                f"(cap {failure_rate_cap:.0%})")
    if not batch.complete:
        logger.warning("synthesis budget exhausted at %d/%d candidates",
                       len(batch.candidates), target_count)
    return batch
