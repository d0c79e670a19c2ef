"""Canned responder behaviors for the offline mock provider.

These close the loop without any network: the mock trainer records a
capability score in its artifact, the mock inference backend embeds that
score in every generated response, and the scripted judge reads it back out
of the rendered assessment prompt. Tests and offline configs pick the
convergence profile; everything else flows through the real pipeline code.
"""

from __future__ import annotations

import json
import re

from .gateway import CompletionRequest
from .textutil import pseudo_text, stable_seed

CAPABILITY_MARKER = re.compile(r"capability=([0-9]+(?:\.[0-9]+)?)")


def format_capability_marker(capability: float) -> str:
    return f"[capability={capability:.4f}]"


def synthesizer_responder(samples_per_call: int, seed: int = 0):
    """Emit a JSON array of deterministic instruction/response samples."""

    def respond(request: CompletionRequest, match=None) -> str:
        base = stable_seed(seed, request.prompt, request.seed)
        samples = []
        for i in range(samples_per_call):
            samples.append({
                "instruction": "Handle this request: " + pseudo_text(base + 2 * i, 9),
                "response": pseudo_text(base + 2 * i + 1, 12),
            })
        return json.dumps(samples)

    return respond


def _verdict(precision: int, similarity: int) -> str:
    return json.dumps({
        "precision_assessment": {"score": precision, "reasoning": "scripted"},
        "similarity_assessment": {"score": similarity, "reasoning": "scripted"},
    })


def capability_judge_responder(similarity_offset: int = 0):
    """Score both metrics from the capability marker in the judged response."""

    def respond(request: CompletionRequest, match=None) -> str:
        found = CAPABILITY_MARKER.search(request.prompt)
        if not found:
            return _verdict(0, 0)
        score = max(0, min(100, round(float(found.group(1)))))
        sim = max(0, min(100, score + similarity_offset))
        return _verdict(score, sim)

    return respond


def constant_judge_responder(precision: int, similarity: int):
    def respond(request: CompletionRequest, match=None) -> str:
        return _verdict(precision, similarity)

    return respond
