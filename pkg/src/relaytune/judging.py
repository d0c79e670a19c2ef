"""Judge-model evaluation: prompt rendering, verdict parsing, score aggregation.

Each generated response is judged M times; both metrics (precision and
similarity, 0-100) come back in a single structured verdict per call. The
aggregate summary holds the per-response means, the corpus mean, and the
coverage fraction at each threshold.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from string import Template

from .corpus import InstructionPair
from .errors import StageError
from .gateway import CompletionFailure, CompletionRequest, Gateway
from .rollout import GenerationRecord

logger = logging.getLogger(__name__)

METRICS = ("precision", "similarity")
JUDGE_PLACEHOLDERS = ("instruction", "lm_response", "human_response")


@dataclass(frozen=True)
class JudgeTemplate:
    name: str
    body: str

    def __post_init__(self):
        for ph in JUDGE_PLACEHOLDERS:
            n = len(re.findall(rf"\$(?:{ph}\b|\{{{ph}\}})", self.body))
            if n != 1:
                raise StageError(
                    f"judge template {self.name!r} must contain ${ph} exactly once, found {n}")


def builtin_judge_template() -> JudgeTemplate:
    body = resources.files("relaytune.templates").joinpath("judge_default.txt").read_text("utf-8")
    return JudgeTemplate(name="judge_default", body=body)


def load_judge_template(path: str | Path) -> JudgeTemplate:
    path = Path(path)
    return JudgeTemplate(name=path.stem, body=path.read_text("utf-8"))


def render_judge_prompt(instruction: str, lm_response: str, human_response: str,
                        template: JudgeTemplate) -> str:
    for name, text in (("instruction", instruction), ("lm_response", lm_response),
                       ("human_response", human_response)):
        if not text.strip():
            raise StageError(f"judge prompt requires non-empty {name}")
    return Template(template.body).safe_substitute(
        instruction=instruction, lm_response=lm_response,
        human_response=human_response)


class VerdictError(StageError):
    """Malformed or out-of-range judge output; retryable by re-asking."""

    error_class = "judge_verdict"


_DECODER = json.JSONDecoder()


def _score_from(obj: dict, key: str) -> int:
    section = obj.get(key)
    if not isinstance(section, dict):
        raise VerdictError(f"verdict missing {key!r} object")
    score = section.get("score")
    if isinstance(score, bool) or not isinstance(score, int):
        raise VerdictError(f"{key} score is not an integer")
    if not 0 <= score <= 100:
        raise VerdictError(f"{key} score {score} outside 0-100")
    return score


def parse_verdict(judge_text: str) -> tuple[int, int]:
    """(precision, similarity) from the first well-formed verdict object.

    Surrounding prose is tolerated; the first decodable JSON object that
    carries both assessments wins. Anything else raises ``VerdictError``.
    """
    pos = 0
    error: VerdictError | None = None
    while True:
        start = judge_text.find("{", pos)
        if start == -1:
            break
        try:
            obj, end = _DECODER.raw_decode(judge_text, start)
        except json.JSONDecodeError:
            pos = start + 1
            continue
        if isinstance(obj, dict) and ("precision_assessment" in obj
                                      or "similarity_assessment" in obj):
            try:
                return (_score_from(obj, "precision_assessment"),
                        _score_from(obj, "similarity_assessment"))
            except VerdictError as exc:
                error = exc
        pos = end if end > pos else pos + 1
    raise error or VerdictError("no verdict object found in judge output")


@dataclass(frozen=True)
class JudgeVerdict:
    test_id: str
    k_index: int
    m: int
    precision_score: int
    similarity_score: int
    raw: str = ""

    def to_record(self) -> dict:
        return {"test_id": self.test_id, "k_index": self.k_index, "m": self.m,
                "precision_score": self.precision_score,
                "similarity_score": self.similarity_score}

    @classmethod
    def from_record(cls, rec: dict) -> "JudgeVerdict":
        return cls(test_id=rec["test_id"], k_index=int(rec["k_index"]),
                   m=int(rec["m"]), precision_score=int(rec["precision_score"]),
                   similarity_score=int(rec["similarity_score"]))


def evaluate(records: list[GenerationRecord], test_view: list[InstructionPair],
             judge_model: str, m_repeats: int, *, gateway: Gateway,
             template: JudgeTemplate | None = None, max_in_flight: int = 8,
             reask_budget: int = 3) -> list[JudgeVerdict]:
    """Judge every generation record ``m_repeats`` times.

    Issues exactly ``len(records) * m_repeats`` gateway calls on the happy
    path; malformed verdicts are re-asked (with a shifted decode seed) up to
    ``reask_budget`` times before the evaluation fails.
    """
    if m_repeats < 1:
        raise StageError("m_repeats must be >= 1")
    template = template or builtin_judge_template()
    by_id = {p.id: p for p in test_view}

    jobs: list[tuple[GenerationRecord, int, str]] = []
    for record in sorted(records, key=lambda r: (r.test_id, r.k_index)):
        pair = by_id.get(record.test_id)
        if pair is None:
            raise StageError(f"generation record {record.test_id!r} has no test pair")
        prompt = render_judge_prompt(pair.instruction, record.response,
                                     pair.response, template)
        for m in range(1, m_repeats + 1):
            jobs.append((record, m, prompt))

    def request_for(record: GenerationRecord, m: int, prompt: str,
                    attempt: int) -> CompletionRequest:
        return CompletionRequest(
            model_id=judge_model, prompt=prompt, max_new_tokens=512,
            request_tag=f"judge:{record.test_id}#k{record.k_index}:m{m}",
            seed=m + 1000 * attempt)

    verdicts: list[JudgeVerdict] = []
    pending = [(record, m, prompt, 0) for record, m, prompt in jobs]
    slots: dict[tuple[str, int, int], JudgeVerdict] = {}
    while pending:
        requests = [request_for(rec, m, prompt, attempt)
                    for rec, m, prompt, attempt in pending]
        results = gateway.complete_many(requests, max_in_flight=max_in_flight)
        retry: list[tuple[GenerationRecord, int, str, int]] = []
        for (rec, m, prompt, attempt), result in zip(pending, results):
            if isinstance(result, CompletionFailure):
                raise StageError(
                    f"judge call failed for {rec.test_id}#k{rec.k_index} m={m}: "
                    f"{result.message}")
            try:
                precision, similarity = parse_verdict(result.text)
            except VerdictError as exc:
                if attempt + 1 >= reask_budget:
                    raise StageError(
                        f"judge produced no usable verdict for {rec.test_id}"
                        f"#k{rec.k_index} m={m} after {reask_budget} asks: {exc}"
                    ) from exc
                retry.append((rec, m, prompt, attempt + 1))
                continue
            slots[(rec.test_id, rec.k_index, m)] = JudgeVerdict(
                test_id=rec.test_id, k_index=rec.k_index, m=m,
                precision_score=precision, similarity_score=similarity,
                raw=result.text)
        pending = retry
    for record, m, _prompt in jobs:
        verdicts.append(slots[(record.test_id, record.k_index, m)])
    return verdicts


@dataclass
class MetricSummary:
    mean_score: float
    per_response: dict[str, float]
    coverage: dict[float, float]


@dataclass
class EvalSummary:
    judge_model: str
    m_repeats: int
    k: int
    zeta_list: tuple[float, ...]
    n_responses: int
    metrics: dict[str, MetricSummary]

    def to_dict(self) -> dict:
        return {
            "judge_model": self.judge_model,
            "m_repeats": self.m_repeats,
            "k": self.k,
            "zeta_list": list(self.zeta_list),
            "n_responses": self.n_responses,
            "metrics": {
                name: {
                    "mean_score": ms.mean_score,
                    "coverage": {str(z): c for z, c in sorted(ms.coverage.items())},
                    "per_response": dict(sorted(ms.per_response.items())),
                }
                for name, ms in sorted(self.metrics.items())
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalSummary":
        metrics = {}
        for name, ms in data["metrics"].items():
            coverage = {_num(z): c for z, c in ms["coverage"].items()}
            metrics[name] = MetricSummary(mean_score=ms["mean_score"],
                                          per_response=dict(ms["per_response"]),
                                          coverage=coverage)
        return cls(judge_model=data["judge_model"], m_repeats=int(data["m_repeats"]),
                   k=int(data["k"]), zeta_list=tuple(_num(z) for z in data["zeta_list"]),
                   n_responses=int(data["n_responses"]), metrics=metrics)


def _num(value) -> float | int:
    f = float(value)
    return int(f) if f.is_integer() else f


def aggregate(verdicts: list[JudgeVerdict], zeta_list: tuple[float, ...],
              judge_model: str = "") -> EvalSummary:
    """Per-response means, corpus mean, and coverage at each threshold.

    Requires a complete verdict matrix: k runs 1..K with no gaps for every
    test id, and the same repeat count M for every (test id, k) slot.
    Permutation-invariant; a response whose mean exactly equals a threshold
    counts as covered.
    """
    if not verdicts:
        raise StageError("aggregate requires at least one verdict")
    sums: dict[tuple[str, int], dict[str, int]] = {}
    counts: dict[tuple[str, int], int] = {}
    seen: set[tuple[str, int, int]] = set()
    for v in verdicts:
        key = (v.test_id, v.k_index)
        triple = (v.test_id, v.k_index, v.m)
        if triple in seen:
            raise StageError(f"duplicate verdict for {triple}")
        seen.add(triple)
        slot = sums.setdefault(key, {"precision": 0, "similarity": 0})
        slot["precision"] += v.precision_score
        slot["similarity"] += v.similarity_score
        counts[key] = counts.get(key, 0) + 1

    m_values = set(counts.values())
    if len(m_values) != 1:
        raise StageError(f"incomplete verdict matrix: repeat counts vary {sorted(m_values)}")
    m_repeats = m_values.pop()

    k_by_test: dict[str, set[int]] = {}
    for test_id, k_index in counts:
        k_by_test.setdefault(test_id, set()).add(k_index)
    k_sets = {frozenset(ks) for ks in k_by_test.values()}
    if len(k_sets) != 1:
        raise StageError("incomplete verdict matrix: k coverage varies across test ids")
    k_set = k_sets.pop()
    k = max(k_set)
    if k_set != set(range(1, k + 1)):
        raise StageError(f"k indexes must cover 1..{k} with no gaps")

    n = len(counts)
    keys = sorted(counts)
    metrics: dict[str, MetricSummary] = {}
    for name in METRICS:
        per_response = {f"{t}#{ki}": sums[(t, ki)][name] / m_repeats for t, ki in keys}
        grand = sum(sums[key][name] for key in keys)
        coverage: dict[float, float] = {}
        for zeta in zeta_list:
            if float(zeta).is_integer():
                covered = sum(1 for key in keys
                              if sums[key][name] >= m_repeats * int(zeta))
            else:
                covered = sum(1 for key in keys
                              if sums[key][name] / m_repeats >= zeta)
            coverage[_num(zeta)] = covered / n
        metrics[name] = MetricSummary(mean_score=grand / (n * m_repeats),
                                      per_response=per_response,
                                      coverage=coverage)
    return EvalSummary(judge_model=judge_model, m_repeats=m_repeats, k=k,
                       zeta_list=tuple(_num(z) for z in zeta_list),
                       n_responses=n, metrics=metrics)


def write_verdicts(path: str | Path, verdicts: list[JudgeVerdict]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for v in sorted(verdicts, key=lambda v: (v.test_id, v.k_index, v.m)):
            fh.write(json.dumps(v.to_record(), sort_keys=True) + "\n")
    tmp.replace(path)


def read_verdicts(path: str | Path) -> list[JudgeVerdict]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(JudgeVerdict.from_record(json.loads(line)))
    return out
