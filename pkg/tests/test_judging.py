from __future__ import annotations

import json
import random
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relaytune.errors import StageError
from relaytune.gateway import Gateway, MockProvider, RetryPolicy, ScriptedOutcomes
from relaytune.judging import (
    EvalSummary,
    JudgeTemplate,
    JudgeVerdict,
    VerdictError,
    aggregate,
    builtin_judge_template,
    evaluate,
    parse_verdict,
    read_verdicts,
    render_judge_prompt,
    write_verdicts,
)
from relaytune.mocks import constant_judge_responder
from relaytune.rollout import GenerationRecord

from conftest import make_pair

GOLDEN_DIR = Path(__file__).parent / "goldens"


def _verdict_text(p, s):
    return json.dumps({"precision_assessment": {"score": p, "reasoning": "r"},
                       "similarity_assessment": {"score": s, "reasoning": "r"}})


# --- prompt rendering ---------------------------------------------------------

def test_minimal_template_renders_all_three():
    tpl = JudgeTemplate(name="t", body="$instruction|$lm_response|$human_response")
    assert render_judge_prompt("a", "b", "c", tpl) == "a|b|c"


def test_no_reexpansion_of_user_text():
    tpl = JudgeTemplate(name="t", body="$instruction|$lm_response|$human_response")
    out = render_judge_prompt("a", "b", "literal $lm_response here", tpl)
    assert out == "a|b|literal $lm_response here"


def test_template_placeholder_validation():
    with pytest.raises(StageError, match="human_response"):
        JudgeTemplate(name="t", body="$instruction $lm_response")


def test_empty_text_rejected():
    tpl = builtin_judge_template()
    with pytest.raises(StageError):
        render_judge_prompt("", "b", "c", tpl)


def test_default_render_matches_golden():
    tpl = builtin_judge_template()
    out = render_judge_prompt("What is two plus two?", "It is four.",
                              "Four.", tpl)
    golden = (GOLDEN_DIR / "judge_render.txt").read_text("utf-8")
    assert out == golden


# --- verdict parsing ----------------------------------------------------------

def test_parse_plain_verdict():
    assert parse_verdict(_verdict_text(87, 78)) == (87, 78)


def test_parse_out_of_range_rejected():
    with pytest.raises(VerdictError, match="outside"):
        parse_verdict(_verdict_text(150, 50))
    with pytest.raises(VerdictError):
        parse_verdict(_verdict_text(-1, 50))


def test_parse_with_surrounding_prose():
    text = ("Sure! Here is my assessment.\n\nSome notes first {not json}\n"
            + _verdict_text(66, 44) + "\nHope that helps!")
    assert parse_verdict(text) == (66, 44)


def test_parse_first_wellformed_object_wins():
    text = _verdict_text(10, 20) + " " + _verdict_text(90, 90)
    assert parse_verdict(text) == (10, 20)


def test_parse_rejects_non_integer_scores():
    bad = json.dumps({"precision_assessment": {"score": "87"},
                      "similarity_assessment": {"score": 78}})
    with pytest.raises(VerdictError):
        parse_verdict(bad)
    with pytest.raises(VerdictError):
        parse_verdict("no json at all")


# --- evaluate -----------------------------------------------------------------

def _records(n_tests, k):
    return [GenerationRecord(test_id=f"p{i:04d}", k_index=ki,
                             response=f"resp {i} {ki}", model="m", decoding={})
            for i in range(n_tests) for ki in range(1, k + 1)]


def _judge_gateway(responder):
    provider = MockProvider(seed=0)
    provider.add_rule(r"impartial judge", responder)
    gw = Gateway(retry=RetryPolicy(max_attempts=3, sleep=lambda s: None))
    gw.register("mock-judge", provider)
    return gw, provider


def test_evaluate_counts_100_records_m10():
    gw, provider = _judge_gateway(constant_judge_responder(80, 60))
    test_view = [make_pair(i, origin="coverage_test") for i in range(25)]
    records = _records(25, 4)
    verdicts = evaluate(records, test_view, "mock-judge", 10, gateway=gw)
    assert len(verdicts) == 1000
    assert len(provider.calls) == 1000
    assert all(v.precision_score == 80 and v.similarity_score == 60 for v in verdicts)


def test_evaluate_single():
    gw, provider = _judge_gateway(constant_judge_responder(50, 50))
    verdicts = evaluate(_records(1, 1), [make_pair(0, origin="coverage_test")],
                        "mock-judge", 1, gateway=gw)
    assert len(verdicts) == 1 and len(provider.calls) == 1


def test_evaluate_reasks_on_malformed_then_succeeds():
    gw, provider = _judge_gateway(ScriptedOutcomes(
        ["gibberish with no verdict", _verdict_text(70, 70)]))
    verdicts = evaluate(_records(1, 1), [make_pair(0, origin="coverage_test")],
                        "mock-judge", 1, gateway=gw)
    assert verdicts[0].precision_score == 70
    assert len(provider.calls) == 2


def test_evaluate_fails_after_reask_budget():
    gw, _ = _judge_gateway(ScriptedOutcomes(["junk"]))
    with pytest.raises(StageError, match="no usable verdict"):
        evaluate(_records(1, 1), [make_pair(0, origin="coverage_test")],
                 "mock-judge", 1, gateway=gw, reask_budget=3)


def test_evaluate_requires_known_test_ids():
    gw, _ = _judge_gateway(constant_judge_responder(1, 1))
    with pytest.raises(StageError, match="no test pair"):
        evaluate(_records(2, 1), [make_pair(0, origin="coverage_test")],
                 "mock-judge", 1, gateway=gw)


# --- aggregation ---------------------------------------------------------------

def _verdicts_from_matrix(scores):
    """scores[(test_id, k)] = list of (precision, similarity) per repeat."""
    out = []
    for (t, k), reps in scores.items():
        for m, (p, s) in enumerate(reps, start=1):
            out.append(JudgeVerdict(test_id=t, k_index=k, m=m,
                                    precision_score=p, similarity_score=s))
    return out


def brute_force_summary(verdicts, zeta_list):
    """Independent recomputation: raw sums, no shared code path."""
    cells = {}
    for v in verdicts:
        cells.setdefault((v.test_id, v.k_index), []).append(v)
    out = {}
    for metric in ("precision", "similarity"):
        means = {}
        for key in sorted(cells):
            scores = [getattr(v, f"{metric}_score") for v in cells[key]]
            means[key] = sum(scores) / len(scores)
        total = sum(getattr(v, f"{metric}_score") for v in verdicts)
        grand_mean = total / len(verdicts)
        coverage = {}
        for zeta in zeta_list:
            hit = sum(1 for key in cells
                      if sum(getattr(v, f"{metric}_score") for v in cells[key])
                      >= len(cells[key]) * zeta)
            coverage[zeta] = hit / len(cells)
        out[metric] = (grand_mean, means, coverage)
    return out


def test_aggregate_forced_arithmetic():
    # Four single-repeat responses scoring 80/60/40/100: V=70, C(70)=0.50.
    scores = {("t1", 1): [(80, 80)], ("t1", 2): [(60, 60)],
              ("t2", 1): [(40, 40)], ("t2", 2): [(100, 100)]}
    summary = aggregate(_verdicts_from_matrix(scores), (70,))
    assert summary.metrics["precision"].mean_score == 70.0
    assert summary.metrics["precision"].coverage[70] == 0.5


def test_aggregate_single_record_two_repeats():
    scores = {("t1", 1): [(50, 50), (70, 70)]}
    summary = aggregate(_verdicts_from_matrix(scores), (50, 70))
    ms = summary.metrics["precision"]
    assert ms.per_response["t1#1"] == 60.0
    assert ms.coverage[50] == 1.0
    assert ms.coverage[70] == 0.0


def test_boundary_mean_exactly_zeta_counts_covered():
    scores = {("t1", 1): [(70, 70)], ("t1", 2): [(69, 69)]}
    summary = aggregate(_verdicts_from_matrix(scores), (70,))
    assert summary.metrics["precision"].coverage[70] == 0.5


def test_aggregate_matches_brute_force_on_random_fixture():
    rng = random.Random(1234)
    scores = {(f"p{i:04d}", k): [(rng.randint(0, 100), rng.randint(0, 100))
                                 for _ in range(10)]
              for i in range(25) for k in range(1, 5)}
    verdicts = _verdicts_from_matrix(scores)
    rng.shuffle(verdicts)  # permutation invariance, while we are at it
    summary = aggregate(verdicts, (50, 70))
    oracle = brute_force_summary(verdicts, (50, 70))
    for metric in ("precision", "similarity"):
        grand, means, coverage = oracle[metric]
        ms = summary.metrics[metric]
        assert ms.mean_score == grand
        assert ms.coverage[50] == coverage[50]
        assert ms.coverage[70] == coverage[70]
        for (t, k), mean in means.items():
            assert ms.per_response[f"{t}#{k}"] == mean
    assert summary.n_responses == 100
    assert summary.m_repeats == 10 and summary.k == 4


def test_aggregate_rejects_incomplete_matrix():
    scores = {("t1", 1): [(50, 50), (60, 60)], ("t1", 2): [(50, 50)]}
    with pytest.raises(StageError, match="repeat counts vary"):
        aggregate(_verdicts_from_matrix(scores), (50,))
    gap = {("t1", 1): [(50, 50)], ("t1", 3): [(50, 50)]}
    with pytest.raises(StageError, match="no gaps"):
        aggregate(_verdicts_from_matrix(gap), (50,))
    with pytest.raises(StageError, match="duplicate"):
        aggregate([JudgeVerdict("t", 1, 1, 5, 5), JudgeVerdict("t", 1, 1, 6, 6)], (50,))


@given(st.lists(st.integers(min_value=0, max_value=100), min_size=1, max_size=40),
       st.integers(min_value=0, max_value=100), st.integers(min_value=0, max_value=100))
@settings(max_examples=80, deadline=None)
def test_zeta_monotonicity_and_bounds(score_list, z1, z2):
    scores = {(f"t{i}", 1): [(s, s)] for i, s in enumerate(score_list)}
    lo, hi = sorted((z1, z2))
    summary = aggregate(_verdicts_from_matrix(scores), (lo, hi, 0))
    ms = summary.metrics["precision"]
    assert 0.0 <= ms.mean_score <= 100.0
    assert ms.coverage[lo] >= ms.coverage[hi]
    assert ms.coverage[0] == 1.0
    for c in ms.coverage.values():
        assert 0.0 <= c <= 1.0


def test_summary_roundtrip_and_verdict_file(tmp_path):
    scores = {("t1", 1): [(80, 70)], ("t1", 2): [(90, 85)]}
    verdicts = _verdicts_from_matrix(scores)
    write_verdicts(tmp_path / "verdicts", verdicts)
    again = read_verdicts(tmp_path / "verdicts")
    assert {(v.test_id, v.k_index, v.m) for v in again} == \
           {(v.test_id, v.k_index, v.m) for v in verdicts}
    summary = aggregate(verdicts, (50, 70))
    restored = EvalSummary.from_dict(summary.to_dict())
    assert restored.to_dict() == summary.to_dict()
