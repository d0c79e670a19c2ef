from __future__ import annotations

import json
import stat
from pathlib import Path

import pytest

from relaytune.corpus import write_records
from relaytune.errors import MissingInputError, StageError
from relaytune.gateway import ContentError, Gateway, MockProvider, RetryPolicy, ScriptedOutcomes
from relaytune.rollout import (
    CommandInferenceBackend,
    DecodingParams,
    GatewayInferenceBackend,
    GenerationRecord,
    MockInferenceBackend,
    batch_infer,
    read_generations,
    validate_generation_records,
    write_generations,
)
from relaytune.tuning import ModelHandle

from conftest import make_pair


def _mock_model(tmp_path: Path, capability=55.0) -> ModelHandle:
    (tmp_path / "model").mkdir(parents=True, exist_ok=True)
    (tmp_path / "model" / "artifact.json").write_text(
        json.dumps({"capability": capability, "handle_id": "mock-x", "samples": 10}))
    return ModelHandle(handle_id="mock-x", base_model="mock-lm", cycle=0,
                       artifact_uri="model/artifact.json",
                       training_metrics={"final_loss": 0.2, "steps": 3})


def _test_pairs(n):
    return [make_pair(i, origin="coverage_test") for i in range(n)]


def test_cardinality_25_by_4(tmp_path):
    model = _mock_model(tmp_path)
    records = batch_infer(model, _test_pairs(25), 4, DecodingParams(),
                          MockInferenceBackend(seed=1), tmp_path)
    assert len(records) == 100
    per_test = {}
    for r in records:
        per_test.setdefault(r.test_id, set()).add(r.k_index)
    assert all(ks == {1, 2, 3, 4} for ks in per_test.values())


def test_single_record(tmp_path):
    model = _mock_model(tmp_path)
    records = batch_infer(model, _test_pairs(1), 1, DecodingParams(),
                          MockInferenceBackend(seed=1), tmp_path)
    assert len(records) == 1


def test_k_responses_pairwise_distinct(tmp_path):
    model = _mock_model(tmp_path)
    records = batch_infer(model, _test_pairs(3), 4, DecodingParams(),
                          MockInferenceBackend(seed=1), tmp_path)
    by_test = {}
    for r in records:
        by_test.setdefault(r.test_id, []).append(r.response)
    for responses in by_test.values():
        assert len(set(responses)) == 4


def test_reruns_identical(tmp_path):
    model = _mock_model(tmp_path)
    a = batch_infer(model, _test_pairs(5), 3, DecodingParams(),
                    MockInferenceBackend(seed=2), tmp_path)
    b = batch_infer(model, _test_pairs(5), 3, DecodingParams(),
                    MockInferenceBackend(seed=2), tmp_path)
    assert a == b


def test_capability_marker_embedded(tmp_path):
    model = _mock_model(tmp_path, capability=73.5)
    records = batch_infer(model, _test_pairs(1), 1, DecodingParams(),
                          MockInferenceBackend(), tmp_path)
    assert "capability=73.5" in records[0].response


def test_generations_roundtrip(tmp_path):
    model = _mock_model(tmp_path)
    records = batch_infer(model, _test_pairs(4), 2, DecodingParams(),
                          MockInferenceBackend(), tmp_path)
    path = tmp_path / "generations"
    write_generations(path, records)
    assert read_generations(path) == sorted(records, key=lambda r: (r.test_id, r.k_index))


def test_missing_generations_file(tmp_path):
    with pytest.raises(MissingInputError):
        read_generations(tmp_path / "nope")


def test_validation_catches_gaps():
    rec = GenerationRecord(test_id="a", k_index=1, response="x", model="m", decoding={})
    with pytest.raises(StageError, match="missing"):
        validate_generation_records([rec], ["a"], 2)
    dup = [rec, rec]
    with pytest.raises(StageError, match="duplicate"):
        validate_generation_records(dup, ["a"], 2)
    with pytest.raises(StageError, match="unexpected"):
        validate_generation_records([rec], ["b"], 1)


def test_gateway_backend_counts_and_order(tmp_path):
    provider = MockProvider(seed=0)
    gw = Gateway(retry=RetryPolicy(max_attempts=2, sleep=lambda s: None))
    gw.register("local-sim", provider)
    model = _mock_model(tmp_path)
    pairs = _test_pairs(6)
    records = batch_infer(model, pairs, 4, DecodingParams(),
                          GatewayInferenceBackend(gw, "local-sim"), tmp_path)
    assert len(records) == 24
    assert len(provider.calls) == 24


def test_gateway_backend_retries_failed_slots(tmp_path):
    provider = MockProvider(seed=0)
    # First ask for this prompt terminally fails, the re-ask succeeds.
    provider.add_rule(r"instruction number 1 ", ScriptedOutcomes(
        [ContentError("hiccup"), "recovered text"]))
    gw = Gateway(retry=RetryPolicy(max_attempts=1, sleep=lambda s: None))
    gw.register("local-sim", provider)
    model = _mock_model(tmp_path)
    records = batch_infer(model, _test_pairs(3), 2, DecodingParams(),
                          GatewayInferenceBackend(gw, "local-sim"), tmp_path)
    assert len(records) == 6


def test_gateway_backend_gives_up_after_rounds(tmp_path):
    provider = MockProvider(seed=0)
    provider.add_rule(r".", ScriptedOutcomes([ContentError("dead")]))
    gw = Gateway(retry=RetryPolicy(max_attempts=1, sleep=lambda s: None))
    gw.register("local-sim", provider)
    model = _mock_model(tmp_path)
    with pytest.raises(StageError, match="still empty"):
        batch_infer(model, _test_pairs(2), 2, DecodingParams(),
                    GatewayInferenceBackend(gw, "local-sim", retry_rounds=2), tmp_path)


def test_command_backend_roundtrip(tmp_path):
    model = _mock_model(tmp_path)
    pairs = _test_pairs(3)
    # A fake local-inference process: reads the manifest, emits k records per prompt.
    script = tmp_path / "inferbot.py"
    script.write_text("""#!/usr/bin/env python3
import json, sys
manifest = json.load(open(sys.argv[2]))
prompts = [json.loads(l) for l in open(manifest["prompts_ref"]) if l.strip()]
with open(manifest["output_ref"], "w") as out:
    for p in prompts:
        for ki in range(1, manifest["k"] + 1):
            rec = {"test_id": p["id"], "k_index": ki,
                   "response": f"gen {p['id']} {ki}",
                   "model": manifest["model"], "decoding": manifest["decoding"]}
            out.write(json.dumps(rec) + "\\n")
""")
    script.chmod(script.stat().st_mode | stat.S_IEXEC)
    backend = CommandInferenceBackend(["python3", str(script)])
    records = batch_infer(model, pairs, 2, DecodingParams(), backend,
                          tmp_path, workdir=tmp_path / "work")
    assert len(records) == 6
    assert records[0].response.startswith("gen ")


def test_k_must_be_positive(tmp_path):
    model = _mock_model(tmp_path)
    with pytest.raises(StageError):
        batch_infer(model, _test_pairs(1), 0, DecodingParams(),
                    MockInferenceBackend(), tmp_path)
