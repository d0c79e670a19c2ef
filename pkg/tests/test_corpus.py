from __future__ import annotations

import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relaytune.corpus import (
    CoverageDataset,
    InstructionPair,
    load_dataset,
    read_records,
    split,
    token_stats,
    write_records,
)
from relaytune.errors import DatasetFormatError

from conftest import make_pair


def test_load_roundtrip_preserves_order(dataset_file):
    pairs = [make_pair(i) for i in range(10)]
    path = dataset_file(pairs)
    ds = load_dataset(path, "other")
    assert [p.id for p in ds.pairs] == [p.id for p in pairs]


def test_write_read_write_is_byte_identical(tmp_path):
    pairs = [
        make_pair(0),
        make_pair(1, origin="synthetic", cycle=2, generator="gen-a",
                  seed_ids=("p0000",)),
        make_pair(2, instruction="unicode café ✓", response="ok then"),
    ]
    first = tmp_path / "a.jsonl"
    write_records(first, pairs)
    second = tmp_path / "b.jsonl"
    write_records(second, read_records(first))
    assert first.read_bytes() == second.read_bytes()


def test_record_fields_are_alphabetical(tmp_path):
    path = tmp_path / "one.jsonl"
    write_records(path, [make_pair(3, origin="synthetic", cycle=1, generator="g")])
    keys = list(json.loads(path.read_text()).keys())
    assert keys == sorted(keys)


def test_single_record_dataset(dataset_file):
    path = dataset_file([make_pair(0, instruction="hi", response="there")])
    assert len(load_dataset(path, "other")) == 1


def test_blank_response_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = json.dumps(make_pair(0).to_record())
    bad = json.dumps({**make_pair(1).to_record(), "response": "   "})
    path.write_text(good + "\n" + bad + "\n")
    with pytest.raises(DatasetFormatError, match=r":2"):
        load_dataset(path, "other")


def test_duplicate_ids_rejected(tmp_path):
    path = tmp_path / "dup.jsonl"
    rec = json.dumps(make_pair(0).to_record())
    path.write_text(rec + "\n" + rec + "\n")
    with pytest.raises(DatasetFormatError, match="duplicate id"):
        load_dataset(path, "other")


def test_empty_dataset_rejected(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(DatasetFormatError, match="empty"):
        load_dataset(path, "other")


def test_malformed_json_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(make_pair(0).to_record()) + "\n{not json\n")
    with pytest.raises(DatasetFormatError, match=r":2"):
        load_dataset(path, "other")


def test_invariants_on_pair_construction():
    with pytest.raises(DatasetFormatError):
        make_pair(0, origin="coverage_test", cycle=1)
    with pytest.raises(DatasetFormatError):
        make_pair(0, origin="synthetic", cycle=0)
    with pytest.raises(DatasetFormatError):
        InstructionPair(id="x", instruction="a", response="b", task="other",
                        origin="synthetic", cycle=1, generator_model=None)


def test_split_closed_qa_counts(dataset_file):
    # 260-record subset splits 245/15.
    pairs = [make_pair(i, task="closed_qa") for i in range(260)]
    ds = load_dataset(dataset_file(pairs), "closed_qa")
    train, test = split(ds, 245, shuffle_seed=11)
    assert (len(train), len(test)) == (245, 15)
    assert ds.train_count == 245 and ds.test_count == 15
    assert ds.split_ratio is not None and float(ds.split_ratio) == 245 / 260


def test_split_summarization_counts(dataset_file):
    pairs = [make_pair(i, task="summarization") for i in range(420)]
    ds = load_dataset(dataset_file(pairs), "summarization")
    train, test = split(ds, 395, shuffle_seed=0)
    assert (len(train), len(test)) == (395, 25)


def test_split_is_deterministic_and_disjoint(dataset_file):
    pairs = [make_pair(i) for i in range(50)]
    ds = CoverageDataset(pairs=list(pairs), task="other")
    t1, e1 = split(ds, 40, shuffle_seed=7)
    t2, e2 = split(CoverageDataset(pairs=list(pairs), task="other"), 40, shuffle_seed=7)
    assert [p.id for p in t1] == [p.id for p in t2]
    assert [p.id for p in e1] == [p.id for p in e2]
    assert not {p.id for p in t1} & {p.id for p in e1}
    t3, _ = split(CoverageDataset(pairs=list(pairs), task="other"), 40, shuffle_seed=8)
    assert [p.id for p in t3] != [p.id for p in t1]


def test_split_retags_origin():
    ds = CoverageDataset(pairs=[make_pair(i) for i in range(4)], task="other")
    train, test = split(ds, 2, shuffle_seed=1)
    assert all(p.origin == "coverage_train" for p in train)
    assert all(p.origin == "coverage_test" and p.cycle == 0 for p in test)


@given(n=st.integers(min_value=2, max_value=60), seed=st.integers(0, 2**32 - 1),
       data=st.data())
@settings(max_examples=60, deadline=None)
def test_split_partition_property(n, seed, data):
    train_count = data.draw(st.integers(min_value=1, max_value=n - 1))
    ds = CoverageDataset(pairs=[make_pair(i) for i in range(n)], task="other")
    train, test = split(ds, train_count, shuffle_seed=seed)
    ids = {p.id for p in ds.pairs}
    assert {p.id for p in train} | {p.id for p in test} == ids
    assert not {p.id for p in train} & {p.id for p in test}


def test_split_minimal_two_records():
    ds = CoverageDataset(pairs=[make_pair(0), make_pair(1)], task="other")
    train, test = split(ds, 1, shuffle_seed=3)
    assert len(train) == 1 and len(test) == 1
    assert train[0].id != test[0].id


def test_split_out_of_range():
    ds = CoverageDataset(pairs=[make_pair(i) for i in range(420)], task="other")
    with pytest.raises(DatasetFormatError):
        split(ds, 420, shuffle_seed=0)
    with pytest.raises(DatasetFormatError):
        split(ds, 0, shuffle_seed=0)


def _counts_pair(count: int, i: int) -> InstructionPair:
    # One instruction token, count-1 response tokens.
    return make_pair(i, instruction="q", response=" ".join(["a"] * (count - 1)))


def test_token_stats_constant():
    stats = token_stats([_counts_pair(3, i) for i in range(3)])
    assert (stats.min, stats.max, stats.mean, stats.std) == (3, 3, 3.0, 0.0)


def test_token_stats_population_std():
    # Counts [1, 3]: mean 2, population std sqrt(((1-2)^2 + (3-2)^2)/2) = 1.
    p0 = make_pair(0, instruction="q", response="a")
    p1 = make_pair(1, instruction="q", response="a a a")
    count_a = lambda text: text.split().count("a")
    stats = token_stats([p0, p1], counter=count_a)
    assert stats.mean == 2.0
    assert stats.std == 1.0


def test_token_stats_matches_single_pass_oracle():
    import random

    rng = random.Random(5)
    pairs = [_counts_pair(rng.randint(2, 40), i) for i in range(200)]
    stats = token_stats(pairs)
    counts = [len(p.instruction.split()) + len(p.response.split()) for p in pairs]
    mean = sum(counts) / len(counts)
    var = sum((c - mean) ** 2 for c in counts) / len(counts)
    assert stats.count == 200
    assert stats.min == min(counts) and stats.max == max(counts)
    assert stats.mean == pytest.approx(mean, abs=0)
    assert stats.std == pytest.approx(math.sqrt(var), rel=1e-12)
    assert stats.min <= stats.mean <= stats.max


def test_token_stats_pluggable_counter():
    pairs = [make_pair(0, instruction="aaa", response="bbbb")]
    by_chars = token_stats(pairs, counter=len)
    assert by_chars.mean == 7.0


def test_token_stats_empty_input():
    with pytest.raises(DatasetFormatError):
        token_stats([])
