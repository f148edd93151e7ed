import csv

import numpy as np
import pytest

from toolrefusal import metrics
from toolrefusal.adapter import load_profile
from toolrefusal.metrics import DecisionRecord, classify, partition_from_records, shift_proportion, tir_from_records
from toolrefusal.toolset import make_semantic_counterfactual, make_structural_counterfactual

PROFILE = load_profile("tiny")  # tool token 1, refusal tokens 2 and 3


def logits_with(top: int, size: int = 64) -> np.ndarray:
    x = np.zeros(size)
    x[top] = 5.0
    return x


def rec(sid, decision, p_tool=0.5):
    return DecisionRecord(sid, 0, p_tool, 0.1, decision, 0.0)


@pytest.mark.parametrize("top,decision", [(1, "call"), (2, "nocall"), (3, "nocall"), (40, "other")])
def test_classify(top, decision):
    r = classify("s", logits_with(top), PROFILE)
    assert r.decision == decision
    assert r.argmax_token == top


def test_classify_metric_is_log_ratio():
    x = np.log(np.array([0.1, 0.2, 0.3, 0.15, 0.25]))
    r = classify("s", x, PROFILE.__class__.from_json({**PROFILE.to_json(), "tokenizer": {"kind": "regex", "vocab_size": 5}}))
    assert r.m_sem == pytest.approx(np.log(0.3) - np.log(0.2))
    assert r.p_tool == pytest.approx(0.2)
    assert r.p_refusal_max == pytest.approx(0.3)


def test_tir_counts_other_in_denominator():
    res = tir_from_records([rec("a", "call"), rec("b", "nocall"), rec("c", "other"), rec("d", "call")])
    assert res.rate == 0.5 and res.n == 4
    assert res.counts == {"call": 2, "nocall": 1, "other": 1}
    with pytest.raises(ValueError):
        tir_from_records([])


def test_partition_keeps_only_flips():
    originals = {"a": rec("a", "nocall"), "b": rec("b", "call"), "c": rec("c", "other"),
                 "d": rec("d", "nocall"), "e": rec("e", "call")}
    semantic = {"a": rec("a|sem", "call"), "d": rec("d|sem", "nocall")}
    structural = {"b": rec("b|str", "nocall")}
    part = partition_from_records(originals, semantic, structural)
    assert part.nocall == [("a", "a|sem")]
    assert part.call == [("b", "b|str")]
    assert part.excluded_other == 1 and part.unswapped == 1 and part.unpaired == ["e"]
    assert metrics.GroupPartition.from_json(part.to_json()) == part


def test_shift_proportion_threshold_is_strict():
    pairs = [(rec("a", "call", 1.0), rec("a'", "call", 0.95)), (rec("b", "call", 1.0), rec("b'", "call", 0.5))]
    assert shift_proportion(pairs) == 0.5


def test_tir_on_tiny(tiny, small_corpus):
    res = metrics.tir(small_corpus.samples, tiny)
    assert 0 <= res.rate <= 1 and res.n == len(small_corpus.samples)
    again = metrics.tir(small_corpus.samples, tiny)
    assert [r.to_json() for r in res.records] == [r.to_json() for r in again.records]
    s = small_corpus.samples[0]
    assert metrics.m_str(s, tiny) == -metrics.m_sem(s, tiny)


def test_partition_groups_on_tiny(tiny, small_corpus):
    samples = small_corpus.samples[:60]
    pool = [p for t in small_corpus.templates for p in t.extension_pool]
    sem = [make_semantic_counterfactual(s, small_corpus.instances) for s in samples]
    struct = [make_structural_counterfactual(s, "substitute", 1, pool) for s in samples]
    part, recs = metrics.partition_groups(samples, sem, struct, tiny)
    for o, c in part.nocall:
        assert recs[o].decision == "nocall" and recs[c].decision == "call"
    for o, c in part.call:
        assert recs[o].decision == "call" and recs[c].decision == "nocall"


def test_records_and_tir_table_roundtrip(tmp_path):
    rs = [rec("a", "call"), rec("b", "nocall")]
    metrics.write_records(tmp_path / "r.jsonl", rs)
    assert metrics.read_records(tmp_path / "r.jsonl") == rs
    table = tmp_path / "tir.csv"
    metrics.upsert_tir_rows(table, [{"model": "m", "corpus": "D0", "condition": "base", "tir": "0.5", "n": 2}])
    metrics.upsert_tir_rows(table, [{"model": "m", "corpus": "D0", "condition": "base", "tir": "0.25", "n": 4},
                                    {"model": "m", "corpus": "D1", "condition": "base", "tir": "0.1", "n": 10}])
    rows = list(csv.DictReader(open(table)))
    assert [r["corpus"] for r in rows] == ["D0", "D1"] and rows[0]["tir"] == "0.25"
    assert list(rows[0]) == list(metrics.TIR_COLUMNS)
