import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toolrefusal.harness.generation import RecordingBackend, ReplayBackend, StubBackend, TranscriptMiss
from toolrefusal.toolset import (
    CompatRelation,
    ToolsetError,
    build_corpus,
    check_structural_alignment,
    extend_to_degree,
    flatten_tool,
    generate_queries,
    instantiate_all,
    make_semantic_counterfactual,
    make_structural_counterfactual,
    propose_extension_params,
    sample_alignment,
    split_by_template,
    write_corpus,
)
from toolrefusal.toolset.queries import GenerationFailure


def brute_force_alignment(m, n, pairs):
    if m != n:
        return 0
    return int(any(all((i, p[i]) in pairs for i in range(m)) for p in itertools.permutations(range(n))))


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 6), st.integers(0, 6), st.data())
def test_alignment_matches_permutation_search(m, n, data):
    cells = [(i, j) for i in range(m) for j in range(n)]
    pairs = frozenset(data.draw(st.sets(st.sampled_from(cells))) if cells else set())
    got = check_structural_alignment(range(m), range(n), CompatRelation(pairs))
    assert got == brute_force_alignment(m, n, pairs)


def test_empty_against_empty_is_aligned():
    assert check_structural_alignment([], [], CompatRelation()) == 1


def test_out_of_range_pair_rejected():
    with pytest.raises(ToolsetError):
        check_structural_alignment([0], [0], CompatRelation({(0, 3)}))


def test_siblings_share_interface(small_templates):
    for t in small_templates:
        insts = instantiate_all(t)
        assert len({i.param_names for i in insts}) == 1
        assert len({i.derived_class for i in insts}) == len(insts)


def test_sibling_samples_aligned_and_mismatched(small_corpus):
    for s in small_corpus.samples:
        origin = small_corpus.instances[s.query.origin_instance_id]
        assert s.alignment_label == 1 == sample_alignment(s)
        assert origin.derived_class != s.tool.derived_class
        assert origin.template_id == s.tool.template_id


def test_extension_adds_one_parameter_per_degree(small_templates):
    for t in small_templates:
        sizes = [len(extend_to_degree(t, k).parameters) for k in range(5)]
        assert sizes == list(range(sizes[0], sizes[0] + 5))


@pytest.mark.parametrize("strategy", ["substitute", "remove", "add"])
def test_structural_counterfactual_breaks_alignment(small_corpus, strategy):
    pool = [p for t in small_corpus.templates for p in t.extension_pool]
    s = small_corpus.samples[0]
    cf = make_structural_counterfactual(s, strategy, 1, pool)
    assert cf.alignment_label == 0 == sample_alignment(cf)
    assert cf.query == s.query
    assert cf.lineage.parent_id == s.sample_id


def test_remove_more_than_available_rejected(small_corpus):
    s = small_corpus.samples[0]
    with pytest.raises(ToolsetError):
        make_structural_counterfactual(s, "remove", len(s.tool.parameters) + 1, [])


def test_semantic_counterfactual_uses_origin_tool(small_corpus):
    s = small_corpus.samples[0]
    cf = make_semantic_counterfactual(s, small_corpus.instances)
    assert cf.tool.instance_id == s.query.origin_instance_id
    assert cf.alignment_label == 1
    assert make_semantic_counterfactual(cf, small_corpus.instances) is cf


def test_flattening_moves_parameters_into_description(small_corpus):
    s = small_corpus.samples[0]
    flat = flatten_tool(s, 1)
    moved = s.tool.param_names[-1]
    assert moved not in flat.tool.param_names
    value = next(a.text for a in s.query.attributes if a.target_param == moved)
    assert value in flat.tool.description
    assert flat.alignment_label == 1
    assert flatten_tool(s, 0) is s


def test_split_is_template_disjoint(small_corpus):
    parts = split_by_template(small_corpus.samples, seed=3)
    ids = [{s.template_id for s in p} for p in parts]
    assert all(a.isdisjoint(b) for a, b in itertools.combinations(ids, 2))
    assert sum(len(p) for p in parts) == len(small_corpus.samples)
    assert [len(p) for p in parts] == [len(p) for p in split_by_template(small_corpus.samples, seed=3)]


def test_corpus_rebuild_is_deterministic(tmp_path, small_templates):
    a = build_corpus(small_templates, StubBackend(), seed=5)
    b = build_corpus(small_templates, StubBackend(), seed=5)
    write_corpus(tmp_path / "a", a)
    write_corpus(tmp_path / "b", b)
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_malformed_response_retried_then_recovered(small_corpus):
    tool = next(iter(small_corpus.instances.values()))
    backend = StubBackend(malformed_attempts=1)
    qs, report = generate_queries(tool, backend, n=5)
    assert len(qs) == 5 and report.attempts == 2
    assert any("malformed" in r for r in report.rejections)


def test_exhausted_budget_reports_shortfall(small_corpus):
    tool = next(iter(small_corpus.instances.values()))
    qs, report = generate_queries(tool, StubBackend(malformed_attempts=9), n=5, budget=3)
    assert qs == [] and not report.complete and report.attempts == 3


def test_invalid_queries_rejected_with_reason(small_corpus):
    tool = next(iter(small_corpus.instances.values()))
    qs, report = generate_queries(tool, StubBackend(drop_param_attempts=1), n=5)
    assert len(qs) == 5
    assert any("no attribute for parameters" in r for r in report.rejections)


def test_extension_needs_four_parameters(small_templates):
    params = propose_extension_params(small_templates[0], StubBackend())
    assert len(params) >= 4

    class Short:
        def complete(self, request):
            return json.dumps({"only_one": {"type": "string", "description": "x"}})

    with pytest.raises(GenerationFailure):
        propose_extension_params(small_templates[0], Short())


def test_replay_reproduces_recorded_answers(tmp_path, small_templates):
    log = tmp_path / "t.jsonl"
    a = build_corpus(small_templates[:2], RecordingBackend(StubBackend(), log), seed=1)
    b = build_corpus(small_templates[:2], ReplayBackend(log), seed=1)
    assert [s.to_json() for s in a.samples] == [s.to_json() for s in b.samples]
    with pytest.raises(TranscriptMiss):
        build_corpus(small_templates[2:3], ReplayBackend(log), seed=1)


def test_random_pairs_rarely_aligned(d0):
    from toolrefusal.toolset.corpus import random_pair_corpus

    pairs = random_pair_corpus(d0, 0)
    labels = np.array([s.alignment_label for s in pairs])
    assert len(pairs) == len(d0.queries)
    assert all(s.tool.template_id != d0.instances[s.query.origin_instance_id].template_id for s in pairs)
    assert labels.mean() < 0.05
