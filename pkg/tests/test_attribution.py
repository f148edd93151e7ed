import numpy as np
import pytest

from toolrefusal import tensorio
from toolrefusal.adapter import Edge, InterventionPlan
from toolrefusal.adapter.render import SpanMap
from toolrefusal.attribution import (
    CISMatrix,
    GroupImportance,
    PathwaySet,
    SampleImportance,
    aggregate_spans,
    cis,
    cis_from_groups,
    default_k,
    exact_importances,
    extract_pathways,
    group_patch_sweep,
    normalize,
    span_table,
)

SPANS = SpanMap((("a", 0, 1), ("b", 1, 3), ("c", 3, 4)))


def hand_table(v: np.ndarray) -> np.ndarray:
    bounds = [(0, 1), (1, 3), (3, 4)]
    out = np.zeros(v.shape[:2] + (3, 3))
    for i, (ti, tj) in enumerate(bounds):
        for j, (si, sj) in enumerate(bounds):
            out[:, :, i, j] = v[:, :, ti:tj, si:sj].sum((-1, -2))
    return out


@pytest.fixture()
def three():
    rng = np.random.default_rng(0)
    return [SampleImportance(f"s{k}", "m_sem", rng.normal(size=(2, 2, 4, 4)), SPANS) for k in range(3)]


def test_aggregation_matches_hand_sums(three):
    g = aggregate_spans(three)
    want = np.mean([hand_table(s.values) for s in three], axis=0)
    np.testing.assert_allclose(g.values, want, atol=1e-12)
    assert g.span_names == ("a", "b", "c") and g.sample_count == 3


def test_single_token_span_is_the_raw_cell(three):
    v = three[0].values
    np.testing.assert_array_equal(span_table(v, SPANS)[:, :, 0, 2], v[:, :, 0, 3])


def test_aggregation_is_linear(three):
    a, b = three[0].values, three[1].values
    np.testing.assert_allclose(span_table(2 * a - b, SPANS), 2 * span_table(a, SPANS) - span_table(b, SPANS), atol=1e-12)


def test_aggregation_ignores_sample_order(three):
    assert np.array_equal(aggregate_spans(three).values, aggregate_spans(three[::-1]).values)


def test_mismatched_schema_rejected(three):
    other = SampleImportance("x", "m_sem", three[0].values, SpanMap((("a", 0, 2), ("b", 2, 4))))
    with pytest.raises(ValueError):
        aggregate_spans(three + [other])
    with pytest.raises(ValueError):
        span_table(np.zeros((1, 1, 5, 5)), SPANS)


def test_normalize():
    z, flag = normalize(np.array([[-1.0, 2.0], [4.0, 1.0]]))
    assert not flag and z.max() == 1.0 and z.min() == 0.0
    np.testing.assert_allclose(z, [[0, 0.5], [1, 0.25]])
    z, flag = normalize(-np.ones((2, 2)))
    assert flag and not z.any()


def group(values, ids=("x",)):
    return GroupImportance("m_sem", values, ("a", "b", "c"), tuple(ids))


def test_cis_algebra():
    rng = np.random.default_rng(1)
    d, ds = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 2, 3, 3))
    assert not cis_from_groups(group(d), group(d)).values.any()
    np.testing.assert_array_equal(cis_from_groups(group(d), group(ds)).values,
                                  -cis_from_groups(group(ds), group(d)).values)
    planted = np.full((2, 2, 3, 3), 0.1)
    planted[1, 0, 2, 1] = 5.0
    star = np.zeros((2, 2, 3, 3))
    star[0, 0, 0, 0] = 3.0
    m = cis_from_groups(group(planted), group(star))
    assert np.unravel_index(m.values.argmax(), m.values.shape) == (1, 0, 2, 1)
    assert m.values.max() == 1.0
    assert m.values[0, 0, 0, 0] == pytest.approx(0.02 - 1)
    assert m.provenance == {"D": ["x"], "D_star": ["x"]}


def test_cis_flags_degenerate_group():
    m = cis_from_groups(group(-np.ones((1, 1, 3, 3))), group(np.ones((1, 1, 3, 3))))
    assert m.degenerate == (True, False)
    assert np.all(m.values == -1)


def test_cis_on_tiny(tiny, small_corpus):
    prompts = [tiny.render(s) for s in small_corpus.samples[:4]]
    m = cis("m_sem", prompts[:2], prompts[2:], tiny)
    assert m.values.shape == (tiny.n_layers, tiny.n_heads, len(m.span_names), len(m.span_names))
    assert np.all(m.values <= 1) and np.all(m.values >= -1)
    assert not cis("m_sem", prompts[:2], prompts[:2], tiny).values.any()
    with pytest.raises(ValueError, match=r"\|D\*\|=0"):
        cis("m_sem", prompts, [], tiny)


def matrix(values, names=("a", "b")):
    return CISMatrix("m_sem", np.asarray(values, dtype=float), names)


def test_extract_pathways_order_and_ties():
    v = np.zeros((2, 2, 2, 2))
    v[1, 1, 0, 0] = 0.9
    v[1, 0, 1, 1] = 0.5
    v[0, 1, 0, 1] = 0.5
    p = extract_pathways(matrix(v), k=3)
    assert [(e.layer, e.head, e.target_span, e.source_span) for e in p.edges] == [
        (1, 1, "a", "a"), (0, 1, "a", "b"), (1, 0, "b", "b")]
    one = extract_pathways(matrix(v), k=1, kind="structural")
    assert one.k == 1 and one.edges[0].score == 0.9 and one.kind == "structural"


def test_extract_pathways_all_tied_picks_smallest_index():
    p = extract_pathways(matrix(np.ones((2, 2, 2, 2))), k=2)
    assert [(e.layer, e.head, e.target_span, e.source_span) for e in p.edges] == [(0, 0, "a", "a"), (0, 0, "a", "b")]


def test_extract_pathways_independent_of_memory_layout():
    rng = np.random.default_rng(4)
    v = np.round(rng.normal(size=(3, 4, 2, 2)), 1)
    fortran = np.asfortranarray(v)
    assert extract_pathways(matrix(v), k=7).edges == extract_pathways(matrix(fortran), k=7).edges


def test_extract_pathways_bounds():
    with pytest.raises(ValueError):
        extract_pathways(matrix(np.zeros((1, 1, 2, 2))), k=5)
    with pytest.raises(ValueError):
        extract_pathways(matrix(np.zeros((1, 1, 2, 2))), k=0)
    with pytest.raises(ValueError):
        extract_pathways(matrix(np.zeros((1, 1, 2, 2))), k=1, kind="other")


def test_default_k():
    assert default_k(36 * 32) == 23
    assert default_k(8) == 1
    assert default_k(75) == 2  # 1.5 rounds up


def test_pathway_json_roundtrip(tmp_path):
    p = extract_pathways(matrix(np.arange(16.0).reshape(1, 2, 2, 4)[..., :2]), k=3)
    p.save(tmp_path / "p.json")
    assert PathwaySet.load(tmp_path / "p.json") == p
    bad = p.to_json() | {"k": 4}
    with pytest.raises(ValueError):
        PathwaySet.from_json(bad)


def test_exact_importance_is_zero_where_attention_already_zero(tiny, small_corpus):
    prompt = tiny.render(small_corpus.samples[0])
    T = len(prompt)
    masked = np.array([[0, 0, 0, T - 1]])  # above the diagonal, alpha is 0
    assert exact_importances(prompt, "m_sem", tiny, masked)[0] == 0.0


@pytest.fixture(scope="module")
def patch_setup(tiny, small_corpus):
    prompts = [tiny.render(s) for s in small_corpus.samples[:3]]
    names = prompts[0].span_map.names
    rng = np.random.default_rng(2)
    m = CISMatrix("m_sem", rng.normal(size=(tiny.n_layers, tiny.n_heads, len(names), len(names))), names)
    return prompts, extract_pathways(m, k=12)


def test_group_patch_matches_direct_ablation(tiny, patch_setup):
    prompts, cand = patch_setup
    rows = group_patch_sweep(cand, prompts, tiny, n_groups=3, pool=12)
    assert [r["ranks"] for r in rows] == [[0, 3], [4, 7], [8, 11]]
    for r in rows:
        edges = cand.edges[r["ranks"][0]:r["ranks"][1] + 1]
        # scaling by a vanishing factor approaches the ablation through the ordinary path
        plan = InterventionPlan(tuple(Edge(e.layer, e.head, e.target_span, e.source_span, 1e-300) for e in edges))
        want = np.mean([tiny.metric(p, "m_sem", plan) - tiny.metric(p, "m_sem") for p in prompts])
        assert r["delta_m_sem"] == pytest.approx(want, abs=1e-10)
        assert r["delta_m_str"] == -r["delta_m_sem"]


def test_group_patch_empty_group_has_no_effect(tiny, patch_setup):
    prompts, cand = patch_setup
    rows = group_patch_sweep(cand, prompts, tiny, n_groups=14, pool=12)
    assert rows[-1]["ranks"] == [] and rows[-1]["delta_m_sem"] == 0.0
    with pytest.raises(ValueError):
        group_patch_sweep(cand, prompts, tiny, pool=13)
    with pytest.raises(ValueError):
        group_patch_sweep(cand, [], tiny, n_groups=3, pool=12)


def test_tensor_container_roundtrip(tmp_path):
    t = tensorio.NamedTensor(np.random.default_rng(0).normal(size=(2, 3)), ("layer", "head"), {"metric": "m_sem"})
    digest = tensorio.save(tmp_path / "t.trt", t)
    back = tensorio.load(tmp_path / "t.trt")
    assert np.array_equal(back.values, t.values) and back.dims == t.dims and back.meta == t.meta
    assert digest == tensorio.save(tmp_path / "u.trt", back)
    with pytest.raises(ValueError):
        tensorio.decode(b"nonsense" * 3)
    with pytest.raises(ValueError):
        tensorio.NamedTensor(np.zeros(3), ("a", "b"))
