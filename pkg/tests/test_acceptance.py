"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line."""

import itertools
import os
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import ACCEPTANCE_LINES
from toolrefusal.adapter import InterventionPlan
from toolrefusal.attribution import (
    CISMatrix,
    aggregate_spans,
    causal_sites,
    cis_from_groups,
    exact_importances,
    extract_pathways,
    normalize,
    sample_importance_approx,
)
from toolrefusal.harness.generation import StubBackend
from toolrefusal.intervention import RebalancePlan, apply_rebalance, select_coefficients
from toolrefusal.toolset import (
    CompatRelation,
    build_corpus,
    bundled_templates,
    check_structural_alignment,
    make_semantic_counterfactual,
    make_structural_counterfactual,
    sample_alignment,
)


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def live_sites(adapter, T: int) -> np.ndarray:
    """Causal cells that can reach the final position's output."""
    sites = causal_sites(adapter.n_layers, adapter.n_heads, T)
    return sites[~((sites[:, 0] == adapter.n_layers - 1) & (sites[:, 2] != T - 1))]


def test_attribution_fidelity(tiny, d0):
    start = time.perf_counter()
    prompt = tiny.render(d0.samples[0])
    approx = sample_importance_approx(prompt, "m_sem", tiny).values
    sites = causal_sites(tiny.n_layers, tiny.n_heads, len(prompt))
    exact = exact_importances(prompt, "m_sem", tiny, sites)
    approx_at = approx[tuple(sites.T)]
    top = np.argsort(-np.abs(exact), kind="stable")[: max(1, len(sites) // 100)]
    rho = spearmanr(approx_at[top], exact[top]).statistic
    pick = np.random.default_rng(0).choice(len(sites), 500, replace=False)
    median_err = float(np.median(np.abs(approx_at[pick] - exact[pick])))
    # most causal cells sit in last-layer rows that cannot reach the output; report live cells too
    live = live_sites(tiny, len(prompt))
    live_pick = live[np.random.default_rng(0).choice(len(live), 500, replace=False)]
    live_err = float(np.median(np.abs(approx[tuple(live_pick.T)] - exact_importances(prompt, "m_sem", tiny, live_pick))))
    elapsed = time.perf_counter() - start
    verdict(1, "attribution fidelity", rho >= 0.8 and elapsed < 60,
            f"spearman={rho:.3f} over top {len(top)} of {len(sites)} sites (>= 0.8), "
            f"median |approx-exact| over 500 sites={median_err:.3e} "
            f"(500 live sites: {live_err:.3e}), runtime={elapsed:.1f}s (< 60s)")


def scaling_errors(tiny, d0, n_sites=200):
    prompt = tiny.render(d0.samples[0])
    g = tiny.metric_gradients(prompt, "m_sem")
    base = g.value
    sites = live_sites(tiny, len(prompt))
    sites = sites[np.sort(np.random.default_rng(0).choice(len(sites), n_sites, replace=False))]
    linear = (g.alpha * g.grad)[tuple(sites.T)]
    errs, deltas = {}, {}
    for eps in (0.1, 0.01):
        # alpha <- (1 - eps) alpha; the first-order prediction of m(alpha) - m(edited) is eps * alpha * grad
        deltas[eps] = base - tiny.site_metrics(prompt, "m_sem", sites, 1.0 - eps, "scale")
        errs[eps] = np.abs(deltas[eps] - eps * linear)
    return errs, deltas


def test_first_order_scaling_law(tiny, d0):
    errs, _ = scaling_errors(tiny, d0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = errs[0.1] / errs[0.01]
    inside = np.mean((ratio >= 5) & (ratio <= 20))
    verdict(2, "first-order scaling law", inside >= 0.9,
            f"{100 * inside:.1f}% of 200 sites shrink by a factor in [5, 20] (need >= 90%); "
            f"median factor={np.nanmedian(ratio):.1f}")


def test_scaling_error_is_quadratic_where_resolvable(tiny, d0):
    # an O(eps^2) remainder shrinks ~100x; below ~1e-13 the remainder is float noise
    errs, deltas = scaling_errors(tiny, d0)
    resolvable = errs[0.01] > 1e-13
    ratio = errs[0.1][resolvable] / errs[0.01][resolvable]
    assert resolvable.sum() >= 40
    assert np.mean((ratio >= 50) & (ratio <= 200)) >= 0.9
    # relative to the size of the effect itself the error is O(eps), i.e. ~10x
    e1, e2 = errs[0.1][resolvable], errs[0.01][resolvable]
    rel = (e1 / np.abs(deltas[0.1][resolvable])) / (e2 / np.abs(deltas[0.01][resolvable]))
    assert np.mean((rel >= 5) & (rel <= 20)) >= 0.9


def test_gradient_correctness(tiny, d0):
    prompt = tiny.render(d0.samples[1])
    g = tiny.metric_gradients(prompt, "m_sem")
    sites = causal_sites(tiny.n_layers, tiny.n_heads, len(prompt))
    sites = sites[np.random.default_rng(1).choice(len(sites), 1000, replace=False)]
    h = 1e-4
    fd = (tiny.site_metrics(prompt, "m_sem", sites, h, "add") - tiny.site_metrics(prompt, "m_sem", sites, -h, "add")) / (2 * h)
    err = np.abs(fd - g.grad[tuple(sites.T)])
    share = np.mean(err <= 1e-4)
    verdict(3, "gradient correctness", share >= 0.99,
            f"{100 * share:.1f}% of 1000 sites within 1e-4 (need >= 99%), max error {err.max():.1e}")


def test_intervention_noop(tiny, d0):
    rng = np.random.default_rng(2)
    samples = [d0.samples[i] for i in sorted(rng.choice(len(d0.samples), 100, replace=False))]
    names = tiny.profile.span_names
    m = CISMatrix("m_sem", rng.normal(size=(tiny.n_layers, tiny.n_heads, len(names), len(names))), names)
    plan = RebalancePlan(extract_pathways(m, 4), extract_pathways(CISMatrix("m_str", -m.values, names), 4, "structural"))
    unit = apply_rebalance(tiny, plan)
    empty = tiny.with_plan(InterventionPlan(()))
    worst = 0.0
    for s in samples:
        p = tiny.render(s)
        base = tiny.next_token_distribution(p)
        worst = max(worst, np.abs(unit.next_token_distribution(p) - base).max(),
                    np.abs(empty.next_token_distribution(p) - base).max())
    verdict(4, "intervention no-op", worst <= 1e-6, f"max deviation {worst:.1e} over 100 prompts (<= 1e-6)")


def exhaustive_alignment(m, n, pairs):
    if m != n:
        return 0
    return int(any(all((i, p[i]) in pairs for i in range(m)) for p in itertools.permutations(range(n))))


def test_bijection_oracle():
    rng = np.random.default_rng(3)
    disagreements, positives = 0, 0
    for _ in range(1000):
        m = int(rng.integers(0, 8))
        n = m if rng.random() < 0.7 else int(rng.integers(0, 8))
        density = rng.uniform(0.1, 0.9)
        pairs = frozenset((i, j) for i in range(m) for j in range(n) if rng.random() < density)
        want = exhaustive_alignment(m, n, pairs)
        positives += want
        disagreements += check_structural_alignment(range(m), range(n), CompatRelation(pairs)) != want
    verdict(5, "bijection oracle", disagreements == 0,
            f"{disagreements} disagreements over 1000 instances up to 7x7 ({positives} aligned)")


def test_dataset_invariants():
    start = time.perf_counter()
    templates = bundled_templates()
    d0 = build_corpus(templates, StubBackend(), seed=0)
    problems = []
    if len(d0.samples) != 5050:
        problems.append(f"D0 has {len(d0.samples)} samples")
    for s in d0.samples:
        origin = d0.instances[s.query.origin_instance_id]
        if s.alignment_label != 1 or sample_alignment(s) != 1 or origin.derived_class == s.tool.derived_class:
            problems.append(f"sibling sample {s.sample_id}")
    corpora = [d0] + [build_corpus(templates, StubBackend(), seed=0, degree=k, pairs=d0.pairs) for k in range(1, 5)]
    for lo, hi in itertools.pairwise(corpora):
        sizes = {t.template_id: len(t.parameters) for t in lo.templates}
        for t in hi.templates:
            if len(t.parameters) != sizes[t.template_id] + 1:
                problems.append(f"{t.template_id} D{lo.degree}->D{hi.degree}")
    pool = [p for t in templates for p in t.extension_pool]
    n_struct = 0
    for s in d0.samples:
        for strategy in ("substitute", "remove", "add"):
            cf = make_structural_counterfactual(s, strategy, 1, pool)
            n_struct += 1
            if cf.alignment_label != 0 or sample_alignment(cf) != 0:
                problems.append(f"structural {strategy} {s.sample_id}")
    elapsed = time.perf_counter() - start
    verdict(6, "dataset invariants", not problems and elapsed < 30,
            f"{len(d0.samples)} samples, D0..D4 degree steps, {n_struct} structural counterfactuals; "
            f"{len(problems)} violations; {elapsed:.1f}s (< 30s)")


def test_cis_algebra(tiny, d0):
    rng = np.random.default_rng(4)
    samples = [d0.samples[i] for i in sorted(rng.choice(len(d0.samples), 8, replace=False))]
    sem = [make_semantic_counterfactual(s, d0.instances) for s in samples]
    pool = [p for t in d0.templates for p in t.extension_pool]
    struct = [make_structural_counterfactual(s, "substitute", 1, pool) for s in samples]
    failures = []
    for metric, star in (("m_sem", sem), ("m_str", struct)):
        g = aggregate_spans([sample_importance_approx(tiny.render(s), metric, tiny) for s in samples])
        gs = aggregate_spans([sample_importance_approx(tiny.render(s), metric, tiny) for s in star])
        forward, backward, self_ = cis_from_groups(g, gs), cis_from_groups(gs, g), cis_from_groups(g, g)
        for m in (forward, backward, self_):
            if not (np.all(m.values >= -1) and np.all(m.values <= 1)):
                failures.append(f"{metric} out of range")
        if self_.values.any():
            failures.append(f"{metric} CIS(D,D) nonzero")
        if not np.array_equal(forward.values, -backward.values):
            failures.append(f"{metric} not antisymmetric")
        for group in (g, gs):
            z, degenerate = normalize(group.values)
            if not degenerate and z.max() != 1.0:
                failures.append(f"{metric} Z max {z.max()}")
    verdict(7, "CIS algebra", not failures, "; ".join(failures) or "range, CIS(D,D)=0, antisymmetry, max Z=1 hold")


GRID = (1.1, 1.2, 1.3, 1.4, 1.5), (0.5, 0.6, 0.7, 0.8, 0.9)


def as_table(tir, nocall):
    return {(rs, rt): (float(tir[a, b]), float(nocall[a, b]))
            for a, rs in enumerate(GRID[0]) for b, rt in enumerate(GRID[1])}


def test_grid_search_determinism():
    base_tir, base_nc = 0.5, 0.1
    # unique feasible pair: only (1.4, 0.7) cuts TIR to <= 0.2 within +3 points of non-invocation
    t1, n1 = np.full((5, 5), 0.4), np.full((5, 5), 0.11)
    t1[3, 2] = 0.15
    t1[4, 0], n1[4, 0] = 0.05, 0.2
    # relaxation: the only TIR-cutting pairs cost 5 and 8 points; the 5-point one is admissible at 6%
    t2, n2 = np.full((5, 5), 0.45), np.full((5, 5), 0.1)
    t2[2, 3], n2[2, 3] = 0.18, 0.15
    t2[4, 4], n2[4, 4] = 0.1, 0.18
    # ties: four pairs share the best objective 0.3; smaller rho_sem, then larger rho_str wins
    t3, n3 = np.full((5, 5), 0.45), np.full((5, 5), 0.12)
    for cell in [(1, 0), (1, 3), (3, 4), (2, 1)]:
        t3[cell], n3[cell] = 0.2, 0.1
    t3[0, 0], n3[0, 0] = 0.19, 0.12  # feasible but worse objective 0.31
    cases = [(as_table(t1, n1), ((1.4, 0.7), False)),
             (as_table(t2, n2), ((1.3, 0.8), True)),
             (as_table(t3, n3), ((1.2, 0.8), False))]
    got = [select_coefficients(table, base_tir, base_nc)[1:] for table, _ in cases]
    want = [w for _, w in cases]
    verdict(8, "grid-search determinism", got == want, f"selections {got}, expected {want}")


QWEN3 = os.environ.get("TOOLREFUSAL_QWEN3_PATH")


@pytest.mark.skipif(not QWEN3, reason="set TOOLREFUSAL_QWEN3_PATH to a local Qwen3-8B checkpoint")
def test_hardware_gated_reproduction(tmp_path):
    import csv

    from toolrefusal.harness import pipeline
    from toolrefusal.harness.config import from_dict

    cfg = from_dict({"seed": 0, "output_dir": str(tmp_path / "run"),
                     "model": {"kind": "hf", "path": QWEN3, "profile": "qwen3"},
                     "eval_corpora": ["D0"]})
    run = pipeline.Run(cfg)
    for stage in (pipeline.generate, pipeline.extend, pipeline.counterfactual, pipeline.split):
        stage(run)
    for corpus in ("D0", "random", "D1", "D1/structural-substitute1"):
        pipeline.eval_tir(run, corpus)
    for stage in (pipeline.attribute, pipeline.pathways, pipeline.grid_search):
        stage(run)
    pipeline.rebalance_eval(run)
    tir = {(r["corpus"], r["condition"]): float(r["tir"]) for r in csv.DictReader(open(run.out / "tir.csv"))}
    base, rand = tir[("D0", "base")], tir[("random", "base")]
    rebal = tir[("D0", "rebalanced")]
    drop = 1 - tir[("D1/structural-substitute1", "base")] / tir[("D1", "base")]
    ok = abs(base - 0.3426) <= 0.03 and rand < 0.01 and rebal <= 0.10 and drop >= 0.40
    verdict(9, "hardware-gated reproduction", ok,
            f"D0 TIR={base:.4f} (0.3426 +/- 0.03), random={rand:.4f} (< 0.01), rebalanced={rebal:.4f} (<= 0.10), "
            f"substitution drop={100 * drop:.1f}% (>= 40%)")


def test_replay_determinism(tmp_path, small_templates):
    import json

    import yaml

    from toolrefusal.harness.cli import main
    from toolrefusal.harness.manifest import tree_digests

    (tmp_path / "templates.json").write_text(json.dumps([t.to_json() for t in small_templates[:4]]))
    common = {"seed": 11, "attribution": {"group_size": 5}}
    first = common | {"output_dir": "first", "corpus": {"templates": "templates.json", "max_degree": 2}}
    second = common | {"output_dir": "second", "corpus": {"templates": "templates.json", "max_degree": 2,
                                                          "backend": "replay", "transcript": "first/transcripts"}}
    for name, cfg in (("first", first), ("second", second)):
        (tmp_path / f"{name}.yaml").write_text(yaml.safe_dump(cfg))
        for stage in ("generate", "extend", "counterfactual", "split", "attribute"):
            assert main([stage, "--config", str(tmp_path / f"{name}.yaml")]) == 0
    corpus_match = all(tree_digests(tmp_path / "first" / d) == tree_digests(tmp_path / "second" / d)
                       for d in ("corpus", "counterfactuals", "splits"))
    before = tree_digests(tmp_path / "first" / "attribution")
    assert main(["attribute", "--config", str(tmp_path / "first.yaml"), "--from-persisted"]) == 0
    attribution_match = tree_digests(tmp_path / "first" / "attribution") == before
    verdict(10, "replay determinism", corpus_match and attribution_match,
            f"corpus from transcripts {'matches' if corpus_match else 'differs'}, "
            f"attribution from persisted tensors {'matches' if attribution_match else 'differs'}")
