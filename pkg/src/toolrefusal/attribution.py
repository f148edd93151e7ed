"""Contrastive attention attribution.

Per-sample importance of every attention weight (first-order estimate or exact
ablation), span-level aggregation, max-normalization, contrastive scores
between a dataset and its counterfactuals, and top-k pathway extraction.
"""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adapter.base import Edge, InterventionPlan, ModelAdapter
from .adapter.render import RenderedPrompt, SpanMap

PATHWAY_KINDS = ("semantic", "structural")
HEAD_FRACTION = 0.02


@dataclass
class SampleImportance:
    sample_id: str
    metric: str
    values: np.ndarray  # (layer, head, target, source)
    span_map: SpanMap


@dataclass
class GroupImportance:
    metric: str
    values: np.ndarray  # (layer, head, target span, source span)
    span_names: tuple[str, ...]
    sample_ids: tuple[str, ...] = ()

    @property
    def sample_count(self) -> int:
        return len(self.sample_ids)


@dataclass
class CISMatrix:
    metric: str
    values: np.ndarray
    span_names: tuple[str, ...]
    provenance: dict[str, list[str]] = field(default_factory=dict)
    degenerate: tuple[bool, bool] = (False, False)


def sample_importance_approx(prompt: RenderedPrompt, metric: str, adapter: ModelAdapter) -> SampleImportance:
    """alpha * dm/dalpha at every site, from one forward and one backward pass."""
    g = adapter.metric_gradients(prompt, metric)
    return SampleImportance(prompt.sample_id, metric, g.alpha * g.grad, prompt.span_map)


def exact_importances(prompt: RenderedPrompt, metric: str, adapter: ModelAdapter, sites) -> np.ndarray:
    """m(x) - m(x | alpha_site = 0), one ablated forward per site."""
    base = adapter.metric(prompt, metric)
    return base - adapter.site_metrics(prompt, metric, sites, 0.0, "set")


def sample_importance_exact(prompt: RenderedPrompt, metric: str, adapter: ModelAdapter, site) -> float:
    return float(exact_importances(prompt, metric, adapter, np.asarray([site]))[0])


def causal_sites(n_layers: int, n_heads: int, T: int) -> np.ndarray:
    """All (layer, head, i, j) with j <= i."""
    i, j = np.tril_indices(T)
    lh = np.array([(l, h) for l in range(n_layers) for h in range(n_heads)])
    return np.concatenate(
        [np.repeat(lh, len(i), axis=0), np.tile(np.stack([i, j], 1), (len(lh), 1))], axis=1
    )


def span_table(values: np.ndarray, span_map: SpanMap) -> np.ndarray:
    """Sum a (L, H, T, T) tensor into (L, H, S, S) blocks."""
    if values.shape[-1] != span_map.length:
        raise ValueError(f"tensor length {values.shape[-1]} does not match span map length {span_map.length}")
    P = span_map.membership()
    return np.einsum("lhab,ai,bj->lhij", values, P, P)


def mean_tables(tables: Sequence[np.ndarray], sample_ids: Sequence[str]) -> np.ndarray:
    """Average in sorted sample-id order so the float result does not depend on input order."""
    order = sorted(range(len(sample_ids)), key=lambda k: sample_ids[k])
    total = np.zeros_like(tables[order[0]])
    for k in order:
        total = total + tables[k]
    return total / len(order)


def aggregate_spans(importances: Sequence[SampleImportance]) -> GroupImportance:
    if not importances:
        raise ValueError("nothing to aggregate")
    names = importances[0].span_map.names
    metric = importances[0].metric
    for imp in importances:
        if imp.span_map.names != names:
            raise ValueError(f"{imp.sample_id}: span schema {imp.span_map.names} differs from {names}")
        if imp.metric != metric:
            raise ValueError(f"{imp.sample_id}: mixed metrics {imp.metric} and {metric}")
    tables = [span_table(imp.values, imp.span_map) for imp in importances]
    ids = [imp.sample_id for imp in importances]
    return GroupImportance(metric, mean_tables(tables, ids), names, tuple(sorted(ids)))


def normalize(values: np.ndarray) -> tuple[np.ndarray, bool]:
    """Clamp at zero and divide by the signed global maximum.

    When that maximum is not positive the table is all zeros and flagged.
    """
    top = values.max()
    if top <= 0:
        return np.zeros_like(values), True
    return np.maximum(values, 0.0) / top, False


def cis_from_groups(group: GroupImportance, star: GroupImportance) -> CISMatrix:
    if group.span_names != star.span_names:
        raise ValueError("groups use different span schemas")
    if group.values.shape != star.values.shape:
        raise ValueError(f"group shapes differ: {group.values.shape} vs {star.values.shape}")
    z, dz = normalize(group.values)
    zs, dzs = normalize(star.values)
    return CISMatrix(
        metric=group.metric,
        values=z - zs,
        span_names=group.span_names,
        provenance={"D": list(group.sample_ids), "D_star": list(star.sample_ids)},
        degenerate=(dz, dzs),
    )


def group_importance(prompts: Sequence[RenderedPrompt], metric: str, adapter: ModelAdapter) -> GroupImportance:
    return aggregate_spans([sample_importance_approx(p, metric, adapter) for p in prompts])


def cis(metric: str, D: Sequence[RenderedPrompt], D_star: Sequence[RenderedPrompt], adapter: ModelAdapter) -> CISMatrix:
    if not D or not D_star:
        raise ValueError(f"contrastive groups must be nonempty (|D|={len(D)}, |D*|={len(D_star)})")
    return cis_from_groups(group_importance(D, metric, adapter), group_importance(D_star, metric, adapter))


# -- pathways ----------------------------------------------------------------

def default_k(total_heads: int, fraction: float = HEAD_FRACTION) -> int:
    """Nearest integer to ``fraction`` of the head count (at least 1)."""
    return max(1, math.floor(fraction * total_heads + 0.5))


@dataclass(frozen=True)
class PathwayEdge:
    layer: int
    head: int
    target_span: str
    source_span: str
    score: float


@dataclass
class PathwaySet:
    kind: str
    edges: list[PathwayEdge]
    span_names: tuple[str, ...]

    @property
    def k(self) -> int:
        return len(self.edges)

    def top(self, k: int) -> "PathwaySet":
        return PathwaySet(self.kind, self.edges[:k], self.span_names)

    def to_plan(self, rho: float) -> InterventionPlan:
        return InterventionPlan(tuple(Edge(e.layer, e.head, e.target_span, e.source_span, rho) for e in self.edges))

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "k": self.k,
            "span_names": list(self.span_names),
            "edges": [asdict(e) for e in self.edges],
        }

    @classmethod
    def from_json(cls, d: dict) -> "PathwaySet":
        edges = [PathwayEdge(int(e["layer"]), int(e["head"]), e["target_span"], e["source_span"], float(e["score"]))
                 for e in d["edges"]]
        if len(edges) != d.get("k", len(edges)):
            raise ValueError("pathway file k does not match its edge count")
        return cls(d["kind"], edges, tuple(d["span_names"]))

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", "utf-8")

    @classmethod
    def load(cls, path: Path) -> "PathwaySet":
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))


def extract_pathways(matrix: CISMatrix, k: int | None = None, kind: str = "semantic") -> PathwaySet:
    """Top-k cells by score; ties go to the smaller (layer, head, target, source)."""
    if kind not in PATHWAY_KINDS:
        raise ValueError(f"unknown pathway kind {kind!r}")
    vals = matrix.values
    L, H, S, _ = vals.shape
    if k is None:
        k = default_k(L * H)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > vals.size:
        raise ValueError(f"k={k} exceeds the {vals.size} available cells")
    l, h, t, s = np.unravel_index(np.arange(vals.size), vals.shape)
    order = np.lexsort((s, t, h, l, -vals.ravel()))[:k]
    names = matrix.span_names
    edges = [PathwayEdge(int(l[c]), int(h[c]), names[t[c]], names[s[c]], float(vals.ravel()[c])) for c in order]
    return PathwaySet(kind, edges, names)


def group_patch_sweep(
    candidates: PathwaySet,
    prompts: Sequence[RenderedPrompt],
    adapter: ModelAdapter,
    n_groups: int = 10,
    pool: int = 100,
) -> list[dict]:
    """Zero-ablate consecutive rank groups of the candidate pool and record metric shifts.

    Returns one row per group with the mean change of m_sem and m_str
    relative to the unablated forward.
    """
    if candidates.k < pool:
        raise ValueError(f"need {pool} candidate cells, got {candidates.k}")
    if not prompts:
        raise ValueError("no prompts to patch")
    base = np.array([adapter.metric(p, "m_sem") for p in prompts])
    rows = []
    for g, idx in enumerate(np.array_split(np.arange(pool), n_groups)):
        cells = [candidates.edges[i] for i in idx]
        plan = InterventionPlan(tuple(Edge(e.layer, e.head, e.target_span, e.source_span) for e in cells))
        ablated = np.array([adapter.metric(p, "m_sem", plan, "zero") for p in prompts]) if cells else base
        delta = float(np.mean(ablated - base))
        rows.append({"group": g, "ranks": [int(idx[0]), int(idx[-1])] if len(idx) else [],
                     "delta_m_sem": delta, "delta_m_str": -delta})
    return rows
