"""Pathway rebalancing: amplify semantic edges, damp structural ones, and pick
the coefficients on a validation set."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .adapter.base import InterventionError, InterventionPlan, ModelAdapter
from .attribution import PathwaySet
from .metrics import DecisionRecord, evaluate, tir_from_records
from .toolset.types import Sample

logger = logging.getLogger(__name__)

RHO_SEM_GRID = (1.1, 1.2, 1.3, 1.4, 1.5)
RHO_STR_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)
MIN_RELATIVE_REDUCTION = 0.6
MAX_NOCALL_INCREASE = 0.03
RELAXED_NOCALL_INCREASE = 0.06
# objectives closer than this count as tied
TIE_EPS = 1e-12


@dataclass
class RebalancePlan:
    semantic: PathwaySet
    structural: PathwaySet
    rho_sem: float = 1.0
    rho_str: float = 1.0

    def __post_init__(self):
        if self.semantic.span_names != self.structural.span_names:
            raise InterventionError("semantic and structural pathways come from different span schemas")
        for rho in (self.rho_sem, self.rho_str):
            if not (math.isfinite(rho) and rho > 0):
                raise InterventionError(f"coefficient must be finite and positive, got {rho}")

    def to_intervention_plan(self) -> InterventionPlan:
        # shared edges appear twice and their factors multiply
        return self.semantic.to_plan(self.rho_sem) + self.structural.to_plan(self.rho_str)

    def with_coefficients(self, rho_sem: float, rho_str: float) -> "RebalancePlan":
        return RebalancePlan(self.semantic, self.structural, rho_sem, rho_str)

    def to_json(self) -> dict:
        return {"rho_sem": self.rho_sem, "rho_str": self.rho_str,
                "semantic": self.semantic.to_json(), "structural": self.structural.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "RebalancePlan":
        return cls(PathwaySet.from_json(d["semantic"]), PathwaySet.from_json(d["structural"]),
                   float(d["rho_sem"]), float(d["rho_str"]))

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", "utf-8")

    @classmethod
    def load(cls, path: Path) -> "RebalancePlan":
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))


def check_resolvable(plan: InterventionPlan, adapter: ModelAdapter, condition: str = "base") -> None:
    """Reject edges naming spans the profile does not render or heads the model lacks."""
    names = set(adapter.profile.span_names)
    if condition == "prompt_baseline":
        from .adapter.render import BASELINE_SPAN

        names.add(BASELINE_SPAN)
    bad = [e for e in plan.edges
           if e.target_span not in names or e.source_span not in names
           or not (0 <= e.layer < adapter.n_layers and 0 <= e.head < adapter.n_heads)]
    if bad:
        raise InterventionError("unresolvable edges: " + ", ".join(map(str, bad)))


def apply_rebalance(adapter: ModelAdapter, plan: RebalancePlan) -> ModelAdapter:
    """A new handle that applies the plan on every forward; ``adapter`` is untouched."""
    ip = plan.to_intervention_plan()
    check_resolvable(ip, adapter)
    return adapter.with_plan(ip)


# -- coefficient sweep ---------------------------------------------------------

@dataclass
class SweepPoint:
    kind: str
    rho: float
    tir: float
    n: int


def coefficient_sweep(
    adapter: ModelAdapter,
    pathways: Sequence[PathwaySet],
    rho_values: Sequence[float],
    eval_set: Sequence[Sample],
) -> tuple[list[SweepPoint], dict[tuple[str, float], list[DecisionRecord]]]:
    """TIR on a fixed set while scaling one pathway kind at a time."""
    if not eval_set:
        raise ValueError("coefficient sweep needs a nonempty evaluation set")
    for rho in rho_values:
        if not (math.isfinite(rho) and rho > 0):
            raise ValueError(f"rho must be finite and positive, got {rho}")
    points, records = [], {}
    for ps in pathways:
        for rho in rho_values:
            plan = ps.to_plan(rho)
            check_resolvable(plan, adapter)
            recs = evaluate(eval_set, adapter.with_plan(plan))
            res = tir_from_records(recs)
            points.append(SweepPoint(ps.kind, float(rho), res.rate, res.n))
            records[(ps.kind, float(rho))] = recs
    return points, records


def curve_from_records(records: dict[tuple[str, float], list[DecisionRecord]]) -> list[SweepPoint]:
    return [SweepPoint(kind, rho, tir_from_records(recs).rate, len(recs)) for (kind, rho), recs in records.items()]


# -- grid search ---------------------------------------------------------------

@dataclass
class Candidate:
    rho_sem: float
    rho_str: float
    tir_original: float
    semcf_nocall_rate: float
    feasible: bool = False
    feasible_relaxed: bool = False

    @property
    def objective(self) -> float:
        return self.tir_original + self.semcf_nocall_rate


@dataclass
class GridSearchReport:
    rho_sem_grid: tuple[float, ...]
    rho_str_grid: tuple[float, ...]
    base_tir_original: float
    base_semcf_nocall_rate: float
    candidates: list[Candidate]
    selected: tuple[float, float] | None
    relaxed: bool
    thresholds: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "rho_sem_grid": list(self.rho_sem_grid),
            "rho_str_grid": list(self.rho_str_grid),
            "base_tir_original": self.base_tir_original,
            "base_semcf_nocall_rate": self.base_semcf_nocall_rate,
            "candidates": [asdict(c) | {"objective": c.objective} for c in self.candidates],
            "selected": list(self.selected) if self.selected else None,
            "relaxed": self.relaxed,
            "thresholds": self.thresholds,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GridSearchReport":
        cands = [Candidate(c["rho_sem"], c["rho_str"], c["tir_original"], c["semcf_nocall_rate"],
                           c["feasible"], c["feasible_relaxed"]) for c in d["candidates"]]
        sel = tuple(d["selected"]) if d["selected"] else None
        return cls(tuple(d["rho_sem_grid"]), tuple(d["rho_str_grid"]), d["base_tir_original"],
                   d["base_semcf_nocall_rate"], cands, sel, d["relaxed"], d.get("thresholds", {}))


def select_coefficients(
    table: dict[tuple[float, float], tuple[float, float]],
    base_tir_original: float,
    base_semcf_nocall_rate: float,
    min_reduction: float = MIN_RELATIVE_REDUCTION,
    max_increase: float = MAX_NOCALL_INCREASE,
    relaxed_increase: float = RELAXED_NOCALL_INCREASE,
) -> tuple[list[Candidate], tuple[float, float] | None, bool]:
    """Pick a coefficient pair from a table of (tir_original, semcf_nocall_rate).

    Feasible pairs cut TIR on originals by at least ``min_reduction`` relative
    and raise the non-invocation rate on semantic counterfactuals by at most
    ``max_increase``. If none qualify, the increase cap is relaxed. Among
    feasible pairs the smallest objective wins, then the smaller rho_sem,
    then the larger rho_str.
    """
    tir_cap = (1.0 - min_reduction) * base_tir_original
    cands = []
    for (rs, rt), (t, nc) in sorted(table.items()):
        rise = nc - base_semcf_nocall_rate
        cut = t <= tir_cap + TIE_EPS
        cands.append(Candidate(rs, rt, t, nc, cut and rise <= max_increase + TIE_EPS,
                               cut and rise <= relaxed_increase + TIE_EPS))
    relaxed = False
    pool = [c for c in cands if c.feasible]
    if not pool:
        pool = [c for c in cands if c.feasible_relaxed]
        relaxed = bool(pool)
    if not pool:
        return cands, None, False
    best = min(c.objective for c in pool)
    tied = [c for c in pool if c.objective <= best + TIE_EPS]
    pick = min(tied, key=lambda c: (c.rho_sem, -c.rho_str))
    return cands, (pick.rho_sem, pick.rho_str), relaxed


def grid_search(
    adapter: ModelAdapter,
    pathways: RebalancePlan,
    originals: Sequence[Sample],
    semantic_cfs: Sequence[Sample],
    rho_sem_grid: Sequence[float] = RHO_SEM_GRID,
    rho_str_grid: Sequence[float] = RHO_STR_GRID,
) -> GridSearchReport:
    """Evaluate every (rho_sem, rho_str) pair on a validation split and select one."""
    if not originals or not semantic_cfs:
        raise ValueError("grid search needs original samples and their semantic counterfactuals")

    def rates(handle: ModelAdapter) -> tuple[float, float]:
        return (tir_from_records(evaluate(originals, handle)).rate,
                1.0 - tir_from_records(evaluate(semantic_cfs, handle)).rate)

    base_t, base_nc = rates(adapter)
    table = {}
    for rs in rho_sem_grid:
        for rt in rho_str_grid:
            table[(float(rs), float(rt))] = rates(apply_rebalance(adapter, pathways.with_coefficients(rs, rt)))
    cands, selected, relaxed = select_coefficients(table, base_t, base_nc)
    if relaxed:
        logger.warning("no coefficient pair met the %.0f%% cap; selected under the relaxed %.0f%% cap",
                       100 * MAX_NOCALL_INCREASE, 100 * RELAXED_NOCALL_INCREASE)
    if selected is None:
        logger.warning("no feasible coefficient pair, even after relaxation")
    return GridSearchReport(
        tuple(map(float, rho_sem_grid)), tuple(map(float, rho_str_grid)), base_t, base_nc, cands, selected, relaxed,
        {"min_relative_reduction": MIN_RELATIVE_REDUCTION, "max_nocall_increase": MAX_NOCALL_INCREASE,
         "relaxed_nocall_increase": RELAXED_NOCALL_INCREASE},
    )


def replay_selection(report: GridSearchReport) -> tuple[tuple[float, float] | None, bool]:
    """Re-derive the selection from the stored per-candidate table."""
    table = {(c.rho_sem, c.rho_str): (c.tir_original, c.semcf_nocall_rate) for c in report.candidates}
    th = report.thresholds or {}
    _, sel, relaxed = select_coefficients(
        table, report.base_tir_original, report.base_semcf_nocall_rate,
        th.get("min_relative_reduction", MIN_RELATIVE_REDUCTION),
        th.get("max_nocall_increase", MAX_NOCALL_INCREASE),
        th.get("relaxed_nocall_increase", RELAXED_NOCALL_INCREASE),
    )
    return sel, relaxed
