"""Behavioural metrics: tool invocation rate, refusal/invocation log-odds,
contrastive group construction and probability-shift statistics."""

from __future__ import annotations

import csv
import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_softmax

from .adapter.base import ModelAdapter
from .adapter.profiles import ChatProfile
from .adapter.render import RenderedPrompt
from .toolset.types import Sample

logger = logging.getLogger(__name__)

DECISIONS = ("call", "nocall", "other")
TIR_COLUMNS = ("model", "corpus", "condition", "tir", "n")
# p_tool above this on an unverified profile triggers the hallucination warning
UNVERIFIED_WARN_P = 0.5


@dataclass(frozen=True)
class DecisionRecord:
    sample_id: str
    argmax_token: int
    p_tool: float
    p_refusal_max: float
    decision: str
    m_sem: float

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "DecisionRecord":
        return cls(d["sample_id"], int(d["argmax_token"]), float(d["p_tool"]),
                   float(d["p_refusal_max"]), d["decision"], float(d["m_sem"]))


def classify(sample_id: str, logits: np.ndarray, profile: ChatProfile) -> DecisionRecord:
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    refusal = np.asarray(profile.refusal_token_ids)
    top = int(np.argmax(logp))
    if top == profile.tool_call_token_id:
        decision = "call"
    elif top in profile.refusal_token_ids:
        decision = "nocall"
    else:
        decision = "other"
    lr = float(logp[refusal].max())
    lt = float(logp[profile.tool_call_token_id])
    return DecisionRecord(sample_id, top, float(np.exp(lt)), float(np.exp(lr)), decision, lr - lt)


def evaluate(samples: Sequence[Sample], adapter: ModelAdapter, condition: str = "base") -> list[DecisionRecord]:
    """One forward pass per sample; no generation."""
    records = []
    for s in samples:
        records.append(classify(s.sample_id, adapter.logits(adapter.render(s, condition)), adapter.profile))
    _warn_unverified(records, adapter.profile)
    return records


_warned: set[str] = set()


def _warn_unverified(records: Sequence[DecisionRecord], profile: ChatProfile) -> None:
    if profile.verified:
        return
    high = sum(r.p_tool > UNVERIFIED_WARN_P for r in records)
    if high:
        # once per profile at warning level; repeats go to debug
        level = logging.DEBUG if profile.profile_id in _warned else logging.WARNING
        _warned.add(profile.profile_id)
        logger.log(
            level,
            "profile %s is unverified: %d/%d samples put p_tool > %.2f, but tool-name hallucination "
            "has not been ruled out for this model",
            profile.profile_id, high, len(records), UNVERIFIED_WARN_P,
        )


@dataclass
class TirResult:
    rate: float
    n: int
    counts: dict[str, int]
    records: list[DecisionRecord] = field(repr=False, default_factory=list)


def tir_from_records(records: Sequence[DecisionRecord]) -> TirResult:
    if not records:
        raise ValueError("tool invocation rate needs a nonempty dataset")
    counts = {d: 0 for d in DECISIONS}
    for r in records:
        counts[r.decision] += 1
    return TirResult(counts["call"] / len(records), len(records), counts, list(records))


def tir(samples: Sequence[Sample], adapter: ModelAdapter, condition: str = "base") -> TirResult:
    if not samples:
        raise ValueError("tool invocation rate needs a nonempty dataset")
    return tir_from_records(evaluate(samples, adapter, condition))


def _prompt(x: Sample | RenderedPrompt, adapter: ModelAdapter) -> RenderedPrompt:
    return x if isinstance(x, RenderedPrompt) else adapter.render(x)


def m_sem(x: Sample | RenderedPrompt, adapter: ModelAdapter) -> float:
    """max over refusal tokens of log P(w|x), minus log P(w_tool|x)."""
    return adapter.metric(_prompt(x, adapter), "m_sem")


def m_str(x: Sample | RenderedPrompt, adapter: ModelAdapter) -> float:
    return -m_sem(x, adapter)


@dataclass
class GroupPartition:
    """Contrastive groups as (original id, counterfactual id) pairs."""

    nocall: list[tuple[str, str]]
    call: list[tuple[str, str]]
    excluded_other: int = 0
    unswapped: int = 0
    unpaired: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "nocall": [list(p) for p in self.nocall],
            "call": [list(p) for p in self.call],
            "excluded_other": self.excluded_other,
            "unswapped": self.unswapped,
            "unpaired": self.unpaired,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GroupPartition":
        return cls([tuple(p) for p in d["nocall"]], [tuple(p) for p in d["call"]],
                   d.get("excluded_other", 0), d.get("unswapped", 0), list(d.get("unpaired", [])))


def partition_from_records(
    originals: Mapping[str, DecisionRecord],
    semantic: Mapping[str, DecisionRecord],
    structural: Mapping[str, DecisionRecord],
) -> GroupPartition:
    """Keep samples whose decision flips under their counterfactual.

    ``semantic`` and ``structural`` are keyed by the original sample id.
    Refused originals need an invoked semantic counterfactual; invoked
    originals need a refused structural counterfactual.
    """
    out = GroupPartition([], [])
    for sid in sorted(originals):
        rec = originals[sid]
        if rec.decision == "other":
            out.excluded_other += 1
            continue
        partner = semantic if rec.decision == "nocall" else structural
        cf = partner.get(sid)
        if cf is None:
            out.unpaired.append(sid)
            continue
        if rec.decision == "nocall" and cf.decision == "call":
            out.nocall.append((sid, cf.sample_id))
        elif rec.decision == "call" and cf.decision == "nocall":
            out.call.append((sid, cf.sample_id))
        else:
            out.unswapped += 1
    if out.unpaired:
        logger.warning("%d samples lack the counterfactual needed for grouping", len(out.unpaired))
    return out


def by_parent(samples: Iterable[Sample]) -> dict[str, Sample]:
    out = {}
    for s in samples:
        if s.lineage is None:
            raise ValueError(f"{s.sample_id}: counterfactual without lineage")
        out[s.lineage.parent_id] = s
    return out


def partition_groups(
    originals: Sequence[Sample],
    semantic_cfs: Sequence[Sample],
    structural_cfs: Sequence[Sample],
    adapter: ModelAdapter,
) -> tuple[GroupPartition, dict[str, DecisionRecord]]:
    recs = {r.sample_id: r for r in evaluate(originals, adapter)}

    def run(cfs: Sequence[Sample], decision: str) -> dict[str, DecisionRecord]:
        cf_of = by_parent(cfs)
        parents = [k for k in sorted(cf_of) if k in recs and recs[k].decision == decision]
        return dict(zip(parents, evaluate([cf_of[k] for k in parents], adapter)))

    sem_recs, str_recs = run(semantic_cfs, "nocall"), run(structural_cfs, "call")
    everything = {**recs, **{r.sample_id: r for r in [*sem_recs.values(), *str_recs.values()]}}
    return partition_from_records(recs, sem_recs, str_recs), everything


def shift_proportion(pairs: Sequence[tuple[DecisionRecord, DecisionRecord]], rel_drop: float = 0.05) -> float:
    """Share of pairs where P(w_tool) under the counterfactual < (1 - rel_drop) x original."""
    if not pairs:
        raise ValueError("no paired records")
    hits = sum(cf.p_tool < (1.0 - rel_drop) * orig.p_tool for orig, cf in pairs)
    return hits / len(pairs)


def prob_shift_stats(
    originals: Sequence[Sample],
    counterfactuals: Sequence[Sample],
    adapter: ModelAdapter,
    rel_drop: float = 0.05,
) -> float:
    orig = {s.sample_id: s for s in originals}
    for cf in counterfactuals:
        if cf.lineage is None or cf.lineage.parent_id not in orig:
            raise ValueError(f"{cf.sample_id}: no original sample to pair with")
    cfs = sorted(counterfactuals, key=lambda s: s.sample_id)
    parents = [orig[cf.lineage.parent_id] for cf in cfs]
    return shift_proportion(list(zip(evaluate(parents, adapter), evaluate(cfs, adapter))), rel_drop)


@dataclass
class DegreeRates:
    corpus: str
    rate: float
    n: int
    per_template: dict[str, tuple[float, int]]


def rates_by_template(samples: Sequence[Sample], records: Sequence[DecisionRecord]) -> dict[str, tuple[float, int]]:
    groups: dict[str, list[int]] = {}
    for s, r in zip(samples, records):
        groups.setdefault(s.template_id, []).append(r.decision == "call")
    return {tid: (float(np.mean(v)), len(v)) for tid, v in sorted(groups.items())}


def tir_by_degree(corpora: Mapping[str, Sequence[Sample]], adapter: ModelAdapter, condition: str = "base") -> list[DegreeRates]:
    out = []
    for name, samples in corpora.items():
        res = tir(samples, adapter, condition)
        out.append(DegreeRates(name, res.rate, res.n, rates_by_template(samples, res.records)))
    return out


# -- persistence -------------------------------------------------------------

def write_records(path: Path, records: Iterable[DecisionRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    tmp.replace(path)


def read_records(path: Path) -> list[DecisionRecord]:
    with open(path, encoding="utf-8") as fh:
        return [DecisionRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def upsert_tir_rows(path: Path, rows: Iterable[dict]) -> list[dict]:
    """Merge rows into the TIR CSV keyed on (model, corpus, condition)."""
    path = Path(path)
    existing: dict[tuple, dict] = {}
    if path.exists():
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                existing[(row["model"], row["corpus"], row["condition"])] = row
    for row in rows:
        existing[(row["model"], row["corpus"], row["condition"])] = {k: row[k] for k in TIR_COLUMNS}
    merged = [existing[k] for k in sorted(existing)]
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=TIR_COLUMNS)
        w.writeheader()
        w.writerows(merged)
    tmp.replace(path)
    return merged
