"""Structural and semantic counterfactuals, plus structural flattening."""

from __future__ import annotations

import re
from collections.abc import Mapping, Sequence
from dataclasses import replace

from .alignment import sample_alignment
from .types import Lineage, ParamSpec, Sample, ToolInstance, ToolsetError

STRATEGIES = ("substitute", "remove", "add")


def _fresh(pool: Sequence[ParamSpec], taken: set[str], l: int, sample_id: str) -> list[ParamSpec]:
    fresh = []
    for p in pool:
        if p.name not in taken and p.name not in {f.name for f in fresh}:
            fresh.append(p)
        if len(fresh) == l:
            return fresh
    raise ToolsetError(
        f"{sample_id}: parameter pool has {len(fresh)} fresh parameters, {l} needed"
    )


def make_structural_counterfactual(
    sample: Sample, strategy: str, l: int, param_pool: Sequence[ParamSpec]
) -> Sample:
    """Perturb the tool interface so that no bijection with the query remains.

    substitute: the last ``l`` parameters are swapped for fresh pool parameters.
    remove: the last ``l`` parameters are dropped.
    add: ``l`` fresh pool parameters are appended.
    The query is left untouched.
    """
    if strategy not in STRATEGIES:
        raise ToolsetError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if l < 1:
        raise ToolsetError(f"perturbation size must be >= 1, got {l}")
    tool = sample.tool
    params = list(tool.parameters)
    n = len(params)
    if strategy in ("substitute", "remove") and l > n:
        raise ToolsetError(f"{sample.sample_id}: cannot {strategy} {l} of {n} parameters")

    taken = set(tool.param_names)
    if strategy == "remove":
        new_params = params[: n - l]
    else:
        fresh = [p.instantiate(tool.derived_class) for p in _fresh(param_pool, taken, l, sample.sample_id)]
        new_params = params[: n - l] + fresh if strategy == "substitute" else params + fresh

    cf_tool = replace(tool, parameters=tuple(new_params))
    tag = f"{strategy}{l}"
    cf = Sample(
        sample_id=f"{sample.sample_id}|str-{tag}",
        tool=cf_tool,
        query=sample.query,
        kind="structural_cf",
        alignment_label=0,
        lineage=Lineage(sample.sample_id, f"structural:{strategy}:{l}"),
    )
    if sample_alignment(cf) != 0:
        raise ToolsetError(f"{cf.sample_id}: perturbation left the sample aligned")
    return cf


def make_semantic_counterfactual(sample: Sample, instances: Mapping[str, ToolInstance]) -> Sample:
    """Swap the sibling tool for the tool the query was written for."""
    if sample.kind == "semantic_cf":
        return sample
    if sample.kind != "sibling":
        raise ToolsetError(f"{sample.sample_id}: semantic counterfactuals need a sibling sample")
    origin = instances.get(sample.query.origin_instance_id)
    if origin is None:
        raise ToolsetError(
            f"{sample.sample_id}: origin instance {sample.query.origin_instance_id!r} not in corpus"
        )
    cf = Sample(
        sample_id=f"{sample.sample_id}|sem",
        tool=origin,
        query=sample.query,
        kind="semantic_cf",
        alignment_label=1,
        lineage=Lineage(sample.sample_id, "semantic:target_tool"),
    )
    cf = replace(cf, alignment_label=sample_alignment(cf))
    return cf


def _insert_before_class(description: str, derived_class: str, phrase: str) -> str:
    match = re.search(re.escape(derived_class), description, flags=re.IGNORECASE)
    if match is None:
        return f"{description.rstrip('.')} ({phrase})."
    return f"{description[:match.start()]}{phrase} {description[match.start():]}"


def flatten_tool(sample: Sample, m: int, params: Sequence[str] | None = None) -> Sample:
    """Move ``m`` parameters out of the schema and into the description.

    Each moved parameter is instantiated with the query attribute targeting it;
    the attribute texts are inserted in front of the class mention in the
    description. By default the last ``m`` parameters move.
    """
    if m == 0:
        return sample
    tool = sample.tool
    n = len(tool.parameters)
    if not 1 <= m <= n:
        raise ToolsetError(f"{sample.sample_id}: cannot flatten {m} of {n} parameters")
    chosen = list(params) if params is not None else list(tool.param_names[n - m:])
    if len(chosen) != m or not set(chosen) <= set(tool.param_names):
        raise ToolsetError(f"{sample.sample_id}: invalid parameter choice {chosen}")

    texts = []
    for name in chosen:
        hits = [a.text for a in sample.query.attributes if a.target_param == name]
        if not hits:
            raise ToolsetError(f"{sample.sample_id}: no query attribute for parameter {name!r}")
        texts.append(hits[0])
    description = _insert_before_class(tool.description, tool.derived_class, " ".join(texts))
    flat = replace(
        tool,
        description=description,
        parameters=tuple(p for p in tool.parameters if p.name not in chosen),
        absorbed=tool.absorbed + tuple(chosen),
    )
    out = Sample(
        sample_id=f"{sample.sample_id}|flat{m}",
        tool=flat,
        query=sample.query,
        kind="flattened",
        alignment_label=0,
        lineage=Lineage(sample.sample_id, f"flatten:{m}"),
    )
    return replace(out, alignment_label=sample_alignment(out))
