"""Tool instantiation, sibling pairing, template extension and template-disjoint splits."""

from __future__ import annotations

import itertools
from collections.abc import Iterable, Sequence
from dataclasses import replace

import numpy as np

from ..rng import substream
from .alignment import check_structural_alignment, sample_alignment
from .types import (
    PLACEHOLDER,
    CompatRelation,
    ParamSpec,
    Query,
    Sample,
    ToolInstance,
    ToolsetError,
    ToolTemplate,
    class_slug,
)


def instance_id_for(template_id: str, derived_class: str) -> str:
    return f"{template_id}/{class_slug(derived_class)}"


def instantiate_tool(template: ToolTemplate, derived_class: str) -> ToolInstance:
    """Replace the class placeholder to obtain one derived tool.

    The name gets an identifier-safe slug of the class; descriptions (tool and
    parameter) get the class verbatim. Parameter names and types are unchanged,
    so sibling instances share one interface.
    """
    if derived_class not in template.derived_classes:
        raise ToolsetError(
            f"template {template.template_id!r} has no derived class {derived_class!r}"
        )
    return ToolInstance(
        instance_id=instance_id_for(template.template_id, derived_class),
        template_id=template.template_id,
        derived_class=derived_class,
        name=template.name_pattern.replace(PLACEHOLDER, class_slug(derived_class)),
        description=template.description_pattern.replace(PLACEHOLDER, derived_class),
        parameters=tuple(p.instantiate(derived_class) for p in template.parameters),
    )


def instantiate_all(template: ToolTemplate) -> list[ToolInstance]:
    return [instantiate_tool(template, c) for c in template.derived_classes]


def ordered_sibling_pairs(derived_classes: Sequence[str]) -> list[tuple[str, str]]:
    """All (query class, tool class) pairs with distinct classes, in template order."""
    return [(a, b) for a, b in itertools.permutations(derived_classes, 2)]


def sample_sibling_pairs(
    derived_classes: Sequence[str], n_pairs: int, rng: np.random.Generator
) -> list[tuple[str, str]]:
    """Uniformly draw ``n_pairs`` distinct ordered sibling pairs."""
    pairs = ordered_sibling_pairs(derived_classes)
    if n_pairs > len(pairs):
        raise ToolsetError(
            f"requested {n_pairs} sibling pairs but only {len(pairs)} ordered pairs exist"
        )
    if n_pairs <= 0:
        return []
    idx = sorted(rng.choice(len(pairs), size=n_pairs, replace=False).tolist())
    return [pairs[i] for i in idx]


def sibling_sample_id(template_id: str, query_class: str, tool_class: str, query_id: str) -> str:
    qnum = query_id.rsplit("#", 1)[-1]
    return f"{template_id}:{class_slug(query_class)}>{class_slug(tool_class)}:{qnum}"


def build_sibling_samples(
    template: ToolTemplate,
    instances: Sequence[ToolInstance],
    queries: Sequence[Query],
    n_pairs: int,
    rng: np.random.Generator | None = None,
    pairs: Sequence[tuple[str, str]] | None = None,
) -> list[Sample]:
    """Pair each query of one derived tool with a sibling tool of another class.

    Either draws ``n_pairs`` ordered class pairs with ``rng`` or reuses ``pairs``
    (how the extended corpora keep the base pairings). Every query originating
    from the query class is paired with the tool class.
    """
    by_class = {inst.derived_class: inst for inst in instances if inst.template_id == template.template_id}
    if len(by_class) < 2:
        raise ToolsetError(f"{template.template_id}: need >= 2 instances to pair siblings")
    if pairs is None:
        if rng is None:
            raise ToolsetError("either rng or explicit pairs must be given")
        pairs = sample_sibling_pairs(sorted(by_class, key=template.derived_classes.index), n_pairs, rng)
    by_origin: dict[str, list[Query]] = {}
    known = {inst.instance_id for inst in by_class.values()}
    for q in queries:
        if q.origin_instance_id not in known:
            raise ToolsetError(f"query {q.query_id} does not originate from {template.template_id}")
        by_origin.setdefault(q.origin_instance_id, []).append(q)

    samples = []
    for qc, tc in pairs:
        if qc == tc:
            raise ToolsetError(f"sibling pair with identical classes {qc!r}")
        tool = by_class[tc]
        for q in sorted(by_origin.get(by_class[qc].instance_id, []), key=lambda q: q.query_id):
            s = Sample(
                sample_id=sibling_sample_id(template.template_id, qc, tc, q.query_id),
                tool=tool,
                query=q,
                kind="sibling",
                alignment_label=1,
            )
            label = sample_alignment(s)
            if label != 1:
                raise ToolsetError(f"{s.sample_id}: sibling sample is not structurally aligned")
            samples.append(s)
    return samples


def sibling_pairs_of(samples: Iterable[Sample], instances: dict[str, ToolInstance]) -> dict[str, list[tuple[str, str]]]:
    """Recover the ordered class pairs used per template from built samples."""
    out: dict[str, list[tuple[str, str]]] = {}
    for s in samples:
        qc = instances[s.query.origin_instance_id].derived_class
        pair = (qc, s.tool.derived_class)
        lst = out.setdefault(s.template_id, [])
        if pair not in lst:
            lst.append(pair)
    return out


def extend_template(template: ToolTemplate, extra_params: Sequence[ParamSpec], k: int) -> ToolTemplate:
    """Append the first ``k`` of ``extra_params`` to the template interface.

    The unused remainder becomes the template's extension pool, which is where
    structural counterfactuals draw fresh parameters from.
    """
    if k == 0:
        return template
    if not 1 <= k <= len(extra_params):
        raise ToolsetError(f"k={k} outside 1..{len(extra_params)}")
    taken = set(template.param_names)
    for p in extra_params:
        if p.name in taken:
            raise ToolsetError(
                f"{template.template_id}: extra parameter {p.name!r} collides with an existing parameter"
            )
        taken.add(p.name)
    return replace(
        template,
        parameters=template.parameters + tuple(extra_params[:k]),
        extension_pool=tuple(extra_params[k:]),
    )


def extend_to_degree(template: ToolTemplate, k: int) -> ToolTemplate:
    """D_k version of a base template using its own extension parameters."""
    return extend_template(template, template.extension_pool, k)


def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    """Apportion ``total`` items; equal remainders favour the later split."""
    quotas = [total * f for f in fractions]
    sizes = [int(np.floor(q + 1e-12)) for q in quotas]
    leftover = total - sum(sizes)
    rema = [q - s for q, s in zip(quotas, sizes)]
    order = sorted(range(len(fractions)), key=lambda i: (-round(rema[i], 9), -i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def split_template_ids(
    template_ids: Iterable[str], fractions=(0.40, 0.20, 0.40), seed: int = 0
) -> tuple[list[str], ...]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ToolsetError(f"split fractions must sum to 1, got {sum(fractions)}")
    ids = sorted(set(template_ids))
    if len(ids) < len(fractions):
        raise ToolsetError(f"{len(ids)} templates cannot fill {len(fractions)} splits")
    sizes = largest_remainder(len(ids), fractions)
    perm = substream(seed, "split").permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    out, start = [], 0
    for size in sizes:
        out.append(sorted(shuffled[start:start + size]))
        start += size
    return tuple(out)


def split_by_template(
    corpus: Sequence[Sample], fractions=(0.40, 0.20, 0.40), seed: int = 0
) -> tuple[list[Sample], ...]:
    """Split samples so that no tool template appears in two splits."""
    groups = split_template_ids((s.template_id for s in corpus), fractions, seed)
    lookup = {tid: i for i, g in enumerate(groups) for tid in g}
    out: tuple[list[Sample], ...] = tuple([] for _ in groups)
    for s in corpus:
        out[lookup[s.template_id]].append(s)
    return out


def build_random_pairs(
    queries: Sequence[Query],
    instances: Sequence[ToolInstance],
    rng: np.random.Generator,
) -> list[Sample]:
    """Control condition: every query gets a tool drawn uniformly from the pool
    of tools built from other templates."""
    pool = sorted(instances, key=lambda t: t.instance_id)
    template_of = {t.instance_id: t.template_id for t in pool}
    out = []
    for q in sorted(queries, key=lambda q: q.query_id):
        own = template_of.get(q.origin_instance_id)
        candidates = [t for t in pool if t.template_id != own]
        tool = candidates[int(rng.integers(len(candidates)))]
        compat = CompatRelation.from_labels(q.attributes, tool.parameters)
        label = check_structural_alignment(q.attributes, tool.parameters, compat)
        out.append(Sample(f"rand:{q.query_id}", tool, q, "random_pair", label))
    return out
