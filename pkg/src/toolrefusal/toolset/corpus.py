"""Corpus assembly (base and extended degrees) and on-disk formats."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from collections.abc import Iterable, Sequence
from pathlib import Path

from ..rng import substream
from .builders import (
    build_random_pairs,
    build_sibling_samples,
    extend_to_degree,
    instantiate_all,
    sample_sibling_pairs,
)
from .queries import QUERIES_PER_TOOL, GenerationBackend, QueryReport, generate_queries
from .types import Query, Sample, ToolInstance, ToolTemplate

SIBLING_PAIRS_PER_TEMPLATE = 10


@dataclass
class Corpus:
    degree: int
    templates: list[ToolTemplate]
    instances: dict[str, ToolInstance]
    queries: list[Query]
    samples: list[Sample]
    pairs: dict[str, list[tuple[str, str]]] = field(default_factory=dict)
    reports: list[QueryReport] = field(default_factory=list)

    @property
    def name(self) -> str:
        return f"D{self.degree}"

    def template(self, template_id: str) -> ToolTemplate:
        return next(t for t in self.templates if t.template_id == template_id)


def bundled_templates() -> list[ToolTemplate]:
    """The 101-template seed corpus shipped with the package."""
    text = resources.files("toolrefusal.toolset").joinpath("data/templates_d0.json").read_text("utf-8")
    return [ToolTemplate.from_json(d) for d in json.loads(text)]


def _queries_for(instances: Sequence[ToolInstance], backend: GenerationBackend, n: int):
    queries, reports = [], []
    for inst in instances:
        qs, report = generate_queries(inst, backend, n)
        queries.extend(qs)
        reports.append(report)
    return queries, reports


def build_corpus(
    templates: Sequence[ToolTemplate],
    backend: GenerationBackend,
    seed: int,
    degree: int = 0,
    n_pairs: int = SIBLING_PAIRS_PER_TEMPLATE,
    queries_per_tool: int = QUERIES_PER_TOOL,
    pairs: dict[str, list[tuple[str, str]]] | None = None,
) -> Corpus:
    """Build the sibling-paired corpus at a given alignment degree.

    Degree k appends the first k extension parameters of each template. Pass the
    base corpus ``pairs`` to reuse its sibling pairings; otherwise pairs are
    drawn from the ``sampling`` substream, one template at a time in id order.
    """
    base = sorted(templates, key=lambda t: t.template_id)
    ext = [extend_to_degree(t, degree) for t in base]
    rng = substream(seed, "sampling")
    instances: dict[str, ToolInstance] = {}
    all_queries: list[Query] = []
    samples: list[Sample] = []
    reports: list[QueryReport] = []
    used_pairs: dict[str, list[tuple[str, str]]] = {}
    for t in ext:
        insts = instantiate_all(t)
        instances.update({i.instance_id: i for i in insts})
        queries, rep = _queries_for(insts, backend, queries_per_tool)
        reports.extend(rep)
        all_queries.extend(queries)
        if pairs is not None:
            chosen = pairs[t.template_id]
        else:
            chosen = sample_sibling_pairs(t.derived_classes, n_pairs, rng)
        used_pairs[t.template_id] = list(chosen)
        samples.extend(build_sibling_samples(t, insts, queries, n_pairs, pairs=chosen))
    return Corpus(degree, ext, instances, all_queries, samples, used_pairs, reports)


def build_degree_series(
    templates: Sequence[ToolTemplate], backend: GenerationBackend, seed: int, max_degree: int = 4, **kw
) -> list[Corpus]:
    """D_0 .. D_max, all sharing the base sibling pairings."""
    base = build_corpus(templates, backend, seed, 0, **kw)
    out = [base]
    for k in range(1, max_degree + 1):
        out.append(build_corpus(templates, backend, seed, k, pairs=base.pairs, **kw))
    return out


def random_pair_corpus(corpus: Corpus, seed: int) -> list[Sample]:
    return build_random_pairs(corpus.queries, list(corpus.instances.values()), substream(seed, "random-pairs"))


# -- serialization -----------------------------------------------------------

def dumps_line(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": ")) + "\n"


def write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(dumps_line(row))
    tmp.replace(path)


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_templates(path: Path, templates: Sequence[ToolTemplate]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([t.to_json() for t in templates], indent=2, ensure_ascii=False) + "\n", "utf-8")


def load_templates(path: Path | None = None) -> list[ToolTemplate]:
    if path is None:
        return bundled_templates()
    return [ToolTemplate.from_json(d) for d in json.loads(Path(path).read_text("utf-8"))]


def write_samples(path: Path, samples: Iterable[Sample]) -> None:
    write_jsonl(path, (s.to_json() for s in samples))


def load_samples(path: Path) -> list[Sample]:
    return [Sample.from_json(d) for d in read_jsonl(path)]


def write_corpus(directory: Path, corpus: Corpus) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_templates(d / "templates.json", corpus.templates)
    write_jsonl(d / "instances.jsonl", (corpus.instances[k].to_json() for k in sorted(corpus.instances)))
    write_jsonl(d / "queries.jsonl", (q.to_json() for q in corpus.queries))
    write_samples(d / "samples.jsonl", corpus.samples)
    write_jsonl(
        d / "pairs.jsonl",
        ({"template_id": tid, "pairs": [list(p) for p in ps]} for tid, ps in sorted(corpus.pairs.items())),
    )
    write_jsonl(
        d / "generation_report.jsonl",
        (
            {"tool_id": r.tool_id, "requested": r.requested, "accepted": r.accepted,
             "attempts": r.attempts, "rejections": r.rejections}
            for r in corpus.reports
        ),
    )


def load_corpus(directory: Path, degree: int = 0) -> Corpus:
    d = Path(directory)
    instances = {i.instance_id: i for i in (ToolInstance.from_json(r) for r in read_jsonl(d / "instances.jsonl"))}
    pairs = {}
    if (d / "pairs.jsonl").exists():
        pairs = {r["template_id"]: [tuple(p) for p in r["pairs"]] for r in read_jsonl(d / "pairs.jsonl")}
    return Corpus(
        degree=degree,
        templates=load_templates(d / "templates.json"),
        instances=instances,
        queries=[Query.from_json(r) for r in read_jsonl(d / "queries.jsonl")],
        samples=load_samples(d / "samples.jsonl"),
        pairs=pairs,
    )
