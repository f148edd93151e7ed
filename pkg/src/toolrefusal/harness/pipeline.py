"""Experiment stages.

Each stage reads persisted outputs of earlier stages, writes its own files
through a staging directory, and records their digests in the run manifest.

Run directory layout::

    manifest.json
    transcripts/{generate,extend}.jsonl     generation exchanges, for replay
    corpus/D0 .. corpus/D4                  corpus files per alignment degree
    corpus/random/samples.jsonl             random-pairing control
    counterfactuals/Dk/*.jsonl              semantic.jsonl, structural-<strategy><l>.jsonl
    splits/Dk.json                          template-disjoint train/val/test sample ids
    records/<corpus>-<condition>.jsonl      per-sample decisions
    tir.csv                                 model, corpus, condition, tir, n
    attribution/tables/<metric>/<id>.trt    per-sample span tables
    attribution/{semantic,structural}/      group_D.trt, group_Dstar.trt, cis.trt
    pathways/{semantic,structural}[-candidates].json
    sweeps/group_patch.csv, sweeps/coefficients.csv
    intervention/grid_search.json, intervention/rebalance.json
    figures/*.svg + *.csv
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from collections.abc import Callable, Sequence
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import attribution as attr
from .. import intervention as iv
from .. import metrics, tensorio
from ..adapter.base import ModelAdapter
from ..rng import substream
from ..toolset import (
    ParamSpec,
    Sample,
    ToolsetError,
    build_corpus,
    bundled_templates,
    load_corpus,
    load_samples,
    load_templates,
    make_semantic_counterfactual,
    make_structural_counterfactual,
    propose_extension_params,
    split_by_template,
    write_corpus,
    write_samples,
)
from ..toolset.corpus import random_pair_corpus
from .config import ExperimentConfig
from .generation import HTTPBackend, RecordingBackend, ReplayBackend, StubBackend
from .manifest import RunManifest, StageOutput, combined_digest, tree_digests

logger = logging.getLogger(__name__)

STAGES = (
    "generate", "extend", "counterfactual", "split", "eval-tir", "attribute",
    "pathways", "sweep", "grid-search", "rebalance-eval", "report",
)
SPLITS = ("train", "val", "test")
KIND_METRIC = {"semantic": "m_sem", "structural": "m_str"}


class StageError(RuntimeError):
    pass


def make_adapter(cfg: ExperimentConfig) -> ModelAdapter:
    m = cfg.model
    if m.kind == "tiny":
        from ..adapter.profiles import load_profile
        from ..adapter.tiny import TinyAdapter, TinyConfig

        return TinyAdapter(TinyConfig(seed=m.tiny_seed), load_profile(m.profile))
    import torch

    from ..adapter.hf import HFAdapter

    return HFAdapter.from_pretrained(m.path, m.profile, dtype=getattr(torch, m.dtype))


class Run:
    """Shared state of one invocation: config, manifest and a lazily built adapter."""

    def __init__(self, cfg: ExperimentConfig, force: bool = False):
        self.cfg = cfg
        self.out = cfg.out
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest.load(self.out, cfg.digest())
        self.force = force
        self._adapter: ModelAdapter | None = None

    @property
    def adapter(self) -> ModelAdapter:
        if self._adapter is None:
            self._adapter = make_adapter(self.cfg)
            self.manifest.adapter_identity = self._adapter.identity
        return self._adapter

    @property
    def model_label(self) -> str:
        return self.cfg.model.path or self.cfg.model.kind

    def backend(self, record_to: Path):
        c = self.cfg.corpus
        if c.backend == "replay":
            return ReplayBackend(self.cfg.resolve(c.transcript))
        inner = StubBackend() if c.backend == "stub" else HTTPBackend()
        return RecordingBackend(inner, record_to)

    def stage(self, name: str, key: str, inputs: Sequence[str], args: dict, body: Callable[[StageOutput], None]) -> bool:
        """Run ``body`` unless the manifest shows identical inputs and intact outputs."""
        digests = {rel: combined_digest(tree_digests(self.out / rel)) for rel in inputs}
        missing = [rel for rel in inputs if not (self.out / rel).exists()]
        if missing:
            raise StageError(f"{name}: missing inputs {missing}; run the earlier stages first")
        fingerprint = combined_digest({"config": self.cfg.digest(), "args": json.dumps(args, sort_keys=True), **digests})
        if not self.force and self.manifest.is_current(key, fingerprint, self.out):
            logger.info("%s is up to date", key)
            return False
        started = time.time()
        with StageOutput(self.out, name) as so:
            body(so)
        self.manifest.record(name, key, fingerprint, so.published, started)
        self.manifest.save(self.out)
        return True


# -- helpers -------------------------------------------------------------------

def corpus_samples(run: Run, name: str, split: str | None = None) -> list[Sample]:
    """Samples for ``D<k>``, ``random`` or ``D<k>/<counterfactual set>``."""
    if name == "random":
        samples = load_samples(run.out / "corpus/random/samples.jsonl")
    elif "/" in name:
        base, cf = name.split("/", 1)
        samples = load_samples(run.out / f"counterfactuals/{base}/{cf}.jsonl")
    else:
        samples = load_samples(run.out / f"corpus/{name}/samples.jsonl")
    if split is None:
        return samples
    base = name.split("/", 1)[0]
    keep = set(json.loads((run.out / f"splits/{base}.json").read_text("utf-8"))[split])
    return [s for s in samples if (s.lineage.parent_id if s.lineage else s.sample_id) in keep]


def _corpus_inputs(name: str) -> list[str]:
    if name == "random":
        return ["corpus/random"]
    if "/" in name:
        base, cf = name.split("/", 1)
        return [f"counterfactuals/{base}/{cf}.jsonl"]
    return [f"corpus/{name}"]


def _slug(text: str) -> str:
    return text.replace("/", "_")


def _table_name(sample_id: str) -> str:
    return hashlib.sha256(sample_id.encode("utf-8")).hexdigest()[:20] + ".trt"


def _sample_rows(rng: np.random.Generator, rows: Sequence, n: int) -> list:
    if len(rows) <= n:
        return list(rows)
    idx = np.sort(rng.choice(len(rows), size=n, replace=False))
    return [rows[i] for i in idx]


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", "utf-8")


# -- corpus stages ---------------------------------------------------------------

def generate(run: Run) -> bool:
    cfg = run.cfg
    c = cfg.corpus
    sources = {"templates": c.templates, "transcript": c.transcript if c.backend == "replay" else None}
    fingerprint = {k: combined_digest(tree_digests(cfg.resolve(v))) for k, v in sources.items() if v}

    def body(so: StageOutput) -> None:
        templates = load_templates(cfg.resolve(c.templates)) if c.templates else bundled_templates()
        backend = run.backend(so.path("transcripts/generate.jsonl"))
        corpus = build_corpus(templates, backend, cfg.seed, 0, c.n_pairs, c.queries_per_tool)
        write_corpus(so.path("corpus/D0"), corpus)
        write_samples(so.path("corpus/random/samples.jsonl"), random_pair_corpus(corpus, cfg.seed))

    ran = run.stage("generate", "generate", [], fingerprint, body)
    run.manifest.corpus_hashes["D0"] = combined_digest(tree_digests(run.out / "corpus/D0"))
    run.manifest.save(run.out)
    return ran


def extend(run: Run) -> bool:
    cfg = run.cfg
    c = cfg.corpus

    def body(so: StageOutput) -> None:
        base = load_corpus(run.out / "corpus/D0")
        backend = run.backend(so.path("transcripts/extend.jsonl"))
        templates = []
        for t in base.templates:
            if len(t.extension_pool) < c.max_degree:
                t = replace(t, extension_pool=tuple(propose_extension_params(t, backend)))
            templates.append(t)
        for k in range(1, c.max_degree + 1):
            corpus = build_corpus(templates, backend, cfg.seed, k, c.n_pairs, c.queries_per_tool, pairs=base.pairs)
            write_corpus(so.path(f"corpus/D{k}"), corpus)

    sources = {"transcript": c.transcript} if c.backend == "replay" else {}
    fingerprint = {k: combined_digest(tree_digests(cfg.resolve(v))) for k, v in sources.items()}
    ran = run.stage("extend", "extend", ["corpus/D0"], fingerprint, body)
    for k in range(1, c.max_degree + 1):
        run.manifest.corpus_hashes[f"D{k}"] = combined_digest(tree_digests(run.out / f"corpus/D{k}"))
    run.manifest.save(run.out)
    return ran


def _param_pool(templates, degree: int) -> dict[str, list[ParamSpec]]:
    """Fresh parameters per template: its unused extension parameters, then every other name."""
    everything: dict[str, ParamSpec] = {}
    for t in templates:
        for p in (*t.parameters, *t.extension_pool):
            everything.setdefault(p.name, p)
    shared = [everything[n] for n in sorted(everything)]
    return {t.template_id: [*t.extension_pool[degree:], *shared] for t in templates}


def counterfactual(run: Run) -> bool:
    cc = run.cfg.counterfactual
    name = f"D{cc.degree}"

    def body(so: StageOutput) -> None:
        corpus = load_corpus(run.out / f"corpus/{name}", cc.degree)
        pools = _param_pool(corpus.templates, cc.degree)
        siblings = [s for s in corpus.samples if s.kind == "sibling"]
        write_samples(so.path(f"counterfactuals/{name}/semantic.jsonl"),
                      [make_semantic_counterfactual(s, corpus.instances) for s in siblings])
        report = {}
        for strategy in cc.strategies:
            for l in cc.sizes:
                out, skipped = [], 0
                for s in siblings:
                    try:
                        out.append(make_structural_counterfactual(s, strategy, l, pools[s.template_id]))
                    except ToolsetError:
                        skipped += 1
                write_samples(so.path(f"counterfactuals/{name}/structural-{strategy}{l}.jsonl"), out)
                report[f"{strategy}{l}"] = {"written": len(out), "skipped": skipped}
        _write_json(so.path(f"counterfactuals/{name}/report.json"), report)

    return run.stage("counterfactual", "counterfactual", [f"corpus/{name}"], {}, body)


def split(run: Run) -> bool:
    cfg = run.cfg
    names = sorted(p.name for p in (run.out / "corpus").glob("D*") if p.is_dir())
    if not names:
        raise StageError("split: no corpora; run generate first")

    def body(so: StageOutput) -> None:
        for name in names:
            samples = load_samples(run.out / f"corpus/{name}/samples.jsonl")
            parts = split_by_template(samples, cfg.corpus.split_fractions, cfg.seed)
            _write_json(so.path(f"splits/{name}.json"),
                        {k: [s.sample_id for s in part] for k, part in zip(SPLITS, parts)})

    return run.stage("split", "split", [f"corpus/{n}" for n in names], {}, body)


# -- evaluation --------------------------------------------------------------------

def eval_tir(run: Run, corpus: str, condition: str = "base", split_name: str | None = None) -> bool:
    inputs = _corpus_inputs(corpus)
    if split_name:
        inputs.append(f"splits/{corpus.split('/', 1)[0]}.json")
    if condition == "rebalanced":
        inputs.append("intervention/rebalance.json")
    label = corpus if split_name is None else f"{corpus}:{split_name}"

    def body(so: StageOutput) -> None:
        samples = corpus_samples(run, corpus, split_name)
        handle, render_as = run.adapter, condition
        if condition == "rebalanced":
            plan = iv.RebalancePlan.load(run.out / "intervention/rebalance.json")
            handle, render_as = iv.apply_rebalance(run.adapter, plan), "base"
        res = metrics.tir(samples, handle, render_as)
        metrics.write_records(so.path(f"records/{_slug(label)}-{condition}.jsonl"), res.records)
        table = so.path("tir.csv")
        if (run.out / "tir.csv").exists():
            table.write_bytes((run.out / "tir.csv").read_bytes())
        metrics.upsert_tir_rows(table, [{"model": run.model_label, "corpus": label, "condition": condition,
                                         "tir": f"{res.rate:.6f}", "n": res.n}])
        logger.info("%s %s: TIR %.4f over %d samples %s", label, condition, res.rate, res.n, res.counts)

    return run.stage("eval-tir", f"eval-tir:{label}:{condition}", inputs,
                     {"corpus": corpus, "condition": condition, "split": split_name}, body)


# -- attribution ---------------------------------------------------------------------

def _attribution_sets(run: Run) -> tuple[dict[str, tuple[list[Sample], list[Sample]]], metrics.GroupPartition]:
    """Contrastive groups on the attribution split, subsampled to the configured size."""
    a, cc = run.cfg.attribution, run.cfg.counterfactual
    originals = corpus_samples(run, a.corpus, a.split)
    sem = corpus_samples(run, f"{a.corpus}/semantic", a.split)
    struct = corpus_samples(run, f"{a.corpus}/structural-{cc.cis_strategy}{cc.cis_size}", a.split)
    part, _ = metrics.partition_groups(originals, sem, struct, run.adapter)
    by_id = {s.sample_id: s for s in (*originals, *sem, *struct)}
    rng = substream(run.cfg.seed, "cis-sampling")
    out = {}
    for kind, pairs in (("semantic", part.nocall), ("structural", part.call)):
        chosen = _sample_rows(rng, pairs, a.group_size)
        out[kind] = ([by_id[o] for o, _ in chosen], [by_id[c] for _, c in chosen])
    return out, part


def _group_tensor(g: attr.GroupImportance) -> tensorio.NamedTensor:
    return tensorio.NamedTensor(g.values, ("layer", "head", "target_span", "source_span"),
                                {"metric": g.metric, "span_names": list(g.span_names), "sample_ids": list(g.sample_ids)})


def _write_groups(so: StageOutput, kind: str, tables: dict[str, np.ndarray], index: dict) -> None:
    metric = index["metric"]
    names = tuple(index["span_names"])
    groups = []
    for side in ("D", "D_star"):
        ids = index[side]
        g = attr.GroupImportance(metric, attr.mean_tables([tables[i] for i in ids], ids), names, tuple(sorted(ids)))
        tensorio.save(so.path(f"attribution/{kind}/group_{'Dstar' if side == 'D_star' else 'D'}.trt"), _group_tensor(g))
        groups.append(g)
    m = attr.cis_from_groups(*groups)
    tensorio.save(so.path(f"attribution/{kind}/cis.trt"), tensorio.NamedTensor(
        m.values, ("layer", "head", "target_span", "source_span"),
        {"metric": metric, "span_names": list(names), "degenerate": list(m.degenerate), "provenance": m.provenance}))


def attribute(run: Run, from_persisted: bool = False) -> bool:
    a = run.cfg.attribution
    cc = run.cfg.counterfactual
    if from_persisted:
        inputs = ["attribution/index.json", "attribution/tables"]
    else:
        inputs = [f"corpus/{a.corpus}", f"counterfactuals/{a.corpus}", f"splits/{a.corpus}.json"]

    def body(so: StageOutput) -> None:
        if from_persisted:
            index = json.loads((run.out / "attribution/index.json").read_text("utf-8"))
            for kind, entry in index["groups"].items():
                tables = {}
                for sid in (*entry["D"], *entry["D_star"]):
                    t = tensorio.load(run.out / f"attribution/tables/{entry['metric']}/{_table_name(sid)}")
                    tables[sid] = t.values
                _write_groups(so, kind, tables, entry)
            return
        sets, part = _attribution_sets(run)
        index = {"corpus": a.corpus, "split": a.split, "groups": {}}
        for kind, (D, D_star) in sets.items():
            metric = KIND_METRIC[kind]
            if metric not in a.metrics:
                continue
            if not D:
                raise StageError(f"attribute: the {kind} group is empty (|D|={len(D)}, |D*|={len(D_star)})")
            tables, names = {}, None
            for s in (*D, *D_star):
                imp = attr.sample_importance_approx(run.adapter.render(s), metric, run.adapter)
                table = attr.span_table(imp.values, imp.span_map)
                names = imp.span_map.names
                tables[s.sample_id] = table
                tensorio.save(so.path(f"attribution/tables/{metric}/{_table_name(s.sample_id)}"), tensorio.NamedTensor(
                    table, ("layer", "head", "target_span", "source_span"),
                    {"sample_id": s.sample_id, "metric": metric, "span_names": list(names)}))
            entry = {"metric": metric, "span_names": list(names),
                     "D": [s.sample_id for s in D], "D_star": [s.sample_id for s in D_star]}
            index["groups"][kind] = entry
            _write_groups(so, kind, tables, entry)
        _write_json(so.path("attribution/index.json"), index)
        _write_json(so.path("attribution/partition.json"), part.to_json())

    key = "attribute:replay" if from_persisted else "attribute"
    return run.stage("attribute", key, inputs,
                     {"cis": [cc.cis_strategy, cc.cis_size], "from_persisted": from_persisted}, body)


def load_cis(run: Run, kind: str) -> attr.CISMatrix:
    t = tensorio.load(run.out / f"attribution/{kind}/cis.trt")
    return attr.CISMatrix(t.meta["metric"], t.values, tuple(t.meta["span_names"]),
                          t.meta.get("provenance", {}), tuple(t.meta.get("degenerate", (False, False))))


def pathways(run: Run) -> bool:
    a = run.cfg.attribution

    def body(so: StageOutput) -> None:
        for kind in ("semantic", "structural"):
            if not (run.out / f"attribution/{kind}/cis.trt").exists():
                continue
            m = load_cis(run, kind)
            L, H = m.values.shape[:2]
            k = a.k or attr.default_k(L * H, a.head_fraction)
            attr.extract_pathways(m, k, kind).save(so.path(f"pathways/{kind}.json"))
            pool = min(a.candidate_pool, m.values.size)
            attr.extract_pathways(m, pool, kind).save(so.path(f"pathways/{kind}-candidates.json"))

    return run.stage("pathways", "pathways", ["attribution/semantic", "attribution/structural"], {}, body)


def sweep(run: Run) -> bool:
    a, ic = run.cfg.attribution, run.cfg.intervention

    def body(so: StageOutput) -> None:
        part = metrics.GroupPartition.from_json(json.loads((run.out / "attribution/partition.json").read_text("utf-8")))
        originals = {s.sample_id: s for s in corpus_samples(run, a.corpus, a.split)}
        rng = substream(run.cfg.seed, "sweep-sampling")
        subsets = {
            "invocation": _sample_rows(rng, [originals[o] for o, _ in part.call], a.sweep_size),
            "non_invocation": _sample_rows(rng, [originals[o] for o, _ in part.nocall], a.sweep_size),
        }
        rows = []
        for kind in ("semantic", "structural"):
            cands = attr.PathwaySet.load(run.out / f"pathways/{kind}-candidates.json")
            pool = min(a.candidate_pool, cands.k)
            for subset, samples in subsets.items():
                if not samples:
                    continue
                prompts = [run.adapter.render(s) for s in samples]
                for r in attr.group_patch_sweep(cands, prompts, run.adapter, a.n_groups, pool):
                    rows.append({"pathway": kind, "subset": subset, "group": r["group"],
                                 "delta_m_sem": repr(r["delta_m_sem"]), "delta_m_str": repr(r["delta_m_str"]),
                                 "n": len(prompts)})
        write_csv(so.path("sweeps/group_patch.csv"),
                  ("pathway", "subset", "group", "delta_m_sem", "delta_m_str", "n"), rows)

        eval_set = _sample_rows(rng, corpus_samples(run, ic.sweep_corpus, "test"), ic.sweep_size)
        sets = [attr.PathwaySet.load(run.out / f"pathways/{k}.json") for k in ("semantic", "structural")]
        points, records = iv.coefficient_sweep(run.adapter, sets, ic.sweep_rhos, eval_set)
        write_csv(so.path("sweeps/coefficients.csv"), ("pathway", "rho", "tir", "n"),
                  [{"pathway": p.kind, "rho": p.rho, "tir": f"{p.tir:.6f}", "n": p.n} for p in points])
        for (kind, rho), recs in records.items():
            metrics.write_records(so.path(f"sweeps/records/{kind}-{rho}.jsonl"), recs)

    inputs = ["attribution/partition.json", "pathways", f"splits/{ic.sweep_corpus}.json"]
    return run.stage("sweep", "sweep", inputs, {}, body)


def grid_search(run: Run) -> bool:
    a, ic = run.cfg.attribution, run.cfg.intervention

    def body(so: StageOutput) -> None:
        plan = iv.RebalancePlan(attr.PathwaySet.load(run.out / "pathways/semantic.json"),
                                attr.PathwaySet.load(run.out / "pathways/structural.json"))
        originals = corpus_samples(run, a.corpus, ic.validation_split)
        semcf = corpus_samples(run, f"{a.corpus}/semantic", ic.validation_split)
        report = iv.grid_search(run.adapter, plan, originals, semcf, ic.rho_sem_grid, ic.rho_str_grid)
        _write_json(so.path("intervention/grid_search.json"), report.to_json())
        if report.selected is not None:
            plan.with_coefficients(*report.selected).save(so.path("intervention/rebalance.json"))

    inputs = ["pathways", f"counterfactuals/{a.corpus}/semantic.jsonl", f"splits/{a.corpus}.json"]
    return run.stage("grid-search", "grid-search", inputs, {}, body)


def rebalance_eval(run: Run) -> list[bool]:
    if not (run.out / "intervention/rebalance.json").exists():
        raise StageError("rebalance-eval: no selected coefficients; grid-search found no feasible pair")
    return [eval_tir(run, c, "rebalanced") for c in run.cfg.eval_corpora]


def report(run: Run) -> bool:
    from .report import render_report

    inputs = [p for p in ("tir.csv", "pathways", "sweeps") if (run.out / p).exists()]
    if not inputs:
        raise StageError("report: nothing to report yet")
    return run.stage("report", "report", inputs, {}, lambda so: render_report(run.out, so))
