"""Figures from persisted stage outputs. Every SVG has a CSV next to it."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..attribution import PathwaySet  # noqa: E402
from .manifest import StageOutput  # noqa: E402

# fixed ids and no timestamp so identical data gives identical SVG bytes
SVG_RC = {"svg.hashsalt": "toolrefusal", "svg.fonttype": "none"}


def _save(fig, path: Path) -> None:
    with matplotlib.rc_context(SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _write_csv(path: Path, columns, rows) -> None:
    from .pipeline import write_csv

    write_csv(path, columns, rows)


def tir_by_degree(rows: list[dict], so: StageOutput) -> None:
    """Grouped bars of TIR per alignment degree, one bar per (model, condition)."""
    picked = [r for r in rows if r["corpus"].startswith("D") and r["corpus"][1:].isdigit()]
    if not picked:
        return
    degrees = sorted({r["corpus"] for r in picked}, key=lambda c: int(c[1:]))
    series = sorted({(r["model"], r["condition"]) for r in picked})
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / len(series)
    for n, (model, cond) in enumerate(series):
        vals = {r["corpus"]: 100 * float(r["tir"]) for r in picked if (r["model"], r["condition"]) == (model, cond)}
        xs = [d + n * width for d in range(len(degrees))]
        ax.bar(xs, [vals.get(c, 0.0) for c in degrees], width, label=f"{model} ({cond})")
    ax.set_xticks([d + 0.4 - width / 2 for d in range(len(degrees))], degrees)
    ax.set_ylabel("TIR (%)")
    ax.set_xlabel("alignment degree")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, so.path("figures/tir_by_degree.svg"))
    _write_csv(so.path("figures/tir_by_degree.csv"), ("model", "corpus", "condition", "tir", "n"),
               sorted(picked, key=lambda r: (r["model"], r["condition"], int(r["corpus"][1:]))))


def pathway_diagram(ps: PathwaySet, so: StageOutput) -> None:
    """Span-by-layer edge plot: each edge runs from its source span to its target span
    between adjacent layer columns; width follows the score."""
    names = ps.span_names
    n_layers = max((e.layer for e in ps.edges), default=0) + 1
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * n_layers + 3), 0.35 * len(names) + 1.5))
    for l in range(n_layers + 1):
        ax.scatter([l] * len(names), range(len(names)), s=6, color="0.7", zorder=1)
    top = max((abs(e.score) for e in ps.edges), default=1.0) or 1.0
    color = "tab:blue" if ps.kind == "semantic" else "tab:red"
    for e in ps.edges:
        ax.plot([e.layer, e.layer + 1], [names.index(e.source_span), names.index(e.target_span)],
                color=color, lw=0.5 + 3 * abs(e.score) / top, alpha=0.8, zorder=2)
    ax.set_yticks(range(len(names)), names, fontsize=7)
    ax.set_xlabel("layer")
    ax.set_title(f"{ps.kind} pathways (k={ps.k})")
    fig.tight_layout()
    _save(fig, so.path(f"figures/pathways_{ps.kind}.svg"))
    _write_csv(so.path(f"figures/pathways_{ps.kind}.csv"),
               ("rank", "layer", "head", "target_span", "source_span", "score"),
               [{"rank": r, "layer": e.layer, "head": e.head, "target_span": e.target_span,
                 "source_span": e.source_span, "score": repr(e.score)} for r, e in enumerate(ps.edges)])


def group_patch_plot(rows: list[dict], so: StageOutput) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(8, 3), sharey=True)
    for ax, kind in zip(axes, ("semantic", "structural")):
        metric = "delta_m_sem" if kind == "semantic" else "delta_m_str"
        for subset in sorted({r["subset"] for r in rows}):
            sel = sorted((r for r in rows if r["pathway"] == kind and r["subset"] == subset), key=lambda r: int(r["group"]))
            ax.plot([int(r["group"]) for r in sel], [float(r[metric]) for r in sel], marker="o", label=subset)
        ax.set_title(f"{kind}: {metric}")
        ax.set_xlabel("rank group")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    _save(fig, so.path("figures/group_patch.svg"))
    _write_csv(so.path("figures/group_patch.csv"), list(rows[0]), rows)


def coefficient_plot(rows: list[dict], so: StageOutput) -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    for kind in sorted({r["pathway"] for r in rows}):
        sel = sorted((r for r in rows if r["pathway"] == kind), key=lambda r: float(r["rho"]))
        ax.plot([float(r["rho"]) for r in sel], [100 * float(r["tir"]) for r in sel], marker="o", label=kind)
    ax.axvline(1.0, color="0.6", lw=0.8)
    ax.set_xlabel("scaling coefficient")
    ax.set_ylabel("TIR (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, so.path("figures/coefficients.svg"))
    _write_csv(so.path("figures/coefficients.csv"), list(rows[0]), rows)


def render_report(out: Path, so: StageOutput) -> None:
    from .pipeline import read_csv

    if (out / "tir.csv").exists():
        rows = read_csv(out / "tir.csv")
        tir_by_degree(rows, so)
        _write_csv(so.path("figures/tir_table.csv"), list(rows[0]) if rows else ["model"], rows)
    for kind in ("semantic", "structural"):
        p = out / f"pathways/{kind}.json"
        if p.exists():
            pathway_diagram(PathwaySet.load(p), so)
    if (out / "sweeps/group_patch.csv").exists():
        rows = read_csv(out / "sweeps/group_patch.csv")
        if rows:
            group_patch_plot(rows, so)
    if (out / "sweeps/coefficients.csv").exists():
        rows = read_csv(out / "sweeps/coefficients.csv")
        if rows:
            coefficient_plot(rows, so)
    gs = out / "intervention/grid_search.json"
    if gs.exists():
        report = json.loads(gs.read_text("utf-8"))
        _write_csv(so.path("figures/grid_search.csv"),
                   ("rho_sem", "rho_str", "tir_original", "semcf_nocall_rate", "objective", "feasible", "feasible_relaxed"),
                   [{k: c[k] for k in ("rho_sem", "rho_str", "tir_original", "semcf_nocall_rate", "objective",
                                       "feasible", "feasible_relaxed")} for c in report["candidates"]])
