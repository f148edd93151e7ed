"""Adapter contract shared by the tiny reference model and Hugging Face models.

Every backend implements one primitive, ``_forward``, which runs a batch of
token ids through the model while handing each layer's post-softmax attention
to a list of editors. Scaling, ablation, finite differences and gradient
capture are all built on top of it.
"""

from __future__ import annotations

import copy
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
import torch

from ..toolset.types import Sample
from .profiles import ChatProfile
from .render import RenderedPrompt, SpanMap, render_prompt
from .tokenize import Tokenizer

METRICS = ("m_sem", "m_str")
MODES = ("scale", "zero")
SITE_OPS = ("scale", "add", "set")


class AdapterError(RuntimeError):
    pass


class CapabilityError(AdapterError):
    pass


class ContextOverflowError(AdapterError):
    pass


class InterventionError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Edge:
    layer: int
    head: int
    target_span: str
    source_span: str
    rho: float = 1.0

    def to_json(self) -> dict:
        return {"layer": self.layer, "head": self.head, "target_span": self.target_span,
                "source_span": self.source_span, "rho": self.rho}

    @classmethod
    def from_json(cls, d: dict) -> "Edge":
        return cls(int(d["layer"]), int(d["head"]), d["target_span"], d["source_span"], float(d.get("rho", 1.0)))


@dataclass(frozen=True)
class InterventionPlan:
    edges: tuple[Edge, ...] = ()

    def __post_init__(self):
        for e in self.edges:
            if not e.rho > 0:
                raise InterventionError(f"rho must be positive, got {e.rho} on {e}")

    def __add__(self, other: "InterventionPlan") -> "InterventionPlan":
        return InterventionPlan(self.edges + other.edges)

    def __bool__(self) -> bool:
        return bool(self.edges)

    def to_json(self) -> dict:
        return {"edges": [e.to_json() for e in self.edges]}

    @classmethod
    def from_json(cls, d: dict) -> "InterventionPlan":
        return cls(tuple(Edge.from_json(e) for e in d["edges"]))


def metric_from_logits(logits: torch.Tensor, profile: ChatProfile, metric: str) -> torch.Tensor:
    """Refusal-vs-invocation log-odds over the last axis, computed in log space."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    logp = torch.log_softmax(logits, dim=-1)
    refusal = logp[..., list(profile.refusal_token_ids)].max(dim=-1).values
    sem = refusal - logp[..., profile.tool_call_token_id]
    return sem if metric == "m_sem" else -sem


class ScaleEditor:
    """Multiplies attention cells by per-layer factor tables (post-softmax, no renormalization)."""

    def __init__(self, factors: dict[int, torch.Tensor]):
        self.factors = factors

    def __call__(self, layer: int, probs: torch.Tensor) -> torch.Tensor:
        f = self.factors.get(layer)
        return probs if f is None else probs * f


class SiteEditor:
    """Edits one (layer, head, target, source) cell per batch row."""

    def __init__(self, sites: np.ndarray, values: np.ndarray, op: str):
        if op not in SITE_OPS:
            raise ValueError(f"unknown site op {op!r}")
        self.sites = torch.as_tensor(np.asarray(sites, dtype=np.int64))
        self.values = torch.as_tensor(np.asarray(values, dtype=np.float64))
        self.op = op

    def __call__(self, layer: int, probs: torch.Tensor) -> torch.Tensor:
        rows = torch.nonzero(self.sites[:, 0] == layer).flatten()
        if rows.numel() == 0:
            return probs
        _, h, i, j = self.sites[rows].unbind(1)
        v = self.values[rows].to(probs.dtype)
        cur = probs[rows, h, i, j]
        new = {"scale": cur * v, "add": cur + v, "set": v}[self.op]
        out = probs.clone()
        out[rows, h, i, j] = new
        return out


def plan_editor(plan: InterventionPlan, span_map: SpanMap, n_layers: int, n_heads: int,
                mode: str = "scale", dtype=torch.float64) -> ScaleEditor | None:
    """Resolve span-level edges to token ranges. Overlapping edges multiply."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if not plan:
        return None
    T = span_map.length
    factors: dict[int, torch.Tensor] = {}
    for e in plan.edges:
        if not (0 <= e.layer < n_layers and 0 <= e.head < n_heads):
            raise InterventionError(f"edge {e} outside model of {n_layers} layers x {n_heads} heads")
        try:
            ts, te = span_map.range(e.target_span)
            ss, se = span_map.range(e.source_span)
        except KeyError as exc:
            raise InterventionError(f"edge {e}: {exc.args[0]}") from None
        f = factors.setdefault(e.layer, torch.ones(n_heads, T, T, dtype=dtype))
        if mode == "zero":
            f[e.head, ts:te, ss:se] = 0.0
        else:
            f[e.head, ts:te, ss:se] *= e.rho
    return ScaleEditor(factors)


@dataclass
class GradientResult:
    value: float
    alpha: np.ndarray
    grad: np.ndarray


class ModelAdapter(ABC):
    """Instrumented decoder. Subclasses provide ``_forward`` and the shape fields."""

    profile: ChatProfile
    tokenizer: Tokenizer
    n_layers: int
    n_heads: int
    max_positions: int
    has_gradients: bool = True
    has_hooks: bool = True
    dtype = torch.float64

    standing_plan: InterventionPlan = InterventionPlan()

    @property
    @abstractmethod
    def identity(self) -> str:
        """Stable description of weights and profile, used in run manifests."""

    @abstractmethod
    def _forward(self, ids: torch.Tensor, editors: list, capture: bool = False):
        """Return last-position logits (B, V) and, if ``capture``, per-layer attention (B, H, T, T)."""

    @property
    def total_heads(self) -> int:
        return self.n_layers * self.n_heads

    def with_plan(self, plan: InterventionPlan) -> "ModelAdapter":
        """A handle sharing weights whose forwards always apply ``plan`` on top."""
        other = copy.copy(self)
        other.standing_plan = self.standing_plan + plan
        return other

    def render(self, sample: Sample, condition: str = "base", strict: bool = False) -> RenderedPrompt:
        return render_prompt(sample, self.profile, self.tokenizer, condition, strict)

    def _ids(self, prompt: RenderedPrompt) -> torch.Tensor:
        if len(prompt) > self.max_positions:
            raise ContextOverflowError(
                f"{prompt.sample_id}: {len(prompt)} tokens exceed the context window of {self.max_positions}"
            )
        if len(prompt) == 0:
            raise AdapterError(f"{prompt.sample_id}: empty prompt")
        return torch.tensor([prompt.token_ids], dtype=torch.long)

    def _editors(self, prompt: RenderedPrompt, plan: InterventionPlan | None = None, mode: str = "scale") -> list:
        editors = []
        standing = plan_editor(self.standing_plan, prompt.span_map, self.n_layers, self.n_heads, "scale", self.dtype)
        if standing is not None:
            editors.append(standing)
        if plan:
            editors.append(plan_editor(plan, prompt.span_map, self.n_layers, self.n_heads, mode, self.dtype))
        return editors

    @torch.no_grad()
    def logits(self, prompt: RenderedPrompt, plan: InterventionPlan | None = None, mode: str = "scale") -> np.ndarray:
        out, _ = self._forward(self._ids(prompt), self._editors(prompt, plan, mode))
        return out[0].double().numpy()

    def next_token_distribution(self, prompt: RenderedPrompt) -> np.ndarray:
        return _softmax(self.logits(prompt))

    def forward_with_intervention(self, prompt: RenderedPrompt, plan: InterventionPlan, mode: str = "scale") -> np.ndarray:
        return _softmax(self.logits(prompt, plan, mode))

    @torch.no_grad()
    def forward_with_attention(self, prompt: RenderedPrompt) -> tuple[np.ndarray, np.ndarray]:
        out, probs = self._forward(self._ids(prompt), self._editors(prompt), capture=True)
        attn = torch.stack([p[0] for p in probs]).double().numpy()
        return _softmax(out[0].double().numpy()), attn

    def metric(self, prompt: RenderedPrompt, metric: str, plan: InterventionPlan | None = None, mode: str = "scale") -> float:
        lg = torch.as_tensor(self.logits(prompt, plan, mode))
        return float(metric_from_logits(lg, self.profile, metric))

    def metric_gradients(self, prompt: RenderedPrompt, metric: str) -> GradientResult:
        """dm/dalpha for every layer and head from one forward and one backward pass.

        The gradient is the total derivative: it flows through all later layers,
        including other heads' attention.
        """
        if not self.has_gradients:
            raise CapabilityError(f"{type(self).__name__} has no gradient access; use exact site ablation")
        with torch.enable_grad():
            out, probs = self._forward(self._ids(prompt), self._editors(prompt), capture=True)
            value = metric_from_logits(out[0], self.profile, metric)
            value.backward()
        alpha = torch.stack([p[0].detach() for p in probs]).double().numpy()
        grad = torch.stack([
            p.grad[0] if p.grad is not None else torch.zeros_like(p[0]) for p in probs
        ]).double().numpy()
        return GradientResult(float(value.detach()), alpha, grad)

    @torch.no_grad()
    def site_metrics(
        self,
        prompt: RenderedPrompt,
        metric: str,
        sites: np.ndarray,
        values: np.ndarray | float,
        op: str = "scale",
        batch_size: int = 512,
    ) -> np.ndarray:
        """Metric after editing one attention cell per row of ``sites`` (layer, head, i, j).

        Edits that leave the cell unchanged, and edits to non-final rows of the
        last layer, cannot move the output; they get the unedited metric
        without a forward pass.
        """
        if op not in SITE_OPS:
            raise ValueError(f"unknown site op {op!r}")
        sites = np.asarray(sites, dtype=np.int64).reshape(-1, 4)
        values = np.array(np.broadcast_to(np.asarray(values, dtype=np.float64), (len(sites),)))
        T = len(prompt)
        bad = (sites[:, 0] < 0) | (sites[:, 0] >= self.n_layers) | (sites[:, 1] < 0) | (sites[:, 1] >= self.n_heads)
        bad |= (sites[:, 2] < 0) | (sites[:, 2] >= T) | (sites[:, 3] < 0) | (sites[:, 3] >= T)
        if bad.any():
            raise IndexError(f"site {sites[bad][0].tolist()} outside (L={self.n_layers}, H={self.n_heads}, T={T})")
        base = self.metric(prompt, metric)
        _, attn = self.forward_with_attention(prompt)
        cur = attn[tuple(sites.T)]
        new = {"scale": cur * values, "add": cur + values, "set": values}[op]
        live = (new != cur) & ~((sites[:, 0] == self.n_layers - 1) & (sites[:, 2] != T - 1))
        out = np.full(len(sites), base)
        if live.any():
            out[live] = self._edited_metrics(prompt, metric, sites[live], values[live], op, batch_size)
        return out

    def _edited_metrics(self, prompt, metric, sites, values, op, batch_size) -> np.ndarray:
        ids = self._ids(prompt)
        base_editors = self._editors(prompt)
        out = np.empty(len(sites))
        for start in range(0, len(sites), batch_size):
            chunk = slice(start, start + batch_size)
            ed = SiteEditor(sites[chunk], values[chunk], op)
            n = len(sites[chunk])
            logits, _ = self._forward(ids.expand(n, -1), base_editors + [ed])
            out[chunk] = metric_from_logits(logits.double(), self.profile, metric).numpy()
        return out


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()
