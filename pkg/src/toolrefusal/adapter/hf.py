"""Hugging Face decoder adapter.

Attention is routed through a registered attention function that computes the
eager softmax explicitly, so post-softmax weights can be edited and captured
per layer. Works for any model whose attention modules carry ``layer_idx`` and
dispatch through ``AttentionInterface`` (Qwen3, Llama and relatives).
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field

import torch

from .base import ModelAdapter
from .profiles import ChatProfile, load_profile
from .tokenize import HFTokenizer

IMPLEMENTATION = "toolrefusal_eager"


@dataclass
class _Pass:
    editors: list
    capture: bool
    grad: bool
    captured: dict = field(default_factory=dict)


_ACTIVE: contextvars.ContextVar[_Pass | None] = contextvars.ContextVar("toolrefusal_pass", default=None)


def instrumented_attention(module, query, key, value, attention_mask, scaling, dropout=0.0, **kwargs):
    n_rep = query.shape[1] // key.shape[1]
    if n_rep > 1:
        key = key.repeat_interleave(n_rep, dim=1)
        value = value.repeat_interleave(n_rep, dim=1)
    scores = torch.matmul(query, key.transpose(2, 3)) * scaling
    T, S = scores.shape[-2:]
    causal = torch.ones(T, S, dtype=torch.bool, device=scores.device).tril(S - T)
    scores = scores.masked_fill(~causal, float("-inf"))
    if attention_mask is not None and attention_mask.dtype != torch.bool:
        scores = scores + attention_mask[..., :S]
    probs = torch.softmax(scores, dim=-1, dtype=torch.promote_types(query.dtype, torch.float32)).to(query.dtype)
    state = _ACTIVE.get()
    if state is not None:
        layer = module.layer_idx
        for ed in state.editors:
            probs = ed(layer, probs)
        if state.capture:
            if state.grad and probs.requires_grad:
                probs.retain_grad()
            state.captured[layer] = probs
    out = torch.matmul(probs, value).transpose(1, 2).contiguous()
    return out, probs


def register_attention() -> None:
    from transformers import AttentionInterface

    AttentionInterface.register(IMPLEMENTATION, instrumented_attention)


class HFAdapter(ModelAdapter):
    def __init__(self, model, tokenizer, profile: ChatProfile, name: str | None = None):
        register_attention()
        model.eval()
        model.requires_grad_(False)
        self.model = model
        self._ensure_implementation()
        self.tokenizer = tokenizer
        self.profile = profile
        cfg = model.config
        self.n_layers = cfg.num_hidden_layers
        self.n_heads = cfg.num_attention_heads
        self.max_positions = getattr(cfg, "max_position_embeddings", 1 << 20)
        self.dtype = next(model.parameters()).dtype
        self.name = name or getattr(cfg, "_name_or_path", "") or type(model).__name__

    @classmethod
    def from_pretrained(cls, path: str, profile: str | ChatProfile = "qwen3", dtype=torch.bfloat16, **kw) -> "HFAdapter":
        from transformers import AutoModelForCausalLM

        prof = load_profile(profile) if isinstance(profile, str) else profile
        model = AutoModelForCausalLM.from_pretrained(path, dtype=dtype, **kw)
        return cls(model, HFTokenizer.from_pretrained(path), prof, name=path)

    @property
    def identity(self) -> str:
        revision = getattr(self.model.config, "_commit_hash", None) or "local"
        return f"hf({self.name}@{revision},dtype={str(self.dtype).removeprefix('torch.')})|profile={self.profile.profile_id}"

    def _ensure_implementation(self) -> None:
        # configs can be shared between model objects; re-assert on every pass
        if getattr(self.model.config, "_attn_implementation", None) != IMPLEMENTATION:
            try:
                self.model.set_attn_implementation(IMPLEMENTATION)
            except (AttributeError, ValueError):
                self.model.config._attn_implementation = IMPLEMENTATION

    def _forward(self, ids: torch.Tensor, editors: list, capture: bool = False):
        self._ensure_implementation()
        device = next(self.model.parameters()).device
        ids = ids.to(device)
        grad = capture and torch.is_grad_enabled()
        state = _Pass(editors, capture, grad)
        token = _ACTIVE.set(state)
        try:
            embeds = self.model.get_input_embeddings()(ids)
            if grad:
                embeds = embeds.detach().requires_grad_(True)
            out = self.model(inputs_embeds=embeds, use_cache=False, logits_to_keep=1)
        finally:
            _ACTIVE.reset(token)
        captured = [state.captured[l] for l in sorted(state.captured)] if capture else []
        return out.logits[:, -1].to(torch.float64), captured
