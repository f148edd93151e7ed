"""Seeded, untrained decoder-only transformer used as an oracle substrate.

Everything runs in float64 so finite differences and exact ablations can be
compared against gradients at tight tolerances.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .base import ModelAdapter, metric_from_logits
from .profiles import ChatProfile, load_profile
from .tokenize import RegexTokenizer


@dataclass(frozen=True)
class TinyConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 32
    d_mlp: int = 64
    vocab_size: int = 64
    max_positions: int = 512
    seed: int = 0
    qk_gain: float = 2.0
    # Logit offsets that make the designated tokens the usual argmax, so that
    # decisions split between invocation and refusal instead of "other".
    output_bias: dict[int, float] = field(default_factory=lambda: {1: 4.0, 2: 4.0, 3: 3.5})


def init_weights(cfg: TinyConfig) -> dict[str, torch.Tensor]:
    g = torch.Generator().manual_seed(cfg.seed)
    d, dm, V = cfg.d_model, cfg.d_mlp, cfg.vocab_size

    def normal(*shape, std):
        return torch.randn(*shape, generator=g, dtype=torch.float64) * std

    w = {
        "tok_emb": normal(V, d, std=1.0),
        "pos_emb": normal(cfg.max_positions, d, std=0.5),
        "lnf_w": torch.ones(d, dtype=torch.float64),
        "lnf_b": torch.zeros(d, dtype=torch.float64),
        "unembed": normal(d, V, std=1 / math.sqrt(d)),
        "unembed_b": torch.zeros(V, dtype=torch.float64),
    }
    for tok, bias in cfg.output_bias.items():
        w["unembed_b"][tok] = bias
    for l in range(cfg.n_layers):
        p = f"l{l}."
        w[p + "ln1_w"] = torch.ones(d, dtype=torch.float64)
        w[p + "ln1_b"] = torch.zeros(d, dtype=torch.float64)
        w[p + "wq"] = normal(d, d, std=cfg.qk_gain / math.sqrt(d))
        w[p + "wk"] = normal(d, d, std=cfg.qk_gain / math.sqrt(d))
        w[p + "wv"] = normal(d, d, std=1 / math.sqrt(d))
        w[p + "wo"] = normal(d, d, std=1 / math.sqrt(d))
        w[p + "ln2_w"] = torch.ones(d, dtype=torch.float64)
        w[p + "ln2_b"] = torch.zeros(d, dtype=torch.float64)
        w[p + "w1"] = normal(d, dm, std=1 / math.sqrt(d))
        w[p + "b1"] = torch.zeros(dm, dtype=torch.float64)
        w[p + "w2"] = normal(dm, d, std=1 / math.sqrt(dm))
        w[p + "b2"] = torch.zeros(d, dtype=torch.float64)
    return w


class TinyAdapter(ModelAdapter):
    def __init__(self, config: TinyConfig | None = None, profile: ChatProfile | None = None):
        self.config = config or TinyConfig()
        self.profile = profile or load_profile("tiny")
        spec = self.profile.tokenizer
        self.tokenizer = RegexTokenizer(spec.get("vocab_size", self.config.vocab_size), spec.get("reserved", 4))
        if self.tokenizer.vocab_size != self.config.vocab_size:
            raise ValueError("profile tokenizer and model disagree on vocabulary size")
        self.n_layers = self.config.n_layers
        self.n_heads = self.config.n_heads
        self.max_positions = self.config.max_positions
        self.weights = init_weights(self.config)

    @property
    def identity(self) -> str:
        cfg = asdict(self.config)
        cfg["output_bias"] = {str(k): v for k, v in sorted(self.config.output_bias.items())}
        body = ",".join(f"{k}={v}" for k, v in sorted(cfg.items()))
        return f"tiny({body})|profile={self.profile.profile_id}"

    def _attn(self, l: int, x: torch.Tensor, causal: torch.Tensor, last_only: bool = False):
        w, cfg = self.weights, self.config
        B, T, d = x.shape
        H = cfg.n_heads
        dh = d // H
        p = f"l{l}."
        h = F.layer_norm(x, (d,), w[p + "ln1_w"], w[p + "ln1_b"])
        k = (h @ w[p + "wk"]).view(B, T, H, dh).transpose(1, 2)
        v = (h @ w[p + "wv"]).view(B, T, H, dh).transpose(1, 2)
        if last_only:
            h = h[:, -1:]
            causal = causal[-1:]
        q = (h @ w[p + "wq"]).view(B, h.shape[1], H, dh).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        probs = torch.softmax(scores.masked_fill(~causal, float("-inf")), dim=-1)
        return probs, v

    def _mlp_residual(self, l: int, x: torch.Tensor) -> torch.Tensor:
        w = self.weights
        p = f"l{l}."
        h2 = F.layer_norm(x, (x.shape[-1],), w[p + "ln2_w"], w[p + "ln2_b"])
        return x + F.gelu(h2 @ w[p + "w1"] + w[p + "b1"]) @ w[p + "w2"] + w[p + "b2"]

    def _mix(self, l: int, probs: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        B, _, Tq, _ = probs.shape
        return (probs @ v).transpose(1, 2).reshape(B, Tq, self.config.d_model) @ self.weights[f"l{l}.wo"]

    def _unembed(self, x_last: torch.Tensor) -> torch.Tensor:
        w = self.weights
        last = F.layer_norm(x_last, (self.config.d_model,), w["lnf_w"], w["lnf_b"])
        return last @ w["unembed"] + w["unembed_b"]

    def _forward(self, ids: torch.Tensor, editors: list, capture: bool = False):
        w = self.weights
        T = ids.shape[1]
        x = w["tok_emb"][ids] + w["pos_emb"][:T]
        grad = capture and torch.is_grad_enabled()
        if grad:
            x = x.detach().requires_grad_(True)
        causal = torch.ones(T, T, dtype=torch.bool).tril()
        captured = []
        for l in range(self.config.n_layers):
            probs, v = self._attn(l, x, causal)
            for ed in editors:
                probs = ed(l, probs)
            if capture:
                if grad:
                    probs.retain_grad()
                captured.append(probs)
            x = self._mlp_residual(l, x + self._mix(l, probs, v))
        return self._unembed(x[:, -1]), captured

    def _edited_metrics(self, prompt, metric, sites, values, op, batch_size):
        """Exact single-cell edits, recomputing only what the edit can reach.

        An edit at (l, h, i, j) changes the residual stream only at row i after
        layer l; the final layer is evaluated for the last row alone.
        """
        if self.standing_plan:
            return super()._edited_metrics(prompt, metric, sites, values, op, batch_size)
        cfg = self.config
        L, H, d = cfg.n_layers, cfg.n_heads, cfg.d_model
        dh = d // H
        ids = self._ids(prompt)
        T = ids.shape[1]
        causal = torch.ones(T, T, dtype=torch.bool).tril()
        with torch.no_grad():
            x = self.weights["tok_emb"][ids] + self.weights["pos_emb"][:T]
            trace = []
            for l in range(L):
                probs, v = self._attn(l, x, causal)
                mid = x + self._mix(l, probs, v)
                out = self._mlp_residual(l, mid)
                trace.append((probs[0], v[0], mid[0], out[0]))
                x = out
            out = np.empty(len(sites))
            st = torch.as_tensor(sites)
            vals = torch.as_tensor(values)
            for start in range(0, len(sites), batch_size):
                sl = slice(start, start + batch_size)
                s, val = st[sl], vals[sl]
                res = torch.empty(len(s), cfg.vocab_size, dtype=torch.float64)
                for l in range(L):
                    rows = torch.nonzero(s[:, 0] == l).flatten()
                    if rows.numel() == 0:
                        continue
                    probs, v, mid, after = trace[l]
                    _, h, i, j = s[rows].unbind(1)
                    a = probs[h, i, j]
                    new = {"scale": a * val[rows], "add": a + val[rows], "set": val[rows]}[op]
                    dz = (new - a)[:, None] * v[h, j]
                    wo = self.weights[f"l{l}.wo"].view(H, dh, d)[h]
                    row_mid = mid[i] + torch.einsum("nk,nkd->nd", dz, wo)
                    xs = after.expand(len(rows), T, d).clone()
                    xs[torch.arange(len(rows)), i] = self._mlp_residual(l, row_mid)
                    res[rows] = self._run_from(l + 1, xs, causal)
                out[sl] = metric_from_logits(res, self.profile, metric).numpy()
        return out

    def _run_from(self, start: int, x: torch.Tensor, causal: torch.Tensor) -> torch.Tensor:
        L = self.config.n_layers
        for l in range(start, L):
            last = l == L - 1
            probs, v = self._attn(l, x, causal, last_only=last)
            if last:
                x = self._mlp_residual(l, x[:, -1:] + self._mix(l, probs, v))
            else:
                x = self._mlp_residual(l, x + self._mix(l, probs, v))
        return self._unembed(x[:, -1])
