"""Render samples into token ids with a span map."""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass

import numpy as np

from ..toolset.types import Sample, ToolInstance
from .profiles import ChatProfile, SpanSpec
from .tokenize import Tokenizer

CONDITIONS = ("base", "prompt_baseline")
BASELINE_SPAN = "prompt-baseline"


class SpanBoundaryError(ValueError):
    pass


@dataclass(frozen=True)
class SpanMap:
    spans: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        pos = 0
        for name, start, end in self.spans:
            if start != pos or end < start:
                raise ValueError(f"span {name!r} [{start},{end}) breaks contiguity at {pos}")
            pos = end

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s[0] for s in self.spans)

    @property
    def length(self) -> int:
        return self.spans[-1][2] if self.spans else 0

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"span {name!r} not in span map {self.names}") from None

    def range(self, name: str) -> tuple[int, int]:
        _, start, end = self.spans[self.index(name)]
        return start, end

    def lengths(self) -> list[int]:
        return [e - s for _, s, e in self.spans]

    def membership(self) -> np.ndarray:
        """One-hot (positions x spans) matrix."""
        out = np.zeros((self.length, len(self.spans)))
        for i, (_, s, e) in enumerate(self.spans):
            out[s:e, i] = 1.0
        return out

    def to_json(self) -> list:
        return [list(s) for s in self.spans]

    @classmethod
    def from_json(cls, rows) -> "SpanMap":
        return cls(tuple((str(n), int(s), int(e)) for n, s, e in rows))


@dataclass(frozen=True)
class RenderedPrompt:
    token_ids: tuple[int, ...]
    span_map: SpanMap
    sample_id: str
    profile_id: str
    text: str
    offsets: tuple[tuple[int, int], ...]
    span_texts: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.token_ids)


def tool_definition(tool: ToolInstance, fmt: dict) -> str:
    schema = tool.to_schema()
    kind = fmt.get("kind", "qwen3")
    if kind == "qwen3":
        return json.dumps({"type": "function", "function": schema}, ensure_ascii=False) + "\n"
    if kind == "json_list":
        return json.dumps([schema], ensure_ascii=False, indent=fmt.get("indent"))
    if kind == "compact":
        return f"{tool.name}: {tool.description} ({', '.join(tool.param_names)})\n"
    raise ValueError(f"unknown tool format {kind!r}")


def span_texts(sample: Sample, profile: ChatProfile, condition: str = "base") -> list[tuple[str, str]]:
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    slots = {"tools": tool_definition(sample.tool, profile.tool_format), "query": sample.query.text}
    out = []
    for spec in profile.spans:
        if condition == "prompt_baseline" and profile.prompt_baseline and spec.name == profile.prompt_baseline["before"]:
            pb = profile.prompt_baseline
            out.append((BASELINE_SPAN, pb.get("separator", "") + pb["text"]))
        out.append((spec.name, _fill(spec, slots, profile.variables)))
    return out


def _fill(spec: SpanSpec, slots: dict[str, str], variables: dict[str, str]) -> str:
    if spec.literal is not None:
        return spec.literal
    if spec.slot is not None:
        return slots[spec.slot]
    return spec.template.format(**variables)


def assign_spans(
    pieces: list[tuple[str, str]], offsets: list[tuple[int, int]], strict: bool = False
) -> SpanMap:
    """Map tokens to spans: a token belongs to the span holding its first character.

    In strict mode a token that crosses a span boundary is an error.
    """
    bounds, pos = [], 0
    for _, text in pieces:
        bounds.append((pos, pos + len(text)))
        pos += len(text)
    starts = [o[0] for o in offsets]
    if strict:
        for name, (_, ce) in zip((p[0] for p in pieces), bounds):
            for t, (ts, te) in enumerate(offsets):
                if ts < ce < te:
                    raise SpanBoundaryError(
                        f"token {t} [{ts},{te}) straddles the end of span {name!r} at char {ce}"
                    )
    spans = []
    for (name, _), (cs, ce) in zip(pieces, bounds):
        spans.append((name, bisect.bisect_left(starts, cs), bisect.bisect_left(starts, ce)))
    # zero-width trailing tokens still belong to the last span
    if spans:
        name, s, _ = spans[-1]
        spans[-1] = (name, s, len(offsets))
    return SpanMap(tuple(spans))


def render_prompt(
    sample: Sample,
    profile: ChatProfile,
    tokenizer: Tokenizer,
    condition: str = "base",
    strict: bool = False,
) -> RenderedPrompt:
    pieces = span_texts(sample, profile, condition)
    text = "".join(t for _, t in pieces)
    ids, offsets = tokenizer.encode_with_offsets(text)
    span_map = assign_spans(pieces, offsets, strict)
    return RenderedPrompt(
        token_ids=tuple(ids),
        span_map=span_map,
        sample_id=sample.sample_id,
        profile_id=profile.profile_id,
        text=text,
        offsets=tuple(tuple(o) for o in offsets),
        span_texts=tuple(t for _, t in pieces),
    )
