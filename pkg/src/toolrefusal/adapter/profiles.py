"""Chat profiles: prompt layout as an ordered list of named spans plus the
token ids that mark invocation and refusal."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

SLOTS = ("tools", "query")


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class SpanSpec:
    """One span: a literal, a named slot, or a template over profile variables."""

    name: str
    literal: str | None = None
    slot: str | None = None
    template: str | None = None

    @classmethod
    def from_json(cls, raw) -> "SpanSpec":
        name, body = raw
        if isinstance(body, str):
            return cls(name, literal=body)
        if "slot" in body:
            if body["slot"] not in SLOTS:
                raise ProfileError(f"span {name!r}: unknown slot {body['slot']!r}")
            return cls(name, slot=body["slot"])
        if "template" in body:
            return cls(name, template=body["template"])
        raise ProfileError(f"span {name!r}: need a literal, slot or template")

    def to_json(self):
        if self.literal is not None:
            return [self.name, self.literal]
        if self.slot is not None:
            return [self.name, {"slot": self.slot}]
        return [self.name, {"template": self.template}]


@dataclass(frozen=True)
class ChatProfile:
    profile_id: str
    tool_call_token_id: int
    refusal_token_ids: tuple[int, ...]
    spans: tuple[SpanSpec, ...]
    tool_format: dict[str, Any] = field(default_factory=lambda: {"kind": "qwen3"})
    tokenizer: dict[str, Any] = field(default_factory=dict)
    verified: bool = False
    prompt_baseline: dict[str, Any] | None = None
    variables: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.refusal_token_ids:
            raise ProfileError(f"{self.profile_id}: refusal token set is empty")
        if self.tool_call_token_id in self.refusal_token_ids:
            raise ProfileError(f"{self.profile_id}: tool-call token {self.tool_call_token_id} is also a refusal token")
        names = [s.name for s in self.spans]
        if len(set(names)) != len(names):
            raise ProfileError(f"{self.profile_id}: duplicate span names")
        for slot in SLOTS:
            if sum(s.slot == slot for s in self.spans) != 1:
                raise ProfileError(f"{self.profile_id}: slot {slot!r} must appear exactly once")

    @property
    def span_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.spans)

    def with_variables(self, **values: str) -> "ChatProfile":
        merged = {**self.variables, **values}
        return replace(self, variables=merged)

    def to_json(self) -> dict:
        return {
            "profile_id": self.profile_id,
            "tool_call_token_id": self.tool_call_token_id,
            "refusal_token_ids": list(self.refusal_token_ids),
            "tool_format": self.tool_format,
            "tokenizer": self.tokenizer,
            "verified": self.verified,
            "spans": [s.to_json() for s in self.spans],
            "prompt_baseline": self.prompt_baseline,
            "variables": self.variables,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ChatProfile":
        return cls(
            profile_id=d["profile_id"],
            tool_call_token_id=int(d["tool_call_token_id"]),
            refusal_token_ids=tuple(int(t) for t in d["refusal_token_ids"]),
            spans=tuple(SpanSpec.from_json(s) for s in d["spans"]),
            tool_format=d.get("tool_format", {"kind": "qwen3"}),
            tokenizer=d.get("tokenizer", {}),
            verified=bool(d.get("verified", False)),
            prompt_baseline=d.get("prompt_baseline"),
            variables=dict(d.get("variables", {})),
        )


def bundled_profile_ids() -> list[str]:
    root = resources.files("toolrefusal.adapter").joinpath("profiles")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_profile(name_or_path: str | Path) -> ChatProfile:
    """Load a bundled profile by id, or any profile file by path."""
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        return ChatProfile.from_json(json.loads(path.read_text("utf-8")))
    res = resources.files("toolrefusal.adapter").joinpath(f"profiles/{name_or_path}.json")
    if not res.is_file():
        raise ProfileError(f"unknown profile {name_or_path!r}; bundled: {bundled_profile_ids()}")
    return ChatProfile.from_json(json.loads(res.read_text("utf-8")))
