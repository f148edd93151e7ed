"""Value types for tool templates, instantiated tools, queries and samples."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Any, Literal

PLACEHOLDER = "<class>"
VALUE_TYPES = ("string", "integer", "number", "boolean", "array")
SAMPLE_KINDS = ("sibling", "random_pair", "structural_cf", "semantic_cf", "flattened")

_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

SampleKind = Literal["sibling", "random_pair", "structural_cf", "semantic_cf", "flattened"]


class ToolsetError(ValueError):
    """Raised when a toolset object or transformation violates its contract."""


def class_slug(derived_class: str) -> str:
    """Identifier-safe form of a derived class, used inside function names."""
    slug = re.sub(r"[^a-z0-9]+", "_", derived_class.lower()).strip("_")
    return slug or "cls"


@dataclass(frozen=True)
class ParamSpec:
    name: str
    value_type: str
    description: str
    item_type: str = "string"

    def __post_init__(self):
        if not _IDENT.match(self.name):
            raise ToolsetError(f"parameter name {self.name!r} is not an identifier")
        if PLACEHOLDER in self.name:
            raise ToolsetError(f"parameter name {self.name!r} contains {PLACEHOLDER}")
        if self.value_type not in VALUE_TYPES:
            raise ToolsetError(
                f"parameter {self.name!r} has non-flat type {self.value_type!r}"
            )

    def to_schema(self) -> dict[str, Any]:
        prop: dict[str, Any] = {"type": self.value_type, "description": self.description}
        if self.value_type == "array":
            prop["items"] = {"type": self.item_type}
        return prop

    @classmethod
    def from_schema(cls, name: str, prop: dict[str, Any]) -> ParamSpec:
        value_type = prop.get("type")
        if value_type == "array":
            item_type = prop.get("items", {}).get("type", "string")
            if item_type not in VALUE_TYPES[:4]:
                raise ToolsetError(f"array parameter {name!r} has nested items")
            return cls(name, "array", prop.get("description", ""), item_type)
        return cls(name, value_type, prop.get("description", ""))

    def instantiate(self, derived_class: str) -> ParamSpec:
        return replace(self, description=self.description.replace(PLACEHOLDER, derived_class))


def _check_unique(params: tuple[ParamSpec, ...], owner: str) -> None:
    seen = set()
    for p in params:
        if p.name in seen:
            raise ToolsetError(f"duplicate parameter {p.name!r} in {owner}")
        seen.add(p.name)


def params_schema(params: tuple[ParamSpec, ...]) -> dict[str, Any]:
    return {
        "type": "object",
        "properties": {p.name: p.to_schema() for p in params},
        "required": [p.name for p in params],
    }


def params_from_schema(schema: dict[str, Any], owner: str) -> tuple[ParamSpec, ...]:
    props = schema.get("properties", {})
    required = set(schema.get("required", list(props)))
    missing = [name for name in props if name not in required]
    if missing:
        # every parameter is mandated as required in the corpus
        raise ToolsetError(f"{owner}: optional parameters not allowed: {missing}")
    for name, prop in props.items():
        if prop.get("type") == "object":
            raise ToolsetError(f"{owner}: nested object parameter {name!r}")
    return tuple(ParamSpec.from_schema(name, prop) for name, prop in props.items())


@dataclass(frozen=True)
class ToolTemplate:
    template_id: str
    base_class: str
    derived_classes: tuple[str, ...]
    name_pattern: str
    description_pattern: str
    parameters: tuple[ParamSpec, ...]
    source_benchmark: str = "synthetic-seed"
    extension_pool: tuple[ParamSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "derived_classes", tuple(self.derived_classes))
        object.__setattr__(self, "parameters", tuple(self.parameters))
        object.__setattr__(self, "extension_pool", tuple(self.extension_pool))
        tid = self.template_id
        if self.name_pattern.count(PLACEHOLDER) != 1:
            raise ToolsetError(f"{tid}: name pattern must contain {PLACEHOLDER} exactly once")
        if PLACEHOLDER not in self.description_pattern:
            raise ToolsetError(f"{tid}: description pattern lacks {PLACEHOLDER}")
        if len(self.derived_classes) < 2:
            raise ToolsetError(f"{tid}: need at least two derived classes")
        if len(set(self.derived_classes)) != len(self.derived_classes):
            raise ToolsetError(f"{tid}: derived classes are not distinct")
        _check_unique(self.parameters, tid)
        taken = {p.name for p in self.parameters}
        clash = [p.name for p in self.extension_pool if p.name in taken]
        if clash:
            raise ToolsetError(f"{tid}: extension parameters collide with {clash}")

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.parameters)

    def to_json(self) -> dict[str, Any]:
        data = {
            "template_id": self.template_id,
            "base_class": self.base_class,
            "derived_class": list(self.derived_classes),
            "source_benchmark": self.source_benchmark,
            "tool_template": {
                "name": self.name_pattern,
                "description": self.description_pattern,
                "parameters": params_schema(self.parameters),
            },
        }
        if self.extension_pool:
            data["extension_parameters"] = {p.name: p.to_schema() for p in self.extension_pool}
        return data

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> ToolTemplate:
        tid = data["template_id"]
        tool = data["tool_template"]
        ext = data.get("extension_parameters", {})
        return cls(
            template_id=tid,
            base_class=data["base_class"],
            derived_classes=tuple(data["derived_class"]),
            name_pattern=tool["name"],
            description_pattern=tool["description"],
            parameters=params_from_schema(tool["parameters"], tid),
            source_benchmark=data.get("source_benchmark", "unknown"),
            extension_pool=tuple(ParamSpec.from_schema(n, p) for n, p in ext.items()),
        )


@dataclass(frozen=True)
class ToolInstance:
    instance_id: str
    template_id: str
    derived_class: str
    name: str
    description: str
    parameters: tuple[ParamSpec, ...]
    # parameters moved into the description by flattening
    absorbed: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "parameters", tuple(self.parameters))
        object.__setattr__(self, "absorbed", tuple(self.absorbed))
        if PLACEHOLDER in self.name or PLACEHOLDER in self.description:
            raise ToolsetError(f"{self.instance_id}: unresolved {PLACEHOLDER} placeholder")
        _check_unique(self.parameters, self.instance_id)

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.parameters)

    def to_schema(self) -> dict[str, Any]:
        """Function schema as shown to the model."""
        return {
            "name": self.name,
            "description": self.description,
            "parameters": params_schema(self.parameters),
        }

    def to_json(self) -> dict[str, Any]:
        data = {
            "instance_id": self.instance_id,
            "template_id": self.template_id,
            "derived_class": self.derived_class,
            **self.to_schema(),
        }
        if self.absorbed:
            data["absorbed"] = list(self.absorbed)
        return data

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> ToolInstance:
        return cls(
            instance_id=data["instance_id"],
            template_id=data["template_id"],
            derived_class=data["derived_class"],
            name=data["name"],
            description=data["description"],
            parameters=params_from_schema(data["parameters"], data["instance_id"]),
            absorbed=tuple(data.get("absorbed", ())),
        )


@dataclass(frozen=True)
class Attribute:
    text: str
    target_param: str


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str
    origin_instance_id: str
    attributes: tuple[Attribute, ...]

    def __post_init__(self):
        attrs = tuple(
            a if isinstance(a, Attribute) else Attribute(*a) for a in self.attributes
        )
        object.__setattr__(self, "attributes", attrs)
        for a in attrs:
            if not a.text:
                raise ToolsetError(f"{self.query_id}: empty attribute text")

    def check_covers(self, tool: ToolInstance) -> None:
        """Every parameter of ``tool`` is targeted by exactly one attribute."""
        targets = [a.target_param for a in self.attributes]
        for name in tool.param_names:
            if targets.count(name) != 1:
                raise ToolsetError(
                    f"{self.query_id}: parameter {name!r} targeted {targets.count(name)} times"
                )
        extra = set(targets) - set(tool.param_names)
        if extra:
            raise ToolsetError(f"{self.query_id}: attributes target unknown params {sorted(extra)}")

    def to_json(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "text": self.text,
            "origin_instance_id": self.origin_instance_id,
            "attributes": [{"text": a.text, "param": a.target_param} for a in self.attributes],
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> Query:
        return cls(
            query_id=data["query_id"],
            text=data["text"],
            origin_instance_id=data["origin_instance_id"],
            attributes=tuple(Attribute(a["text"], a["param"]) for a in data["attributes"]),
        )


@dataclass(frozen=True)
class Lineage:
    parent_id: str
    strategy: str


@dataclass(frozen=True)
class CompatRelation:
    """Declared (attribute index, parameter index) pairs that are validly assignable."""

    pairs: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "pairs", frozenset(self.pairs))

    @classmethod
    def from_labels(cls, attributes, parameters) -> CompatRelation:
        """Assignability from the target-parameter labels carried by each attribute."""
        names = [p.name if isinstance(p, ParamSpec) else p for p in parameters]
        pairs = set()
        for i, a in enumerate(attributes):
            target = a.target_param if isinstance(a, Attribute) else a
            for j, name in enumerate(names):
                if name == target:
                    pairs.add((i, j))
        return cls(frozenset(pairs))


@dataclass(frozen=True)
class Sample:
    sample_id: str
    tool: ToolInstance
    query: Query
    kind: str
    alignment_label: int
    lineage: Lineage | None = None

    def __post_init__(self):
        if self.kind not in SAMPLE_KINDS:
            raise ToolsetError(f"{self.sample_id}: unknown sample kind {self.kind!r}")
        if self.alignment_label not in (0, 1):
            raise ToolsetError(f"{self.sample_id}: alignment label must be 0 or 1")

    @property
    def template_id(self) -> str:
        return self.tool.template_id

    def live_attributes(self) -> tuple[Attribute, ...]:
        """Query attributes still to be assigned (flattening absorbs some)."""
        absorbed = set(self.tool.absorbed)
        return tuple(a for a in self.query.attributes if a.target_param not in absorbed)

    def compat(self) -> CompatRelation:
        return CompatRelation.from_labels(self.live_attributes(), self.tool.parameters)

    def to_json(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "kind": self.kind,
            "lineage": (
                None
                if self.lineage is None
                else {"parent_id": self.lineage.parent_id, "strategy": self.lineage.strategy}
            ),
            "tool": self.tool.to_json(),
            "query": self.query.to_json(),
            "alignment_label": self.alignment_label,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> Sample:
        lin = data.get("lineage")
        return cls(
            sample_id=data["sample_id"],
            tool=ToolInstance.from_json(data["tool"]),
            query=Query.from_json(data["query"]),
            kind=data["kind"],
            alignment_label=int(data["alignment_label"]),
            lineage=None if lin is None else Lineage(lin["parent_id"], lin["strategy"]),
        )
