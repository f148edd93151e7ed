"""LLM-backed generation of queries and extension parameters, with validation.

Backends only have to answer :class:`GenerationRequest` objects with raw text;
everything that decides whether an answer is usable lives here.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Protocol

from .types import (
    PLACEHOLDER,
    VALUE_TYPES,
    Attribute,
    ParamSpec,
    Query,
    ToolInstance,
    ToolsetError,
    ToolTemplate,
)

logger = logging.getLogger(__name__)

RETRY_BUDGET = 3
QUERIES_PER_TOOL = 5

QUERY_PROMPT = """Your task is to generate a set of diverse user queries for the given tool.
Note that the queries you generate represent real user queries directed at an LLM assistant. The LLM assistant will need to call the provided tool to answer these queries.

Rules for Query Generation:
1. Derived Class Inclusion: Every generated query must contain the exact derived class name provided.
2. Parameter Constraints: 
  - Each query must explicitly contain information for all and only the parameters of the
    tool.
  - The expected parameter values must be specific and realistic. Avoid vague values.
3. No Attachments: Do not assume or pretend that files, images, audio clips, videos, or any other attachments are being provided.
4. Quality: Generated queries must be solvable with the tool without requiring further clarification.
5. Diversity:
  - You should generate at least 5 distinct queries.
  - The queries should have varied sentence structures (e.g., imperative commands,
    interrogative queries).
  - The parameter values across different queries should also be diverse, covering a wide
    range of realistic scenarios, if applicable.

Output Format:
Return a single JSON array as follows:
[ {{ "query": "First generated query..." }}, {{ "query": "Second generated query..." }}, ... ]

[EXAMPLE START]
{few_shot}
[EXAMPLE END]

Now, generate queries for the following tool.

Tool Definition:
{tool}

Derived Class Name:
{subclass}"""

EXTENSION_PROMPT = """Your task is to propose a set of new, additional parameters for the given tool template.
These parameters should enrich the tools's functionality while remaining applicable across all
derived classes.

You are Given:
1. Tool Template: An tool schema that uses '<class>' as a placeholder for a specific derived class.
2. List of Derived Classes: A list of the specific derived class names that will eventually replace '<class>'.
3. Base Class Description: A brief explanation of the base class corresponding to the tool template.

Design Principles:
- The tool's purpose must remain clear and unambiguous after adding new parameters.
- All parameter values would be provided by the user when invoke the tool, not generated or
  assumed by the LLM assistant. The LLM acts as a bridge to execute the tool with user-
  provided information, not as a param value generator.

Rules:
1. Universally Applicable: Each proposed parameter must be universally applicable and make sense for all derived classes provided.
2. Uniqueness: The proposed parameters must be entirely new. They cannot duplicate the functionality or name of any parameters already present in the tool template.
3. Placeholder Usage: Parameter names must be generic and must not contain the '<class>' placeholder. Parameter description, however, should contain the '<class>' placeholder if it is
contextually appropriate when replaced with a specific subclass.
4. Quantity: Generate at least four distinct and meaningful parameters.
5. Type: New parameters should be simple types: string, integer, number, boolean or array of simple types. Do not propose complex nested structures.

Output Format:
Return a single JSON object as follows:
{{"parameter_name_1": {{"type": "string", "description": "Description for param 1."}}, "parameter_name_2": {{"type": "integer", "description": "Description for param 2."}}, ...}}

[EXAMPLE START]
{few_shot}
[EXAMPLE END]

Now, generate new parameters based on the following inputs.

Tool Template:
{tool_template}

List of Derived Classes:
{derived_classes}

Base Class Description:
{base_description}"""

# Follow-up used only when a backend returns bare query strings: the model is
# asked to point out, verbatim, which span of the query fills each parameter.
ATTRIBUTE_PROMPT = """For the user query below, copy the exact text span that provides the value of each tool parameter.
Return a single JSON object mapping every parameter name to its span, copied verbatim from the query.

Tool Definition:
{tool}

User Query:
{query}"""

DEFAULT_QUERY_FEW_SHOT = """Tool Definition:
{"name": "find_basketball_athlete", "description": "Find the profile information of a basketball athlete based on their full name.", "parameters": {"type": "object", "properties": {"name": {"type": "string", "description": "The full name of the basketball athlete."}}, "required": ["name"]}}

Derived Class Name:
basketball

Output:
[{"query": "Can you pull up the profile of the basketball athlete Stephen Curry?"}, {"query": "Show me the basketball athlete profile for Nikola Jokic."}]"""

DEFAULT_EXTENSION_FEW_SHOT = """Tool Template:
{"name": "find_<class>_athlete", "description": "Find the profile information of a <class> athlete based on their full name.", "parameters": {"type": "object", "properties": {"name": {"type": "string", "description": "The full name of the <class> athlete."}}, "required": ["name"]}}

Output:
{"season": {"type": "integer", "description": "The season of the <class> athlete's statistics."}, "team_name": {"type": "string", "description": "The current team of the <class> athlete."}, "include_career_stats": {"type": "boolean", "description": "Whether to include career statistics."}, "position": {"type": "string", "description": "The playing position of the <class> athlete."}}"""


@dataclass(frozen=True)
class GenerationRequest:
    kind: str  # "queries" | "attributes" | "extension"
    prompt: str
    meta: dict[str, Any] = field(default_factory=dict, compare=False, hash=False)
    attempt: int = 0


class GenerationBackend(Protocol):
    def complete(self, request: GenerationRequest) -> str: ...


class GenerationFailure(ToolsetError):
    """Raised when a backend keeps producing unusable output."""


@dataclass
class QueryReport:
    tool_id: str
    requested: int
    accepted: int
    attempts: int
    rejections: list[str] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return self.accepted >= self.requested


def tool_json(tool: ToolInstance) -> str:
    return json.dumps(tool.to_schema(), ensure_ascii=False)


def render_query_prompt(tool: ToolInstance, few_shot: str = DEFAULT_QUERY_FEW_SHOT) -> str:
    return QUERY_PROMPT.format(few_shot=few_shot, tool=tool_json(tool), subclass=tool.derived_class)


def render_extension_prompt(
    template: ToolTemplate, base_description: str | None = None, few_shot: str = DEFAULT_EXTENSION_FEW_SHOT
) -> str:
    tool = template.to_json()["tool_template"]
    return EXTENSION_PROMPT.format(
        few_shot=few_shot,
        tool_template=json.dumps(tool, ensure_ascii=False),
        derived_classes=json.dumps(list(template.derived_classes), ensure_ascii=False),
        base_description=base_description or template.base_class,
    )


def _loads(raw: str) -> Any:
    text = raw.strip()
    fence = re.match(r"^```(?:json)?\s*(.*?)\s*```$", text, flags=re.DOTALL)
    if fence:
        text = fence.group(1)
    return json.loads(text)


def _contains(haystack: str, needle: str) -> bool:
    return needle.lower() in haystack.lower()


def validate_query(text: str, attributes: dict[str, str], tool: ToolInstance) -> str | None:
    """Return a rejection reason, or None if the generated query is usable."""
    if not text.strip():
        return "empty query"
    if not _contains(text, tool.derived_class):
        return f"derived class {tool.derived_class!r} not mentioned"
    names = set(tool.param_names)
    missing = sorted(names - set(attributes))
    if missing:
        return f"no attribute for parameters {missing}"
    extra = sorted(set(attributes) - names)
    if extra:
        return f"attributes for unknown parameters {extra}"
    for name, value in attributes.items():
        if not isinstance(value, str) or not value.strip():
            return f"empty attribute for {name!r}"
        if not _contains(text, value):
            return f"attribute {value!r} for {name!r} not found in query"
    return None


def _attributes_of(item: dict, tool: ToolInstance, backend: GenerationBackend, attempt: int) -> dict:
    attrs = item.get("attributes")
    if isinstance(attrs, list):
        return {a["param"]: a["text"] for a in attrs}
    if isinstance(attrs, dict):
        return attrs
    req = GenerationRequest(
        "attributes",
        ATTRIBUTE_PROMPT.format(tool=tool_json(tool), query=item["query"]),
        {"tool": tool.to_json(), "query": item["query"]},
        attempt,
    )
    out = _loads(backend.complete(req))
    if not isinstance(out, dict):
        raise ValueError("attribute labelling did not return an object")
    return out


def generate_queries(
    tool: ToolInstance,
    backend: GenerationBackend,
    n: int = QUERIES_PER_TOOL,
    budget: int = RETRY_BUDGET,
    few_shot: str = DEFAULT_QUERY_FEW_SHOT,
) -> tuple[list[Query], QueryReport]:
    """Ask the backend for queries until ``n`` pass validation or the budget runs out."""
    if n < 1:
        raise ToolsetError("n must be >= 1")
    prompt = render_query_prompt(tool, few_shot)
    report = QueryReport(tool.instance_id, n, 0, 0)
    accepted: list[tuple[str, dict[str, str]]] = []
    for attempt in range(budget):
        report.attempts = attempt + 1
        req = GenerationRequest("queries", prompt, {"tool": tool.to_json(), "n": n}, attempt)
        try:
            items = _loads(backend.complete(req))
            if not isinstance(items, list):
                raise ValueError("expected a JSON array")
        except (ValueError, TypeError) as exc:
            report.rejections.append(f"attempt {attempt}: malformed response ({exc})")
            continue
        for item in items:
            try:
                text = item["query"]
                attrs = _attributes_of(item, tool, backend, attempt)
            except (KeyError, TypeError, ValueError) as exc:
                report.rejections.append(f"attempt {attempt}: unusable item ({exc})")
                continue
            reason = validate_query(text, attrs, tool)
            if reason is None and any(text == t for t, _ in accepted):
                reason = "duplicate query"
            if reason is not None:
                report.rejections.append(f"attempt {attempt}: {reason}")
                continue
            accepted.append((text, attrs))
            if len(accepted) == n:
                break
        if len(accepted) >= n:
            break
    report.accepted = len(accepted)
    if not report.complete:
        logger.warning("%s: %d/%d queries after %d attempts", tool.instance_id, report.accepted, n, report.attempts)
    queries = [
        Query(
            query_id=f"{tool.instance_id}#q{i}",
            text=text,
            origin_instance_id=tool.instance_id,
            attributes=tuple(Attribute(attrs[p], p) for p in tool.param_names),
        )
        for i, (text, attrs) in enumerate(accepted)
    ]
    for q in queries:
        q.check_covers(tool)
    return queries, report


def validate_extension(data: Any, template: ToolTemplate, minimum: int = 4) -> list[ParamSpec]:
    if not isinstance(data, dict):
        raise ValueError("expected a JSON object of parameters")
    params = []
    for name, prop in data.items():
        if PLACEHOLDER in name:
            raise ValueError(f"parameter name {name!r} contains the placeholder")
        if name in template.param_names:
            raise ValueError(f"parameter {name!r} already exists")
        if not isinstance(prop, dict) or prop.get("type") not in VALUE_TYPES:
            raise ValueError(f"parameter {name!r} is not a simple type")
        params.append(ParamSpec.from_schema(name, prop))
    if len(params) < minimum:
        raise ValueError(f"only {len(params)} parameters proposed, need {minimum}")
    return params


def propose_extension_params(
    template: ToolTemplate,
    backend: GenerationBackend,
    budget: int = RETRY_BUDGET,
    base_description: str | None = None,
    few_shot: str = DEFAULT_EXTENSION_FEW_SHOT,
) -> list[ParamSpec]:
    prompt = render_extension_prompt(template, base_description, few_shot)
    errors = []
    for attempt in range(budget):
        req = GenerationRequest("extension", prompt, {"template": template.to_json()}, attempt)
        try:
            return validate_extension(_loads(backend.complete(req)), template)
        except (ValueError, TypeError, ToolsetError) as exc:
            errors.append(str(exc))
    raise GenerationFailure(f"{template.template_id}: no valid extension after {budget} attempts: {errors}")
