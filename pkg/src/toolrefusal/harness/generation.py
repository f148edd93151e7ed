"""Generation backends: deterministic stub, HTTP chat-completions client, and
transcript recording/replay for byte-identical corpus rebuilds."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
import zlib
from pathlib import Path

from ..toolset.queries import GenerationRequest

logger = logging.getLogger(__name__)

API_KEY_ENV = "TOOLREFUSAL_API_KEY"
API_BASE_ENV = "TOOLREFUSAL_API_BASE"

_STRING_VALUES = [
    "Aurora Lane", "Marlow Heights", "Kestrel Point", "Juniper Row", "Solano Bay",
    "Halden Park", "Tamsin Cole", "Orrin Vale", "Petra Quinn", "Ilse Navarro",
    "Corvin Hale", "Delphine Moss", "Ravenna", "Oakridge", "Brightwater",
]
_FRAMES = [
    "Please use the {cls} option with {slots}.",
    "Can you handle this for {cls}: {slots}?",
    "I need the {cls} lookup done where {slots}.",
    "For {cls}, run it with {slots}.",
    "Could you check {cls} given {slots}?",
]


def _pick(seq, *keys) -> str:
    h = zlib.crc32("\x1f".join(str(k) for k in keys).encode("utf-8"))
    return seq[h % len(seq)]


def stub_value(value_type: str, tool: str, param: str, index: int) -> str:
    """Deterministic, type-appropriate surface value for one query slot."""
    h = zlib.crc32(f"{tool}|{param}|{index}".encode("utf-8"))
    if value_type == "integer":
        return str(2 + h % 97)
    if value_type == "number":
        return f"{1 + h % 500}.{h % 10}5"
    if value_type == "boolean":
        return "yes" if h % 2 else "no"
    if value_type == "array":
        return f"{_pick(_STRING_VALUES, tool, param, index)} and {_pick(_STRING_VALUES, param, tool, index)}"
    return f"{_pick(_STRING_VALUES, tool, param, index)} {index + 1}"


class StubBackend:
    """Offline backend whose answers are filled-in templates that pass validation.

    ``drop_param_attempts`` drops one attribute per query on the first N
    attempts; ``malformed_attempts`` answers the first N attempts with non-JSON.
    Both exercise the retry path.
    """

    def __init__(self, drop_param_attempts: int = 0, malformed_attempts: int = 0):
        self.drop_param_attempts = drop_param_attempts
        self.malformed_attempts = malformed_attempts
        self.calls = 0

    def complete(self, request: GenerationRequest) -> str:
        self.calls += 1
        if request.attempt < self.malformed_attempts:
            return "Sure! Here are some queries: (not json)"
        if request.kind == "queries":
            return json.dumps(self._queries(request))
        if request.kind == "extension":
            return json.dumps(self._extension(request))
        if request.kind == "attributes":
            return json.dumps({})
        raise ValueError(f"stub cannot answer {request.kind!r}")

    def _queries(self, request: GenerationRequest) -> list[dict]:
        tool = request.meta["tool"]
        n = request.meta.get("n", 5)
        cls = tool["derived_class"]
        props = tool["parameters"]["properties"]
        items = []
        for i in range(n):
            idx = request.attempt * n + i
            attrs, slots = [], []
            for pname, prop in props.items():
                value = stub_value(prop["type"], tool["name"], pname, idx)
                attrs.append({"text": value, "param": pname})
                slots.append(f"{pname.replace('_', ' ')} {value}")
            if request.attempt < self.drop_param_attempts and attrs:
                attrs = attrs[:-1]
            frame = _FRAMES[idx % len(_FRAMES)]
            items.append({"query": frame.format(cls=cls, slots=", ".join(slots) or "no details"), "attributes": attrs})
        return items

    def _extension(self, request: GenerationRequest) -> dict:
        template = request.meta["template"]
        ext = template.get("extension_parameters")
        if ext:
            return ext
        existing = template["tool_template"]["parameters"]["properties"]
        generic = {
            "language": {"type": "string", "description": "Response language for the <class> request."},
            "max_results": {"type": "integer", "description": "Maximum number of <class> results."},
            "include_details": {"type": "boolean", "description": "Whether to include extra <class> details."},
            "region": {"type": "string", "description": "Region that the <class> request applies to."},
            "notes": {"type": "string", "description": "Free-form notes for the request."},
        }
        return {k: v for k, v in generic.items() if k not in existing}


def request_key(request: GenerationRequest) -> str:
    h = hashlib.sha256()
    h.update(request.kind.encode())
    h.update(b"\x00")
    h.update(str(request.attempt).encode())
    h.update(b"\x00")
    h.update(request.prompt.encode("utf-8"))
    return h.hexdigest()


class RecordingBackend:
    """Wraps a backend and appends every exchange to a JSONL transcript."""

    def __init__(self, inner, transcript: Path):
        self.inner = inner
        self.transcript = Path(transcript)
        self.transcript.parent.mkdir(parents=True, exist_ok=True)

    def complete(self, request: GenerationRequest) -> str:
        response = self.inner.complete(request)
        row = {"key": request_key(request), "kind": request.kind, "attempt": request.attempt, "response": response}
        with open(self.transcript, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
        return response


class TranscriptMiss(KeyError):
    pass


class ReplayBackend:
    """Answers requests from a recorded transcript; never touches the network."""

    def __init__(self, transcript: Path):
        """``transcript`` is a JSONL file or a directory of them."""
        self.responses: dict[str, str] = {}
        transcript = Path(transcript)
        files = sorted(transcript.glob("*.jsonl")) if transcript.is_dir() else [transcript]
        for path in files:
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        row = json.loads(line)
                        self.responses.setdefault(row["key"], row["response"])

    def complete(self, request: GenerationRequest) -> str:
        key = request_key(request)
        try:
            return self.responses[key]
        except KeyError:
            raise TranscriptMiss(f"no recorded response for {request.kind} request {key[:12]}") from None


class HTTPBackend:
    """OpenAI-compatible chat-completions client. The key comes from the environment."""

    def __init__(
        self,
        model: str = "gpt-4o",
        base_url: str | None = None,
        api_key: str | None = None,
        temperature: float = 0.7,
        retries: int = 3,
        timeout: float = 120.0,
    ):
        self.model = model
        self.base_url = (base_url or os.environ.get(API_BASE_ENV) or "https://api.openai.com/v1").rstrip("/")
        self.api_key = api_key or os.environ.get(API_KEY_ENV)
        if not self.api_key:
            raise RuntimeError(f"set {API_KEY_ENV} to use the HTTP generation backend")
        self.temperature = temperature
        self.retries = retries
        self.timeout = timeout

    def complete(self, request: GenerationRequest) -> str:
        import httpx

        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": request.prompt}],
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last: Exception | None = None
        for i in range(self.retries):
            try:
                resp = httpx.post(f"{self.base_url}/chat/completions", json=payload, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                last = exc
                logger.warning("generation request failed (%d/%d): %s", i + 1, self.retries, exc)
                time.sleep(min(2 ** i, 10))
        raise RuntimeError(f"generation backend failed after {self.retries} tries: {last}")
