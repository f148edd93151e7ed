"""Run manifest and atomic stage output."""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

MANIFEST = "manifest.json"


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digests(root: Path) -> dict[str, str]:
    root = Path(root)
    if not root.exists():
        return {}
    if root.is_file():
        return {root.name: file_digest(root)}
    return {p.relative_to(root).as_posix(): file_digest(p) for p in sorted(root.rglob("*")) if p.is_file()}


def combined_digest(digests: dict[str, str]) -> str:
    return hashlib.sha256(json.dumps(digests, sort_keys=True).encode()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    adapter_identity: str | None = None
    corpus_hashes: dict[str, str] = field(default_factory=dict)
    stages: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"config_hash": self.config_hash, "adapter_identity": self.adapter_identity,
                "corpus_hashes": self.corpus_hashes, "stages": self.stages}

    @classmethod
    def load(cls, out: Path, config_hash: str) -> "RunManifest":
        p = Path(out) / MANIFEST
        if not p.exists():
            return cls(config_hash)
        d = json.loads(p.read_text("utf-8"))
        m = cls(d["config_hash"], d.get("adapter_identity"), d.get("corpus_hashes", {}), d.get("stages", {}))
        if m.config_hash != config_hash:
            # a changed config invalidates every recorded stage
            return cls(config_hash)
        return m

    def save(self, out: Path) -> None:
        p = Path(out) / MANIFEST
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", "utf-8")
        os.replace(tmp, p)

    def record(self, stage: str, key: str, inputs: str, outputs: dict[str, str], started: float) -> None:
        self.stages[key] = {
            "stage": stage,
            "inputs": inputs,
            "outputs": outputs,
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }

    def is_current(self, key: str, inputs: str, out: Path) -> bool:
        """True when the stage ran with these inputs and its outputs are untouched on disk."""
        entry = self.stages.get(key)
        if entry is None or entry["inputs"] != inputs:
            return False
        for rel, digest in entry["outputs"].items():
            p = Path(out) / rel
            if not p.exists() or file_digest(p) != digest:
                return False
        return True


class StageOutput:
    """Collects a stage's files in a staging directory and publishes them on success.

    Nothing under the run directory changes if the stage raises.
    """

    def __init__(self, out: Path, stage: str):
        self.out = Path(out)
        self.staging = self.out / f".staging-{stage}"

    def __enter__(self) -> "StageOutput":
        if self.staging.exists():
            shutil.rmtree(self.staging)
        self.staging.mkdir(parents=True)
        self.published: dict[str, str] = {}
        return self

    def path(self, rel: str) -> Path:
        p = self.staging / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None:
            shutil.rmtree(self.staging, ignore_errors=True)
            return
        for p in sorted(self.staging.rglob("*")):
            if p.is_file():
                rel = p.relative_to(self.staging).as_posix()
                self.published[rel] = file_digest(p)
                dest = self.out / rel
                dest.parent.mkdir(parents=True, exist_ok=True)
                os.replace(p, dest)
        shutil.rmtree(self.staging, ignore_errors=True)
