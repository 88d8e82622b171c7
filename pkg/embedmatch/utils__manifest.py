import hashlib
import json
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any

from pydantic import BaseModel, Field


def tool_version() -> str:
    try:
        return version("embedmatch")
    except PackageNotFoundError:
        return "0.1.0"


class RunManifest(BaseModel):
    """What produced an artifact: command, config snapshot, seeds and paths"""

    command: str
    config: dict[str, Any] = {}
    seeds: dict[str, int] = {}
    inputs: list[str] = []
    outputs: list[str] = []
    tool_version: str = Field(default_factory=tool_version)
    wall_clock: float = Field(default_factory=time.time)

    def manifest_hash(self) -> str:
        """SHA-256 of everything but the wall-clock, stable across runs"""
        payload = self.model_dump(mode="json", exclude={"wall_clock"})
        encoded = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(encoded).hexdigest()


def manifest_path(artifact: Path) -> Path:
    return artifact.with_name(artifact.name + ".manifest.json")


def write_manifest(manifest: RunManifest, artifacts: list[Path]) -> str:
    """Write ``<artifact>.manifest.json`` next to every artifact, return the hash"""
    digest = manifest.manifest_hash()
    body = json.dumps(
        {"manifest_hash": digest, "manifest": manifest.model_dump(mode="json")},
        indent=2,
        sort_keys=True,
    )
    for artifact in artifacts:
        manifest_path(artifact).write_text(body + "\n", encoding="utf-8")
    return digest
