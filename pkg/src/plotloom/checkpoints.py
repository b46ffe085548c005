"""JSON checkpoint files shared by the pipeline stages."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

SCHEMA_VERSION = 1


def dumps(doc: Any) -> str:
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def write_checkpoint(path: str | Path, kind: str, body: dict, fingerprint: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind, "fingerprint": fingerprint, **body}
    path.write_text(dumps(doc), encoding="utf-8")
    return path


def read_checkpoint(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema_version {version}")
    return doc
