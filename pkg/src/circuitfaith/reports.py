"""Deterministic file output shared by every report writer."""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path

import numpy as np


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def dumps(obj) -> str:
    """Sorted keys, shortest round-trip floats, trailing LF."""
    return json.dumps(obj, sort_keys=True, indent=1, default=_json_default) + "\n"


def write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")
    return path


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def fingerprint(obj) -> str:
    return hashlib.sha256(dumps(obj).encode()).hexdigest()


def write_manifest(path: str | Path, payload: dict, files: list[Path] = ()) -> dict:
    """Write ``payload`` plus content hashes of ``files``.

    ``fingerprint`` covers everything except ``created``, the only field allowed
    to differ between reruns.
    """
    path = Path(path)
    body = dict(payload)
    body["files"] = {Path(f).name: sha256_file(f) for f in files}
    body["fingerprint"] = fingerprint(body)
    body["created"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    write_text(path, dumps(body))
    return body
