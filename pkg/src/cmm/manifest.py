"""Append-only experiment manifests with content digests.

Every command records its inputs and outputs as sha256 digests keyed by
file name, so identical seeded runs are auditable byte-for-byte. For
.jsonl logs the digest is computed over the lines with wall-clock keys
removed (tokens/s depends on machine load, the training math does not);
all other files are digested raw.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

TIMING_KEYS = ("tokens_per_s", "wall_s")

MANIFEST_NAME = "manifest.jsonl"


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def content_digest(path: str | Path) -> str:
    """Digest that ignores wall-clock fields inside .jsonl files."""
    path = Path(path)
    if path.suffix != ".jsonl":
        return file_digest(path)
    h = hashlib.sha256()
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        for key in TIMING_KEYS:
            obj.pop(key, None)
        h.update(json.dumps(obj, sort_keys=True).encode())
        h.update(b"\n")
    return h.hexdigest()


def append_entry(
    out_dir: str | Path,
    command: str,
    config: dict | None,
    inputs: list[str | Path],
    outputs: list[str | Path],
    wall_s: float,
) -> dict:
    """Append one manifest entry; returns it (digests keyed by basename)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    in_digests = {Path(p).name: file_digest(p) for p in inputs}
    out_digests = {Path(p).name: content_digest(p) for p in outputs}
    seed_blob = json.dumps({"command": command, "config": config, "inputs": in_digests}, sort_keys=True)
    entry = {
        "run_id": hashlib.sha256(seed_blob.encode()).hexdigest()[:12],
        "command": command,
        "config": config,
        "inputs": in_digests,
        "outputs": out_digests,
        "wall_s": wall_s,
        "created_unix": time.time(),
    }
    with open(out_dir / MANIFEST_NAME, "a", encoding="utf-8") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")
    return entry


def read_entries(out_dir: str | Path) -> list[dict]:
    path = Path(out_dir) / MANIFEST_NAME
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
