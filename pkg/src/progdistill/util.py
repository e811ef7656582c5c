"""Deterministic hashing and JSONL helpers."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable

_SEP = "\x1f"


def stable_hash(*parts: object) -> int:
    """64-bit hash of the stringified parts, stable across processes and runs.

    Python's builtin hash() is salted per process; everything that must be
    reproducible (corruption draws, detector misses, seed derivation) goes
    through here instead.
    """
    text = _SEP.join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def stable_unit(*parts: object) -> float:
    """Deterministic pseudo-uniform draw in [0, 1) keyed by the parts."""
    return stable_hash(*parts) / 2.0**64


def derive_seed(base_seed: int, *scope: object) -> int:
    """Derive an independent RNG seed for a named pipeline stage."""
    return stable_hash("seed", base_seed, *scope) % 2**31


def canonical_json(obj: object) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(obj: object) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_jsonl(path: str | Path, records: Iterable[dict]) -> int:
    """Write one JSON object per line. Returns the record count."""
    count = 0
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False))
            f.write("\n")
            count += 1
    return count


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
