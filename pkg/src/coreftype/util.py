"""Shared helpers: seeded RNG substreams, file digests, stable JSON."""

import hashlib
import json
from pathlib import Path

import numpy as np


def rng_for(seed: int, *labels) -> np.random.Generator:
    """Derive a named RNG substream from a master seed.

    Substream derivation: the master seed is combined with the first
    8 bytes of sha256 of the "/"-joined labels, via SeedSequence.
    Distinct labels give independent streams; the mapping is stable
    across runs and platforms.
    """
    key = "/".join(str(x) for x in labels)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    salt = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), salt]))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def format_table(headers, rows) -> str:
    """Render rows as an aligned plain-text table."""
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for j, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
