"""JSON header + little-endian binary array block, used to persist fitted models.

``<stem>.json`` holds metadata and an ``arrays`` table of
``{name, shape, offset}``; ``<stem>.bin`` starts with ``b"CGB1"`` followed by
the raw f64 arrays in table order.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CGB1"


def _paths(stem):
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def write_bundle(stem, header: dict, arrays: dict) -> tuple[Path, Path]:
    jpath, bpath = _paths(stem)
    table = []
    offset = len(MAGIC)
    blobs = []
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype="<f8")
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    doc = dict(header)
    doc["arrays"] = table
    jpath.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    with open(bpath, "wb") as fh:
        fh.write(MAGIC)
        for b in blobs:
            fh.write(b)
    return jpath, bpath


def read_bundle(stem, schema: str | None = None) -> tuple[dict, dict]:
    jpath, bpath = _paths(stem)
    try:
        doc = json.loads(jpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{jpath}: cannot read header ({exc})", field="header") from exc
    if schema is not None and doc.get("schema") != schema:
        raise FormatError(f"{jpath}: schema {doc.get('schema')!r}, expected {schema!r}",
                          field="schema")
    raw = bpath.read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{bpath}: bad magic {raw[:4]!r}", field="magic")
    arrays = {}
    for entry in doc.pop("arrays", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = entry["offset"] + 8 * count
        if end > len(raw):
            raise FormatError(f"{bpath}: array {entry['name']} runs past end of file",
                              field=entry["name"])
        arrays[entry["name"]] = np.frombuffer(raw, "<f8", count, entry["offset"]).reshape(shape).copy()
    return doc, arrays
