"""On-disk formats.

A container is a JSON manifest plus a raw blob of little-endian, row-major
tensors. The manifest lists every tensor as (name, dtype, shape, offset,
nbytes) and records the blob's SHA-256 and a format version. Models and
datasets share the container; reports are plain JSON or CSV.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import LayerSpec, ModelGraph, TensorSlot

FORMAT_VERSION = 1
REPORT_SCHEMA_VERSION = 1
_DTYPES = ("float32", "float64", "int8", "int16", "int32", "int64", "uint8")


class FormatError(ValueError):
    pass


def blob_path(path) -> Path:
    path = Path(path)
    if path.suffix == ".bin":
        raise FormatError("manifest path must not end in .bin")
    return path.with_suffix(".bin")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def save_container(path, kind: str, tensors: dict, meta: Optional[dict] = None) -> Path:
    """Write ``tensors`` (name -> array) and ``meta`` to ``path`` and its ``.bin`` blob."""
    path = Path(path)
    table, chunks, offset = [], [], 0
    for name in sorted(tensors):
        a = np.asarray(tensors[name])
        if a.dtype.name not in _DTYPES:
            raise FormatError(f"{name}: unsupported dtype {a.dtype}")
        raw = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes()
        table.append({"name": name, "dtype": a.dtype.name, "shape": list(a.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    bpath = blob_path(path)
    manifest = {
        "format": kind,
        "version": FORMAT_VERSION,
        "blob": bpath.name,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": table,
        "meta": meta or {},
    }
    bpath.write_bytes(blob)
    path.write_text(_dumps(manifest))
    return path


def load_container(path, kind: Optional[str] = None):
    """Return ``(tensors, meta)`` after checking version, checksum and the tensor table."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {manifest.get('version')!r}")
    if kind is not None and manifest.get("format") != kind:
        raise FormatError(f"expected a {kind} file, got {manifest.get('format')!r}")
    bpath = path.parent / manifest["blob"]
    blob = bpath.read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise FormatError(f"checksum mismatch for {bpath}")
    tensors = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}")
        if entry["dtype"] not in _DTYPES:
            raise FormatError(f"{name}: unsupported dtype {entry['dtype']!r}")
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        shape = tuple(int(s) for s in entry["shape"])
        start, n = int(entry["offset"]), int(entry["nbytes"])
        if n != int(np.prod(shape, dtype=np.int64)) * dt.itemsize or start < 0 or start + n > len(blob):
            raise FormatError(f"{name}: bad extent in tensor table")
        tensors[name] = np.frombuffer(blob, dtype=dt, count=n // dt.itemsize, offset=start).reshape(shape).astype(
            dt.newbyteorder("="))
    return tensors, manifest.get("meta", {})


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


def _slot_params_dict(slot: TensorSlot):
    try:
        return slot.params().to_dict()
    except ValueError:
        return None


def save_model(g: ModelGraph, path) -> Path:
    meta = {
        "input_shape": list(g.input_shape),
        "input_name": g.input_name,
        "task": g.task,
        "layers": [l.to_dict() for l in g.layers],
        "aliases": dict(g.aliases),
        "slots": {k: s.to_dict() for k, s in g.slots.items()},
        # derived, for readers that only want the integer parameters
        "quant_params": {k: _slot_params_dict(s) for k, s in g.slots.items()},
        "history": g.history,
    }
    return save_container(path, "oaq-model", g.params, meta)


def load_model(path) -> ModelGraph:
    tensors, meta = load_container(path, "oaq-model")
    layers = [LayerSpec.from_dict(d) for d in meta["layers"]]
    g = ModelGraph(
        input_shape=tuple(meta["input_shape"]),
        layers=layers,
        params=tensors,
        slots={k: TensorSlot.from_dict(d) for k, d in meta["slots"].items()},
        aliases=dict(meta.get("aliases", {})),
        input_name=meta.get("input_name", "input"),
        task=meta.get("task", "classification"),
        history=list(meta.get("history", [])),
    )
    referenced = {name for l in g.compute_layers() for name in (l.weight, l.bias)}
    missing = referenced - set(tensors)
    if missing:
        raise FormatError(f"manifest references missing tensors {sorted(missing)}")
    g.validate()
    return g


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def save_data(path, x, y=None, meta: Optional[dict] = None) -> Path:
    tensors = {"x": np.asarray(x)}
    if y is not None:
        tensors["y"] = np.asarray(y)
    return save_container(path, "oaq-data", tensors, meta)


def load_data(path):
    tensors, meta = load_container(path, "oaq-data")
    if "x" not in tensors:
        raise FormatError("data file has no 'x' tensor")
    return tensors["x"], tensors.get("y"), meta


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_report(path, kind: str, body: dict) -> Path:
    path = Path(path)
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "kind": kind, **_plain(body)}
    path.write_text(_dumps(doc))
    return path


def write_csv(path, rows: list, fields: Optional[list] = None) -> Path:
    path = Path(path)
    rows = [_plain(r) for r in rows]
    fields = fields or (list(rows[0]) if rows else [])
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path
