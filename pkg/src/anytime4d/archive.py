"""Tensor archives: a directory holding ``manifest.json`` plus one raw blob per array.

Manifest layout::

    {
      "schema_version": 1,
      "byte_order": "little",
      "kind": "<free-form tag, e.g. 'sequence' or 'checkpoint'>",
      "arrays": {"<name>": {"file": "<name>.bin", "dtype": "float32", "shape": [..]}},
      "meta": {...}            # config snapshot, PRNG states, anything JSON
    }

Blobs are row-major and little-endian. Supported element types are float32,
float64, int32, uint8 and bool (stored as one uint8 per element).
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int32": np.dtype("<i4"),
    "uint8": np.dtype("u1"),
    "bool": np.dtype("u1"),
}


class ArchiveError(ValueError):
    pass


def _dtype_name(a: np.ndarray) -> str:
    if a.dtype == np.bool_:
        return "bool"
    if a.dtype.kind == "f":
        return "float64" if a.dtype.itemsize == 8 else "float32"
    if a.dtype.kind in "iu":
        return "uint8" if a.dtype == np.uint8 else "int32"
    raise ArchiveError(f"unsupported dtype {a.dtype}")


def write_archive(path, arrays: dict[str, np.ndarray], meta: dict | None = None, kind: str = "") -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        dname = _dtype_name(a)
        if dname == "int32" and a.size and (a.min() < -2**31 or a.max() >= 2**31):
            raise ArchiveError(f"array {name!r} does not fit int32")
        blob = np.ascontiguousarray(a.astype(DTYPES[dname], copy=False))
        fname = f"{name}.bin"
        (path / fname).write_bytes(blob.tobytes(order="C"))
        entries[name] = {"file": fname, "dtype": dname, "shape": list(a.shape)}
    manifest = {"schema_version": SCHEMA_VERSION, "byte_order": "little", "kind": kind,
                "arrays": entries, "meta": meta or {}}
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, path / "manifest.json")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise ArchiveError(f"{path} is not a tensor archive") from e
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ArchiveError(f"unsupported schema version {manifest.get('schema_version')}")
    if manifest.get("byte_order") != "little":
        raise ArchiveError("only little-endian archives are supported")
    return manifest


def read_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns ``(arrays, manifest)``."""
    path = Path(path)
    manifest = read_manifest(path)
    arrays = {}
    for name, e in manifest["arrays"].items():
        dt = DTYPES[e["dtype"]]
        raw = (path / e["file"]).read_bytes()
        expected = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if len(raw) != expected:
            raise ArchiveError(f"array {name!r}: {len(raw)} bytes on disk, expected {expected}")
        a = np.frombuffer(raw, dtype=dt).reshape(e["shape"])
        if e["dtype"] == "bool":
            a = a.astype(bool)
        else:
            a = a.astype(dt.newbyteorder("="))
        arrays[name] = a
    return arrays, manifest
