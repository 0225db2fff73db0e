"""Versioned checkpoint container: JSON manifest plus one flat float64 array file.

Layout of ``<dir>/``::

    manifest.json   {"version", "modules": {module: {name: shape}}, "entries": [...], "meta": {...}}
    arrays.bin      every array, little-endian float64, concatenated in entry order
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries, modules = [], {}
    offset = 0
    with open(root / "arrays.bin.tmp", "wb") as fh:
        for name, arr in arrays.items():
            shape = np.shape(arr)
            arr = np.ascontiguousarray(arr, dtype="<f8").reshape(shape)  # keeps 0-d scalars 0-d
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
            module, _, param = name.partition(".")
            modules.setdefault(module, {})[param or module] = list(arr.shape)
    manifest = {"version": VERSION, "modules": modules, "entries": entries, "meta": meta or {}}
    (root / "manifest.json.tmp").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    (root / "arrays.bin.tmp").replace(root / "arrays.bin")
    (root / "manifest.json.tmp").replace(root / "manifest.json")
    return root


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    flat = np.fromfile(root / "arrays.bin", dtype="<f8")
    arrays = {}
    for e in manifest["entries"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        arrays[e["name"]] = flat[e["offset"] : e["offset"] + n].reshape(shape).astype(np.float64)
    return arrays, manifest["meta"]
