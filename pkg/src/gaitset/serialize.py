"""Single-file container for named arrays (checkpoints, embedding stores).

Byte layout::

    GAITSET <kind> <version>\\n       ASCII tag line
    <header-bytes>\\n                 ASCII decimal length of the JSON header
    <header>                         UTF-8 JSON, sorted keys:
                                     {"manifest": [{"name", "shape", "dtype"}, ...],
                                      "meta": {...}}
    <payload>                        raw little-endian scalars, one block per
                                     manifest entry, in manifest order

Writing is deterministic: equal inputs give byte-identical files.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import DataError

VERSION = 1


def write_container(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    manifest = []
    blocks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": le.str})
        blocks.append(np.ascontiguousarray(arr, dtype=le).tobytes())
    header = json.dumps({"manifest": manifest, "meta": meta or {}}, sort_keys=True, separators=(",", ":"))
    hb = header.encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(f"GAITSET {kind} {VERSION}\n".encode("ascii"))
        fh.write(f"{len(hb)}\n".encode("ascii"))
        fh.write(hb)
        for block in blocks:
            fh.write(block)
    os.replace(tmp, path)


def read_container(path, kind: str) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with open(path, "rb") as fh:
        tag = fh.readline().decode("ascii", "replace").split()
        if len(tag) != 3 or tag[0] != "GAITSET":
            raise DataError(f"{path}: not a GaitSet container")
        if tag[1] != kind:
            raise DataError(f"{path}: expected a {kind} container, found {tag[1]}")
        if int(tag[2]) != VERSION:
            raise DataError(f"{path}: unsupported version {tag[2]}")
        size = int(fh.readline())
        header = json.loads(fh.read(size).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for entry in header["manifest"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise DataError(f"{path}: truncated payload for {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after payload")
    return arrays, header["meta"]
