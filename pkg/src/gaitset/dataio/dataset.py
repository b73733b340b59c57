"""Indexed silhouette datasets on disk.

A dataset root holds one directory per sequence, located by a layout template
such as ``{id}/{condition}-{seq}/{view}/{frame}.png``. Placeholders:

``{id}``         identity label (required)
``{condition}``  walking condition, letters only; upper-cased (default ``NM``)
``{seq}``        sequence number, digits (default 1)
``{view}``       view label, kept verbatim (default ``000``)
``{frame}``      frame name (required, last component)

Scanning the tree is cached in a text index file next to the data; see
``write_index`` for the format.
"""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from ..errors import ConfigError, DataError

log = logging.getLogger(__name__)

DEFAULT_LAYOUT = "{id}/{condition}-{seq}/{view}/{frame}.png"
FRAME_SIZE = (64, 44)
INDEX_NAME = ".gaitset-index.tsv"
INDEX_MAGIC = "# gaitset-index 1"

_FIELD_PATTERNS = {
    "id": r"(?P<id>[^/]+?)",
    "condition": r"(?P<condition>[A-Za-z]+)",
    "seq": r"(?P<seq>\d+)",
    "view": r"(?P<view>[^/]+?)",
    "frame": r"(?P<frame>[^/]+?)",
}


@dataclass(frozen=True, order=True)
class SequenceKey:
    identity: str
    condition: str
    seq: int
    view: str

    def __str__(self) -> str:
        return f"{self.identity}/{self.condition}-{self.seq:02d}/{self.view}"

    @property
    def view_degrees(self) -> float | None:
        try:
            return float(self.view)
        except ValueError:
            return None


class SequenceRecord:
    """One sequence: a key plus lazily decoded frames.

    Frames are either backed by PNG files (``directory`` + ``files``) or held
    in memory (``data``). Decoded frames are cached as a read-only array.
    """

    __slots__ = ("key", "directory", "files", "_data", "frame_size", "cache")

    def __init__(self, key: SequenceKey, directory: Path | None = None, files: Sequence[str] = (),
                 data: np.ndarray | None = None, frame_size=FRAME_SIZE, cache: bool = True):
        self.key = key
        self.directory = Path(directory) if directory is not None else None
        self.files = tuple(files)
        self.frame_size = tuple(frame_size)
        self.cache = cache
        self._data = None
        if data is not None:
            arr = np.asarray(data, dtype=np.float32)
            if arr.ndim != 3 or arr.shape[0] == 0:
                raise DataError(f"{key}: in-memory frames must be a non-empty [n, H, W] array")
            arr = arr.copy()
            arr.flags.writeable = False
            self._data = arr
            self.files = tuple(f"{i:03d}" for i in range(arr.shape[0]))

    def __len__(self) -> int:
        return len(self.files)

    def __repr__(self) -> str:
        return f"SequenceRecord({self.key}, {len(self)} frames)"

    def frame_paths(self) -> list[Path]:
        if self.directory is None:
            return []
        return [self.directory / f for f in self.files]

    def frames(self) -> np.ndarray:
        """Frames ``[n, H, W]`` as float32 in {0, 1}."""
        if self._data is not None:
            return self._data
        arr = np.stack([load_frame(p, self.frame_size) for p in self.frame_paths()])
        arr.flags.writeable = False
        if self.cache:
            self._data = arr
        return arr


def load_frame(path: Path, size=FRAME_SIZE) -> np.ndarray:
    """Decode one PNG as grayscale, scale to [0, 1] and binarize at 0.5."""
    try:
        with Image.open(path) as img:
            gray = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from exc
    if gray.shape != tuple(size):
        raise DataError(f"{path}: image is {gray.shape[0]}x{gray.shape[1]}, expected {size[0]}x{size[1]}")
    return (gray >= 0.5).astype(np.float32)


# -- layout ---------------------------------------------------------------------
class Layout:
    def __init__(self, template: str = DEFAULT_LAYOUT):
        parts = template.strip("/").split("/")
        if len(parts) < 2:
            raise ConfigError(f"layout {template!r} needs at least one directory level and a frame name")
        fields = re.findall(r"{(\w+)}", template)
        unknown = set(fields) - set(_FIELD_PATTERNS)
        if unknown:
            raise ConfigError(f"layout {template!r} uses unknown placeholders {sorted(unknown)}")
        if "id" not in fields or "{frame}" not in parts[-1]:
            raise ConfigError(f"layout {template!r} must contain {{id}} and end with a {{frame}} component")
        if len(fields) != len(set(fields)):
            raise ConfigError(f"layout {template!r} repeats a placeholder")
        self.template = template
        self.dir_patterns = [self._compile(p) for p in parts[:-1]]
        self.frame_pattern = self._compile(parts[-1])

    @staticmethod
    def _compile(component: str) -> re.Pattern:
        out, pos = [], 0
        for m in re.finditer(r"{(\w+)}", component):
            out.append(re.escape(component[pos : m.start()]))
            out.append(_FIELD_PATTERNS[m.group(1)])
            pos = m.end()
        out.append(re.escape(component[pos:]))
        return re.compile("".join(out) + r"\Z")

    def sequence_dirs(self, root: Path) -> Iterable[tuple[str, dict]]:
        """Yield (relative dir, captured fields) for every directory matching the layout."""

        def walk(path: Path, rel: str, depth: int, fields: dict):
            if depth == len(self.dir_patterns):
                yield rel, fields
                return
            try:
                entries = sorted(os.scandir(path), key=lambda e: e.name)
            except OSError:
                return
            for entry in entries:
                if not entry.is_dir():
                    continue
                m = self.dir_patterns[depth].match(entry.name)
                if m:
                    sub = f"{rel}/{entry.name}" if rel else entry.name
                    yield from walk(Path(entry.path), sub, depth + 1, {**fields, **m.groupdict()})

        yield from walk(root, "", 0, {})

    def frame_files(self, directory: Path) -> list[str]:
        try:
            names = sorted(e.name for e in os.scandir(directory) if e.is_file())
        except OSError:
            return []
        return [n for n in names if self.frame_pattern.match(n)]

    @staticmethod
    def key_for(fields: dict) -> SequenceKey:
        return SequenceKey(
            identity=fields["id"],
            condition=fields.get("condition", "NM").upper(),
            seq=int(fields.get("seq", 1)),
            view=fields.get("view", "000"),
        )


# -- dataset --------------------------------------------------------------------
class SilhouetteDataset:
    """Sequences sorted by (identity, condition, seq, view)."""

    def __init__(self, records: Sequence[SequenceRecord], root: Path | None = None,
                 layout: str = DEFAULT_LAYOUT, warnings: Sequence[str] = ()):
        self.records = sorted(records, key=lambda r: r.key)
        keys = [r.key for r in self.records]
        if len(set(keys)) != len(keys):
            raise DataError("duplicate sequence keys in dataset")
        self.root = Path(root) if root is not None else None
        self.layout = layout
        self.warnings = list(warnings)
        self.split = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def identities(self) -> list[str]:
        return sorted({r.key.identity for r in self.records})

    def views(self) -> list[str]:
        return sorted({r.key.view for r in self.records})

    def conditions(self) -> list[str]:
        return sorted({r.key.condition for r in self.records})

    def select(self, identities=None, conditions=None, seqs=None, views=None) -> list[SequenceRecord]:
        ids = set(identities) if identities is not None else None
        conds = {c.upper() for c in conditions} if conditions is not None else None
        seq_set = set(seqs) if seqs is not None else None
        view_set = set(views) if views is not None else None
        return [
            r
            for r in self.records
            if (ids is None or r.key.identity in ids)
            and (conds is None or r.key.condition in conds)
            and (seq_set is None or r.key.seq in seq_set)
            and (view_set is None or r.key.view in view_set)
        ]

    def subset(self, identities) -> "SilhouetteDataset":
        return SilhouetteDataset(self.select(identities=identities), self.root, self.layout, self.warnings)

    def by_identity(self) -> dict[str, list[SequenceRecord]]:
        groups: dict[str, list[SequenceRecord]] = {}
        for r in self.records:
            groups.setdefault(r.key.identity, []).append(r)
        return groups

    def get(self, key: SequenceKey) -> SequenceRecord:
        for r in self.records:
            if r.key == key:
                return r
        raise DataError(f"no sequence {key}")

    def validate(self) -> None:
        """Decode every frame, reporting all files with a wrong size at once."""
        bad = []
        for r in self.records:
            for p in r.frame_paths():
                try:
                    load_frame(p, r.frame_size)
                except DataError as exc:
                    bad.append(str(exc))
        if bad:
            raise DataError(f"{len(bad)} unreadable or mis-sized frame(s):\n" + "\n".join(bad))

    @classmethod
    def from_arrays(cls, sequences: dict[SequenceKey, np.ndarray]) -> "SilhouetteDataset":
        return cls([SequenceRecord(k, data=v, frame_size=np.asarray(v).shape[1:]) for k, v in sequences.items()])


# -- index file -------------------------------------------------------------------
def write_index(path: Path, layout: str, entries: Sequence[tuple[SequenceKey, str, Sequence[str]]],
                empty: Sequence[str]) -> None:
    """Write the scan cache.

    Format: UTF-8 text. Line 1 is ``# gaitset-index 1``; line 2 is
    ``# layout <template>``. Each sequence is one tab-separated line
    ``identity  condition  seq  view  relative-dir  frame/frame/...``
    (frame names joined by ``/``). Empty sequence directories are recorded
    as ``# empty <relative-dir>``.
    """
    lines = [INDEX_MAGIC, f"# layout {layout}"]
    for key, rel, files in entries:
        lines.append("\t".join([key.identity, key.condition, str(key.seq), key.view, rel, "/".join(files)]))
    lines.extend(f"# empty {rel}" for rel in empty)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def read_index(path: Path, layout: str):
    text = path.read_text(encoding="utf-8").splitlines()
    if len(text) < 2 or text[0] != INDEX_MAGIC or text[1] != f"# layout {layout}":
        return None
    entries, empty = [], []
    for line in text[2:]:
        if line.startswith("# empty "):
            empty.append(line[len("# empty "):])
            continue
        cols = line.split("\t")
        if len(cols) != 6:
            raise DataError(f"{path}: malformed index line {line!r}")
        ident, cond, seq, view, rel, files = cols
        entries.append((SequenceKey(ident, cond, int(seq), view), rel, files.split("/")))
    return entries, empty


def scan(root: Path, layout: Layout):
    entries, empty = [], []
    for rel, fields in layout.sequence_dirs(root):
        files = layout.frame_files(root / rel)
        if files:
            entries.append((layout.key_for(fields), rel, files))
        else:
            empty.append(rel)
    return entries, empty


def load_dataset(root, layout: str = DEFAULT_LAYOUT, protocol=None, use_index: bool = True,
                 rescan: bool = False, frame_size=FRAME_SIZE, cache: bool = True):
    """Index a silhouette tree into a ``SilhouetteDataset``.

    Sequence directories without frames are skipped and listed in
    ``dataset.warnings``. With ``protocol`` given (a ``ProtocolSpec``, a
    preset name or a protocol file), ``dataset.split`` holds its partition.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist or is not a directory")
    lay = Layout(layout)
    index_path = root / INDEX_NAME
    cached = None
    if use_index and not rescan and index_path.is_file():
        cached = read_index(index_path, layout)
    if cached is None:
        cached = scan(root, lay)
        if use_index:
            try:
                write_index(index_path, layout, *cached)
            except OSError as exc:
                log.info("could not write index %s: %s", index_path, exc)
    entries, empty = cached
    if not entries:
        raise DataError(f"no sequences under {root} match layout {layout!r}")
    warnings = [f"empty sequence directory skipped: {rel}" for rel in empty]
    for w in warnings:
        log.warning(w)
    records = [SequenceRecord(key, root / rel, files, frame_size=frame_size, cache=cache) for key, rel, files in entries]
    dataset = SilhouetteDataset(records, root, layout, warnings)
    if protocol is not None:
        from .protocol import resolve_protocol

        dataset.split = resolve_protocol(protocol).split(dataset)
    return dataset
