"""Silhouette samples: whole sequences or frame-budgeted mixtures of several."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ConfigError, DataError
from .dataset import SequenceRecord

MODES = ("single", "multiview", "multicondition")


class ReplacementWarning(UserWarning):
    """A frame budget exceeded a sequence's length, so frames were drawn with replacement."""


@dataclass
class SilhouetteSample:
    frames: np.ndarray
    identity: str
    views: tuple[str, ...]
    conditions: tuple[str, ...]
    sources: tuple[str, ...]
    frame_refs: tuple[tuple[int, int], ...] = ()
    replaced: bool = False

    @property
    def key(self) -> str:
        return "+".join(self.sources)

    @property
    def view_label(self) -> str:
        return "+".join(self.views)

    @classmethod
    def from_record(cls, record: SequenceRecord) -> "SilhouetteSample":
        frames = record.frames()
        k = record.key
        return cls(frames, k.identity, (k.view,), (k.condition,), (str(k),), tuple((0, i) for i in range(len(frames))))

    def metadata(self) -> dict:
        return {
            "identity": self.identity,
            "views": list(self.views),
            "conditions": list(self.conditions),
            "sources": list(self.sources),
            "frames": int(len(self.frames)),
        }


def _budgets(budget, count: int) -> list[int | None]:
    if budget is None or isinstance(budget, (int, np.integer)):
        out = [budget] * count
    else:
        out = list(budget)
        if len(out) != count:
            raise ConfigError(f"{len(out)} frame budgets for {count} source sequences")
    for b in out:
        if b is not None and b < 1:
            raise ConfigError(f"frame budget must be positive, got {b}")
    return out


def _check_mode(sequences: Sequence[SequenceRecord], mode: str) -> None:
    if mode not in MODES:
        raise ConfigError(f"unknown composition mode {mode!r} (choose from {', '.join(MODES)})")
    keys = [s.key for s in sequences]
    if mode == "single":
        if len(keys) != 1:
            raise DataError(f"single mode takes exactly one sequence, got {len(keys)}")
        return
    if len(keys) < 2:
        raise DataError(f"{mode} mode needs at least two sequences, got {len(keys)}")
    if len({k.identity for k in keys}) != 1:
        raise DataError(f"{mode} sources must share one identity")
    if mode == "multiview":
        if len({k.condition for k in keys}) != 1:
            raise DataError("multiview sources must share a walking condition")
        if len({k.view for k in keys}) != len(keys):
            raise DataError("multiview sources must have distinct views")
    else:
        if len({k.view for k in keys}) != 1:
            raise DataError("multicondition sources must share a view")
        if len({k.condition for k in keys}) != len(keys):
            raise DataError("multicondition sources must have distinct conditions")


def compose_probe(sequences: Sequence[SequenceRecord], mode: str = "single", budget=None, seed=0) -> SilhouetteSample:
    """Merge frames drawn from each source into one unordered sample.

    ``budget`` is one frame count for every source, a list with one count per
    source, or ``None`` for all frames. Frames are drawn uniformly without
    replacement; a budget longer than its sequence falls back to replacement
    and emits a ``ReplacementWarning``.
    """
    _check_mode(sequences, mode)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    parts, refs, replaced = [], [], False
    for src, (record, b) in enumerate(zip(sequences, _budgets(budget, len(sequences)))):
        frames = record.frames()
        n = len(frames)
        if n == 0:
            raise DataError(f"{record.key}: empty sequence")
        if b is None:
            idx = np.arange(n)
        else:
            if b > n:
                warnings.warn(f"{record.key}: budget {b} exceeds {n} frames; sampling with replacement",
                              ReplacementWarning, stacklevel=2)
                replaced = True
            idx = rng.choice(n, size=b, replace=b > n)
        parts.append(frames[idx])
        refs.extend((src, int(i)) for i in idx)
    keys = [s.key for s in sequences]
    return SilhouetteSample(
        frames=np.concatenate(parts, axis=0),
        identity=keys[0].identity,
        views=tuple(k.view for k in keys),
        conditions=tuple(k.condition for k in keys),
        sources=tuple(str(k) for k in keys),
        frame_refs=tuple(refs),
        replaced=replaced,
    )
