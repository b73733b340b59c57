"""Gallery/probe retrieval: embedding stores, rank-1 accuracy and practicality sweeps.

Distances are Euclidean over the concatenation of all strip vectors (or,
optionally, the sum of per-strip distances). The nearest gallery entry
decides the prediction; exact distance ties go to the gallery entry whose
key sorts first. Cell ``(pv, gv)`` of the accuracy matrix scores probes of
view ``pv`` against the gallery restricted to view ``gv``. Reported means
skip cells whose gallery view is one of the probe's own views, average the
remaining cells per probe view, then average over probe views.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataio.compose import SilhouetteSample, compose_probe
from .dataio.dataset import SequenceRecord
from .dataio.protocol import Split
from .errors import ConfigError, DataError
from .network import GaitSetModel
from .serialize import read_container, write_container

log = logging.getLogger(__name__)

METRICS = ("concat", "strip")
TIE_TOLERANCE = 1e-9


# -- embedding store ------------------------------------------------------------------
@dataclass
class EmbeddingStore:
    """Embeddings ``[N, rows, d]`` (float32) plus one metadata dict per entry."""

    embeddings: np.ndarray
    entries: list[dict]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 3 or len(self.embeddings) != len(self.entries):
            raise ConfigError(f"store needs [N, rows, d] embeddings and N entries, got {self.embeddings.shape} / {len(self.entries)}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def identities(self) -> list[str]:
        return [e["identity"] for e in self.entries]

    @property
    def keys(self) -> list[str]:
        return ["+".join(e["sources"]) for e in self.entries]

    @property
    def view_labels(self) -> list[str]:
        return [view_label(e["views"]) for e in self.entries]

    def save(self, path) -> None:
        write_container(path, "store", {"embeddings": self.embeddings}, {"entries": self.entries, **self.meta})

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        arrays, meta = read_container(path, "store")
        entries = meta.pop("entries", None)
        if entries is None or "embeddings" not in arrays:
            raise DataError(f"{path}: not an embedding store")
        return cls(arrays["embeddings"], entries, meta)


def view_label(views: Iterable[str]) -> str:
    return "+".join(dict.fromkeys(views))


def embed_samples(model: GaitSetModel, samples: Sequence[SilhouetteSample], meta: dict | None = None) -> EmbeddingStore:
    if not samples:
        raise DataError("nothing to embed")
    emb = model.embed_many([s.frames for s in samples])
    return EmbeddingStore(emb, [s.metadata() for s in samples], dict(meta or {}))


def embed_records(model: GaitSetModel, records: Sequence[SequenceRecord], meta: dict | None = None) -> EmbeddingStore:
    """One embedding per sequence from all of its frames."""
    return embed_samples(model, [SilhouetteSample.from_record(r) for r in records], meta)


def embed_gallery(model: GaitSetModel, split: Split, meta: dict | None = None) -> EmbeddingStore:
    if not split.gallery:
        raise DataError(f"protocol {split.protocol.name} selects an empty gallery")
    return embed_records(model, split.gallery, {"model": model.config.to_dict(), **(meta or {})})


def embed_probes(model: GaitSetModel, split: Split, meta: dict | None = None) -> dict[str, EmbeddingStore]:
    out = {}
    for name, records in split.probes.items():
        if records:
            out[name] = embed_records(model, records, {"model": model.config.to_dict(), "subset": name, **(meta or {})})
        else:
            log.warning("probe subset %s is empty under protocol %s", name, split.protocol.name)
    if not out:
        raise DataError(f"protocol {split.protocol.name} selects no probe sequences")
    return out


# -- distances and rank-1 ----------------------------------------------------------------
def _sq_distances(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    q = q.astype(np.float64)
    g = g.astype(np.float64)
    d = (q * q).sum(-1)[..., :, None] + (g * g).sum(-1)[..., None, :] - 2.0 * (q @ np.swapaxes(g, -1, -2))
    return np.maximum(d, 0.0)


def distance_matrix(probe: np.ndarray, gallery: np.ndarray, metric: str = "concat") -> np.ndarray:
    """``[P, G]`` distances between ``[P, rows, d]`` and ``[G, rows, d]`` embeddings."""
    if probe.shape[1:] != gallery.shape[1:]:
        raise ConfigError(f"embedding shapes differ: probe {probe.shape[1:]} vs gallery {gallery.shape[1:]}")
    if metric == "concat":
        return np.sqrt(_sq_distances(probe.reshape(len(probe), -1), gallery.reshape(len(gallery), -1)))
    if metric == "strip":
        per = _sq_distances(np.swapaxes(probe, 0, 1), np.swapaxes(gallery, 0, 1))
        return np.sqrt(per).sum(axis=0)
    raise ConfigError(f"unknown distance {metric!r} (choose from {', '.join(METRICS)})")


def _exact_distance(q: np.ndarray, g: np.ndarray, metric: str) -> float:
    diff = q.astype(np.float64) - g.astype(np.float64)
    if metric == "concat":
        return math.sqrt(float(np.sum(diff * diff)))
    return float(np.sum(np.sqrt(np.sum(diff * diff, axis=-1))))


def nearest(probe: np.ndarray, gallery: np.ndarray, keys: Sequence[str], metric: str = "concat") -> np.ndarray:
    """Index of the nearest gallery entry per probe; ties go to the smallest key.

    Candidates within a relative ``TIE_TOLERANCE`` of the fast minimum are
    re-measured exactly before the tie rule is applied.
    """
    dist = distance_matrix(probe, gallery, metric)
    order = sorted(range(len(keys)), key=lambda i: keys[i])
    out = np.empty(len(probe), dtype=np.int64)
    for i, row in enumerate(dist):
        best = row.min()
        cand = np.flatnonzero(row <= best * (1 + TIE_TOLERANCE) + TIE_TOLERANCE)
        if len(cand) == 1:
            out[i] = cand[0]
            continue
        exact = {int(c): _exact_distance(probe[i], gallery[c], metric) for c in cand}
        low = min(exact.values())
        winners = {c for c, v in exact.items() if v == low}
        out[i] = next(j for j in order if j in winners)
    return out


@dataclass
class RetrievalResult:
    probe_views: list[str]
    gallery_views: list[str]
    accuracy: np.ndarray  # percent, NaN where a cell has no probes or gallery
    counts: np.ndarray
    excluded: np.ndarray  # cells left out of the means
    view_means: dict[str, float]
    mean: float

    def to_dict(self, prefix: str = "") -> dict[str, str]:
        out = {f"{prefix}mean": format_value(self.mean)}
        for pv, m in self.view_means.items():
            out[f"{prefix}view.{pv}"] = format_value(m)
        for i, pv in enumerate(self.probe_views):
            for j, gv in enumerate(self.gallery_views):
                out[f"{prefix}cell.{pv}.{gv}"] = format_value(self.accuracy[i, j])
        out[f"{prefix}probes"] = str(int(self.counts.max(axis=1).sum()) if self.counts.size else 0)
        return out


def format_value(x: float) -> str:
    return "nan" if x is None or not np.isfinite(x) else f"{x:.4f}"


def mean_excluding_identical(accuracy: np.ndarray, excluded: np.ndarray, probe_views: Sequence[str]) -> tuple[dict[str, float], float]:
    """Per-probe-view mean over usable cells, then the mean of those view means."""
    view_means = {}
    for i, pv in enumerate(probe_views):
        usable = ~excluded[i] & np.isfinite(accuracy[i])
        view_means[pv] = float(accuracy[i][usable].mean()) if usable.any() else float("nan")
    finite = [v for v in view_means.values() if np.isfinite(v)]
    return view_means, (float(np.mean(finite)) if finite else float("nan"))


def rank1(probe: EmbeddingStore, gallery: EmbeddingStore, metric: str = "concat") -> RetrievalResult:
    if len(probe) == 0 or len(gallery) == 0:
        raise DataError("rank-1 needs non-empty probe and gallery stores")
    if probe.embeddings.shape[1:] != gallery.embeddings.shape[1:]:
        raise ConfigError(
            f"embedding shapes differ: probe {probe.embeddings.shape[1:]} vs gallery {gallery.embeddings.shape[1:]}"
        )
    p_views = probe.view_labels
    g_views = gallery.view_labels
    pvs = sorted(set(p_views))
    gvs = sorted(set(g_views))
    p_ids = np.array(probe.identities)
    g_ids = np.array(gallery.identities)
    g_keys = gallery.keys
    p_view_sets = [set(e["views"]) for e in probe.entries]
    acc = np.full((len(pvs), len(gvs)), np.nan)
    counts = np.zeros((len(pvs), len(gvs)), dtype=np.int64)
    excluded = np.zeros((len(pvs), len(gvs)), dtype=bool)
    for j, gv in enumerate(gvs):
        cols = np.flatnonzero(np.array(g_views) == gv)
        idx = nearest(probe.embeddings, gallery.embeddings[cols], [g_keys[c] for c in cols], metric)
        correct = g_ids[cols][idx] == p_ids
        for i, pv in enumerate(pvs):
            rows = np.flatnonzero(np.array(p_views) == pv)
            counts[i, j] = len(rows)
            excluded[i, j] = gv in p_view_sets[rows[0]]
            acc[i, j] = 100.0 * correct[rows].mean()
    view_means, mean = mean_excluding_identical(acc, excluded, pvs)
    return RetrievalResult(pvs, gvs, acc, counts, excluded, view_means, mean)


# -- per-frame feature cache for sweeps ------------------------------------------------------
class FeatureCache:
    """Backbone features per sequence, so frame subsets can be re-pooled cheaply.

    Falls back to embedding raw frames when the model collapses sets to a
    mean image (per-frame features do not exist there).
    """

    def __init__(self, model: GaitSetModel):
        self.model = model
        self.enabled = not model.config.gei_collapse
        self._features: dict[str, tuple[np.ndarray, ...]] = {}

    def features(self, record: SequenceRecord):
        key = str(record.key)
        if key not in self._features:
            self._features[key] = self.model.frame_features(record.frames())
        return self._features[key]

    def embed(self, samples: Sequence[SilhouetteSample], records_of: Mapping[str, SequenceRecord]) -> EmbeddingStore:
        if not self.enabled:
            return embed_samples(self.model, samples)
        sets = []
        for s in samples:
            feats = [self.features(records_of[src]) for src in s.sources]
            picks = [[] for _ in s.sources]
            for src, frame in s.frame_refs:
                picks[src].append(frame)
            parts = [tuple(f[i][p] for i in range(3)) for f, p in zip(feats, picks) if p]
            sets.append(tuple(np.concatenate([q[i] for q in parts], axis=0) for i in range(3)))
        emb = self.model.embed_features(sets)
        return EmbeddingStore(emb, [s.metadata() for s in samples])


def _records_by_key(records: Iterable[SequenceRecord]) -> dict[str, SequenceRecord]:
    return {str(r.key): r for r in records}


def _seed_rng(base: int, *parts: int) -> np.random.Generator:
    return np.random.default_rng([base, *parts])


DEFAULT_BUDGETS = tuple(range(1, 31))


def frames_sweep(model: GaitSetModel, split: Split, budgets: Sequence[int] = DEFAULT_BUDGETS, seeds: int = 10,
                 subset: str = "NM", base_seed: int = 0, restrict_gallery: bool = True,
                 metric: str = "concat", cache: FeatureCache | None = None) -> dict:
    """Rank-1 mean per frame budget, with gallery and probe samples both drawn at that budget."""
    probes = split.probes.get(subset)
    if not probes:
        raise DataError(f"probe subset {subset!r} is empty")
    if not split.gallery:
        raise DataError("empty gallery")
    cache = cache or FeatureCache(model)
    records = _records_by_key([*split.gallery, *probes])
    full_gallery = None if restrict_gallery else cache.embed([SilhouetteSample.from_record(r) for r in split.gallery], records)
    results = {}
    for b in budgets:
        per_seed = []
        for s in range(seeds):
            rng = _seed_rng(base_seed, s, int(b))
            gal = full_gallery if full_gallery is not None else cache.embed([compose_probe([r], "single", b, rng) for r in split.gallery], records)
            prb = cache.embed([compose_probe([r], "single", b, rng) for r in probes], records)
            per_seed.append(rank1(prb, gal, metric).mean)
        results[int(b)] = per_seed
    return {"mode": "frames", "subset": subset, "restrict_gallery": restrict_gallery, "per_seed": results,
            "mean": {b: float(np.mean(v)) for b, v in results.items()}}


def fold_view_difference(a: float, b: float) -> float:
    d = abs(float(a) - float(b)) % 360.0
    d = min(d, 360.0 - d)
    return d if d <= 90.0 else 180.0 - d


def multiview_sweep(model: GaitSetModel, split: Split, per_view: int = 5, seeds: int = 10, subset: str = "NM",
                    base_seed: int = 0, metric: str = "concat", cache: FeatureCache | None = None) -> dict:
    """Two-view probes (``per_view`` frames from each of two views) vs one-view probes of twice the frames."""
    probes = split.probes.get(subset)
    if not probes:
        raise DataError(f"probe subset {subset!r} is empty")
    cache = cache or FeatureCache(model)
    records = _records_by_key([*split.gallery, *probes])
    gallery = cache.embed([SilhouetteSample.from_record(r) for r in split.gallery], records)
    groups: dict[tuple[str, str, int], list[SequenceRecord]] = {}
    for r in probes:
        groups.setdefault((r.key.identity, r.key.condition, r.key.seq), []).append(r)
    pair_acc: dict[tuple[str, str], list[float]] = {}
    single, two = [], []
    for s in range(seeds):
        rng = _seed_rng(base_seed, s)
        singles = [compose_probe([r], "single", 2 * per_view, rng) for r in probes]
        single.append(rank1(cache.embed(singles, records), gallery, metric).mean)
        composites = []
        for recs in groups.values():
            for a, b in combinations(sorted(recs, key=lambda r: r.key.view), 2):
                composites.append(compose_probe([a, b], "multiview", per_view, rng))
        if not composites:
            raise DataError("multiview sweep needs probe sequences of one walk seen from at least two views")
        res = rank1(cache.embed(composites, records), gallery, metric)
        two.append(res.mean)
        for pv, m in res.view_means.items():
            pair_acc.setdefault(tuple(pv.split("+")), []).append(m)
    buckets: dict[float, list[float]] = {}
    for (va, vb), accs in pair_acc.items():
        try:
            diff = fold_view_difference(float(va), float(vb))
        except ValueError:
            continue
        buckets.setdefault(diff, []).append(float(np.mean(accs)))
    return {
        "mode": "multiview",
        "subset": subset,
        "single_view": float(np.mean(single)),
        "two_view": float(np.mean(two)),
        "single_view_per_seed": single,
        "two_view_per_seed": two,
        "pairs": {"+".join(k): float(np.mean(v)) for k, v in sorted(pair_acc.items())},
        "buckets": {k: float(np.mean(v)) for k, v in sorted(buckets.items())},
    }


MULTICONDITION_ROWS = (
    ("NM", 10), ("BG", 10), ("CL", 10),
    (("NM", "BG"), 10), (("NM", "CL"), 10), (("BG", "CL"), 10),
    ("NM", 20), ("BG", 20), ("CL", 20),
)


def row_label(conditions, budget: int) -> str:
    conds = (conditions,) if isinstance(conditions, str) else conditions
    return "+".join(f"{c}({budget})" for c in conds)


def multicondition_sweep(model: GaitSetModel, split: Split, seeds: int = 10, base_seed: int = 0,
                         metric: str = "concat", rows=MULTICONDITION_ROWS, cache: FeatureCache | None = None) -> dict:
    """Accuracy grid for probes mixing walking conditions; ``split`` should use the
    ``multicondition`` protocol (NM/BG/CL #2 in the gallery, #1 as probes)."""
    if not split.gallery:
        raise DataError("empty gallery (multicondition sweeps need NM/BG/CL sequence #2)")
    cache = cache or FeatureCache(model)
    probe_records = [r for recs in split.probes.values() for r in recs]
    records = _records_by_key([*split.gallery, *probe_records])
    gallery = cache.embed([SilhouetteSample.from_record(r) for r in split.gallery], records)
    by_cell: dict[tuple[str, str], dict[str, SequenceRecord]] = {}
    for r in probe_records:
        by_cell.setdefault((r.key.identity, r.key.view), {})[r.key.condition] = r
    grid = {}
    for conditions, budget in rows:
        conds = (conditions,) if isinstance(conditions, str) else tuple(conditions)
        label = row_label(conds, budget)
        accs = []
        for s in range(seeds):
            rng = _seed_rng(base_seed, s)
            mode = "single" if len(conds) == 1 else "multicondition"
            samples = [
                compose_probe([cell[c] for c in conds], mode, budget, rng)
                for _, cell in sorted(by_cell.items())
                if all(c in cell for c in conds)
            ]
            if not samples:
                raise DataError(f"no probe sequences for row {label}")
            accs.append(rank1(cache.embed(samples, records), gallery, metric).mean)
        grid[label] = float(np.mean(accs))
    return {"mode": "multicondition", "grid": grid}


# -- reporting ---------------------------------------------------------------------------
def format_table(results: Mapping[str, RetrievalResult]) -> str:
    """Aligned text table: one row per probe subset, one column per probe view plus the mean."""
    views = sorted({v for r in results.values() for v in r.view_means})
    head = ["Probe"] + views + ["Mean"]
    rows = [head]
    for name, res in results.items():
        rows.append([name] + [_cell(res.view_means.get(v)) for v in views] + [_cell(res.mean)])
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _cell(x) -> str:
    return "-" if x is None or not np.isfinite(x) else f"{x:.1f}"


def write_results(path, values: Mapping[str, object], run: Mapping[str, object] | None = None) -> None:
    """Key-value results file: ``key = value`` per line, ``run.*`` keys first, then sorted results."""
    lines = [f"run.{k} = {v}" for k, v in (run or {}).items()]
    lines += [f"{k} = {v}" for k, v in sorted(values.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_results(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            k, _, v = line.partition(" = ")
            out[k] = v
    return out


def sweep_values(report: dict) -> dict[str, str]:
    """Flatten a sweep report into key-value results."""
    mode = report["mode"]
    out = {}
    if mode == "frames":
        for b, m in report["mean"].items():
            out[f"sweep.frames.{b}"] = format_value(m)
    elif mode == "multiview":
        out["sweep.multiview.single_view"] = format_value(report["single_view"])
        out["sweep.multiview.two_view"] = format_value(report["two_view"])
        for d, m in report["buckets"].items():
            out[f"sweep.multiview.diff.{d:g}"] = format_value(m)
        for pair, m in report["pairs"].items():
            out[f"sweep.multiview.pair.{pair}"] = format_value(m)
    else:
        for label, m in report["grid"].items():
            out[f"sweep.multicondition.{label}"] = format_value(m)
    return out
