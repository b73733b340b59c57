"""Batch-all triplet loss over strip embeddings, the p x k sampler and training.

The loss is computed independently per strip. For every valid triplet
(anchor, positive, negative) the hinge ``max(0, margin + d(a,p) - d(a,n))``
uses the Euclidean distance between that strip's vectors. A strip's loss is
the mean of its strictly positive hinge terms (zero when there are none) and
the total is the mean over strips.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, NumericError
from .network import GaitSetModel
from .tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.2


@dataclass(frozen=True)
class BatchSpec:
    p: int = 8
    k: int = 16
    m: int = 30

    def __post_init__(self):
        if self.p < 2 or self.k < 2:
            raise ConfigError(f"a p x k batch needs p >= 2 and k >= 2, got p={self.p} k={self.k}")
        if self.m < 1:
            raise ConfigError(f"set cardinality must be positive, got m={self.m}")


@dataclass
class TripletLossReport:
    total: Tensor
    nonzero_fraction: float
    per_strip: np.ndarray
    positive_terms: int
    terms: int

    @property
    def loss(self) -> float:
        return float(self.total.data)


def _triplet_mask(labels: Sequence) -> np.ndarray:
    labels = np.asarray([str(x) for x in labels])
    same = labels[:, None] == labels[None, :]
    distinct = ~np.eye(len(labels), dtype=bool)
    # [a, p, n]: label(a) == label(p), a != p, label(a) != label(n)
    return (same & distinct)[:, :, None] & ~same[:, None, :]


def pairwise_distances(embeddings: Tensor) -> Tensor:
    """Per-strip Euclidean distance matrices ``[strips, B, B]`` from ``[B, strips, d]``."""
    b, s, d = embeddings.shape
    x = embeddings.transpose(1, 0, 2)
    diff = x.reshape(s, b, 1, d) - x.reshape(s, 1, b, d)
    return T.sqrt((diff * diff).sum(axis=3))


def batch_all_triplet(embeddings: Tensor, labels: Sequence, margin: float = DEFAULT_MARGIN) -> TripletLossReport:
    """Batch-all triplet loss, averaging only the positive hinge terms."""
    if not isinstance(embeddings, Tensor):
        embeddings = Tensor(embeddings)
    if embeddings.ndim != 3:
        raise ConfigError(f"embeddings must be [batch, strips, d], got {embeddings.shape}")
    b, strips, _ = embeddings.shape
    if len(labels) != b:
        raise ConfigError(f"{len(labels)} labels for {b} embeddings")
    mask = _triplet_mask(labels)
    if not mask.any():
        raise DataError("degenerate batch: no valid (anchor, positive, negative) triplet")
    dist = pairwise_distances(embeddings)
    hinge = dist.reshape(strips, b, b, 1) - dist.reshape(strips, b, 1, b) + margin
    mask_t = Tensor(mask.astype(hinge.dtype))
    active = T.relu(hinge) * mask_t
    positive = (hinge.data > 0) & mask
    counts = positive.reshape(strips, -1).sum(axis=1)
    per_strip = active.sum(axis=(1, 2, 3)) * Tensor((1.0 / np.maximum(counts, 1)).astype(hinge.dtype))
    total = per_strip.mean()
    terms = int(mask.sum()) * strips
    return TripletLossReport(
        total=total,
        nonzero_fraction=float(counts.sum()) / terms,
        per_strip=per_strip.data.copy(),
        positive_terms=int(counts.sum()),
        terms=terms,
    )


# -- sampling ---------------------------------------------------------------------
@dataclass
class Batch:
    sets: list[np.ndarray]
    labels: list[str]
    sources: list = field(default_factory=list)


def _frames_of(record) -> np.ndarray:
    return record.frames() if hasattr(record, "frames") else np.asarray(record)


def _grouped(dataset) -> Mapping[str, Sequence]:
    groups = dataset.by_identity() if hasattr(dataset, "by_identity") else dataset
    return {str(k): list(v) for k, v in sorted(groups.items()) if len(v) > 0}


def sample_frames(frames: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` frames drawn uniformly, without replacement when the sequence is long enough."""
    n = len(frames)
    if n == 0:
        raise DataError("cannot sample frames from an empty sequence")
    idx = rng.choice(n, size=m, replace=n < m)
    return frames[idx]


def sample_batch(dataset, spec: BatchSpec, seed) -> Batch:
    """Draw a p x k batch of m-frame sets.

    ``dataset`` maps identity -> sequences (or offers ``by_identity()``); a
    sequence is an array ``[n, H, W]`` or an object with ``frames()``.
    ``seed`` is an int or a ``numpy.random.Generator`` (advanced in place).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    groups = _grouped(dataset)
    ids = list(groups)
    if len(ids) < spec.p:
        raise DataError(f"need at least p={spec.p} identities with sequences, dataset has {len(ids)}")
    chosen = rng.choice(len(ids), size=spec.p, replace=False)
    batch = Batch([], [], [])
    for i in chosen:
        ident = ids[i]
        seqs = groups[ident]
        picks = rng.choice(len(seqs), size=spec.k, replace=len(seqs) < spec.k)
        for j in picks:
            record = seqs[j]
            batch.sets.append(sample_frames(_frames_of(record), spec.m, rng))
            batch.labels.append(ident)
            batch.sources.append(getattr(record, "key", j))
    return batch


# -- optimization ------------------------------------------------------------------
class Adam:
    """Adaptive moment estimation without weight decay."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def train_step(model: GaitSetModel, batch: Batch, optimizer: Adam, margin: float = DEFAULT_MARGIN) -> TripletLossReport:
    """Forward, loss, backward and one optimizer update.

    When no hinge term is positive the gradient is identically zero and the
    update is skipped, so parameters move only on informative batches.
    """
    optimizer.zero_grad()
    for p in model.params.values():
        p.requires_grad = True
    embeddings = model.forward(batch.sets)
    report = batch_all_triplet(embeddings, batch.labels, margin)
    if not np.isfinite(report.loss):
        raise NumericError(
            f"non-finite loss {report.loss} (nonzero fraction {report.nonzero_fraction:.4f}, "
            f"embedding range [{np.nanmin(embeddings.data):.3g}, {np.nanmax(embeddings.data):.3g}])"
        )
    if report.positive_terms == 0:
        return report
    report.total.backward()
    bad = [k for k, p in model.params.items() if p.grad is not None and not np.all(np.isfinite(p.grad))]
    if bad:
        raise NumericError(f"non-finite gradients in {', '.join(bad)} at loss {report.loss:.6g}")
    optimizer.step()
    return report


# -- training loop -------------------------------------------------------------------
SCHEDULES = {
    "ST": {"iterations": 50_000, "lr": ((0, 1e-4),)},
    "MT": {"iterations": 60_000, "lr": ((0, 1e-4),)},
    "LT": {"iterations": 80_000, "lr": ((0, 1e-4),)},
    "OUMVLP": {"iterations": 250_000, "lr": ((0, 1e-4), (150_000, 1e-5))},
}


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: float = 1e-4
    margin: float = DEFAULT_MARGIN
    seed: int = 0
    batch: BatchSpec = field(default_factory=BatchSpec)
    lr_changes: tuple = ()
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.margin < 0:
            raise ConfigError("margin must be non-negative")
        self.lr_changes = tuple((int(i), float(r)) for i, r in self.lr_changes)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        try:
            sched = SCHEDULES[name.upper()]
        except KeyError:
            raise ConfigError(f"unknown schedule {name!r} (choose from {', '.join(SCHEDULES)})") from None
        (_, lr0), *changes = sched["lr"]
        kw = dict(iterations=sched["iterations"], lr=lr0, lr_changes=tuple(changes))
        if name.upper() == "OUMVLP":
            kw["batch"] = BatchSpec(p=32, k=16, m=30)
        kw.update(overrides)
        return cls(**kw)

    def lr_at(self, iteration: int) -> float:
        lr = self.lr
        for start, rate in self.lr_changes:
            if iteration >= start:
                lr = rate
        return lr

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "lr": self.lr,
            "margin": self.margin,
            "seed": self.seed,
            "batch_p": self.batch.p,
            "batch_k": self.batch.k,
            "batch_m": self.batch.m,
            "lr_changes": ";".join(f"{i}:{r}" for i, r in self.lr_changes),
            "checkpoint_every": self.checkpoint_every,
        }


def format_log_line(iteration: int, report: TripletLossReport, lr: float, elapsed: float) -> str:
    return (
        f"iteration={iteration} loss={report.loss:.6f} nonzero={report.nonzero_fraction:.6f} "
        f"lr={lr:g} wall={elapsed:.3f}"
    )


def train(
    model: GaitSetModel,
    dataset,
    config: TrainConfig,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    callback: Callable[[int, TripletLossReport], None] | None = None,
) -> GaitSetModel:
    """Train ``model`` in place; batches are drawn from a generator seeded by ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model.params, lr=config.lr)
    start = time.perf_counter()
    log_file = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    try:
        for it in range(1, config.iterations + 1):
            optimizer.lr = config.lr_at(it - 1)
            batch = sample_batch(dataset, config.batch, rng)
            report = train_step(model, batch, optimizer, config.margin)
            if log_file is not None:
                log_file.write(format_log_line(it, report, optimizer.lr, time.perf_counter() - start) + "\n")
                log_file.flush()
            if callback is not None:
                callback(it, report)
            if checkpoint_dir is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
                model.save(Path(checkpoint_dir) / f"checkpoint-{it:07d}.ckpt")
    finally:
        if log_file is not None:
            log_file.close()
    for p in model.params.values():
        p.grad = None
    return model
