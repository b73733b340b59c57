"""Train/test partitions and gallery/probe rules.

Identities are ordered lexicographically; the first ``train_count`` (or the
first ``train_fraction`` of them) train and the rest are test identities.
Among test identities the gallery and each probe subset are selected by
condition and sequence number.

A custom protocol is a text file of ``key = value`` lines::

    name = custom
    train_count = 10          # or: train_fraction = 0.5
    gallery = NM:1,2,3,4      # space-separated rules; "NM:*" means any seq
    probe.NM = NM:5,6
    probe.BG = BG:1,2
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from ..errors import ConfigError, DataError
from .dataset import SequenceKey, SequenceRecord, SilhouetteDataset


@dataclass(frozen=True)
class SubsetRule:
    condition: str
    seqs: tuple[int, ...] | None = None

    def matches(self, key: SequenceKey) -> bool:
        return key.condition == self.condition.upper() and (self.seqs is None or key.seq in self.seqs)

    def __str__(self) -> str:
        seqs = "*" if self.seqs is None else ",".join(str(s) for s in self.seqs)
        return f"{self.condition}:{seqs}"

    @classmethod
    def parse(cls, text: str) -> "SubsetRule":
        cond, sep, seqs = text.partition(":")
        if not sep or not cond.isalpha():
            raise ConfigError(f"subset rule {text!r} must look like NM:1,2 or NM:*")
        if seqs.strip() == "*":
            return cls(cond.upper())
        try:
            return cls(cond.upper(), tuple(int(s) for s in seqs.split(",")))
        except ValueError:
            raise ConfigError(f"subset rule {text!r} has a non-integer sequence number") from None


def _rules(text: str) -> tuple[SubsetRule, ...]:
    return tuple(SubsetRule.parse(t) for t in text.split())


@dataclass
class Split:
    protocol: "ProtocolSpec"
    train_ids: list[str]
    test_ids: list[str]
    train: list[SequenceRecord]
    gallery: list[SequenceRecord]
    probes: dict[str, list[SequenceRecord]]


@dataclass(frozen=True)
class ProtocolSpec:
    name: str
    gallery: tuple[SubsetRule, ...]
    probes: tuple[tuple[str, tuple[SubsetRule, ...]], ...]
    train_count: int | None = None
    train_fraction: float | None = None

    def __post_init__(self):
        if (self.train_count is None) == (self.train_fraction is None):
            raise ConfigError(f"protocol {self.name}: give exactly one of train_count / train_fraction")
        if self.train_count is not None and self.train_count < 1:
            raise ConfigError(f"protocol {self.name}: train_count must be positive")
        if self.train_fraction is not None and not 0 < self.train_fraction < 1:
            raise ConfigError(f"protocol {self.name}: train_fraction must lie in (0, 1)")
        if not self.gallery or not self.probes:
            raise ConfigError(f"protocol {self.name}: needs a gallery rule and at least one probe subset")

    def split_identities(self, identities) -> tuple[list[str], list[str]]:
        ids = sorted(identities)
        n = self.train_count if self.train_count is not None else int(round(self.train_fraction * len(ids)))
        if n >= len(ids):
            raise DataError(
                f"protocol {self.name} trains on {n} identities but the dataset has only {len(ids)}; no test identities remain"
            )
        return ids[:n], ids[n:]

    def split(self, dataset: SilhouetteDataset) -> Split:
        train_ids, test_ids = self.split_identities(dataset.identities())
        test = dataset.select(identities=test_ids)
        return Split(
            protocol=self,
            train_ids=train_ids,
            test_ids=test_ids,
            train=dataset.select(identities=train_ids),
            gallery=[r for r in test if any(rule.matches(r.key) for rule in self.gallery)],
            probes={name: [r for r in test if any(rule.matches(r.key) for rule in rules)] for name, rules in self.probes},
        )

    def with_gallery(self, gallery, probes, name: str | None = None) -> "ProtocolSpec":
        return replace(self, name=name or self.name, gallery=tuple(gallery), probes=tuple(probes))

    def to_text(self) -> str:
        lines = [f"name = {self.name}"]
        if self.train_count is not None:
            lines.append(f"train_count = {self.train_count}")
        else:
            lines.append(f"train_fraction = {self.train_fraction}")
        lines.append("gallery = " + " ".join(str(r) for r in self.gallery))
        lines.extend(f"probe.{name} = " + " ".join(str(r) for r in rules) for name, rules in self.probes)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ProtocolSpec":
        values, probes = {}, []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep:
                raise ConfigError(f"protocol line {raw!r} is not 'key = value'")
            if key.startswith("probe."):
                probes.append((key[len("probe."):], _rules(value)))
            elif key in ("name", "train_count", "train_fraction", "gallery"):
                values[key] = value
            else:
                raise ConfigError(f"unknown protocol key {key!r}")
        try:
            return cls(
                name=values.get("name", "custom"),
                gallery=_rules(values.get("gallery", "")),
                probes=tuple(probes),
                train_count=int(values["train_count"]) if "train_count" in values else None,
                train_fraction=float(values["train_fraction"]) if "train_fraction" in values else None,
            )
        except ValueError as exc:
            raise ConfigError(f"bad protocol value: {exc}") from None


_CASIA_GALLERY = (SubsetRule("NM", (1, 2, 3, 4)),)
_CASIA_PROBES = (
    ("NM", (SubsetRule("NM", (5, 6)),)),
    ("BG", (SubsetRule("BG", (1, 2)),)),
    ("CL", (SubsetRule("CL", (1, 2)),)),
)

PROTOCOLS = {
    "ST": ProtocolSpec("ST", _CASIA_GALLERY, _CASIA_PROBES, train_count=24),
    "MT": ProtocolSpec("MT", _CASIA_GALLERY, _CASIA_PROBES, train_count=62),
    "LT": ProtocolSpec("LT", _CASIA_GALLERY, _CASIA_PROBES, train_count=74),
    "OUMVLP": ProtocolSpec(
        "OUMVLP", (SubsetRule("NM", (1,)),), (("NM", (SubsetRule("NM", (0,)),)),), train_count=5153
    ),
    # desk-scale synthetic data: one sequence per condition; NM probes are
    # only compared across views, so they never meet their own gallery entry
    "SYNTH": ProtocolSpec(
        "SYNTH",
        (SubsetRule("NM", (1,)),),
        (("NM", (SubsetRule("NM", (1,)),)), ("BG", (SubsetRule("BG", (1,)),)), ("CL", (SubsetRule("CL", (1,)),))),
        train_fraction=0.6,
    ),
}


def multicondition(protocol: ProtocolSpec) -> ProtocolSpec:
    """Same identity split with NM/BG/CL #2 in the gallery and #1 of each as probes."""
    return protocol.with_gallery(
        (SubsetRule("NM", (2,)), SubsetRule("BG", (2,)), SubsetRule("CL", (2,))),
        tuple((c, (SubsetRule(c, (1,)),)) for c in ("NM", "BG", "CL")),
        name=f"{protocol.name}-multicondition",
    )


def resolve_protocol(value) -> ProtocolSpec:
    if isinstance(value, ProtocolSpec):
        return value
    name = str(value)
    if name.upper() in PROTOCOLS:
        return PROTOCOLS[name.upper()]
    path = Path(name)
    if path.is_file():
        return ProtocolSpec.from_text(path.read_text(encoding="utf-8"))
    raise ConfigError(f"unknown protocol {name!r} (presets: {', '.join(PROTOCOLS)}; or a protocol file)")
