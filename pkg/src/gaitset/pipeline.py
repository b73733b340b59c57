"""End-to-end runs shared by the command line and the acceptance suite:
run configuration, training on a protocol split, evaluation and the
ablation grid."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .dataio.protocol import Split
from .errors import ConfigError
from .evaluate import RetrievalResult, embed_gallery, embed_probes, rank1
from .metric import BatchSpec, TrainConfig, train
from .network import GaitSetModel, NetworkConfig, parse_config_value

NETWORK_PRESETS = {
    "casia_b": NetworkConfig.casia_b,
    "oumvlp": NetworkConfig.oumvlp,
    "small": NetworkConfig.small,
    "tiny": NetworkConfig.tiny,
}


def resolve_network(preset: str = "casia_b", overrides: Mapping[str, str] | None = None) -> NetworkConfig:
    """A preset name or config file, with ``key = value`` overrides applied on top."""
    path = Path(preset)
    if preset.lower() in NETWORK_PRESETS:
        base = NETWORK_PRESETS[preset.lower()]()
    elif path.is_file():
        base = NetworkConfig.from_text(path.read_text(encoding="utf-8"))
    else:
        raise ConfigError(f"unknown network {preset!r} (presets: {', '.join(NETWORK_PRESETS)}; or a config file)")
    if not overrides:
        return base
    merged = base.to_dict()
    for key, value in overrides.items():
        if key not in merged:
            raise ConfigError(f"unknown network config key {key!r}")
        merged[key] = parse_config_value(key, str(value))
    return NetworkConfig.from_dict(merged)


@dataclass
class RunConfig:
    """Everything needed to reproduce a run; written into every results file."""

    dataset: str
    protocol: str
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    out: str = ""

    @property
    def seed(self) -> int:
        return self.training.seed

    def to_dict(self) -> dict[str, str]:
        out = {"dataset": self.dataset, "protocol": self.protocol, "out": self.out}
        for k, v in self.network.to_dict().items():
            out[f"network.{k}"] = ",".join(map(str, v)) if isinstance(v, list) else str(v).lower() if isinstance(v, bool) else str(v)
        for k, v in self.training.to_dict().items():
            out[f"train.{k}"] = str(v)
        return out


def training_groups(split: Split) -> dict[str, list]:
    groups: dict[str, list] = {}
    for r in split.train:
        groups.setdefault(r.key.identity, []).append(r)
    return groups


def train_on_split(split: Split, network: NetworkConfig, config: TrainConfig, log_path=None,
                   checkpoint_dir=None, callback=None) -> GaitSetModel:
    """Initialise from ``config.seed`` and train on the split's training identities."""
    model = GaitSetModel.initialize(network, seed=config.seed)
    return train(model, training_groups(split), config, log_path, checkpoint_dir, callback)


def evaluate_split(model: GaitSetModel, split: Split, metric: str = "concat"):
    """Gallery store, probe stores and one ``RetrievalResult`` per probe subset."""
    gallery = embed_gallery(model, split)
    probes = embed_probes(model, split)
    return gallery, probes, {name: rank1(store, gallery, metric) for name, store in probes.items()}


# -- ablation grid --------------------------------------------------------------------------
@dataclass(frozen=True)
class AblationArm:
    name: str
    overrides: dict

    def network(self, base: NetworkConfig) -> NetworkConfig:
        return dataclasses.replace(base, **self.overrides)


_NO_MGP = dict(mgp_enabled=False)
ABLATION_ARMS = (
    AblationArm("gei+shared-hpm", dict(gei_collapse=True, sp_strategy="max", hpm_independent=False, **_NO_MGP)),
    AblationArm("set-max+shared-hpm", dict(sp_strategy="max", hpm_independent=False, **_NO_MGP)),
    AblationArm("set-max+independent-hpm", dict(sp_strategy="max", hpm_independent=True, **_NO_MGP)),
    AblationArm("set-mean", dict(sp_strategy="mean", hpm_independent=True, **_NO_MGP)),
    AblationArm("set-median", dict(sp_strategy="median", hpm_independent=True, **_NO_MGP)),
    AblationArm("set-joint-sum", dict(sp_strategy="joint_sum", hpm_independent=True, **_NO_MGP)),
    AblationArm("set-joint-conv", dict(sp_strategy="joint_conv", hpm_independent=True, **_NO_MGP)),
    AblationArm("set-attention", dict(sp_strategy="attention", hpm_independent=True, **_NO_MGP)),
    AblationArm("set-max+independent-hpm+mgp", dict(sp_strategy="max", hpm_independent=True, mgp_enabled=True)),
)


def select_arms(spec: str | None) -> list[tuple[int, AblationArm]]:
    """``None`` for all arms, else a comma list of 1-based arm numbers."""
    numbered = list(enumerate(ABLATION_ARMS, start=1))
    if not spec:
        return numbered
    try:
        wanted = [int(s) for s in spec.split(",")]
    except ValueError:
        raise ConfigError(f"arm list {spec!r} must be comma-separated numbers") from None
    bad = [w for w in wanted if not 1 <= w <= len(ABLATION_ARMS)]
    if bad:
        raise ConfigError(f"arm numbers {bad} outside 1..{len(ABLATION_ARMS)}")
    return [numbered[w - 1] for w in wanted]


def default_batch_for(protocol: str) -> BatchSpec:
    return BatchSpec(p=32, k=16, m=30) if protocol.upper() == "OUMVLP" else BatchSpec()


def subset_means(results: Mapping[str, RetrievalResult]) -> dict[str, float]:
    return {name: res.mean for name, res in results.items()}
