"""Silhouette datasets: on-disk loading, protocols, synthetic data and probe composition."""

from .compose import ReplacementWarning, SilhouetteSample, compose_probe
from .dataset import DEFAULT_LAYOUT, SequenceKey, SequenceRecord, SilhouetteDataset, load_dataset
from .protocol import PROTOCOLS, ProtocolSpec, Split, SubsetRule, multicondition, resolve_protocol
from .synth import SynthSpec, spread_views, synth_generate

__all__ = [
    "DEFAULT_LAYOUT",
    "PROTOCOLS",
    "ReplacementWarning",
    "SilhouetteSample",
    "compose_probe",
    "ProtocolSpec",
    "SequenceKey",
    "SequenceRecord",
    "SilhouetteDataset",
    "Split",
    "SubsetRule",
    "SynthSpec",
    "load_dataset",
    "multicondition",
    "resolve_protocol",
    "spread_views",
    "synth_generate",
]
