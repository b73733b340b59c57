"""Permutation-invariant pooling of frame-level feature maps.

A frame feature set is a tensor ``[n, c, h, w]`` whose first axis is an
unordered set of ``n >= 1`` frames; a batch of equally sized sets may be
passed as ``[b, n, c, h, w]`` with ``set_axis=1``. Every strategy reduces the
set axis and returns ``[c, h, w]`` (or ``[b, c, h, w]``).
"""

from __future__ import annotations

import enum

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


class SpStrategy(str, enum.Enum):
    MAX = "max"
    MEAN = "mean"
    MEDIAN = "median"
    JOINT_SUM = "joint_sum"
    JOINT_CONV = "joint_conv"
    ATTENTION = "attention"

    @classmethod
    def parse(cls, value) -> "SpStrategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "_"))
        except ValueError:
            names = ", ".join(s.value for s in cls)
            raise ConfigError(f"unknown set pooling strategy {value!r} (choose from {names})") from None

    @property
    def trainable(self) -> bool:
        return self in (SpStrategy.JOINT_CONV, SpStrategy.ATTENTION)


def _check_set(features: Tensor, set_axis: int) -> int:
    if features.ndim != 4 + set_axis:
        raise ConfigError(f"frame feature set must be {4 + set_axis}-D, got shape {features.shape}")
    n = features.shape[set_axis]
    if n < 1:
        raise ConfigError("set pooling of an empty set")
    return n


def statistics(features: Tensor, set_axis: int = 0) -> tuple[Tensor, Tensor, Tensor]:
    """Max, mean and median over the set axis."""
    _check_set(features, set_axis)
    return (
        T.reduce_max(features, set_axis),
        T.reduce_mean(features, set_axis),
        T.reduce_median(features, set_axis),
    )


def init_params(strategy, channels: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """Trainable parameters of one pooling site (empty for the statistical ones)."""
    strategy = SpStrategy.parse(strategy)
    if strategy is SpStrategy.JOINT_CONV:
        return {"combiner": T.uniform_init(rng, (channels, 3 * channels, 1, 1), 3 * channels, dtype)}
    if strategy is SpStrategy.ATTENTION:
        return {"attention": T.uniform_init(rng, (channels, 4 * channels, 1, 1), 4 * channels, dtype)}
    return {}


def _conv1x1(x: Tensor, weight: Tensor) -> Tensor:
    if x.ndim == 3:
        return T.conv2d(x.reshape(1, *x.shape), weight).reshape(weight.shape[0], *x.shape[1:])
    return T.conv2d(x, weight)


def joint_conv_pool(features: Tensor, combiner: Tensor, set_axis: int = 0) -> Tensor:
    """Concatenate max/mean/median on channels, then mix with a 1x1 convolution."""
    _check_set(features, set_axis)
    c = features.shape[set_axis + 1]
    if combiner.shape != (c, 3 * c, 1, 1):
        raise ConfigError(f"combiner must be ({c}, {3 * c}, 1, 1), got {combiner.shape}")
    stats = T.concat(statistics(features, set_axis), axis=set_axis)
    return _conv1x1(stats, combiner)


def attention_pool(features: Tensor, attention: Tensor, set_axis: int = 0) -> Tensor:
    """Refine each frame with an elementwise attention map, then take the set max.

    The map is a 1x1 convolution of the frame concatenated with the
    broadcast set statistics. Refinement is residual: ``v * a + v``.
    No squashing is applied to the map.
    """
    _check_set(features, set_axis)
    c = features.shape[set_axis + 1]
    if attention.shape != (c, 4 * c, 1, 1):
        raise ConfigError(f"attention weights must be ({c}, {4 * c}, 1, 1), got {attention.shape}")
    stats = T.concat(statistics(features, set_axis), axis=set_axis)
    stats = stats.reshape(*stats.shape[:set_axis], 1, *stats.shape[set_axis:])
    stats = T.broadcast_to(stats, (*features.shape[: set_axis + 1], 3 * c, *features.shape[-2:]))
    joined = T.concat([features, stats], axis=set_axis + 1)
    lead = features.shape[: set_axis + 1]
    flat = joined.reshape(int(np.prod(lead)), 4 * c, *features.shape[-2:])
    amap = T.conv2d(flat, attention).reshape(features.shape)
    refined = features * amap + features
    return T.reduce_max(refined, set_axis)


def set_pool(features: Tensor, strategy, params: dict[str, Tensor] | None = None, set_axis: int = 0) -> Tensor:
    """Reduce the set axis of ``features`` with the given strategy."""
    strategy = SpStrategy.parse(strategy)
    params = params or {}
    _check_set(features, set_axis)
    if strategy is SpStrategy.MAX:
        return T.reduce_max(features, set_axis)
    if strategy is SpStrategy.MEAN:
        return T.reduce_mean(features, set_axis)
    if strategy is SpStrategy.MEDIAN:
        return T.reduce_median(features, set_axis)
    if strategy is SpStrategy.JOINT_SUM:
        mx, mean, med = statistics(features, set_axis)
        return mx + mean + med
    if strategy is SpStrategy.JOINT_CONV:
        if "combiner" not in params:
            raise ConfigError("joint_conv pooling needs a 'combiner' parameter")
        return joint_conv_pool(features, params["combiner"], set_axis)
    if "attention" not in params:
        raise ConfigError("attention pooling needs an 'attention' parameter")
    return attention_pool(features, params["attention"], set_axis)
