"""The GaitSet graph: frame backbone, set pooling, MGP and horizontal pyramid mapping.

Layout (kernel sizes and pooling placement are fixed here)::

    frames [n,1,H,W]
      C1 5x5 -> lrelu -> C2 3x3 -> lrelu -> maxpool2   -> stage 1  --SP--> g1
      C3 3x3 -> lrelu -> C4 3x3 -> lrelu -> maxpool2   -> stage 2  --SP--> p2
      C5 3x3 -> lrelu -> C6 3x3 -> lrelu               -> stage 3  --SP--> main
    MGP (own weights):  g2 = block2(g1) + p2 ;  g3 = block3(g2) + main
    embedding = cat(HPM_main(main), HPM_mgp(g3))        [2 * (2^S - 1), d]
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import setpool
from . import tensor as T
from .errors import ConfigError, DataError
from .serialize import read_container, write_container
from .setpool import SpStrategy
from .tensor import Tensor

FIRST_KERNEL = 5
KERNEL = 3


@dataclass
class NetworkConfig:
    channels: tuple[int, int, int, int, int, int] = (32, 32, 64, 64, 128, 128)
    scales: int = 5
    embed_dim: int = 256
    sp_strategy: SpStrategy = SpStrategy.MAX
    leaky_slope: float = 0.1
    mgp_enabled: bool = True
    hpm_independent: bool = True
    gei_collapse: bool = False
    input_height: int = 64
    input_width: int = 44

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.sp_strategy = SpStrategy.parse(self.sp_strategy)
        self.validate()

    def validate(self) -> None:
        if len(self.channels) != 6 or min(self.channels) < 1:
            raise ConfigError(f"channels must be six positive integers, got {self.channels}")
        if self.scales < 1 or self.embed_dim < 1:
            raise ConfigError("scales and embed_dim must be positive")
        if self.input_height % 4 or self.input_width % 4:
            raise ConfigError("input extents must survive two 2x2 poolings (multiples of 4)")
        final = self.input_height // 4
        if final % (2 ** (self.scales - 1)):
            raise ConfigError(
                f"final feature height {final} is not divisible by 2^(S-1)={2 ** (self.scales - 1)}"
            )

    @property
    def strips(self) -> int:
        return 2**self.scales - 1

    @property
    def rows(self) -> int:
        return self.strips * (2 if self.mgp_enabled else 1)

    @classmethod
    def casia_b(cls, **overrides) -> "NetworkConfig":
        return cls(**overrides)

    @classmethod
    def oumvlp(cls, **overrides) -> "NetworkConfig":
        return cls(channels=(64, 64, 128, 128, 256, 256), **overrides)

    @classmethod
    def small(cls, **overrides) -> "NetworkConfig":
        """Desk-scale configuration used for synthetic training."""
        base = dict(channels=(16, 16, 32, 32, 64, 64), embed_dim=64)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "NetworkConfig":
        """4 channels, 8x8 inputs, S=2: small enough for full-graph gradient checks."""
        base = dict(channels=(4,) * 6, scales=2, embed_dim=3, input_height=8, input_width=8)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        d["sp_strategy"] = self.sp_strategy.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        d: dict = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line: {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"unknown network config key {key!r}")
            d[key] = parse_config_value(key, value)
        return cls(**d)


def parse_config_value(key: str, value: str):
    if key == "channels":
        return tuple(int(v) for v in value.split(","))
    if key == "sp_strategy":
        return value
    if key == "leaky_slope":
        return float(value)
    if key in ("mgp_enabled", "hpm_independent", "gei_collapse"):
        if value.lower() not in ("true", "false"):
            raise ConfigError(f"{key} must be true or false")
        return value.lower() == "true"
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {value!r}") from None


@dataclass
class Embedding:
    """Strip-by-dimension representation of one sample plus where it came from."""

    matrix: np.ndarray
    identity: str = ""
    view: str = ""
    condition: str = ""
    source: str = ""
    extra: dict = field(default_factory=dict)


# -- parameter construction ---------------------------------------------------
def init_params(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Seeded scaled-uniform initialisation, in a fixed name order."""
    rng = np.random.default_rng(seed)
    c1, c2, c3, c4, c5, c6 = config.channels
    params: dict[str, Tensor] = {}

    def conv(name, c_out, c_in, k):
        params[name] = T.uniform_init(rng, (c_out, c_in, k, k), c_in * k * k, dtype)

    conv("backbone.c1", c1, 1, FIRST_KERNEL)
    conv("backbone.c2", c2, c1, KERNEL)
    conv("backbone.c3", c3, c2, KERNEL)
    conv("backbone.c4", c4, c3, KERNEL)
    conv("backbone.c5", c5, c4, KERNEL)
    conv("backbone.c6", c6, c5, KERNEL)
    if config.mgp_enabled:
        conv("mgp.c3", c3, c2, KERNEL)
        conv("mgp.c4", c4, c3, KERNEL)
        conv("mgp.c5", c5, c4, KERNEL)
        conv("mgp.c6", c6, c5, KERNEL)
    for stage, ch in _pool_sites(config):
        for key, value in setpool.init_params(config.sp_strategy, ch, rng, dtype).items():
            params[f"setpool.{stage}.{key}"] = value
    heads = ["main", "mgp"] if config.mgp_enabled else ["main"]
    for head in heads:
        shape = (config.strips, c6, config.embed_dim) if config.hpm_independent else (c6, config.embed_dim)
        params[f"hpm.{head}.weight"] = T.uniform_init(rng, shape, c6, dtype)
    return params


def _pool_sites(config: NetworkConfig) -> list[tuple[str, int]]:
    _, c2, _, c4, _, c6 = config.channels
    if config.mgp_enabled:
        return [("stage1", c2), ("stage2", c4), ("stage3", c6)]
    return [("stage3", c6)]


def _sub(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {k[len(prefix) :]: v for k, v in params.items() if k.startswith(prefix)}


# -- forward pieces -----------------------------------------------------------
def _block(x: Tensor, w_a: Tensor, w_b: Tensor, slope: float, pool: bool) -> Tensor:
    x = T.leaky_relu(T.conv2d(x, w_a), slope)
    x = T.leaky_relu(T.conv2d(x, w_b), slope)
    return T.max_pool2d(x, 2) if pool else x


def backbone_forward(frames: Tensor, params: dict[str, Tensor], config: NetworkConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Frame-level features after C2+pool, C4+pool and C6; frames are independent."""
    if frames.ndim != 4 or frames.shape[1:] != (1, config.input_height, config.input_width):
        raise ConfigError(
            f"frames must be [n, 1, {config.input_height}, {config.input_width}], got {frames.shape}"
        )
    if frames.shape[0] < 1:
        raise ConfigError("empty frame set")
    s = config.leaky_slope
    p = params
    x1 = _block(frames, p["backbone.c1"], p["backbone.c2"], s, pool=True)
    x2 = _block(x1, p["backbone.c3"], p["backbone.c4"], s, pool=True)
    x3 = _block(x2, p["backbone.c5"], p["backbone.c6"], s, pool=False)
    return x1, x2, x3


def pool_sets(features: Tensor, counts: Sequence[int], config: NetworkConfig, params: dict[str, Tensor], stage: str) -> Tensor:
    """Set pooling of consecutive frame groups of sizes ``counts`` -> ``[b, c, h, w]``."""
    site = _sub(params, f"setpool.{stage}.")
    if len(set(counts)) == 1:
        n = counts[0]
        grouped = features.reshape(len(counts), n, *features.shape[1:])
        return setpool.set_pool(grouped, config.sp_strategy, site, set_axis=1)
    pooled = []
    start = 0
    for n in counts:
        pooled.append(setpool.set_pool(features[start : start + n], config.sp_strategy, site, set_axis=0))
        start += n
    return T.stack(pooled, axis=0)


def mgp_forward(pooled: tuple[Tensor, Tensor, Tensor], params: dict[str, Tensor], config: NetworkConfig) -> Tensor:
    """Run the unshared pipeline over set-level maps, adding each later tap after its block."""
    if not config.mgp_enabled:
        raise ConfigError("MGP is disabled in this configuration")
    g1, p2, p3 = pooled
    s = config.leaky_slope
    g2 = _block(g1, params["mgp.c3"], params["mgp.c4"], s, pool=True)
    if g2.shape != p2.shape:
        raise ConfigError(f"MGP stage 2 shape {g2.shape} != pooled stage 2 {p2.shape}")
    g2 = g2 + p2
    g3 = _block(g2, params["mgp.c5"], params["mgp.c6"], s, pool=False)
    if g3.shape != p3.shape:
        raise ConfigError(f"MGP stage 3 shape {g3.shape} != pooled stage 3 {p3.shape}")
    return g3 + p3


def strip_features(set_feature: Tensor, scales: int) -> Tensor:
    """Max+mean pooled strips, scale-major: ``[b, c, h, w] -> [b, 2^S-1, c]``."""
    b, c, h, w = set_feature.shape
    if h % (2 ** (scales - 1)):
        raise ConfigError(f"feature height {h} not divisible by 2^(S-1)={2 ** (scales - 1)}")
    parts = []
    for s in range(scales):
        strips = 2**s
        z = set_feature.reshape(b, c, strips, h // strips, w)
        parts.append(T.reduce_max(z, (3, 4)) + T.reduce_mean(z, (3, 4)))
    return T.concat(parts, axis=2).transpose(0, 2, 1)


def hpm_forward(set_feature: Tensor, scales: int, weight: Tensor) -> Tensor:
    """Horizontal pyramid mapping.

    ``set_feature`` is ``[c, h, w]`` or ``[b, c, h, w]``. ``weight`` is either
    ``[2^S-1, c, d]`` (one map per strip) or a single shared ``[c, d]``.
    """
    single = set_feature.ndim == 3
    if single:
        set_feature = set_feature.reshape(1, *set_feature.shape)
    strips = strip_features(set_feature, scales)
    n_strips = 2**scales - 1
    if weight.ndim == 3 and weight.shape[0] != n_strips:
        raise ConfigError(f"need exactly {n_strips} strip maps, got {weight.shape[0]}")
    out = T.affine(strips, weight)
    return out.reshape(*out.shape[1:]) if single else out


# -- model ----------------------------------------------------------------------
class GaitSetModel:
    """Parameters plus configuration; maps silhouette sets to embeddings."""

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        expected = init_params(config, 0)
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        if missing or extra:
            raise ConfigError(f"parameter names do not match config (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, value in expected.items():
            if params[name].shape != value.shape:
                raise ConfigError(f"{name}: shape {params[name].shape} != {value.shape} expected by config")

    @classmethod
    def initialize(cls, config: NetworkConfig, seed: int = 0, dtype=np.float32) -> "GaitSetModel":
        return cls(config, init_params(config, seed, dtype))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype) -> "GaitSetModel":
        return GaitSetModel(
            self.config,
            {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()},
        )

    def _prepare(self, frames) -> np.ndarray:
        arr = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
        if arr.ndim == 3:
            arr = arr[:, None]
        if arr.ndim != 4 or arr.shape[0] < 1:
            raise ConfigError(f"a silhouette set must be [n, H, W] or [n, 1, H, W] with n >= 1, got {arr.shape}")
        arr = arr.astype(self.dtype, copy=False)
        if self.config.gei_collapse:
            arr = arr.mean(axis=0, keepdims=True)
        return arr

    def forward(self, sets: Sequence) -> Tensor:
        """Differentiable embeddings ``[b, rows, d]`` for a list of silhouette sets."""
        if not sets:
            raise ConfigError("no sets to embed")
        arrays = [self._prepare(s) for s in sets]
        counts = [a.shape[0] for a in arrays]
        frames = Tensor(np.concatenate(arrays, axis=0))
        return self._head(backbone_forward(frames, self.params, self.config), counts)

    def _head(self, stages: tuple[Tensor, Tensor, Tensor], counts: Sequence[int]) -> Tensor:
        x1, x2, x3 = stages
        main = pool_sets(x3, counts, self.config, self.params, "stage3")
        heads = [hpm_forward(main, self.config.scales, self.params["hpm.main.weight"])]
        if self.config.mgp_enabled:
            pooled = (
                pool_sets(x1, counts, self.config, self.params, "stage1"),
                pool_sets(x2, counts, self.config, self.params, "stage2"),
                main,
            )
            g = mgp_forward(pooled, self.params, self.config)
            heads.append(hpm_forward(g, self.config.scales, self.params["hpm.mgp.weight"]))
        return T.concat(heads, axis=1) if len(heads) > 1 else heads[0]

    @staticmethod
    def _chunks(sizes: Sequence[int], max_frames: int):
        start, total = 0, 0
        for i, n in enumerate(sizes):
            if i > start and total + n > max_frames:
                yield start, i
                start, total = i, 0
            total += n
        if start < len(sizes):
            yield start, len(sizes)

    def embed_many(self, sets: Sequence, max_frames: int = 256) -> np.ndarray:
        """Embeddings ``[b, rows, d]`` without recording a graph, in frame-bounded chunks."""
        if not len(sets):
            raise ConfigError("no sets to embed")
        sizes = [1 if self.config.gei_collapse else len(s) for s in sets]
        with T.no_grad():
            out = [self.forward(sets[a:b]).data for a, b in self._chunks(sizes, max_frames)]
        result = np.concatenate(out, axis=0)
        T.check_finite(result, "embedding")
        return result

    def frame_features(self, frames, max_frames: int = 256) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-frame backbone outputs for one sequence, for re-pooling frame subsets later.

        Frames never interact before set pooling, so pooling any subset of
        these features gives that subset's embedding via ``embed_features``.
        """
        if self.config.gei_collapse:
            raise ConfigError("per-frame features are undefined when the set is collapsed to its mean image")
        arr = self._prepare(frames)
        parts = []
        with T.no_grad():
            for a in range(0, len(arr), max_frames):
                parts.append([t.data for t in backbone_forward(Tensor(arr[a : a + max_frames]), self.params, self.config)])
        return tuple(np.concatenate([p[i] for p in parts], axis=0) for i in range(3))

    def embed_features(self, feature_sets: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
                       max_frames: int = 256) -> np.ndarray:
        """Embeddings ``[b, rows, d]`` from per-frame features (see ``frame_features``)."""
        if not len(feature_sets):
            raise ConfigError("no sets to embed")
        sizes = [len(f[0]) for f in feature_sets]
        if min(sizes) < 1:
            raise ConfigError("a feature set is empty")
        out = []
        with T.no_grad():
            for a, b in self._chunks(sizes, max_frames):
                chunk = feature_sets[a:b]
                stages = tuple(Tensor(np.concatenate([f[i] for f in chunk], axis=0)) for i in range(3))
                out.append(self._head(stages, sizes[a:b]).data)
        result = np.concatenate(out, axis=0)
        T.check_finite(result, "embedding")
        return result

    def embed_set(self, frames) -> np.ndarray:
        return self.embed_many([frames])[0]

    # -- persistence ------------------------------------------------------------
    def save(self, path) -> None:
        arrays = {name: p.data for name, p in self.params.items()}
        write_container(path, "checkpoint", arrays, {"config": self.config.to_dict()})

    @classmethod
    def load(cls, path, config: NetworkConfig | None = None) -> "GaitSetModel":
        arrays, meta = read_container(path, "checkpoint")
        stored = NetworkConfig.from_dict(meta["config"])
        if config is not None and config.to_dict() != stored.to_dict():
            raise DataError(f"{path}: checkpoint was written for a different network config")
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        for name, t in params.items():
            T.check_finite(t, f"checkpoint parameter {name}")
        try:
            return cls(stored, params)
        except ConfigError as exc:
            raise DataError(f"{path}: {exc}") from exc


def embed_set(frames, config: NetworkConfig, params: dict[str, Tensor]) -> np.ndarray:
    """Embedding ``[rows, d]`` of one silhouette set."""
    return GaitSetModel(config, params).embed_set(frames)

