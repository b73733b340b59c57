"""Procedural walking-figure silhouettes for desk-scale experiments.

Each identity has its own body proportions and gait dynamics. A frame is a
binary raster of a head disc, a torso ellipse and capsule-shaped limb
segments at a gait phase that advances every frame. The viewing angle only
distorts the figure in 2-D: limb swing is foreshortened towards frontal
views, the torso widens, and the body is sheared horizontally. ``BG`` adds
a blob against the torso, ``CL`` thickens the torso and arms. Each frame is
shifted sideways by a random sub-``jitter`` amount and receives independent
pixel-flip noise.
"""

from __future__ import annotations

import math
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ConfigError
from .dataset import FRAME_SIZE, INDEX_NAME

CONDITIONS = ("NM", "BG", "CL")
GENERATOR_VERSION = 1  # bump whenever rendering changes, so cached datasets are regenerated


def spread_views(count: int) -> tuple[int, ...]:
    """``count`` integer views spread evenly over [0, 180]."""
    if count < 1:
        raise ConfigError("need at least one view")
    if count == 1:
        return (90,)
    return tuple(int(round(v)) for v in np.linspace(0.0, 180.0, count))


@dataclass(frozen=True)
class SynthSpec:
    identities: int = 20
    views: tuple[int, ...] = field(default_factory=lambda: spread_views(8))
    conditions: tuple[str, ...] = CONDITIONS
    frames: int = 40
    sequences: int = 1
    seed: int = 0
    noise: float = 0.02
    jitter: float = 3.0
    spread: float = 1.0
    height_range: tuple[float, float] = (46.0, 60.0)
    period_range: tuple[float, float] = (14.0, 26.0)

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(int(v) for v in self.views))
        object.__setattr__(self, "conditions", tuple(c.upper() for c in self.conditions))
        if self.identities < 1 or self.frames < 1 or self.sequences < 1:
            raise ConfigError("identities, frames and sequences must be positive")
        bad = [v for v in self.views if not 0 <= v <= 180]
        if bad:
            raise ConfigError(f"views must lie in [0, 180] degrees, got {bad}")
        if len(set(self.views)) != len(self.views):
            raise ConfigError("duplicate views")
        unknown = set(self.conditions) - set(CONDITIONS)
        if unknown:
            raise ConfigError(f"unknown conditions {sorted(unknown)} (choose from {CONDITIONS})")
        if not 0 <= self.noise < 0.5:
            raise ConfigError("noise must lie in [0, 0.5)")
        if not 0 <= self.jitter <= 8:
            raise ConfigError("jitter must lie in [0, 8] pixels")
        if not 0 < self.spread <= 1:
            raise ConfigError("spread must lie in (0, 1]")

    def identity_label(self, index: int) -> str:
        return f"{index + 1:03d}"

    def to_text(self) -> str:
        return "".join(
            f"{k} = {v}\n"
            for k, v in [
                ("generator", GENERATOR_VERSION),
                ("identities", self.identities),
                ("views", ",".join(str(v) for v in self.views)),
                ("conditions", ",".join(self.conditions)),
                ("frames", self.frames),
                ("sequences", self.sequences),
                ("seed", self.seed),
                ("noise", self.noise),
                ("jitter", self.jitter),
                ("spread", self.spread),
            ]
        )


@dataclass(frozen=True)
class BodyParams:
    height: float
    head_r: float
    torso_frac: float
    torso_w: float
    thigh_frac: float
    leg_r: float
    arm_r: float
    arm_frac: float
    stride: float
    arm_swing: float
    knee_bend: float
    period: float
    lean: float

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in self.__dataclass_fields__])


def body_params(spec: SynthSpec, index: int) -> BodyParams:
    """Shape and gait parameters of one identity (depends only on seed and index)."""
    rng = np.random.default_rng([spec.seed, 0x5E7, index])
    u = rng.random(13)

    def lerp(t, lo, hi):
        # ``spread`` narrows every range around its midpoint, making identities alike
        mid = (lo + hi) / 2
        return float(mid + spec.spread * (t - 0.5) * (hi - lo))

    return BodyParams(
        height=lerp(u[0], *spec.height_range),
        head_r=lerp(u[1], 3.0, 4.6),
        torso_frac=lerp(u[2], 0.28, 0.38),
        torso_w=lerp(u[3], 3.5, 6.5),
        thigh_frac=lerp(u[4], 0.42, 0.56),
        leg_r=lerp(u[5], 1.5, 2.6),
        arm_r=lerp(u[6], 1.1, 2.0),
        arm_frac=lerp(u[7], 0.75, 1.1),
        stride=lerp(u[8], 0.2, 0.55),
        arm_swing=lerp(u[9], 0.15, 0.6),
        knee_bend=lerp(u[10], 0.15, 0.8),
        period=lerp(u[11], *spec.period_range),
        lean=lerp(u[12], -0.1, 0.1),
    )


def _capsule(gx, gy, p, q, r):
    dx, dy = q[0] - p[0], q[1] - p[1]
    den = dx * dx + dy * dy
    t = np.clip(((gx - p[0]) * dx + (gy - p[1]) * dy) / den, 0.0, 1.0) if den > 0 else 0.0
    ex = gx - p[0] - t * dx
    ey = gy - p[1] - t * dy
    return ex * ex + ey * ey <= r * r


def _ellipse(gx, gy, cx, cy, rx, ry):
    return ((gx - cx) / rx) ** 2 + ((gy - cy) / ry) ** 2 <= 1.0


def render_frame(body: BodyParams, view: float, condition: str, phase: float, offset: float = 0.0,
                 size=FRAME_SIZE) -> np.ndarray:
    """Noise-free boolean silhouette ``[H, W]``."""
    h, w = size
    t = math.radians(view)
    swing = 0.3 + 0.7 * math.sin(t)  # visible fraction of fore-aft limb motion
    widen = 0.8 + 0.5 * abs(math.cos(t))
    shear = 0.3 * math.cos(t) + body.lean
    feet = h - 2.0
    top = feet - body.height
    cy = (top + feet) / 2
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    gx = gx - (w - 1) / 2 - offset - shear * (gy - cy)

    neck = top + 2 * body.head_r
    torso_len = body.torso_frac * body.height
    hip = neck + torso_len
    thigh = body.thigh_frac * (feet - hip)
    shin = (feet - hip) - thigh
    torso_w = body.torso_w * widen
    torso_ry = torso_len / 2
    arm_r = body.arm_r
    if condition == "CL":
        torso_w += 2.0
        torso_ry += 2.0
        arm_r += 0.8

    mask = _ellipse(gx, gy, 0.0, top + body.head_r, body.head_r, body.head_r)
    mask |= _ellipse(gx, gy, 0.0, neck + torso_len / 2, torso_w, torso_ry)
    for side in (1.0, -1.0):
        a = side * body.stride * math.sin(phase)
        knee = (swing * thigh * math.sin(a), hip + thigh * math.cos(a))
        b = a - body.knee_bend * max(0.0, side * math.cos(phase))
        foot = (knee[0] + swing * shin * math.sin(b), knee[1] + shin * math.cos(b))
        mask |= _capsule(gx, gy, (0.0, hip - 1.0), knee, body.leg_r)
        mask |= _capsule(gx, gy, knee, foot, body.leg_r * 0.85)
        c = -side * body.arm_swing * math.sin(phase)
        shoulder = (side * 0.5 * torso_w * (1 - swing) * 0.6, neck + 2.0)
        arm = body.arm_frac * torso_len
        hand = (shoulder[0] + swing * arm * math.sin(c), shoulder[1] + arm * math.cos(c))
        mask |= _capsule(gx, gy, shoulder, hand, arm_r)
    if condition == "BG":
        bx = (torso_w + 2.0) * (0.35 + 0.65 * math.sin(t))
        mask |= _ellipse(gx, gy, bx, hip - 0.3 * torso_len, 3.5, 5.0)
    return mask


def render_sequence(spec: SynthSpec, index: int, condition: str, seq: int, view: int) -> np.ndarray:
    """Frames ``[n, H, W]`` as uint8 in {0, 255}."""
    body = body_params(spec, index)
    rng = np.random.default_rng([spec.seed, index, CONDITIONS.index(condition), seq, view])
    phase0 = rng.uniform(0.0, 2 * math.pi)
    offset = float(rng.integers(-1, 2))
    out = np.empty((spec.frames, *FRAME_SIZE), dtype=np.uint8)
    for f in range(spec.frames):
        phase = phase0 + 2 * math.pi * f / body.period
        # per-frame centering error, as left by imperfect silhouette alignment
        shift = rng.uniform(-spec.jitter, spec.jitter) if spec.jitter > 0 else 0.0
        mask = render_frame(body, view, condition, phase, offset + shift)
        if spec.noise > 0:
            mask ^= rng.random(mask.shape) < spec.noise
        out[f] = mask.astype(np.uint8) * 255
    return out


def synth_generate(spec: SynthSpec, root) -> Path:
    """Write the dataset as ``<root>/<id>/<cond>-<seq>/<view>/<frame>.png``."""
    root = Path(root)
    params = [body_params(spec, i).vector() for i in range(spec.identities)]
    if len({p.tobytes() for p in params}) != len(params):
        raise ConfigError("seed produced two identical identities")
    root.mkdir(parents=True, exist_ok=True)
    stale = root / INDEX_NAME
    if stale.exists():
        stale.unlink()
    for i in range(spec.identities):
        ident = spec.identity_label(i)
        for cond in spec.conditions:
            for seq in range(1, spec.sequences + 1):
                for view in spec.views:
                    d = root / ident / f"{cond.lower()}-{seq:02d}" / f"{view:03d}"
                    if d.exists():
                        shutil.rmtree(d)
                    d.mkdir(parents=True)
                    for f, frame in enumerate(render_sequence(spec, i, cond, seq, view)):
                        Image.fromarray(frame, mode="L").save(d / f"{f:03d}.png", optimize=False)
    tmp = root / "synth-spec.txt.tmp"
    tmp.write_text(spec.to_text(), encoding="utf-8")
    os.replace(tmp, root / "synth-spec.txt")
    return root
