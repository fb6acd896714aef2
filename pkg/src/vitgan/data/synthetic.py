"""Procedural paired datasets standing in for segmentation, label-to-photo and depth tasks.

A pair is a pure function of ``(spec, index)``: every random draw comes
from an :class:`XorShift64Star` seeded with ``derive_seed(spec.seed, index)``
and rendering quantizes to 8 bits before normalizing, so pairs survive
a PNG round trip unchanged.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from ..tensor import ConfigError
from .rng import XorShift64Star, derive_seed

TASKS = ("seg_maps", "inverse_seg", "depth")
SHAPES = ("ellipse", "rectangle", "triangle")

# fixed label colours; seg targets contain nothing else
LABEL_PALETTE = {
    "background": (32, 32, 32),
    "ellipse": (224, 64, 64),
    "rectangle": (64, 200, 96),
    "triangle": (72, 96, 232),
}


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task: str = "seg_maps"
    image_size: int = 64
    min_shapes: int = 1
    max_shapes: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"data.task must be one of {TASKS}, got {self.task!r}")
        if self.image_size < 8:
            raise ConfigError("data.image_size must be >= 8")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("need 1 <= data.min_shapes <= data.max_shapes")

    @property
    def input_channels(self) -> int:
        return 3

    @property
    def target_channels(self) -> int:
        return 1 if self.task == "depth" else 3

    def spec_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class Shape:
    kind: str
    cx: float
    cy: float
    rx: float
    ry: float
    color: tuple[int, int, int]
    light: tuple[float, float]


def _draw_layout(spec: SyntheticTaskSpec, rng: XorShift64Star):
    s = spec.image_size
    bg = (tuple(rng.randint(40, 200) for _ in range(3)),
          tuple(rng.randint(40, 200) for _ in range(3)))
    bg_axis = rng.randint(0, 2)
    shapes = []
    for _ in range(rng.randint(spec.min_shapes, spec.max_shapes)):
        kind = SHAPES[rng.randint(0, len(SHAPES) - 1)]
        angle = rng.uniform(0.0, 2 * np.pi)
        shapes.append(Shape(
            kind=kind,
            cx=rng.uniform(0.2, 0.8) * s,
            cy=rng.uniform(0.2, 0.8) * s,
            rx=rng.uniform(0.1, 0.25) * s,
            ry=rng.uniform(0.1, 0.25) * s,
            color=tuple(rng.randint(70, 255) for _ in range(3)),
            light=(float(np.cos(angle)), float(np.sin(angle))),
        ))
    return bg, bg_axis, shapes


def _grid(s: int):
    c = np.arange(s, dtype=np.float64) + 0.5
    return np.meshgrid(c, c)  # xx, yy


def shape_mask(shape: Shape, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    u = (xx - shape.cx) / shape.rx
    v = (yy - shape.cy) / shape.ry
    if shape.kind == "ellipse":
        return u * u + v * v <= 1.0
    if shape.kind == "rectangle":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    # upward triangle: apex at v=-1, base at v=+1
    return (v <= 1.0) & (np.abs(u) <= (v + 1.0) / 2.0)


def _shaded_image(spec, bg, bg_axis, shapes, xx, yy) -> np.ndarray:
    s = spec.image_size
    t = {0: xx / s, 1: yy / s, 2: (xx + yy) / (2 * s)}[bg_axis]
    img = (1 - t)[..., None] * np.array(bg[0], float) + t[..., None] * np.array(bg[1], float)
    for sh in shapes:
        m = shape_mask(sh, xx, yy)
        proj = ((xx - sh.cx) / sh.rx * sh.light[0] + (yy - sh.cy) / sh.ry * sh.light[1])
        shade = np.clip(0.75 + 0.25 * proj, 0.4, 1.0)
        img[m] = shade[m][:, None] * np.array(sh.color, float)
    return np.rint(np.clip(img, 0, 255)).astype(np.uint8)


def _label_image(spec, shapes, xx, yy) -> np.ndarray:
    s = spec.image_size
    img = np.empty((s, s, 3), dtype=np.uint8)
    img[:] = LABEL_PALETTE["background"]
    for sh in shapes:
        img[shape_mask(sh, xx, yy)] = LABEL_PALETTE[sh.kind]
    return img


def _depth_image(spec, shapes, xx, yy) -> np.ndarray:
    s = spec.image_size
    depth = 0.15 * yy / s  # floor gets nearer towards the bottom edge
    n = len(shapes)
    for k, sh in enumerate(shapes):
        m = shape_mask(sh, xx, yy)
        r = np.sqrt(((xx - sh.cx) / sh.rx) ** 2 + ((yy - sh.cy) / sh.ry) ** 2)
        near = 0.25 + 0.6 * (k + 1) / n + 0.15 * np.clip(1.0 - r, 0.0, 1.0)
        depth = np.where(m, near, depth)
    return np.rint(np.clip(depth, 0, 1) * 255).astype(np.uint8)[..., None]


def render_pair_u8(spec: SyntheticTaskSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """(input, target) as (h, w, c) uint8 arrays."""
    if index < 0:
        raise ValueError(f"index must be >= 0, got {index}")
    rng = XorShift64Star(derive_seed(spec.seed, index))
    bg, bg_axis, shapes = _draw_layout(spec, rng)
    xx, yy = _grid(spec.image_size)
    shaded = _shaded_image(spec, bg, bg_axis, shapes, xx, yy)
    if spec.task == "seg_maps":
        return shaded, _label_image(spec, shapes, xx, yy)
    if spec.task == "inverse_seg":
        return _label_image(spec, shapes, xx, yy), shaded
    return shaded, _depth_image(spec, shapes, xx, yy)
