"""Parametric shape scenes rendered to small videos, with exact footprints.

A scene is a background palette plus entities (shape, color, size, motion).
Rendering is a deterministic rasterization at pixel centers, so the set of
pixels an entity covers — its footprint — is exactly reproducible, which is
what makes oracle masks possible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")

# Each palette keeps the hue identity of every color id so a palette remap is
# a bijection on color ids, never a relabeling.
PALETTES: dict[str, dict] = {
    "day": {
        "background": (0.85, 0.91, 0.96),
        "colors": {
            "red": (0.85, 0.13, 0.13), "green": (0.13, 0.65, 0.22),
            "blue": (0.15, 0.30, 0.85), "yellow": (0.90, 0.82, 0.10),
            "magenta": (0.80, 0.15, 0.75), "cyan": (0.10, 0.75, 0.80),
        },
    },
    "night": {
        "background": (0.07, 0.08, 0.14),
        "colors": {
            "red": (0.55, 0.08, 0.10), "green": (0.08, 0.42, 0.16),
            "blue": (0.10, 0.18, 0.55), "yellow": (0.60, 0.54, 0.08),
            "magenta": (0.52, 0.10, 0.48), "cyan": (0.07, 0.48, 0.52),
        },
    },
    "dusk": {
        "background": (0.55, 0.45, 0.42),
        "colors": {
            "red": (0.95, 0.35, 0.25), "green": (0.30, 0.72, 0.35),
            "blue": (0.30, 0.45, 0.92), "yellow": (0.98, 0.88, 0.35),
            "magenta": (0.90, 0.35, 0.85), "cyan": (0.30, 0.85, 0.88),
        },
    },
}

PALETTE_NAMES = tuple(PALETTES.keys())


class SceneError(Exception):
    """Scene violates its invariants (out-of-bounds footprint, duplicate id)."""


@dataclass(frozen=True)
class Motion:
    kind: str  # "linear" | "circular"
    params: tuple[float, ...]

    def center(self, frame: int) -> tuple[float, float]:
        if self.kind == "linear":
            x0, y0, vx, vy = self.params
            return x0 + frame * vx, y0 + frame * vy
        if self.kind == "circular":
            cx, cy, radius, omega, phase = self.params
            a = phase + frame * omega
            return cx + radius * math.cos(a), cy + radius * math.sin(a)
        raise SceneError(f"unknown motion kind {self.kind!r}")


@dataclass(frozen=True)
class Entity:
    uid: int
    shape: str
    color: str
    size: float
    motion: Motion


@dataclass
class SceneSpec:
    frames: int
    height: int
    width: int
    palette: str
    entities: list[Entity] = field(default_factory=list)

    def validate(self) -> None:
        if self.palette not in PALETTES:
            raise SceneError(f"unknown palette {self.palette!r}")
        uids = [e.uid for e in self.entities]
        if len(set(uids)) != len(uids):
            raise SceneError("entity ids must be unique")
        for e in self.entities:
            if e.shape not in SHAPES:
                raise SceneError(f"unknown shape {e.shape!r}")
            if e.color not in COLORS:
                raise SceneError(f"unknown color {e.color!r}")
            for f in range(self.frames):
                if not _in_bounds(e, f, self.height, self.width):
                    raise SceneError(
                        f"entity {e.uid} leaves the frame at frame {f}")

    def to_dict(self) -> dict:
        return {
            "frames": self.frames, "height": self.height, "width": self.width,
            "palette": self.palette,
            "entities": [
                {"uid": e.uid, "shape": e.shape, "color": e.color,
                 "size": e.size,
                 "motion": {"kind": e.motion.kind,
                            "params": list(e.motion.params)}}
                for e in self.entities
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        return SceneSpec(
            frames=d["frames"], height=d["height"], width=d["width"],
            palette=d["palette"],
            entities=[
                Entity(uid=e["uid"], shape=e["shape"], color=e["color"],
                       size=e["size"],
                       motion=Motion(e["motion"]["kind"],
                                     tuple(e["motion"]["params"])))
                for e in d["entities"]
            ],
        )


@dataclass
class VideoTensor:
    """F x H x W x C float frames in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4:
            raise SceneError(f"video must be 4-d, got shape {self.data.shape}")

    @property
    def frames(self) -> int:
        return self.data.shape[0]


@dataclass
class MaskVideo:
    """F x H x W x 1 binary mask, plus the dilation radius used to build it."""

    data: np.ndarray
    dilation_radius: int = 0

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[-1] != 1:
            raise SceneError(f"mask must be F,H,W,1; got {self.data.shape}")


def shape_extents(shape: str, size: float) -> tuple[float, float, float, float]:
    """Half-extents (left, right, up, down) of a shape around its center."""
    h = size / 2.0
    if shape in ("square", "circle"):
        return h, h, h, h
    if shape == "triangle":
        tri_h = size * math.sqrt(3.0) / 2.0
        return h, h, 2.0 * tri_h / 3.0, tri_h / 3.0
    raise SceneError(f"unknown shape {shape!r}")


def _in_bounds(e: Entity, frame: int, height: int, width: int) -> bool:
    cx, cy = e.motion.center(frame)
    left, right, up, down = shape_extents(e.shape, e.size)
    return (cx - left >= 0 and cx + right <= width - 1
            and cy - up >= 0 and cy + down <= height - 1)


def shape_membership(shape: str, cx: float, cy: float, size: float,
                     height: int, width: int) -> np.ndarray:
    """Boolean pixel-center membership grid for one shape instance."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    if shape == "square":
        h = size / 2.0
        return (np.abs(xs - cx) <= h) & (np.abs(ys - cy) <= h)
    if shape == "circle":
        r2 = (size / 2.0) ** 2
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r2
    if shape == "triangle":
        tri_h = size * math.sqrt(3.0) / 2.0
        ax, ay = cx, cy - 2.0 * tri_h / 3.0          # apex
        bx, by = cx - size / 2.0, cy + tri_h / 3.0   # base left
        dx, dy = cx + size / 2.0, cy + tri_h / 3.0   # base right

        def side(px, py, qx, qy):
            return (qx - px) * (ys - py) - (qy - py) * (xs - px)

        s1 = side(ax, ay, bx, by)
        s2 = side(bx, by, dx, dy)
        s3 = side(dx, dy, ax, ay)
        # same-sign test is robust to vertex winding
        return ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | ((s1 <= 0) & (s2 <= 0) & (s3 <= 0))
    raise SceneError(f"unknown shape {shape!r}")


def footprint(e: Entity, frame: int, height: int, width: int) -> np.ndarray:
    cx, cy = e.motion.center(frame)
    return shape_membership(e.shape, cx, cy, e.size, height, width)


def render(spec: SceneSpec) -> VideoTensor:
    """Deterministic rasterization; the same spec is always bit-identical."""
    spec.validate()
    pal = PALETTES[spec.palette]
    bg = np.asarray(pal["background"], dtype=np.float32)
    video = np.empty((spec.frames, spec.height, spec.width, 3), dtype=np.float32)
    video[:] = bg
    for f in range(spec.frames):
        for e in spec.entities:  # id order defines the (unused) z-order
            m = footprint(e, f, spec.height, spec.width)
            video[f][m] = np.asarray(pal["colors"][e.color], dtype=np.float32)
    np.clip(video, 0.0, 1.0, out=video)
    return VideoTensor(video)


def entity_mask(spec: SceneSpec, uids, radius: int = 0) -> MaskVideo:
    """Per-frame union of the footprints of the given entities, dilated."""
    uids = set(uids)
    out = np.zeros((spec.frames, spec.height, spec.width), dtype=bool)
    for f in range(spec.frames):
        for e in spec.entities:
            if e.uid in uids:
                out[f] |= footprint(e, f, spec.height, spec.width)
    if radius > 0:
        structure = np.ones((3, 3), dtype=bool)
        for f in range(spec.frames):
            out[f] = ndimage.binary_dilation(out[f], structure=structure,
                                             iterations=radius)
    return MaskVideo(out[..., None].astype(np.float32), dilation_radius=radius)


def full_mask(frames: int, height: int, width: int) -> MaskVideo:
    return MaskVideo(np.ones((frames, height, width, 1), dtype=np.float32))


# -- spec surgery used by the pair generators and the evaluation oracle ------


def replace_entity(spec: SceneSpec, uid: int, shape: str, color: str) -> SceneSpec:
    ents = [Entity(e.uid, shape, color, e.size, e.motion) if e.uid == uid else e
            for e in spec.entities]
    return SceneSpec(spec.frames, spec.height, spec.width, spec.palette, ents)


def remove_entity(spec: SceneSpec, uid: int) -> SceneSpec:
    ents = [e for e in spec.entities if e.uid != uid]
    return SceneSpec(spec.frames, spec.height, spec.width, spec.palette, ents)


def with_palette(spec: SceneSpec, palette: str) -> SceneSpec:
    return SceneSpec(spec.frames, spec.height, spec.width, palette,
                     list(spec.entities))
