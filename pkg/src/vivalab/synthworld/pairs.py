"""Paired-edit construction: replacement, addition/removal, global edits,
single-frame image pairs with extra stylization kinds, quality filtering,
and direction flipping.

Every pair carries its scene specs and edit metadata so downstream oracles
can re-render ground truth instead of guessing from pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..numerics.rng import Stream
from . import grammar, scene
from .grammar import Instruction
from .scene import (COLORS, PALETTE_NAMES, SHAPES, Entity, MaskVideo, Motion,
                    SceneSpec, VideoTensor)


class GenerationError(Exception):
    """The sampler could not satisfy the generation constraints."""


@dataclass
class WorldConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    min_entities: int = 1
    max_entities: int = 3
    min_size: float = 6.0
    max_size: float = 10.0
    max_speed: float = 1.2          # px per frame along each axis
    dilation_radius: int = 1
    palettes: tuple[str, ...] = PALETTE_NAMES
    replace_changes_both: bool = True
    ref_prob: float = 0.25          # fraction of replacement pairs with a sprite
    flip_prob: float = 0.5          # synthetic-as-target direction probability
    video_kinds: tuple[str, ...] = ("replace", "add", "remove", "global")
    image_kinds: tuple[str, ...] = ("replace", "add", "remove", "global", "stylize")
    gen_retries: int = 200

    def to_dict(self) -> dict:
        return {
            "frames": self.frames, "height": self.height, "width": self.width,
            "channels": self.channels,
            "min_entities": self.min_entities, "max_entities": self.max_entities,
            "min_size": self.min_size, "max_size": self.max_size,
            "max_speed": self.max_speed, "dilation_radius": self.dilation_radius,
            "palettes": list(self.palettes),
            "replace_changes_both": self.replace_changes_both,
            "ref_prob": self.ref_prob, "flip_prob": self.flip_prob,
            "video_kinds": list(self.video_kinds),
            "image_kinds": list(self.image_kinds),
            "gen_retries": self.gen_retries,
        }

    @staticmethod
    def from_dict(d: dict) -> "WorldConfig":
        cfg = WorldConfig()
        for k, v in d.items():
            if isinstance(getattr(cfg, k), tuple):
                v = tuple(v)
            setattr(cfg, k, v)
        return cfg


DIRECTION_FORWARD = "synthetic-as-source"
DIRECTION_FLIPPED = "synthetic-as-target"


@dataclass
class EditPair:
    source: VideoTensor
    target: VideoTensor
    mask: MaskVideo
    instruction: list[int]
    caption_src: list[int]
    caption_edit: list[int]
    edit_kind: str                      # replace | add | remove | global | stylize
    direction: str = DIRECTION_FORWARD
    reference: VideoTensor | None = None
    exclusion: list[int] = field(default_factory=list)
    source_spec: SceneSpec | None = None
    target_spec: SceneSpec | None = None
    meta: dict = field(default_factory=dict)

    @property
    def frames(self) -> int:
        return self.source.data.shape[0]

    @property
    def is_image(self) -> bool:
        return self.frames == 1


# ---------------------------------------------------------------------------
# Scene sampling
# ---------------------------------------------------------------------------


def _sample_motion(stream: Stream, cfg: WorldConfig, shape: str, size: float,
                   frames: int) -> Motion | None:
    left, right, up, down = scene.shape_extents(shape, size)
    # margin so every frame of the swept path stays inside the grid
    span = (frames - 1) * cfg.max_speed
    if stream.bernoulli(0.5) or frames == 1:
        vx = float(stream.uniform(-cfg.max_speed, cfg.max_speed)) if frames > 1 else 0.0
        vy = float(stream.uniform(-cfg.max_speed, cfg.max_speed)) if frames > 1 else 0.0
        x_lo = left + max(0.0, -(frames - 1) * vx)
        x_hi = cfg.width - 1 - right - max(0.0, (frames - 1) * vx)
        y_lo = up + max(0.0, -(frames - 1) * vy)
        y_hi = cfg.height - 1 - down - max(0.0, (frames - 1) * vy)
        if x_lo >= x_hi or y_lo >= y_hi:
            return None
        x0 = float(stream.uniform(x_lo, x_hi))
        y0 = float(stream.uniform(y_lo, y_hi))
        return Motion("linear", (x0, y0, vx, vy))
    radius = float(stream.uniform(1.0, max(1.5, span / 2.0)))
    x_lo, x_hi = left + radius, cfg.width - 1 - right - radius
    y_lo, y_hi = up + radius, cfg.height - 1 - down - radius
    if x_lo >= x_hi or y_lo >= y_hi:
        return None
    cx = float(stream.uniform(x_lo, x_hi))
    cy = float(stream.uniform(y_lo, y_hi))
    omega = float(stream.uniform(-0.5, 0.5))
    phase = float(stream.uniform(0.0, 2 * math.pi))
    return Motion("circular", (cx, cy, radius, omega, phase))


def _swept_boxes(e: Entity, frames: int) -> list[tuple[float, float, float, float]]:
    left, right, up, down = scene.shape_extents(e.shape, e.size)
    boxes = []
    for f in range(frames):
        cx, cy = e.motion.center(f)
        boxes.append((cx - left, cx + right, cy - up, cy + down))
    return boxes


def _disjoint(a: Entity, b: Entity, frames: int, gap: float = 2.0) -> bool:
    for (al, ar, au, ad), (bl, br, bu, bd) in zip(_swept_boxes(a, frames),
                                                  _swept_boxes(b, frames)):
        if not (ar + gap < bl or br + gap < al or ad + gap < bu or bd + gap < au):
            return False
    return True


def _entity_fits(e: Entity, spec_entities: list[Entity], cfg: WorldConfig,
                 frames: int) -> bool:
    for f in range(frames):
        cx, cy = e.motion.center(f)
        left, right, up, down = scene.shape_extents(e.shape, e.size)
        if not (cx - left >= 0 and cx + right <= cfg.width - 1
                and cy - up >= 0 and cy + down <= cfg.height - 1):
            return False
    return all(_disjoint(e, other, frames) for other in spec_entities)


def _sample_entity(stream: Stream, cfg: WorldConfig, uid: int,
                   existing: list[Entity], frames: int,
                   forbidden_combos: set[tuple[str, str]]) -> Entity | None:
    for _ in range(cfg.gen_retries):
        shape = SHAPES[stream.choice_index(len(SHAPES))]
        color = COLORS[stream.choice_index(len(COLORS))]
        if (color, shape) in forbidden_combos:
            continue
        size = float(stream.uniform(cfg.min_size, cfg.max_size))
        motion = _sample_motion(stream, cfg, shape, size, frames)
        if motion is None:
            continue
        e = Entity(uid, shape, color, size, motion)
        if _entity_fits(e, existing, cfg, frames):
            return e
    return None


def make_scene(stream: Stream, cfg: WorldConfig, n_entities: int | None = None,
               frames: int | None = None, palette: str | None = None) -> SceneSpec:
    frames = cfg.frames if frames is None else frames
    if palette is None:
        palette = cfg.palettes[stream.choice_index(len(cfg.palettes))]
    if n_entities is None:
        n_entities = cfg.min_entities + stream.choice_index(
            cfg.max_entities - cfg.min_entities + 1)
    want = n_entities
    while True:
        entities: list[Entity] = []
        combos: set[tuple[str, str]] = set()
        for uid in range(want):
            e = _sample_entity(stream, cfg, uid, entities, frames, combos)
            if e is None:
                break
            entities.append(e)
            combos.add((e.color, e.shape))
        if len(entities) == want:
            spec = SceneSpec(frames, cfg.height, cfg.width, palette, entities)
            spec.validate()
            return spec
        # crowded draw: settle for a sparser scene rather than failing
        if want <= max(cfg.min_entities, 1):
            raise GenerationError(
                f"could not place even {want} entity(ies)")
        want -= 1


# ---------------------------------------------------------------------------
# Pair generators
# ---------------------------------------------------------------------------


def _sprite(entity: Entity, palette: str, cfg: WorldConfig) -> VideoTensor:
    center = Motion("linear", (cfg.width / 2.0, cfg.height / 2.0, 0.0, 0.0))
    still = Entity(0, entity.shape, entity.color, entity.size, center)
    spec = SceneSpec(1, cfg.height, cfg.width, palette, [still])
    return scene.render(spec)


def make_replacement_pair(stream: Stream, cfg: WorldConfig,
                          frames: int | None = None) -> EditPair:
    frames = cfg.frames if frames is None else frames
    for _ in range(cfg.gen_retries):
        src = make_scene(stream, cfg, frames=frames)
        if not src.entities:
            continue
        old = src.entities[stream.choice_index(len(src.entities))]
        taken = {(e.color, e.shape) for e in src.entities}
        options = [(c, s) for c in COLORS for s in SHAPES
                   if (c, s) not in taken
                   and (not cfg.replace_changes_both
                        or (c != old.color and s != old.shape))]
        if not options:
            continue
        new_color, new_shape = options[stream.choice_index(len(options))]
        tgt = scene.replace_entity(src, old.uid, new_shape, new_color)
        try:
            tgt.validate()
        except scene.SceneError:
            continue  # the new shape's extents may not fit the old trajectory
        new_entity = next(e for e in tgt.entities if e.uid == old.uid)
        if not all(_disjoint(new_entity, e, frames)
                   for e in tgt.entities if e.uid != old.uid):
            continue
        mask_src = scene.entity_mask(src, [old.uid], 0).data
        mask_tgt = scene.entity_mask(tgt, [old.uid], 0).data
        union = MaskVideo(np.maximum(mask_src, mask_tgt), 0)
        dilated = _dilate_mask(union, cfg.dilation_radius)
        ins = Instruction("replace", old_color=old.color, old_shape=old.shape,
                          new_color=new_color, new_shape=new_shape)
        pair = EditPair(
            source=scene.render(src), target=scene.render(tgt), mask=dilated,
            instruction=grammar.instruction_tokens(ins),
            caption_src=grammar.caption_tokens(src),
            caption_edit=grammar.caption_tokens(tgt),
            edit_kind="replace", source_spec=src, target_spec=tgt,
            meta={"edited_uid": old.uid,
                  "old": {"color": old.color, "shape": old.shape},
                  "new": {"color": new_color, "shape": new_shape},
                  "palette_src": src.palette, "palette_edit": tgt.palette,
                  "style": None},
        )
        if stream.bernoulli(cfg.ref_prob):
            pair.reference = _sprite(new_entity, src.palette, cfg)
        return pair
    raise GenerationError("no eligible entity for replacement")


def make_add_remove_pair(stream: Stream, cfg: WorldConfig, kind: str = "remove",
                         frames: int | None = None) -> EditPair:
    if kind not in ("add", "remove"):
        raise ValueError(f"kind must be add or remove, got {kind!r}")
    frames = cfg.frames if frames is None else frames
    n = max(cfg.min_entities, 1) + stream.choice_index(
        cfg.max_entities - max(cfg.min_entities, 1) + 1)
    src = make_scene(stream, cfg, n_entities=n, frames=frames)
    victim = src.entities[stream.choice_index(len(src.entities))]
    without = scene.remove_entity(src, victim.uid)
    mask = scene.entity_mask(src, [victim.uid], cfg.dilation_radius)
    remove_ins = Instruction("remove", old_color=victim.color,
                             old_shape=victim.shape)
    pair = EditPair(
        source=scene.render(src), target=scene.render(without), mask=mask,
        instruction=grammar.instruction_tokens(remove_ins),
        caption_src=grammar.caption_tokens(src),
        caption_edit=grammar.caption_tokens(without),
        edit_kind="remove",
        exclusion=grammar.encode([victim.color, victim.shape]),
        source_spec=src, target_spec=without,
        meta={"edited_uid": victim.uid,
              "old": {"color": victim.color, "shape": victim.shape},
              "new": None, "palette_src": src.palette,
              "palette_edit": src.palette, "style": None},
    )
    if kind == "remove":
        return pair
    flipped = flip_direction(pair)
    assert flipped is not None
    flipped.direction = DIRECTION_FORWARD  # an add pair is forward supervision
    return flipped


def make_global_pair(stream: Stream, cfg: WorldConfig,
                     frames: int | None = None) -> EditPair:
    if len(set(cfg.palettes)) < 2:
        raise GenerationError("global edits need two distinct palettes")
    frames = cfg.frames if frames is None else frames
    src = make_scene(stream, cfg, frames=frames)
    choices = [p for p in cfg.palettes if p != src.palette]
    new_palette = choices[stream.choice_index(len(choices))]
    tgt = scene.with_palette(src, new_palette)
    ins = Instruction("global", palette=new_palette)
    return EditPair(
        source=scene.render(src), target=scene.render(tgt),
        mask=scene.full_mask(frames, cfg.height, cfg.width),
        instruction=grammar.instruction_tokens(ins),
        caption_src=grammar.caption_tokens(src),
        caption_edit=grammar.caption_tokens(tgt),
        edit_kind="global", source_spec=src, target_spec=tgt,
        meta={"edited_uid": None, "old": None, "new": None,
              "palette_src": src.palette, "palette_edit": new_palette,
              "style": None},
    )


def apply_style(video: np.ndarray, style: str) -> np.ndarray:
    if style == "inverted":
        return (1.0 - video).astype(video.dtype)
    if style == "grayscale":
        gray = video.mean(axis=-1, keepdims=True)
        return np.repeat(gray, video.shape[-1], axis=-1).astype(video.dtype)
    raise grammar.GrammarError(f"unknown style {style!r}")


def make_stylize_pair(stream: Stream, cfg: WorldConfig) -> EditPair:
    """Single-frame stylization pair; a kind that only exists for images."""
    src = make_scene(stream, cfg, frames=1)
    style = grammar.STYLES[stream.choice_index(len(grammar.STYLES))]
    source = scene.render(src)
    target = VideoTensor(apply_style(source.data, style))
    ins = Instruction("stylize", style=style)
    return EditPair(
        source=source, target=target,
        mask=scene.full_mask(1, cfg.height, cfg.width),
        instruction=grammar.instruction_tokens(ins),
        caption_src=grammar.caption_tokens(src),
        caption_edit=grammar.caption_tokens(src, style=style),
        edit_kind="stylize", source_spec=src, target_spec=None,
        meta={"edited_uid": None, "old": None, "new": None,
              "palette_src": src.palette, "palette_edit": src.palette,
              "style": style},
    )


def make_image_pair(stream: Stream, cfg: WorldConfig) -> EditPair:
    """Single-frame pair over the extended (stylize-included) kind set."""
    kind = cfg.image_kinds[stream.choice_index(len(cfg.image_kinds))]
    if kind == "replace":
        return make_replacement_pair(stream, cfg, frames=1)
    if kind in ("add", "remove"):
        return make_add_remove_pair(stream, cfg, kind=kind, frames=1)
    if kind == "global":
        return make_global_pair(stream, cfg, frames=1)
    if kind == "stylize":
        return make_stylize_pair(stream, cfg)
    raise GenerationError(f"unknown image pair kind {kind!r}")


def make_video_pair(stream: Stream, cfg: WorldConfig) -> EditPair:
    kind = cfg.video_kinds[stream.choice_index(len(cfg.video_kinds))]
    if kind == "replace":
        return make_replacement_pair(stream, cfg)
    if kind in ("add", "remove"):
        return make_add_remove_pair(stream, cfg, kind=kind)
    if kind == "global":
        return make_global_pair(stream, cfg)
    raise GenerationError(f"unknown video pair kind {kind!r}")


def _dilate_mask(mask: MaskVideo, radius: int) -> MaskVideo:
    if radius <= 0:
        return MaskVideo(mask.data.copy(), 0)
    from scipy import ndimage
    data = mask.data[..., 0] > 0.5
    structure = np.ones((3, 3), dtype=bool)
    out = np.stack([
        ndimage.binary_dilation(data[f], structure=structure, iterations=radius)
        for f in range(data.shape[0])
    ])
    return MaskVideo(out[..., None].astype(np.float32), dilation_radius=radius)


# ---------------------------------------------------------------------------
# Direction flip and quality filter
# ---------------------------------------------------------------------------

_FLIP_KIND = {"replace": "replace", "add": "remove", "remove": "add",
              "global": "global", "stylize": "stylize"}


def flip_direction(pair: EditPair) -> EditPair | None:
    """Swap source and target consistently; None when no inverse exists."""
    ins = grammar.parse_instruction(pair.instruction)
    inverse = grammar.inverse_instruction(ins, pair.meta.get("palette_src"))
    if inverse is None:
        return None
    meta = dict(pair.meta)
    meta["old"], meta["new"] = meta.get("new"), meta.get("old")
    meta["palette_src"], meta["palette_edit"] = (
        meta.get("palette_edit"), meta.get("palette_src"))
    new_kind = _FLIP_KIND[pair.edit_kind]
    exclusion: list[int] = []
    if new_kind == "remove" and meta.get("old"):
        exclusion = grammar.encode([meta["old"]["color"], meta["old"]["shape"]])
    flipped = EditPair(
        source=pair.target, target=pair.source, mask=pair.mask,
        instruction=grammar.instruction_tokens(inverse),
        caption_src=pair.caption_edit, caption_edit=pair.caption_src,
        edit_kind=new_kind,
        direction=(DIRECTION_FLIPPED if pair.direction == DIRECTION_FORWARD
                   else DIRECTION_FORWARD),
        exclusion=exclusion,
        source_spec=pair.target_spec, target_spec=pair.source_spec,
        meta=meta,
    )
    if pair.reference is not None and meta.get("new"):
        # the sprite shows the entity the instruction introduces
        cfg_like = WorldConfig(height=pair.source.data.shape[1],
                               width=pair.source.data.shape[2])
        ent = Entity(0, meta["new"]["shape"], meta["new"]["color"],
                     _sprite_size(pair), Motion("linear", (0, 0, 0, 0)))
        flipped.reference = _sprite(ent, meta["palette_src"], cfg_like)
    return flipped


def _sprite_size(pair: EditPair) -> float:
    spec = pair.source_spec or pair.target_spec
    uid = pair.meta.get("edited_uid")
    if spec is not None and uid is not None:
        for e in spec.entities:
            if e.uid == uid:
                return e.size
    return 8.0


LOCAL_KINDS = ("replace", "add", "remove")


def quality_filter(pair: EditPair) -> tuple[bool, str]:
    """Accept or reject a pair against the world's hard invariants."""
    for name, video in (("source", pair.source), ("target", pair.target)):
        if video.data.min() < 0.0 or video.data.max() > 1.0:
            return False, f"range: {name} values outside [0,1]"
    m = pair.mask.data
    if not np.all((m == 0.0) | (m == 1.0)):
        return False, "mask: non-binary values"
    if pair.edit_kind in LOCAL_KINDS:
        outside = (m[..., 0] == 0.0)
        diff = np.abs(pair.source.data - pair.target.data)
        if np.any(diff[outside] != 0.0):
            return False, "outside-mask change"
    try:
        ents_src, pal_src, style_src = grammar.parse_caption(pair.caption_src)
        ents_edit, pal_edit, style_edit = grammar.parse_caption(pair.caption_edit)
        ins = grammar.parse_instruction(pair.instruction)
    except grammar.GrammarError as e:
        return False, f"grammar: {e}"
    if ins.kind != pair.edit_kind and not (
            ins.kind == "stylize" and pair.edit_kind == "stylize"):
        return False, "instruction: kind mismatch"
    if pair.edit_kind in LOCAL_KINDS and pal_src != pal_edit:
        return False, "caption-diff: palette changed on a local edit"
    if pair.edit_kind == "global" and (pal_src == pal_edit
                                       or ents_src != ents_edit):
        return False, "caption-diff: global edit must change only the palette"
    if pair.edit_kind == "replace" and len(ents_src) != len(ents_edit):
        return False, "caption-diff: replace changed entity count"
    if pair.edit_kind == "remove" and len(ents_src) != len(ents_edit) + 1:
        return False, "caption-diff: remove must drop one entity"
    if pair.edit_kind == "add" and len(ents_src) + 1 != len(ents_edit):
        return False, "caption-diff: add must introduce one entity"
    return True, "ok"


def maybe_flip(pair: EditPair, stream: Stream, flip_prob: float) -> EditPair:
    """Direction augmentation applied after filtering, following config odds."""
    if stream.bernoulli(flip_prob):
        flipped = flip_direction(pair)
        if flipped is not None:
            return flipped
    return pair
