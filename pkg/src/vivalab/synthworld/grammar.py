"""Closed caption and instruction grammar over the shape world.

Every caption and instruction is a sequence of ids into a fixed vocabulary,
and every well-formed sequence parses back to the structure that printed it.
"""

from __future__ import annotations

from dataclasses import dataclass

from .scene import COLORS, PALETTE_NAMES, SHAPES, SceneSpec

STYLES = ("inverted", "grayscale")

PAD = "<pad>"
_FILLERS = ("a", "the", "with", "on", "in", "to", "background", "style")
_VERBS = ("replace", "add", "remove", "change", "apply")

VOCAB: tuple[str, ...] = (PAD,) + _FILLERS + _VERBS + COLORS + SHAPES + PALETTE_NAMES + STYLES
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = WORD_TO_ID[PAD]

MAX_ENTITIES = 3
MAX_INSTRUCTION_LEN = 8          # replace form is the longest
MAX_CAPTION_LEN = 3 * MAX_ENTITIES + 4 + 3   # entities + background + style suffix


class GrammarError(Exception):
    """Token sequence is outside the closed grammar."""


def encode(words) -> list[int]:
    try:
        return [WORD_TO_ID[w] for w in words]
    except KeyError as e:
        raise GrammarError(f"unknown word {e.args[0]!r}") from None


def decode(ids) -> list[str]:
    words = []
    for i in ids:
        if not 0 <= i < len(VOCAB):
            raise GrammarError(f"token id {i} out of range")
        words.append(VOCAB[i])
    return words


def render_text(ids) -> str:
    return " ".join(w for w in decode(ids) if w != PAD)


# ---------------------------------------------------------------------------
# Captions
# ---------------------------------------------------------------------------


def caption_tokens(spec: SceneSpec, style: str | None = None) -> list[int]:
    words: list[str] = []
    for e in sorted(spec.entities, key=lambda e: e.uid):
        words += ["a", e.color, e.shape]
    words += ["on", "a", spec.palette, "background"]
    if style is not None:
        if style not in STYLES:
            raise GrammarError(f"unknown style {style!r}")
        words += ["in", style, "style"]
    return encode(words)


def parse_caption(ids) -> tuple[list[tuple[str, str]], str, str | None]:
    """Returns (entities as (color, shape) pairs, palette, optional style)."""
    words = [w for w in decode(ids) if w != PAD]
    entities: list[tuple[str, str]] = []
    pos = 0
    while pos + 2 < len(words) and words[pos] == "a" and words[pos + 1] in COLORS:
        if words[pos + 2] not in SHAPES:
            raise GrammarError(f"expected shape, got {words[pos + 2]!r}")
        entities.append((words[pos + 1], words[pos + 2]))
        pos += 3
    if words[pos:pos + 2] != ["on", "a"] or pos + 3 >= len(words) + 0:
        raise GrammarError("caption missing background phrase")
    palette = words[pos + 2]
    if palette not in PALETTE_NAMES or words[pos + 3] != "background":
        raise GrammarError("caption missing background phrase")
    pos += 4
    style = None
    if pos < len(words):
        if (len(words) - pos != 3 or words[pos] != "in"
                or words[pos + 1] not in STYLES or words[pos + 2] != "style"):
            raise GrammarError("trailing caption tokens are not a style suffix")
        style = words[pos + 1]
        pos += 3
    return entities, palette, style


# ---------------------------------------------------------------------------
# Instructions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Instruction:
    kind: str  # replace | add | remove | global | stylize
    old_color: str | None = None
    old_shape: str | None = None
    new_color: str | None = None
    new_shape: str | None = None
    palette: str | None = None
    style: str | None = None


def instruction_tokens(ins: Instruction) -> list[int]:
    if ins.kind == "replace":
        words = ["replace", "the", ins.old_color, ins.old_shape,
                 "with", "a", ins.new_color, ins.new_shape]
    elif ins.kind == "add":
        words = ["add", "a", ins.new_color, ins.new_shape]
    elif ins.kind == "remove":
        words = ["remove", "the", ins.old_color, ins.old_shape]
    elif ins.kind == "global":
        words = ["change", "the", "background", "to", ins.palette]
    elif ins.kind == "stylize":
        words = ["apply", ins.style, "style"]
    else:
        raise GrammarError(f"unknown instruction kind {ins.kind!r}")
    return encode(words)


def parse_instruction(ids) -> Instruction:
    words = [w for w in decode(ids) if w != PAD]
    if not words:
        raise GrammarError("empty instruction")
    head = words[0]

    def expect(cond: bool):
        if not cond:
            raise GrammarError(f"malformed {head!r} instruction: {words}")

    if head == "replace":
        expect(len(words) == 8 and words[1] == "the" and words[4] == "with"
               and words[5] == "a"
               and words[2] in COLORS and words[3] in SHAPES
               and words[6] in COLORS and words[7] in SHAPES)
        return Instruction("replace", old_color=words[2], old_shape=words[3],
                           new_color=words[6], new_shape=words[7])
    if head == "add":
        expect(len(words) == 4 and words[1] == "a"
               and words[2] in COLORS and words[3] in SHAPES)
        return Instruction("add", new_color=words[2], new_shape=words[3])
    if head == "remove":
        expect(len(words) == 4 and words[1] == "the"
               and words[2] in COLORS and words[3] in SHAPES)
        return Instruction("remove", old_color=words[2], old_shape=words[3])
    if head == "change":
        expect(len(words) == 5 and words[1:4] == ["the", "background", "to"]
               and words[4] in PALETTE_NAMES)
        return Instruction("global", palette=words[4])
    if head == "apply":
        expect(len(words) == 3 and words[1] in STYLES and words[2] == "style")
        return Instruction("stylize", style=words[1])
    raise GrammarError(f"unknown instruction head {head!r}")


def inverse_instruction(ins: Instruction, source_palette: str | None = None) -> Instruction | None:
    """The instruction that undoes `ins`, or None when no inverse exists."""
    if ins.kind == "replace":
        return Instruction("replace", old_color=ins.new_color,
                           old_shape=ins.new_shape, new_color=ins.old_color,
                           new_shape=ins.old_shape)
    if ins.kind == "add":
        return Instruction("remove", old_color=ins.new_color,
                           old_shape=ins.new_shape)
    if ins.kind == "remove":
        return Instruction("add", new_color=ins.old_color,
                           new_shape=ins.old_shape)
    if ins.kind == "global":
        if source_palette is None:
            raise GrammarError("global inverse needs the source palette")
        return Instruction("global", palette=source_palette)
    if ins.kind == "stylize" and ins.style == "inverted":
        return ins  # inversion is an involution
    return None


def enumerate_instructions() -> list[Instruction]:
    """Every instruction the grammar can produce (for injectivity tests)."""
    out: list[Instruction] = []
    combos = [(c, s) for c in COLORS for s in SHAPES]
    for oc, os_ in combos:
        for nc, ns in combos:
            if (oc, os_) != (nc, ns):
                out.append(Instruction("replace", old_color=oc, old_shape=os_,
                                       new_color=nc, new_shape=ns))
    for c, s in combos:
        out.append(Instruction("add", new_color=c, new_shape=s))
        out.append(Instruction("remove", old_color=c, old_shape=s))
    for p in PALETTE_NAMES:
        out.append(Instruction("global", palette=p))
    for st in STYLES:
        out.append(Instruction("stylize", style=st))
    return out
