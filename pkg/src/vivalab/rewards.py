"""Deterministic reward oracles and group-relative advantages.

A frozen embedder maps videos and captions into one shared semantic space
(entity cells, color/shape marginals, palette, style flags) and everything
downstream is cosine arithmetic: instruction-following as a caption-contrast,
source preservation as video-to-video similarity, and a preference proxy that
subtracts a total-variation artifact penalty. None of it ever touches the
gradient tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .numerics import ContractError, Rng
from .synthworld import grammar
from .synthworld.scene import (COLORS, PALETTES, PALETTE_NAMES, SHAPES,
                               shape_membership)

_N_CELLS = len(COLORS) * len(SHAPES)
_SEM_DIM = _N_CELLS + len(COLORS) + len(SHAPES) + len(PALETTE_NAMES) + len(grammar.STYLES)

# block weights: entity cells dominate, context dims assist
_W_CELL, _W_MARGINAL, _W_PALETTE, _W_STYLE = 1.0, 0.5, 0.5, 0.5


def _cell(color: str, shape: str) -> int:
    return COLORS.index(color) * len(SHAPES) + SHAPES.index(shape)


def _chroma(rgb: np.ndarray) -> np.ndarray:
    """rgb / sum(rgb): exactly invariant to a positive brightness scale."""
    s = rgb.sum(axis=-1, keepdims=rgb.ndim > 1)
    return rgb / np.maximum(s, 1e-9)


class _TemplateBank:
    """Rasterized shape masks over sizes and sub-pixel offsets, grouped by
    bounding-box shape so a component is only compared against plausible
    candidates."""

    def __init__(self, sizes=np.arange(4.5, 12.01, 0.25), offsets=(0.0, 0.25, 0.5, 0.75)):
        self.by_bbox: dict[tuple[int, int], list[tuple[int, np.ndarray]]] = {}
        grid = 18
        for si, shape in enumerate(SHAPES):
            for size in sizes:
                for ox in offsets:
                    for oy in offsets:
                        m = shape_membership(shape, grid / 2 + ox, grid / 2 + oy,
                                             float(size), grid, grid)
                        ys, xs = np.nonzero(m)
                        if ys.size == 0:
                            continue
                        crop = m[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
                        key = crop.shape
                        bucket = self.by_bbox.setdefault(key, [])
                        # skip duplicates of the same boolean pattern
                        if not any(s == si and c.shape == crop.shape and np.array_equal(c, crop)
                                   for s, c in bucket):
                            bucket.append((si, crop))

    def scores(self, comp_mask: np.ndarray) -> np.ndarray:
        h, w = comp_mask.shape
        best = np.zeros(len(SHAPES))
        area = comp_mask.sum()
        for dh in (0, -1, 1):
            for dw in (0, -1, 1):
                for si, tmpl in self.by_bbox.get((h + dh, w + dw), ()):
                    th, tw = tmpl.shape
                    hh, ww = min(h, th), min(w, tw)
                    inter = np.logical_and(comp_mask[:hh, :ww], tmpl[:hh, :ww]).sum()
                    union = area + tmpl.sum() - inter
                    if union:
                        best[si] = max(best[si], inter / union)
            if best.max() > 0.9:
                break
        if best.max() == 0.0:
            return np.full(len(SHAPES), 1.0 / len(SHAPES))
        # temperature-sharpened: a clear template win takes nearly all the mass
        weights = np.exp((best - best.max()) / 0.04)
        return weights / weights.sum()


_BANK: _TemplateBank | None = None


def _shape_scores(comp_mask: np.ndarray) -> np.ndarray:
    global _BANK
    if _BANK is None:
        _BANK = _TemplateBank()
    return _BANK.scores(comp_mask)


@dataclass
class RewardWeights:
    w_if: float = 1.0
    w_sp: float = 0.5
    w_ps: float = 0.5
    delta: float = 1e-8      # advantage std guard
    tv_weight: float = 1.0   # artifact penalty inside the preference proxy

    def to_dict(self) -> dict:
        return {"w_if": self.w_if, "w_sp": self.w_sp, "w_ps": self.w_ps,
                "delta": self.delta, "tv_weight": self.tv_weight}

    @staticmethod
    def from_dict(d: dict) -> "RewardWeights":
        w = RewardWeights()
        for k, v in d.items():
            setattr(w, k, v)
        return w


class Embedder:
    """Frozen seeded projection from pooled color/shape histogram features
    (videos) and bag-of-token semantics (captions) into a shared unit sphere."""

    def __init__(self, seed: int = 4242, d_emb: int = 32, min_area: int = 4):
        self.d_emb = d_emb
        self.min_area = min_area
        gauss = Rng(seed).stream("embedder").normal((_SEM_DIM, max(d_emb, _SEM_DIM)),
                                                    dtype=np.float64)
        q, _ = np.linalg.qr(gauss)
        self.proj = q[:, :d_emb]  # orthonormal columns: cosines survive
        self._palette_bg_chroma = {name: _chroma(np.asarray(p["background"]))
                                   for name, p in PALETTES.items()}
        self._color_chroma = {
            name: {c: _chroma(np.asarray(p["colors"][c])) for c in COLORS}
            for name, p in PALETTES.items()}
        self._structure = np.ones((3, 3), dtype=bool)

    # -- caption side ---------------------------------------------------------

    def caption_semantic(self, caption_ids) -> np.ndarray:
        entities, palette, style = grammar.parse_caption(caption_ids)
        sem = np.zeros(_SEM_DIM)
        for color, shape in entities:
            sem[_cell(color, shape)] += _W_CELL
            sem[_N_CELLS + COLORS.index(color)] += _W_MARGINAL
            sem[_N_CELLS + len(COLORS) + SHAPES.index(shape)] += _W_MARGINAL
        sem[_N_CELLS + len(COLORS) + len(SHAPES)
            + PALETTE_NAMES.index(palette)] += _W_PALETTE
        if style is not None:
            sem[_SEM_DIM - len(grammar.STYLES)
                + grammar.STYLES.index(style)] += _W_STYLE
        return sem

    # -- video side -----------------------------------------------------------

    def frame_semantic(self, frame: np.ndarray) -> np.ndarray:
        """Histogram-style semantics of one H x W x C frame.

        All color reasoning happens in chromaticity (rgb / sum), so the
        features are invariant to a global brightness scale.
        """
        sem = np.zeros(_SEM_DIM)
        frame = frame.astype(np.float64, copy=False)

        # background = mean color of the most frequent quantized color bin
        quant = np.clip(np.round(frame * 31.0), 0, 63).astype(np.int64)
        flat = quant[..., 0] * 4096 + quant[..., 1] * 64 + quant[..., 2]
        counts = np.bincount(flat.ravel())
        bg_code = int(np.argmax(counts))
        bg_px = frame.reshape(-1, 3)[flat.ravel() == bg_code]
        bg_rgb = bg_px.mean(axis=0)
        bg_ch = _chroma(bg_rgb)

        dists = {name: float(np.linalg.norm(bg_ch - ch))
                 for name, ch in self._palette_bg_chroma.items()}
        inv_dists = {name: float(np.linalg.norm(
            bg_ch - _chroma(1.0 - np.asarray(PALETTES[name]["background"]))))
            for name in PALETTE_NAMES}
        palette = min(dists, key=dists.get)
        inverted = min(inv_dists.values()) < dists[palette]
        sem[_N_CELLS + len(COLORS) + len(SHAPES)
            + PALETTE_NAMES.index(palette)] += _W_PALETTE
        if inverted:
            sem[_SEM_DIM - len(grammar.STYLES)
                + grammar.STYLES.index("inverted")] += _W_STYLE
        # relative channel spread: scale-free grayscale detector
        spread = float((frame.max(axis=-1) - frame.min(axis=-1)).mean())
        level = float(frame.max())
        if level > 0 and spread / level < 0.04:
            sem[_SEM_DIM - len(grammar.STYLES)
                + grammar.STYLES.index("grayscale")] += _W_STYLE

        chroma = _chroma(frame)
        fg = np.linalg.norm(chroma - bg_ch, axis=-1, ord=np.inf) > 0.05
        labels, n = ndimage.label(fg, structure=self._structure)
        if n == 0:
            return sem
        colors_ch = self._color_chroma[palette]
        total_area = 0.0
        contributions = []
        for comp in range(1, n + 1):
            ys, xs = np.nonzero(labels == comp)
            area = ys.size
            if area < self.min_area:
                continue
            mean_ch = _chroma(frame[ys, xs].mean(axis=0))
            color = min(colors_ch,
                        key=lambda c: float(np.linalg.norm(mean_ch - colors_ch[c])))
            comp_mask = labels[ys.min():ys.max() + 1,
                               xs.min():xs.max() + 1] == comp
            shape_w = _shape_scores(comp_mask)
            contributions.append((color, shape_w, area))
            total_area += area
        # entities count equally, as they do in captions, regardless of size
        for color, shape_w, area in contributions:
            w = 1.0 / len(contributions)
            ci = COLORS.index(color)
            for si, s in enumerate(SHAPES):
                sem[ci * len(SHAPES) + si] += _W_CELL * w * shape_w[si]
            sem[_N_CELLS + ci] += _W_MARGINAL * w
            sem[_N_CELLS + len(COLORS):_N_CELLS + len(COLORS) + len(SHAPES)] += (
                _W_MARGINAL * w * shape_w)
        return sem

    def _project(self, sem: np.ndarray) -> np.ndarray:
        vec = sem @ self.proj
        norm = np.linalg.norm(vec)
        if norm < 1e-12:
            vec = self.proj[0].copy()   # fixed direction for empty semantics
            norm = np.linalg.norm(vec)
        return vec / norm

    def embed_caption(self, caption_ids) -> np.ndarray:
        return self._project(self.caption_semantic(caption_ids))

    def frame_features(self, video: np.ndarray) -> np.ndarray:
        return np.stack([self._project(self.frame_semantic(f)) for f in video])

    def embed_video(self, video: np.ndarray) -> np.ndarray:
        sem = np.mean([self.frame_semantic(f) for f in video], axis=0)
        return self._project(sem)


# ---------------------------------------------------------------------------
# Reward formulas
# ---------------------------------------------------------------------------


def clip_sim(emb: Embedder, video: np.ndarray, caption_ids) -> float:
    """Cosine between the frozen video and caption embeddings, in [-1, 1]."""
    return float(np.dot(emb.embed_video(video), emb.embed_caption(caption_ids)))


def r_if(emb: Embedder, v_edit: np.ndarray, p_edit, p_src) -> float:
    """Instruction following: the edit should read as the edited caption,
    not the source caption. Group-constant source-video terms are never
    computed; advantage normalization cancels them anyway."""
    return (clip_sim(emb, v_edit, p_edit) - clip_sim(emb, v_edit, p_src))


def r_sp(emb: Embedder, v_src: np.ndarray, v_edit: np.ndarray) -> float:
    """Source preservation: video-to-video cosine."""
    if v_src.shape != v_edit.shape:
        raise ContractError(
            f"video shapes differ: {v_src.shape} vs {v_edit.shape}")
    return float(np.dot(emb.embed_video(v_src), emb.embed_video(v_edit)))


def total_variation(video: np.ndarray) -> float:
    """Mean absolute spatial gradient, normalized per element."""
    dy = np.abs(np.diff(video, axis=1)).mean() if video.shape[1] > 1 else 0.0
    dx = np.abs(np.diff(video, axis=2)).mean() if video.shape[2] > 1 else 0.0
    return float(dy + dx)


def r_ps(emb: Embedder, v_edit: np.ndarray, p_edit,
         tv_weight: float = 1.0) -> float:
    """Preference proxy: caption alignment minus an artifact penalty."""
    return clip_sim(emb, v_edit, p_edit) - tv_weight * total_variation(v_edit)


@dataclass
class RewardBundle:
    r_if: float
    r_sp: float
    r_ps: float
    composite: float
    weights: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"r_if": self.r_if, "r_sp": self.r_sp, "r_ps": self.r_ps,
                "composite": self.composite, "weights": list(self.weights)}


def composite(r_if_val: float, r_sp_val: float, r_ps_val: float,
              weights: RewardWeights) -> RewardBundle:
    for w in (weights.w_if, weights.w_sp, weights.w_ps):
        if not math.isfinite(w):
            raise ContractError("reward weights must be finite")
    total = (weights.w_if * r_if_val + weights.w_sp * r_sp_val
             + weights.w_ps * r_ps_val)
    return RewardBundle(r_if_val, r_sp_val, r_ps_val, total,
                        (weights.w_if, weights.w_sp, weights.w_ps))


def score_edit(emb: Embedder, v_edit: np.ndarray, v_src: np.ndarray,
               p_edit, p_src, weights: RewardWeights) -> RewardBundle:
    return composite(r_if(emb, v_edit, p_edit, p_src),
                     r_sp(emb, v_src, v_edit),
                     r_ps(emb, v_edit, p_edit, weights.tv_weight),
                     weights)


# ---------------------------------------------------------------------------
# Group-relative advantages
# ---------------------------------------------------------------------------


@dataclass
class GroupAdvantages:
    rewards: np.ndarray
    advantages: np.ndarray
    delta: float


def advantages(rewards, delta: float = 1e-8) -> GroupAdvantages:
    """(r - mean) / (population std + delta); shift-invariant by construction.

    A degenerate group (identical rewards) yields exactly zero advantages;
    without the short-circuit, 1-ulp rounding in the mean would leave a
    uniform residue that adaptive optimizers amplify to full-size steps.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ContractError("advantages need a flat group of size >= 2")
    if np.ptp(r) == 0.0:
        return GroupAdvantages(rewards=r, advantages=np.zeros_like(r),
                               delta=delta)
    centered = r - r.mean()
    std = float(np.sqrt((centered * centered).mean()))
    adv = centered / (std + delta)
    return GroupAdvantages(rewards=r, advantages=adv, delta=delta)
