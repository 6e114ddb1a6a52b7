"""Grounded conditioning: a frozen multimodal encoder plus a trainable refiner.

The grounding encoder fuses instruction tokens, the first source frame, and
an optional reference frame into one token sequence. It is seeded, fixed, and
computed in plain numpy — it never touches the gradient tape. The token
refiner is the trainable half: a small per-token MLP mapping encoder width to
model width, recorded on the tape during fine-tuning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Rng, Tensor, add, gelu, matmul
from .numerics.tensor import broadcast_to
from .synthworld import grammar


@dataclass
class InstructorConfig:
    d_enc: int = 32
    d_model: int = 64
    sys_tokens: int = 4
    image_patch: int = 8
    text_len: int = grammar.MAX_INSTRUCTION_LEN
    grounding_seed: int = 7777   # fixed: the encoder must match across runs
    residual: bool = True

    def to_dict(self) -> dict:
        return {"d_enc": self.d_enc, "d_model": self.d_model,
                "sys_tokens": self.sys_tokens, "image_patch": self.image_patch,
                "text_len": self.text_len,
                "grounding_seed": self.grounding_seed,
                "residual": self.residual}

    @staticmethod
    def from_dict(d: dict) -> "InstructorConfig":
        cfg = InstructorConfig()
        for k, v in d.items():
            setattr(cfg, k, v)
        return cfg


@dataclass
class GroundedTokens:
    """Frozen encoder output with provenance segment lengths."""

    data: np.ndarray                      # (L_vlm, d_enc)
    segments: tuple[int, int, int, int]   # (system, text, image, reference)

    @property
    def length(self) -> int:
        return self.data.shape[0]

    def text_slice(self) -> slice:
        return slice(self.segments[0], self.segments[0] + self.segments[1])


class GroundingEncoder:
    """Deterministic, seeded stand-in for a frozen multimodal encoder."""

    def __init__(self, cfg: InstructorConfig, height: int, width: int):
        self.cfg = cfg
        self.height = height
        self.width = width
        p = cfg.image_patch
        if height % p or width % p:
            raise ValueError(f"frame {height}x{width} not divisible by patch {p}")
        self.image_tokens = (height // p) * (width // p)
        rng = Rng(cfg.grounding_seed)

        def frozen(name, shape, scale):
            return rng.stream(name).normal(shape, dtype=np.float32) * scale

        d = cfg.d_enc
        self.token_table = frozen("ground-token-table",
                                  (len(grammar.VOCAB), d), 0.5)
        self.token_table[grammar.PAD_ID] = 0.0
        self.patch_proj = frozen("ground-patch-proj", (p * p * 3, d),
                                 1.0 / np.sqrt(p * p * 3))
        self.system_bank = frozen("ground-system-bank", (cfg.sys_tokens, d), 0.5)
        self.pos_text = frozen("ground-pos-text", (cfg.text_len, d), 0.1)
        self.pos_image = frozen("ground-pos-image", (self.image_tokens, d), 0.1)
        self.pos_ref = frozen("ground-pos-ref", (self.image_tokens, d), 0.1)
        scale = 1.0 / np.sqrt(d)
        self.wq = frozen("ground-wq", (d, d), scale)
        self.wk = frozen("ground-wk", (d, d), scale)
        self.wv = frozen("ground-wv", (d, d), scale)
        self.wo = frozen("ground-wo", (d, d), scale)

    def _embed_frame(self, frame: np.ndarray, pos: np.ndarray) -> np.ndarray:
        p = self.cfg.image_patch
        h, w, c = frame.shape
        if (h, w) != (self.height, self.width):
            raise ValueError(f"frame shape {h}x{w} does not match world "
                             f"{self.height}x{self.width}")
        tiles = frame.reshape(h // p, p, w // p, p, c)
        tiles = tiles.transpose(0, 2, 1, 3, 4).reshape(-1, p * p * c)
        return tiles.astype(np.float32) @ self.patch_proj + pos

    def _embed_text(self, instruction_ids) -> np.ndarray:
        ids = list(instruction_ids)[: self.cfg.text_len]
        ids = ids + [grammar.PAD_ID] * (self.cfg.text_len - len(ids))
        return self.token_table[np.asarray(ids)] + self.pos_text

    def ground(self, instruction_ids, first_frame: np.ndarray,
               reference: np.ndarray | None = None,
               mix: bool = True) -> GroundedTokens:
        """Fuse system bank, instruction, frame, and optional reference.

        `mix=False` skips the mixing attention block (diagnostic mode that
        keeps segments independent).
        """
        parts = [self.system_bank,
                 self._embed_text(instruction_ids),
                 self._embed_frame(first_frame, self.pos_image)]
        seg = [self.cfg.sys_tokens, self.cfg.text_len, self.image_tokens, 0]
        if reference is not None:
            parts.append(self._embed_frame(reference, self.pos_ref))
            seg[3] = self.image_tokens
        x = np.concatenate(parts, axis=0)
        if mix:
            q = x @ self.wq
            k = x @ self.wk
            v = x @ self.wv
            scores = q @ k.T / np.sqrt(self.cfg.d_enc)
            scores -= scores.max(axis=-1, keepdims=True)
            attn = np.exp(scores)
            attn /= attn.sum(axis=-1, keepdims=True)
            x = x + (attn @ v) @ self.wo
        return GroundedTokens(x.astype(np.float32), tuple(seg))

    def ground_pair_frames(self, instruction_ids, source_video: np.ndarray,
                           reference: np.ndarray | None = None,
                           mix: bool = True) -> GroundedTokens:
        ref_frame = reference[0] if reference is not None else None
        return self.ground(instruction_ids, source_video[0], ref_frame, mix=mix)


def null_text(g: GroundedTokens) -> GroundedTokens:
    """Grounded tokens with the instruction segment blanked (for guidance)."""
    data = g.data.copy()
    data[g.text_slice()] = 0.0
    return GroundedTokens(data, g.segments)


class TokenRefiner:
    """Trainable per-token MLP from encoder width to model width."""

    def __init__(self, cfg: InstructorConfig, rng: Rng, dtype=np.float32):
        self.cfg = cfg
        d_in, d_out = cfg.d_enc, cfg.d_model
        s = rng.stream("init", 101)
        self.params: dict[str, Tensor] = {
            "refiner.w1": Tensor(s.normal((d_in, d_out), dtype=dtype)
                                 / math.sqrt(d_in), requires_grad=True),
            "refiner.b1": Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True),
            "refiner.w2": Tensor(s.normal((d_out, d_out), dtype=dtype)
                                 / math.sqrt(d_out), requires_grad=True),
            "refiner.b2": Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True),
        }
        self.residual = cfg.residual

    def refine(self, grounded: Tensor) -> Tensor:
        """(..., L, d_enc) -> (..., L, d_model); preserves token count."""
        p = self.params
        h = add(matmul(grounded, p["refiner.w1"]),
                broadcast_to(p["refiner.b1"],
                             grounded.shape[:-1] + (self.cfg.d_model,)))
        y = add(matmul(gelu(h), p["refiner.w2"]),
                broadcast_to(p["refiner.b2"],
                             grounded.shape[:-1] + (self.cfg.d_model,)))
        if self.residual:
            y = add(y, h)
        return y

    def load_params(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = tensors[name].astype(p.data.dtype).copy()

    def export_params(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}
