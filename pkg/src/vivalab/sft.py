"""Supervised fine-tuning on paired edits with the masked flow objective.

Each step samples a mixed batch (image pairs with the configured
probability, video pairs otherwise), grounds the instructions through the
frozen encoder, drops the instruction segment at the guidance-dropout rate,
and minimizes the mask-weighted velocity regression over the patchifier,
projector, token refiner, and the whole velocity net.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import evalbench, flow
from .instructor import GroundingEncoder, InstructorConfig, TokenRefiner, null_text
from .model import ModelConfig, VelocityNet
from .numerics import Adam, ContractError, GradTape, Rng, Tensor
from .numerics.rng import Stream
from .rewards import Embedder, RewardWeights
from .synthworld.dataset import DatasetReader
from .synthworld.pairs import EditPair, WorldConfig


@dataclass
class SftConfig:
    steps: int = 5000
    batch: int = 32
    lr: float = 1e-3
    image_prob: float = 0.6
    instr_dropout: float = 0.1
    mask_weight: float = 1.0
    t_min: float = 0.02
    t_max: float = 0.98
    log_every: int = 50

    def to_dict(self) -> dict:
        return {"steps": self.steps, "batch": self.batch, "lr": self.lr,
                "image_prob": self.image_prob,
                "instr_dropout": self.instr_dropout,
                "mask_weight": self.mask_weight,
                "t_min": self.t_min, "t_max": self.t_max,
                "log_every": self.log_every}

    @staticmethod
    def from_dict(d: dict) -> "SftConfig":
        cfg = SftConfig()
        for k, v in d.items():
            setattr(cfg, k, v)
        return cfg


def sample_pair_kind(stream: Stream, image_prob: float, have_images: bool,
                     have_videos: bool) -> str:
    """Per-sample image/video draw; falls back when a pool is empty."""
    if not have_images:
        return "video"
    if not have_videos:
        return "image"
    return "image" if stream.bernoulli(image_prob) else "video"


def _group_key(pair: EditPair) -> tuple:
    return (pair.frames, pair.reference is not None)


class _PairCache:
    """Loads dataset records once; keeps grounded tokens per pair."""

    def __init__(self, reader: DatasetReader, encoder: GroundingEncoder):
        self.pairs = reader.load_all()
        self.encoder = encoder
        self.grounded = [
            encoder.ground_pair_frames(
                p.instruction, p.source.data,
                p.reference.data if p.reference is not None else None)
            for p in self.pairs]
        self.video_idx = [i for i, p in enumerate(self.pairs) if not p.is_image]
        self.image_idx = [i for i, p in enumerate(self.pairs) if p.is_image]


def train_sft(reader: DatasetReader, world: WorldConfig,
              model_cfg: ModelConfig, instructor_cfg: InstructorConfig,
              cfg: SftConfig, seed: int, out_dir: str | None = None,
              log_rows: list | None = None,
              dtype=np.float32) -> tuple[VelocityNet, TokenRefiner, GroundingEncoder]:
    """Train from scratch on the dataset; returns the trained modules and,
    when `out_dir` is given, writes checkpoint.vckp and metrics.jsonl."""
    if len(reader) == 0:
        raise ContractError("dataset is empty")
    rng = Rng(seed)
    dims = (world.frames, world.height, world.width, world.channels)
    net = VelocityNet(model_cfg, dims, rng, dtype=dtype)
    encoder = GroundingEncoder(instructor_cfg, world.height, world.width)
    refiner = TokenRefiner(instructor_cfg, rng, dtype=dtype)
    cache = _PairCache(reader, encoder)
    params = {**net.params, **refiner.params}
    for p in params.values():
        p.requires_grad = True
    opt = Adam(params, lr=cfg.lr)
    rows = log_rows if log_rows is not None else []

    for step in range(cfg.steps):
        pick = rng.stream("data", step)
        noise_stream = rng.stream("sde-noise", step)
        drop_stream = rng.stream("dropout", step)
        chosen: list[int] = []
        for _ in range(cfg.batch):
            kind = sample_pair_kind(pick, cfg.image_prob,
                                    bool(cache.image_idx), bool(cache.video_idx))
            pool = cache.image_idx if kind == "image" else cache.video_idx
            chosen.append(pool[pick.choice_index(len(pool))])
        t_draw = pick.uniform(cfg.t_min, cfg.t_max, (cfg.batch,))
        dropped = [drop_stream.bernoulli(cfg.instr_dropout)
                   for _ in range(cfg.batch)]

        groups: dict[tuple, list[int]] = {}
        for j, idx in enumerate(chosen):
            groups.setdefault(_group_key(cache.pairs[idx]), []).append(j)

        with GradTape() as tape:
            loss = None
            for members in groups.values():
                sub_pairs = [cache.pairs[chosen[j]] for j in members]
                grounded = []
                for j in members:
                    g = cache.grounded[chosen[j]]
                    grounded.append(null_text(g).data if dropped[j] else g.data)
                cond = refiner.refine(Tensor(np.stack(grounded).astype(dtype)))
                x1 = np.stack([p.target.data for p in sub_pairs]).astype(dtype)
                src = np.stack([p.source.data for p in sub_pairs]).astype(dtype)
                mask = np.stack([p.mask.data for p in sub_pairs]).astype(dtype)
                t_sub = t_draw[members]
                noise = noise_stream.normal(x1.shape, dtype=dtype)
                batch = flow.make_flow_batch(x1, src, mask, t_sub, noise,
                                             cfg.mask_weight)
                part = flow.masked_loss(batch, net, cond)
                weight = Tensor(np.asarray(len(members) / cfg.batch, dtype=dtype))
                from .numerics import add, mul
                term = mul(part, weight)
                loss = term if loss is None else add(loss, term)
            grads = tape.backward(loss)
        opt.step(grads)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rows.append({"step": step, "loss": float(loss.data),
                         "n_image": sum(cache.pairs[i].is_image for i in chosen),
                         "n_video": sum(not cache.pairs[i].is_image for i in chosen)})

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        from .checkpoint import save_model_checkpoint
        save_model_checkpoint(os.path.join(out_dir, "checkpoint.vckp"),
                              world, model_cfg, instructor_cfg, net, refiner)
        with open(os.path.join(out_dir, "metrics.jsonl"), "w") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
    return net, refiner, encoder


def evaluate_sft(net: VelocityNet, refiner: TokenRefiner,
                 encoder: GroundingEncoder, heldout: list[EditPair],
                 sampler_cfg: flow.SamplerConfig, seed: int = 1234,
                 embedder: Embedder | None = None,
                 weights: RewardWeights | None = None,
                 adapters=None) -> list[dict]:
    """One table row per held-out pair: sampled edit scored by the oracles."""
    return evalbench.evaluate_pairs(net, refiner, encoder, heldout,
                                    sampler_cfg, Rng(seed),
                                    embedder=embedder, weights=weights,
                                    adapters=adapters)
