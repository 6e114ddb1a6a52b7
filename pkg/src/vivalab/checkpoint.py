"""Model checkpoint assembly: manifest + named tensor sections.

The `model` section carries the velocity net and the token refiner; the
`adapters` section, when present, carries low-rank deltas so a fine-tuning
checkpoint composes with its base checkpoint.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .instructor import GroundingEncoder, InstructorConfig, TokenRefiner
from .model import LoRAAdapter, ModelConfig, VelocityNet
from .numerics import Rng, Tensor, serialize
from .synthworld.pairs import WorldConfig


def world_hash(world: WorldConfig, model: ModelConfig,
               instructor: InstructorConfig) -> str:
    blob = serialize.canonical_json({
        "world": world.to_dict(), "model": model.to_dict(),
        "instructor": instructor.to_dict()})
    return hashlib.sha256(blob.encode()).hexdigest()


def save_model_checkpoint(path, world: WorldConfig, model_cfg: ModelConfig,
                          instructor_cfg: InstructorConfig, net: VelocityNet,
                          refiner: TokenRefiner,
                          adapters: dict[str, LoRAAdapter] | None = None,
                          extra: dict | None = None) -> None:
    manifest = {
        "kind": "model-checkpoint",
        "world": world.to_dict(),
        "model": model_cfg.to_dict(),
        "instructor": instructor_cfg.to_dict(),
        "world_hash": world_hash(world, model_cfg, instructor_cfg),
    }
    if extra:
        manifest.update(extra)
    sections = {"model": {**net.export_params(), **refiner.export_params()}}
    if adapters is not None:
        sections["adapters"] = {}
        for name, ad in adapters.items():
            sections["adapters"][f"{name}.lora_a"] = ad.a.data.copy()
            sections["adapters"][f"{name}.lora_b"] = ad.b.data.copy()
            sections["adapters"][f"{name}.meta"] = np.asarray(
                [ad.rank, ad.alpha], dtype=np.float32)
    serialize.save_checkpoint(path, manifest, sections)


def load_model_checkpoint(path, dtype=np.float32):
    """Rebuild (net, refiner, grounding encoder, adapters) from a file."""
    manifest, sections = serialize.load_checkpoint(path)
    world = WorldConfig.from_dict(manifest["world"])
    model_cfg = ModelConfig.from_dict(manifest["model"])
    instructor_cfg = InstructorConfig.from_dict(manifest["instructor"])
    dims = (world.frames, world.height, world.width, world.channels)
    net = VelocityNet(model_cfg, dims, Rng(0), dtype=dtype)
    refiner = TokenRefiner(instructor_cfg, Rng(0), dtype=dtype)
    tensors = sections["model"]
    net.load_params({k: v for k, v in tensors.items()
                     if not k.startswith("refiner.")})
    refiner.load_params({k: v for k, v in tensors.items()
                         if k.startswith("refiner.")})
    encoder = GroundingEncoder(instructor_cfg, world.height, world.width)
    adapters = None
    if "adapters" in sections:
        adapters = {}
        sec = sections["adapters"]
        names = sorted({k.rsplit(".", 1)[0] for k in sec})
        for name in names:
            rank, alpha = sec[f"{name}.meta"]
            adapters[name] = LoRAAdapter(
                a=Tensor(sec[f"{name}.lora_a"].astype(dtype)),
                b=Tensor(sec[f"{name}.lora_b"].astype(dtype)),
                rank=int(rank), alpha=float(alpha))
    return manifest, world, net, refiner, encoder, adapters
