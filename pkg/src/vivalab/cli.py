"""Command-line entry point: datagen | sft | grpo | eval | sample.

Every run writes a manifest (resolved config, seed, code version, config
hash) next to its outputs, and identical manifests reproduce byte-identical
outputs. Errors exit nonzero with a single machine-parsable line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__, flow, grpo as grpo_mod
from .checkpoint import load_model_checkpoint, save_model_checkpoint, world_hash
from .config import ConfigFileError, RunConfig, config_hash, load_config
from .evalbench import run_benchmark
from .instructor import GroundingEncoder, TokenRefiner
from .model import attach_lora
from .numerics import ContractError, NumericsError, Rng, Tensor, serialize
from .parallel import parallel_map, resolve_threads
from .rewards import Embedder
from .sft import train_sft
from .synthworld import dataset, pairs
from .synthworld.dataset import DatasetReader


class CliError(Exception):
    """User-facing failure; message printed as one line."""


def _write_manifest(out_dir: str, command: str, cfg: RunConfig, seed: int,
                    extra: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "seed": seed,
        "version": __version__,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        f.write(serialize.canonical_json(manifest))
        f.write("\n")


def _generate_pairs(cfg: RunConfig, seed: int, count: int | None,
                    threads: int) -> list[pairs.EditPair]:
    world = cfg.world
    rng = Rng(seed)
    n_videos = count if count is not None else cfg.datagen.video_count
    n_images = cfg.datagen.image_count

    def make_video(i: int) -> pairs.EditPair:
        stream = rng.stream("data", i)
        if cfg.datagen.balanced_kinds:
            kind = world.video_kinds[i % len(world.video_kinds)]
            if kind == "replace":
                pair = pairs.make_replacement_pair(stream, world)
            elif kind == "global":
                pair = pairs.make_global_pair(stream, world)
            else:
                pair = pairs.make_add_remove_pair(stream, world, kind=kind)
        else:
            pair = pairs.make_video_pair(stream, world)
        ok, reason = pairs.quality_filter(pair)
        if not ok:
            raise CliError(f"generated pair {i} failed filtering: {reason}")
        return pairs.maybe_flip(pair, rng.stream("data", i, 1), world.flip_prob)

    def make_image(i: int) -> pairs.EditPair:
        stream = rng.stream("data", 1_000_000 + i)
        pair = pairs.make_image_pair(stream, world)
        ok, reason = pairs.quality_filter(pair)
        if not ok:
            raise CliError(f"generated image pair {i} failed filtering: {reason}")
        return pairs.maybe_flip(pair, rng.stream("data", 1_000_000 + i, 1),
                                world.flip_prob)

    videos = parallel_map(make_video, range(n_videos), threads)
    images = parallel_map(make_image, range(n_images), threads)
    return videos + images


def cmd_datagen(args) -> int:
    cfg = load_config(args.config)
    threads = resolve_threads(args.threads)
    pair_list = _generate_pairs(cfg, args.seed, args.count, threads)
    wh = world_hash(cfg.world, cfg.model, cfg.instructor)
    dataset.write_dataset(args.out, pair_list, {
        "world": cfg.world.to_dict(),
        "world_hash": wh,
        "seed": args.seed,
        "counts": {"video": sum(not p.is_image for p in pair_list),
                   "image": sum(p.is_image for p in pair_list)},
    })
    _write_manifest(args.out, "datagen", cfg, args.seed,
                    {"world_hash": wh, "pair_count": len(pair_list)})
    print(f"wrote {len(pair_list)} pairs to {args.out}")
    return 0


def cmd_sft(args) -> int:
    cfg = load_config(args.config)
    reader = DatasetReader(args.data)
    os.makedirs(args.out, exist_ok=True)
    rows: list[dict] = []
    train_sft(reader, cfg.world, cfg.model, cfg.instructor, cfg.sft,
              seed=args.seed, out_dir=args.out, log_rows=rows)
    _write_manifest(args.out, "sft", cfg, args.seed,
                    {"data": os.path.abspath(args.data),
                     "steps": cfg.sft.steps})
    print(f"checkpoint written to {os.path.join(args.out, 'checkpoint.vckp')}"
          f" (final loss {rows[-1]['loss']:.6f})")
    return 0


def cmd_grpo(args) -> int:
    cfg = load_config(args.config)
    manifest, world, net, refiner, encoder, _ = load_model_checkpoint(
        args.sft_ckpt)
    reader = DatasetReader(args.data)
    conditions = []
    for i in reader.video_indices:
        pair = reader.load(i)
        grounded = encoder.ground_pair_frames(
            pair.instruction, pair.source.data,
            pair.reference.data if pair.reference is not None else None)
        tokens = refiner.refine(Tensor(grounded.data[None])).data[0]
        conditions.append(grpo_mod.EditCondition(
            uid=i, src=pair.source.data, instruction=pair.instruction,
            caption_src=pair.caption_src, caption_edit=pair.caption_edit,
            cond_tokens=tokens))
    if not conditions:
        raise CliError(f"{args.data}: no video pairs for rollouts")
    adapters = attach_lora(net, cfg.grpo.lora_rank, cfg.grpo.lora_alpha,
                           Rng(args.seed))
    policy = grpo_mod.PolicyPair(net=net, adapters=adapters)
    os.makedirs(args.out, exist_ok=True)
    grpo_mod.train_grpo(conditions, policy, cfg.grpo, seed=args.seed,
                        out_dir=args.out, embedder=Embedder(),
                        weights=cfg.reward)
    ckpt_path = os.path.join(args.out, "checkpoint.vckp")
    from .instructor import InstructorConfig
    from .model import ModelConfig
    save_model_checkpoint(
        ckpt_path, world, ModelConfig.from_dict(manifest["model"]),
        InstructorConfig.from_dict(manifest["instructor"]), net, refiner,
        adapters=adapters,
        extra={"stage": "grpo", "base_checkpoint": os.path.abspath(args.sft_ckpt)})
    _write_manifest(args.out, "grpo", cfg, args.seed,
                    {"sft_ckpt": os.path.abspath(args.sft_ckpt),
                     "data": os.path.abspath(args.data)})
    print(f"adapter checkpoint written to {ckpt_path}")
    return 0


def _sampler_from_args(args, base: flow.SamplerConfig) -> flow.SamplerConfig:
    cfg = flow.SamplerConfig.from_dict(base.to_dict())
    if args.steps is not None:
        cfg.steps = args.steps
    if args.eta is not None:
        cfg.eta = args.eta
    if args.variant is not None:
        cfg.variant = args.variant
    if args.cfg_scale is not None:
        cfg.cfg_scale = args.cfg_scale
    if args.tmin is not None:
        cfg.t_min = args.tmin
    if args.tmax is not None:
        cfg.t_max = args.tmax
    cfg.validate()
    return cfg


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    sampler = _sampler_from_args(args, cfg.eval_sampler)
    report = run_benchmark(args.ckpt, args.bench, sampler, seed=args.seed,
                           weights=cfg.reward)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    report.write_jsonl(os.path.join(out_dir, "report.jsonl"))
    report.write_csv(os.path.join(out_dir, "report.csv"))
    _write_manifest(out_dir, "eval", cfg, args.seed,
                    {"ckpt": os.path.abspath(args.ckpt),
                     "bench": os.path.abspath(args.bench),
                     "sampler": sampler.to_dict()})
    mean_reward = report.aggregates["all/composite_reward"]
    print(f"evaluated {len(report.rows)} tasks; "
          f"mean composite reward {mean_reward:.4f}; report in {out_dir}")
    return 0


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    sampler = _sampler_from_args(args, cfg.eval_sampler)
    if "#" in args.pair:
        data_path, idx_str = args.pair.rsplit("#", 1)
        index = int(idx_str)
    else:
        data_path, index = args.pair, 0
    reader = DatasetReader(data_path)
    if not 0 <= index < len(reader):
        raise CliError(f"pair index {index} out of range (0..{len(reader)-1})")
    pair = reader.load(index)
    _, world, net, refiner, encoder, adapters = load_model_checkpoint(args.ckpt)
    grounded = encoder.ground_pair_frames(
        pair.instruction, pair.source.data,
        pair.reference.data if pair.reference is not None else None)
    cond = refiner.refine(Tensor(grounded.data[None])).detach()
    null_cond = None
    if sampler.cfg_scale != 1.0:
        from .instructor import null_text
        null_cond = refiner.refine(Tensor(null_text(grounded).data[None])).detach()
    policy = grpo_mod.PolicyPair(net=net, adapters=adapters or {})
    stream = Rng(args.seed).stream("sde-noise", index)
    if sampler.variant == "ode":
        video = flow.sample_ode(policy.rollout_view(), cond, pair.source.data,
                                stream, sampler, null_cond=null_cond)
    else:
        video, _ = flow.sample_sde(policy.rollout_view(), cond,
                                   pair.source.data, stream, sampler,
                                   null_cond=null_cond)
    with open(args.out, "wb") as f:
        serialize.write_tensor(f, video.data)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    _write_manifest(out_dir, "sample", cfg, args.seed,
                    {"ckpt": os.path.abspath(args.ckpt), "pair": args.pair,
                     "sampler": sampler.to_dict()})
    print(f"wrote sampled video to {args.out}")
    return 0


def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--variant", choices=flow.VARIANTS, default=None)
    p.add_argument("--cfg-scale", dest="cfg_scale", type=float, default=None)
    p.add_argument("--tmin", type=float, default=None)
    p.add_argument("--tmax", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vivalab",
        description="Instruction-based video editing on a synthetic world: "
                    "paired-data generation, masked-flow fine-tuning, "
                    "reward post-training, and oracle evaluation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a paired-edit dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=None,
                   help="override the configured video pair count")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_datagen)

    p = sub.add_parser("sft", help="supervised fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_sft)

    p = sub.add_parser("grpo", help="group-relative reward post-training")
    p.add_argument("--sft-ckpt", dest="sft_ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_grpo)

    p = sub.add_parser("eval", help="run the oracle benchmark")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bench", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--threads", type=int, default=None)
    _add_sampler_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sample", help="sample one edit from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pair", required=True,
                   help="dataset directory, optionally with #index")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_sampler_flags(p)
    p.set_defaults(fn=cmd_sample)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigFileError, ContractError, NumericsError,
            FileNotFoundError, serialize.FormatError,
            pairs.GenerationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
