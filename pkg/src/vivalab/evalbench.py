"""Oracle evaluation of edited videos against the world's ground truth.

Instruction following is scored by template matching: the edited region is
compared against renders of every grammar-reachable outcome, so the score is
a classification, not a heuristic. Source preservation is pixel PSNR outside
the mask; temporal coherence is adjacent-frame feature cosine.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import flow, rewards
from .grpo import PolicyPair
from .numerics import ContractError, Rng, Tensor
from .rewards import Embedder, RewardWeights
from .synthworld import grammar, scene
from .synthworld.dataset import DatasetReader
from .synthworld.pairs import EditPair, apply_style
from .synthworld.scene import COLORS, PALETTE_NAMES, SHAPES, Entity, SceneSpec

PSNR_CAP = 99.0

# grading for entity outcomes: exact match, one attribute, neither
PARTIAL_CREDIT = {2: 1.0, 1: 0.5, 0: 0.0}


def _render_unchecked(spec: SceneSpec) -> np.ndarray:
    """Candidate renders may push footprints out of frame; skip validation."""
    pal = scene.PALETTES[spec.palette]
    video = np.empty((spec.frames, spec.height, spec.width, 3), dtype=np.float32)
    video[:] = np.asarray(pal["background"], dtype=np.float32)
    for f in range(spec.frames):
        for e in spec.entities:
            m = scene.footprint(e, f, spec.height, spec.width)
            video[f][m] = np.asarray(pal["colors"][e.color], dtype=np.float32)
    return np.clip(video, 0.0, 1.0)


def _region_mse(a: np.ndarray, b: np.ndarray, region: np.ndarray) -> float:
    sel = region[..., 0] > 0.5
    if not sel.any():
        return float(((a - b) ** 2).mean())
    return float(((a[sel] - b[sel]) ** 2).mean())


def _entity_candidates(base: SceneSpec, template_entity: Entity):
    """Every grammar-reachable entity dropped onto the template's path."""
    for color in COLORS:
        for shape in SHAPES:
            ent = Entity(template_entity.uid, shape, color,
                         template_entity.size, template_entity.motion)
            spec = SceneSpec(base.frames, base.height, base.width,
                             base.palette, list(base.entities) + [ent])
            yield (color, shape), _render_unchecked(spec)


def oracle_if_score(v_edit: np.ndarray, pair: EditPair) -> float:
    """Classify what the edit actually did and grade it against the
    instruction: 1 for the instructed outcome, 0.5 for one correct attribute
    on entity edits, 0 otherwise."""
    kind = pair.edit_kind
    region = pair.mask.data
    if kind in ("replace", "add"):
        spec_with = pair.target_spec
        uid = pair.meta["edited_uid"]
        template = next(e for e in spec_with.entities if e.uid == uid)
        base = scene.remove_entity(spec_with, uid)
        want = (pair.meta["new"]["color"], pair.meta["new"]["shape"])
        best, best_mse = None, math.inf
        for key, candidate in _entity_candidates(base, template):
            mse = _region_mse(v_edit, candidate, region)
            if mse < best_mse:
                best, best_mse = key, mse
        none_mse = _region_mse(v_edit, _render_unchecked(base), region)
        if none_mse < best_mse:
            return 0.0
        hits = int(best[0] == want[0]) + int(best[1] == want[1])
        return PARTIAL_CREDIT[hits]
    if kind == "remove":
        spec_without = pair.target_spec
        uid = pair.meta["edited_uid"]
        template = next(e for e in pair.source_spec.entities if e.uid == uid)
        none_mse = _region_mse(v_edit, _render_unchecked(spec_without), region)
        best_mse = min(_region_mse(v_edit, candidate, region)
                       for _, candidate in _entity_candidates(spec_without, template))
        return 1.0 if none_mse <= best_mse else 0.0
    if kind == "global":
        want = pair.meta["palette_edit"]
        geometry = pair.source_spec
        scored = {p: float(((v_edit - _render_unchecked(
            scene.with_palette(geometry, p))) ** 2).mean())
            for p in PALETTE_NAMES}
        return 1.0 if min(scored, key=scored.get) == want else 0.0
    if kind == "stylize":
        style = pair.meta["style"]
        base = pair.source.data
        scored = {s: float(((v_edit - apply_style(base, s)) ** 2).mean())
                  for s in grammar.STYLES}
        scored["unstyled"] = float(((v_edit - base) ** 2).mean())
        return 1.0 if min(scored, key=scored.get) == style else 0.0
    raise ContractError(f"unknown edit kind {kind!r}")


def outside_mask_psnr(v_edit: np.ndarray, pair: EditPair) -> float | None:
    """PSNR against the source restricted to mask-zero pixels; None when the
    mask covers everything (global edits have no preserved region)."""
    m = pair.mask.data
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ContractError("mask must be binary")
    outside = m[..., 0] == 0.0
    if not outside.any():
        return None
    diff = v_edit[outside] - pair.source.data[outside]
    mse = float((diff ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def frame_consistency(v: np.ndarray, embedder: Embedder) -> float:
    """Mean adjacent-frame cosine of frozen frame features, in [-1, 1]."""
    if v.shape[0] < 2:
        raise ContractError("frame consistency needs at least 2 frames")
    feats = embedder.frame_features(v)
    sims = (feats[:-1] * feats[1:]).sum(axis=1)
    return float(sims.mean())


# ---------------------------------------------------------------------------
# Benchmark harness
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    rows: list[dict]
    aggregates: dict
    config_echo: dict = field(default_factory=dict)

    def validate(self) -> None:
        recomputed = aggregate_rows(self.rows)
        for key, val in recomputed.items():
            have = self.aggregates[key]
            if isinstance(val, float) and not (
                    (math.isnan(val) and math.isnan(have)) or val == have):
                raise ContractError(f"aggregate {key} does not recompute")

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for row in self.rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
            f.write(json.dumps({"aggregates": self.aggregates,
                                "config": self.config_echo},
                               sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        if not self.rows:
            return
        keys = list(self.rows[0].keys())
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=keys)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


def _mean(vals) -> float:
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


def aggregate_rows(rows: list[dict]) -> dict:
    out = {}
    kinds = sorted({r["edit_kind"] for r in rows})
    for kind in kinds + ["all"]:
        sel = [r for r in rows if kind == "all" or r["edit_kind"] == kind]
        out[f"{kind}/if_score"] = _mean([r["if_score"] for r in sel])
        out[f"{kind}/outside_psnr"] = _mean([r["outside_psnr"] for r in sel])
        out[f"{kind}/frame_consistency"] = _mean(
            [r["frame_consistency"] for r in sel])
        out[f"{kind}/composite_reward"] = _mean(
            [r["composite_reward"] for r in sel])
        out[f"{kind}/count"] = len(sel)
    return out


def evaluate_pairs(net, refiner, encoder, pair_list: list[EditPair],
                   sampler_cfg: flow.SamplerConfig, rng: Rng,
                   embedder: Embedder | None = None,
                   weights: RewardWeights | None = None,
                   adapters=None) -> list[dict]:
    """Sample one edit per pair and score it with every oracle.

    Tasks with compatible shapes are integrated as one batch; each task keeps
    its own noise stream, so the grouping never changes the draws.
    """
    from .instructor import null_text
    embedder = embedder or Embedder()
    weights = weights or RewardWeights()
    policy = PolicyPair(net=net, adapters=adapters or {})
    groups: dict[tuple, list[int]] = {}
    for i, pair in enumerate(pair_list):
        key = (pair.frames, pair.reference is not None)
        groups.setdefault(key, []).append(i)
    rows: list[dict | None] = [None] * len(pair_list)
    for members in groups.values():
        conds, nulls, srcs, streams = [], [], [], []
        for i in members:
            pair = pair_list[i]
            grounded = encoder.ground_pair_frames(
                pair.instruction, pair.source.data,
                pair.reference.data if pair.reference is not None else None)
            conds.append(grounded.data)
            if sampler_cfg.cfg_scale != 1.0:
                nulls.append(null_text(grounded).data)
            srcs.append(pair.source.data)
            streams.append(rng.stream("sde-noise", i))
        cond = refiner.refine(Tensor(np.stack(conds))).detach()
        null_cond = None
        if nulls:
            null_cond = refiner.refine(Tensor(np.stack(nulls))).detach()
        terminal, _ = flow.sample_group(policy.rollout_view(), cond,
                                        np.stack(srcs), streams, sampler_cfg,
                                        null_cond=null_cond, want_traj=False)
        for j, i in enumerate(members):
            video = flow.decode_video(terminal[j])
            rows[i] = score_video_row(i, video.data, pair_list[i], embedder,
                                      weights)
    return rows


def score_video_row(index: int, video: np.ndarray, pair: EditPair,
                    embedder: Embedder, weights: RewardWeights) -> dict:
    bundle = rewards.score_edit(embedder, video, pair.source.data,
                                pair.caption_edit, pair.caption_src, weights)
    return {
        "task": index,
        "edit_kind": pair.edit_kind,
        "direction": pair.direction,
        "instruction": grammar.render_text(pair.instruction),
        "if_score": oracle_if_score(video, pair),
        "outside_psnr": outside_mask_psnr(video, pair),
        "frame_consistency": (frame_consistency(video, embedder)
                              if video.shape[0] >= 2 else None),
        "r_if": bundle.r_if, "r_sp": bundle.r_sp, "r_ps": bundle.r_ps,
        "composite_reward": bundle.composite,
    }


def run_benchmark(ckpt_path, bench_dir, sampler_cfg: flow.SamplerConfig,
                  seed: int = 1234, dtype=np.float32,
                  weights: RewardWeights | None = None) -> EvalReport:
    """Score a checkpoint on a frozen benchmark directory."""
    from .checkpoint import load_model_checkpoint
    manifest, world, net, refiner, encoder, adapters = load_model_checkpoint(
        ckpt_path, dtype=dtype)
    reader = DatasetReader(bench_dir)
    bench_hash = reader.manifest.get("world_hash")
    if bench_hash is not None and manifest.get("world_hash") != bench_hash:
        raise ContractError(
            "checkpoint world config does not match the benchmark's")
    pair_list = reader.load_all()
    rows = evaluate_pairs(net, refiner, encoder, pair_list, sampler_cfg,
                          Rng(seed), weights=weights, adapters=adapters)
    report = EvalReport(rows=rows, aggregates=aggregate_rows(rows),
                        config_echo={"sampler": sampler_cfg.to_dict(),
                                     "seed": seed,
                                     "checkpoint": str(ckpt_path),
                                     "benchmark": str(bench_dir)})
    report.validate()
    return report
