"""Group-relative reward post-training over stochastic edit rollouts.

Each iteration: sample a batch of edit conditions, roll out G stochastic
edits per condition under the current policy, score them with the reward
oracles, normalize within the group, then take clipped-surrogate steps on
the low-rank adapters only. The base network stays frozen and doubles as the
reference policy for the KL term (the adapters start at exactly zero delta).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import flow, rewards
from .model import LoRAAdapter, VelocityNet, adapter_params
from .numerics import (Adam, ContractError, GradTape, Rng, Tensor, add, clip_const,
                       div, exp, minimum, mul, neg, reshape, sub, tmean, tsum)
from .numerics.rng import Stream
from .rewards import Embedder, GroupAdvantages, RewardBundle, RewardWeights


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    lr: float = 1e-4
    iterations: int = 30
    groups_per_batch: int = 2
    epochs_per_batch: int = 1
    lora_rank: int = 8
    lora_alpha: float = 16.0
    sampler: flow.SamplerConfig = field(default_factory=lambda: flow.SamplerConfig(
        steps=10, variant="flow-sde", eta=0.7))

    def validate(self) -> None:
        if self.group_size < 2:
            raise ContractError("group size must be >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ContractError("clip epsilon must lie in (0, 1)")
        if self.kl_beta < 0:
            raise ContractError("KL coefficient must be >= 0")
        self.sampler.validate()
        if self.sampler.variant == "ode":
            raise ContractError("rollouts need a stochastic sampler variant")

    def to_dict(self) -> dict:
        return {"group_size": self.group_size, "clip_eps": self.clip_eps,
                "kl_beta": self.kl_beta, "lr": self.lr,
                "iterations": self.iterations,
                "groups_per_batch": self.groups_per_batch,
                "epochs_per_batch": self.epochs_per_batch,
                "lora_rank": self.lora_rank, "lora_alpha": self.lora_alpha,
                "sampler": self.sampler.to_dict()}

    @staticmethod
    def from_dict(d: dict) -> "GrpoConfig":
        cfg = GrpoConfig()
        for k, v in d.items():
            if k == "sampler":
                cfg.sampler = flow.SamplerConfig.from_dict(v)
            else:
                setattr(cfg, k, v)
        return cfg


@dataclass
class PolicyPair:
    """Current policy (frozen base + trainable adapters) and its frozen
    roles: the reference policy is the adapter-free base, and the old policy
    is implicit in the rollout-time transition records."""

    net: VelocityNet
    adapters: dict[str, LoRAAdapter]

    def forward_current(self, x, t, src, cond) -> Tensor:
        return self.net.forward(x, t, src, cond, adapters=self.adapters)

    def forward_reference(self, x, t, src, cond) -> Tensor:
        return self.net.forward(x, t, src, cond, adapters=None)

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.net.params):
            h.update(name.encode())
            h.update(self.net.params[name].data.tobytes())
        return h.hexdigest()

    class _RolloutView:
        def __init__(self, pair: "PolicyPair"):
            self._pair = pair

        def forward(self, x, t, src, cond, adapters=None):
            return self._pair.forward_current(x, t, src, cond)

    def rollout_view(self):
        return PolicyPair._RolloutView(self)


@dataclass
class EditCondition:
    """One Edit-GRPO data triplet plus the conditioning tokens it grounds to."""

    uid: int
    src: np.ndarray                  # (F, H, W, C)
    instruction: list[int]
    caption_src: list[int]
    caption_edit: list[int]
    cond_tokens: np.ndarray          # (L_vlm, d_model), frozen during this stage


@dataclass
class GroupBatch:
    condition: EditCondition
    trajectories: list[flow.Trajectory]
    reward_bundles: list[RewardBundle]
    advantages: GroupAdvantages

    @property
    def group_size(self) -> int:
        return len(self.trajectories)


def collect_group(condition: EditCondition, policy: PolicyPair, rng: Rng,
                  cfg: GrpoConfig, embedder: Embedder,
                  weights: RewardWeights, iteration: int = 0) -> GroupBatch:
    """G independent stochastic rollouts on disjoint streams, each scored."""
    cfg.validate()
    g = cfg.group_size
    src_batch = np.repeat(condition.src[None], g, axis=0)
    cond_batch = Tensor(np.repeat(condition.cond_tokens[None], g, axis=0))
    streams = [rng.stream("sde-noise", condition.uid, iteration, member)
               for member in range(g)]
    _, trajs = flow.sample_group(policy.rollout_view(), cond_batch, src_batch,
                                 streams, cfg.sampler, want_traj=True)
    bundles = []
    for i, traj in enumerate(trajs):
        video = flow.decode_video(traj.terminal)
        bundle = rewards.score_edit(embedder, video.data, condition.src,
                                    condition.caption_edit,
                                    condition.caption_src, weights)
        if not np.isfinite(bundle.composite):
            raise ContractError(
                f"non-finite reward for condition {condition.uid}")
        bundles.append(bundle)
        traj.cond_id = str(condition.uid)
    adv = rewards.advantages([b.composite for b in bundles], weights.delta)
    return GroupBatch(condition=condition, trajectories=trajs,
                      reward_bundles=bundles, advantages=adv)


# ---------------------------------------------------------------------------
# Transition log-densities and the clipped surrogate
# ---------------------------------------------------------------------------


def _transition_logp(x_next: np.ndarray, mu: Tensor, std: float) -> Tensor:
    """Differentiable diagonal-Gaussian log density per group member,
    mirroring `flow.gaussian_logp` operation for operation so the two agree
    bitwise at identical means. `x_next` is (G, *dims)."""
    d = int(np.prod(x_next.shape[1:]))
    denom, cterm = flow.logp_constants(std, d, mu.dtype)
    diff = sub(Tensor(x_next), mu)
    ss = tsum(reshape(mul(diff, diff), (x_next.shape[0], -1)), axis=1)
    return sub(neg(div(ss, Tensor(denom))), Tensor(cterm))


def step_logprob(traj: flow.Trajectory, k: int, policy: PolicyPair,
                 condition: EditCondition) -> Tensor:
    """Log transition density of step k under the queried parameters and the
    stored per-step std; differentiable w.r.t. adapter parameters."""
    std = float(traj.stds[k])
    if std <= 0:
        raise ContractError(f"step {k} has non-positive std")
    x_k = traj.states[k][None]
    t_k = np.array([traj.ts[k]])
    v = policy.forward_current(Tensor(x_k), t_k, Tensor(condition.src[None]),
                               Tensor(condition.cond_tokens[None]))
    mu = _step_mean(Tensor(x_k), v, float(traj.ts[k]), traj)
    logp = _transition_logp(traj.states[k + 1][None], mu, std)
    return reshape(logp, ())


def _step_mean(x: Tensor, v: Tensor, t_k: float, traj: flow.Trajectory) -> Tensor:
    """mu = x + drift * dt with the same correction arithmetic the sampler
    used, expressed in tensor ops."""
    dtype = v.dtype
    sigma = flow.sigma_schedule(traj.variant, traj.eta, t_k, traj.dt)
    dt_c = Tensor(np.asarray(traj.dt, dtype=dtype))
    if sigma == 0.0:
        return add(x, mul(v, dt_c))
    c = Tensor(np.asarray((sigma * sigma) / (2.0 * (1.0 - t_k)), dtype=dtype))
    tk_c = Tensor(np.asarray(t_k, dtype=dtype))
    drift = sub(v, mul(c, sub(x, mul(tk_c, v))))
    return add(x, mul(drift, dt_c))


def surrogate_loss(batch: GroupBatch, policy: PolicyPair,
                   cfg: GrpoConfig) -> tuple[Tensor, dict]:
    """Negated clipped-ratio objective with a closed-form Gaussian KL to the
    reference policy, averaged over group members and steps."""
    g = batch.group_size
    steps = batch.trajectories[0].steps
    adv = Tensor(batch.advantages.advantages.astype(np.float64)
                 .astype(policy.net.dtype))
    src_batch = Tensor(np.repeat(batch.condition.src[None], g, axis=0))
    cond_batch = Tensor(np.repeat(batch.condition.cond_tokens[None], g, axis=0))
    total = None
    clipped_steps = 0
    kl_sum = 0.0
    for k in range(steps):
        std = float(batch.trajectories[0].stds[k])
        if std <= 0:
            raise ContractError(f"step {k} has non-positive std")
        t_k = float(batch.trajectories[0].ts[k])
        x_k = np.stack([tr.states[k] for tr in batch.trajectories])
        x_next = np.stack([tr.states[k + 1] for tr in batch.trajectories])
        logp_old = np.stack([tr.logps[k] for tr in batch.trajectories])
        t_vec = np.full(g, t_k)

        v_cur = policy.forward_current(Tensor(x_k), t_vec, src_batch, cond_batch)
        mu_cur = _step_mean(Tensor(x_k), v_cur, t_k, batch.trajectories[0])
        logp = _transition_logp(x_next, mu_cur, std)
        ratio = exp(sub(logp, Tensor(logp_old.astype(mu_cur.dtype))))
        clipped = clip_const(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
        policy_term = minimum(mul(ratio, adv), mul(clipped, adv))

        v_ref = policy.forward_reference(Tensor(x_k), t_vec, src_batch, cond_batch)
        mu_ref = _step_mean(Tensor(x_k), v_ref, t_k, batch.trajectories[0]).data
        diff = sub(mu_cur, Tensor(mu_ref))
        ss = tsum(reshape(mul(diff, diff), (g, -1)), axis=1)
        denom, _ = flow.logp_constants(std, 1, mu_cur.dtype)
        kl = div(ss, Tensor(denom))

        step_obj = sub(policy_term, mul(Tensor(np.asarray(cfg.kl_beta,
                                                          dtype=mu_cur.dtype)), kl))
        total = step_obj if total is None else add(total, step_obj)
        clipped_steps += int(np.sum(np.abs(ratio.data - 1.0) > cfg.clip_eps))
        kl_sum += float(kl.data.sum())

    per_member = div(total, Tensor(np.asarray(float(steps),
                                              dtype=total.dtype)))
    loss = neg(tmean(per_member))
    stats = {
        "kl": kl_sum / (g * steps),
        "clip_fraction": clipped_steps / (g * steps),
        "advantage_std": float(np.std(batch.advantages.advantages)),
        "mean_reward": float(np.mean([b.composite for b in batch.reward_bundles])),
        "mean_r_if": float(np.mean([b.r_if for b in batch.reward_bundles])),
        "mean_r_sp": float(np.mean([b.r_sp for b in batch.reward_bundles])),
        "mean_r_ps": float(np.mean([b.r_ps for b in batch.reward_bundles])),
    }
    return loss, stats


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train_grpo(conditions: list[EditCondition], policy: PolicyPair,
               cfg: GrpoConfig, seed: int, out_dir: str | None = None,
               embedder: Embedder | None = None,
               weights: RewardWeights | None = None,
               log_rows: list | None = None) -> dict[str, np.ndarray]:
    """Optimize the adapters in place; returns their final tensors.

    Deterministic given (conditions, checkpoint, cfg, seed). Appends one
    metrics row per iteration to `log_rows` when given and writes
    `metrics.jsonl` under `out_dir`.
    """
    cfg.validate()
    if not conditions:
        raise ContractError("no edit conditions to train on")
    embedder = embedder or Embedder()
    weights = weights or RewardWeights()
    rng = Rng(seed)
    params = adapter_params(policy.adapters)
    for p in params.values():
        p.requires_grad = True
    policy.net.set_trainable(False)
    opt = Adam(params, lr=cfg.lr)
    rows = log_rows if log_rows is not None else []
    pick = rng.stream("data")
    for it in range(cfg.iterations):
        batch_conditions = [conditions[pick.choice_index(len(conditions))]
                            for _ in range(cfg.groups_per_batch)]
        groups = [collect_group(c, policy, rng, cfg, embedder, weights,
                                iteration=it) for c in batch_conditions]
        agg_stats: dict[str, float] = {}
        for _ in range(cfg.epochs_per_batch):
            with GradTape() as tape:
                losses = []
                stats_list = []
                for group in groups:
                    loss_g, stats_g = surrogate_loss(group, policy, cfg)
                    losses.append(loss_g)
                    stats_list.append(stats_g)
                loss = losses[0]
                for extra in losses[1:]:
                    loss = add(loss, extra)
                loss = div(loss, Tensor(np.asarray(float(len(losses)),
                                                   dtype=loss.dtype)))
            grads = tape.backward(loss)
            opt.step(grads)
            agg_stats = {k: float(np.mean([s[k] for s in stats_list]))
                         for k in stats_list[0]}
            agg_stats["loss"] = float(loss.data)
        row = {"iteration": it, **agg_stats}
        rows.append(row)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.jsonl"), "w") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
    return {name: p.data.copy() for name, p in params.items()}
