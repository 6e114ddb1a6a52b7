"""Acceptance criteria, one test per criterion, each printing a verdict line.

The heavyweight training criteria (6 and 7) share one session-scoped run:
criterion 6 trains the model and criterion 7 post-trains it per seed. The
rest are property checks that run in seconds to minutes.
"""

import json
import math

import numpy as np
import pytest

from vivalab import evalbench, flow, grpo, rewards
from vivalab.instructor import GroundingEncoder, InstructorConfig, TokenRefiner
from vivalab.model import ModelConfig, VelocityNet, attach_lora
from vivalab.numerics import GradTape, Rng, Tensor, mul, tmean
from vivalab.numerics.gradcheck import (central_difference, random_indices,
                                        relative_error)
from vivalab.rewards import Embedder, RewardWeights
from vivalab.sft import SftConfig, train_sft, evaluate_sft
from vivalab.synthworld import dataset, grammar, pairs

# -- tuned budgets for the training criteria (6 and 7) ------------------------
SFT_STEPS = 2500          # <= 5000 per the criterion
SFT_LR = 1e-3
GRPO_SEEDS = (101, 202, 303)
GRPO_ITERATIONS = 12
HELDOUT_TASKS = 64        # 16 per edit kind

KINDS = ("replace", "add", "remove", "global")


def verdict(num: int, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} - {detail}")


# ---------------------------------------------------------------------------
# shared small-scale doubles for the property criteria
# ---------------------------------------------------------------------------

MINI_WORLD = pairs.WorldConfig(frames=2, height=8, width=8, min_size=3,
                               max_size=4, max_entities=1, min_entities=1,
                               max_speed=0.5)
MINI_MODEL = ModelConfig(patch=(1, 4, 4), d_model=24, n_layers=2, n_heads=4,
                         d_ff=32, d_time=16, d_patch=16)
MINI_INSTRUCTOR = InstructorConfig(d_enc=16, d_model=24, image_patch=8)


def mini_net(seed=5, dtype=np.float64):
    return VelocityNet(MINI_MODEL, (2, 8, 8, 3), Rng(seed), dtype=dtype,
                       zero_init_head=False, zero_init_mod=False)


def mini_condition(seed=3, uid=0, dtype=np.float64):
    pair = pairs.make_replacement_pair(Rng(seed).stream("data", uid),
                                       MINI_WORLD)
    encoder = GroundingEncoder(MINI_INSTRUCTOR, 8, 8)
    refiner = TokenRefiner(MINI_INSTRUCTOR, Rng(seed), dtype=dtype)
    grounded = encoder.ground_pair_frames(pair.instruction, pair.source.data)
    tokens = refiner.refine(Tensor(grounded.data[None].astype(dtype))).data[0]
    cond = grpo.EditCondition(
        uid=uid, src=pair.source.data.astype(dtype),
        instruction=pair.instruction, caption_src=pair.caption_src,
        caption_edit=pair.caption_edit, cond_tokens=tokens)
    return pair, encoder, refiner, cond


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    gen = np.random.default_rng(0)
    worst = {"velocity_net": 0.0, "token_refiner": 0.0, "projector": 0.0,
             "step_logprob": 0.0}
    counts = dict.fromkeys(worst, 0)

    # velocity net and projector: 50 input configurations x 2 coordinates
    net = mini_net(seed=6)
    dims = (2, 8, 8, 3)
    for case in range(50):
        x = Tensor(gen.normal(size=(1,) + dims))
        src = Tensor(gen.normal(size=(1,) + dims))
        cond = Tensor(gen.normal(size=(1, 4, MINI_MODEL.d_model)))
        t = gen.uniform(0.1, 0.9, 1)

        def forward():
            with GradTape():
                return float((net.forward(x, t, src, cond).data ** 2).mean())

        body = [n for n in net.params if not n.startswith("proj.")]
        for target, pool in (("velocity_net", body),
                             ("projector", ["proj.w", "proj.b"])):
            name = pool[int(gen.integers(0, len(pool)))]
            p = net.params[name]
            with GradTape() as tape:
                out = net.forward(x, t, src, cond)
                loss = tmean(mul(out, out))
            g = tape.backward(loss).of(p)
            for idx in random_indices(p.shape, 2, gen):
                fd = central_difference(forward, p.data, idx)
                worst[target] = max(worst[target],
                                    relative_error(float(g[idx]), fd))
                counts[target] += 1

    # token refiner
    refiner = TokenRefiner(MINI_INSTRUCTOR, Rng(8), dtype=np.float64)
    for case in range(25):
        x = Tensor(gen.normal(size=(1, 5, MINI_INSTRUCTOR.d_enc)))

        def forward_r():
            with GradTape():
                return float((refiner.refine(Tensor(x.data)).data ** 2).sum())

        names = list(refiner.params)
        name = names[int(gen.integers(0, len(names)))]
        p = refiner.params[name]
        with GradTape() as tape:
            out = refiner.refine(x)
            loss = tmean(mul(out, out)) * Tensor(np.float64(out.size))
        g = tape.backward(loss).of(p)
        for idx in random_indices(p.shape, 4, gen):
            fd = central_difference(forward_r, p.data, idx)
            worst["token_refiner"] = max(worst["token_refiner"],
                                         relative_error(float(g[idx]), fd))
            counts["token_refiner"] += 1

    # step_logprob through the adapters; the log-density carries an O(500)
    # theta-independent offset, so the central-difference oracle at step 1e-5
    # can only resolve gradients down to |logp| * eps / (2 h): differences
    # below that floor are oracle noise, not autodiff error
    policy_net = mini_net(seed=9)
    policy_net.set_trainable(False)
    adapters = attach_lora(policy_net, rank=3, alpha=6.0, rng=Rng(10),
                           dtype=np.float64)
    for ad in adapters.values():
        ad.b.data[:] = gen.normal(size=ad.b.shape) * 0.03
    policy = grpo.PolicyPair(net=policy_net, adapters=adapters)
    _, _, _, cond = mini_condition(seed=11)
    cfg = grpo.GrpoConfig(group_size=2, sampler=flow.SamplerConfig(
        steps=3, variant="flow-sde", eta=0.7))
    batch = grpo.collect_group(cond, policy, Rng(12), cfg, Embedder(),
                               RewardWeights())
    traj = batch.trajectories[0]
    adapter_names = list(adapters)
    fd_step = 1e-5
    for case in range(25):
        k = int(gen.integers(0, traj.steps))
        name = adapter_names[int(gen.integers(0, len(adapter_names)))]
        ad = adapters[name]
        base = float(traj.logps[k])
        noise_floor = 4.0 * abs(base) * np.finfo(np.float64).eps / (2 * fd_step)

        def forward_lp():
            with GradTape():
                return float(grpo.step_logprob(traj, k, policy,
                                               cond).data) - base

        with GradTape() as tape:
            lp = grpo.step_logprob(traj, k, policy, cond)
        grads = tape.backward(lp)
        for tensor in (ad.a, ad.b):
            g = grads.of(tensor)
            for idx in random_indices(tensor.shape, 2, gen):
                fd = central_difference(forward_lp, tensor.data, idx,
                                        step=fd_step)
                err = relative_error(float(g[idx]), fd,
                                     floor=noise_floor / 1e-6)
                worst["step_logprob"] = max(worst["step_logprob"], err)
                counts["step_logprob"] += 1

    ok = all(v <= 1e-6 for v in worst.values()) and \
        all(c >= 100 for c in counts.values())
    verdict(1, ok, "max relative error vs central differences: "
            + ", ".join(f"{k}={v:.2e} ({counts[k]} cases)"
                        for k, v in worst.items()))
    assert ok


# ---------------------------------------------------------------------------
# 2. loss identities
# ---------------------------------------------------------------------------


def test_criterion_2_loss_identities():
    pair, encoder, refiner, _ = mini_condition(seed=21)
    net = mini_net(seed=22)
    grounded = encoder.ground_pair_frames(pair.instruction, pair.source.data)
    cond = refiner.refine(Tensor(grounded.data[None].astype(np.float64)))
    noise = Rng(23).stream("sde-noise").normal(
        (1,) + pair.source.data.shape, dtype=np.float64)
    t = np.array([0.37])

    def build(mask, w_m):
        return flow.make_flow_batch(
            pair.target.data[None].astype(np.float64),
            pair.source.data[None].astype(np.float64),
            mask, t, noise, w_m)

    mask = pair.mask.data[None].astype(np.float64)
    zero_w = float(flow.masked_loss(build(mask, 0.0), net, cond).data)
    plain = float(flow.fm_loss(build(mask, 0.0), net, cond).data)
    bit_exact = zero_w == plain

    ones = np.ones_like(mask)
    doubled = float(flow.masked_loss(build(ones, 1.0), net, cond).data)
    rel = abs(doubled - 2.0 * plain) / abs(2.0 * plain)
    ok = bit_exact and rel <= 1e-12
    verdict(2, ok, f"w_m=0 bit-exact: {bit_exact}; "
                   f"full-mask doubling relative error {rel:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 3. sampler degeneracy
# ---------------------------------------------------------------------------


def test_criterion_3_sampler_degeneracy():
    pair, encoder, refiner, cond = mini_condition(seed=31)
    net = mini_net(seed=32, dtype=np.float32)
    tokens = Tensor(cond.cond_tokens[None].astype(np.float32))
    src = pair.source.data[None]
    exact = True
    for variant in ("flow-sde", "coeff-preserving"):
        cfg_sde = flow.SamplerConfig(steps=10, variant=variant, eta=0.0)
        cfg_ode = flow.SamplerConfig(steps=10, variant="ode")
        x_sde, trajs = flow.sample_group(net, tokens, src,
                                         Rng(33).stream("sde-noise"), cfg_sde,
                                         want_traj=True)
        x_ode, _ = flow.sample_group(net, tokens, src,
                                     Rng(33).stream("sde-noise"), cfg_ode,
                                     want_traj=False)
        exact &= np.array_equal(x_sde, x_ode)
        # full trajectory against an independent Euler reimplementation
        x = Rng(33).stream("sde-noise").normal((1,) + src.shape[1:])
        dt = (cfg_ode.t_max - cfg_ode.t_min) / cfg_ode.steps
        for k in range(cfg_ode.steps):
            t_k = cfg_ode.t_min + k * dt
            v = net.forward(Tensor(x), np.full(1, t_k), Tensor(src),
                            tokens).data
            x = x + v * np.asarray(dt, dtype=x.dtype)
            exact &= np.array_equal(trajs[0].states[k + 1], x[0])
    verdict(3, exact, "eta=0 stochastic sampler replays the deterministic "
                      "trajectory bit-exactly for both variants")
    assert exact


# ---------------------------------------------------------------------------
# 4. marginal preservation
# ---------------------------------------------------------------------------


class AnalyticGaussianFlow:
    """Closed-form marginal velocity for N(0,1) -> N(m, s^2)."""

    def __init__(self, m=1.2, s=0.6):
        self.m, self.s = m, s

    def forward(self, x, t, src, cond, adapters=None):
        td = np.asarray(t).reshape((-1,) + (1,) * (x.ndim - 1))
        sig2 = (1 - td) ** 2 + td ** 2 * self.s ** 2
        a = (td * self.s ** 2 - (1 - td)) / sig2
        return Tensor(a * x.data + (self.m - a * td * self.m))


def test_criterion_4_marginal_preservation():
    net = AnalyticGaussianFlow()
    n = 10_000
    src = np.zeros((n, 1, 1, 1, 1), dtype=np.float64)
    cfg_ode = flow.SamplerConfig(steps=50, variant="ode")
    x_ode, _ = flow.sample_group(net, None, src,
                                 Rng(40).stream("sde-noise", 0), cfg_ode,
                                 want_traj=False)
    details = []
    ok = True
    for variant in ("flow-sde", "coeff-preserving"):
        cfg = flow.SamplerConfig(steps=50, variant=variant, eta=0.7)
        x_sde, _ = flow.sample_group(net, None, src,
                                     Rng(40).stream("sde-noise", 1), cfg,
                                     want_traj=False)
        dm = abs(float(x_sde.mean() - x_ode.mean()))
        dv = abs(float(x_sde.var() - x_ode.var()))
        se_mean = math.sqrt(x_sde.var() / n + x_ode.var() / n)
        se_var = math.sqrt(2.0 / (n - 1)) * (x_sde.var() + x_ode.var())
        ok &= dm < 4 * se_mean and dv < 4 * se_var
        details.append(f"{variant}: |dmean|={dm:.4f} (4se={4*se_mean:.4f}), "
                       f"|dvar|={dv:.4f} (4se={4*se_var:.4f})")
    verdict(4, ok, "; ".join(details))
    assert ok


# ---------------------------------------------------------------------------
# 5. GRPO algebra
# ---------------------------------------------------------------------------


def test_criterion_5_grpo_algebra(monkeypatch):
    policy_net = mini_net(seed=51, dtype=np.float32)
    policy_net.set_trainable(False)
    adapters = attach_lora(policy_net, rank=3, alpha=6.0, rng=Rng(52),
                           dtype=np.float32)
    policy = grpo.PolicyPair(net=policy_net, adapters=adapters)
    _, _, _, cond = mini_condition(seed=53, dtype=np.float32)
    cfg = grpo.GrpoConfig(group_size=4, sampler=flow.SamplerConfig(
        steps=4, variant="flow-sde", eta=0.7))
    batch = grpo.collect_group(cond, policy, Rng(54), cfg, Embedder(),
                               RewardWeights())

    # (a) before any update every ratio is exactly one and the loss is ~0
    ratios_one = True
    for k in range(batch.trajectories[0].steps):
        x_k = np.stack([tr.states[k] for tr in batch.trajectories])
        x_next = np.stack([tr.states[k + 1] for tr in batch.trajectories])
        t_vec = np.full(cfg.group_size, batch.trajectories[0].ts[k])
        src_b = Tensor(np.repeat(cond.src[None], cfg.group_size, axis=0))
        cond_b = Tensor(np.repeat(cond.cond_tokens[None], cfg.group_size,
                                  axis=0))
        v = policy.forward_current(Tensor(x_k), t_vec, src_b, cond_b)
        mu = grpo._step_mean(Tensor(x_k), v, float(batch.trajectories[0].ts[k]),
                             batch.trajectories[0])
        logp = grpo._transition_logp(x_next, mu,
                                     float(batch.trajectories[0].stds[k]))
        logp_old = np.stack([tr.logps[k] for tr in batch.trajectories])
        ratio = np.exp(logp.data - logp_old)
        ratios_one &= bool(np.all(ratio == 1.0))
    with GradTape():
        loss, stats = grpo.surrogate_loss(batch, policy, cfg)
    part_a = ratios_one and abs(float(loss.data)) <= 1e-6 and stats["kl"] == 0.0

    # (b) group-constant reward shifts change neither advantages nor gradients
    base = np.array([0.0, 1.0, 2.0, 3.0])
    adv_a = rewards.advantages(base).advantages
    adv_b = rewards.advantages(base + 32.0).advantages
    shift_exact = np.array_equal(adv_a, adv_b)
    grads = []
    for shift in (0.0, 32.0):
        batch.advantages = rewards.advantages(base + shift)
        with GradTape() as tape:
            loss_s, _ = grpo.surrogate_loss(batch, policy, cfg)
        grads.append(tape.backward(loss_s))
    grad_exact = all(
        np.array_equal(grads[0].of(ad.a), grads[1].of(ad.a))
        and np.array_equal(grads[0].of(ad.b), grads[1].of(ad.b))
        for ad in adapters.values())
    part_b = shift_exact and grad_exact

    # (c) all-equal rewards move nothing over 10 iterations
    monkeypatch.setattr(rewards, "score_edit",
                        lambda *a, **k: rewards.composite(
                            0.25, 0.25, 0.25, RewardWeights()))
    policy_net2 = mini_net(seed=55, dtype=np.float32)
    policy_net2.set_trainable(False)
    adapters2 = attach_lora(policy_net2, rank=3, alpha=6.0, rng=Rng(56),
                            dtype=np.float32)
    policy2 = grpo.PolicyPair(net=policy_net2, adapters=adapters2)
    before = {n: (ad.a.data.copy(), ad.b.data.copy())
              for n, ad in adapters2.items()}
    cfg10 = grpo.GrpoConfig(group_size=3, iterations=10, groups_per_batch=1,
                            sampler=flow.SamplerConfig(steps=2,
                                                       variant="flow-sde",
                                                       eta=0.7))
    grpo.train_grpo([cond], policy2, cfg10, seed=57, embedder=Embedder(),
                    weights=RewardWeights())
    part_c = all(np.array_equal(ad.a.data, before[n][0])
                 and np.array_equal(ad.b.data, before[n][1])
                 for n, ad in adapters2.items())

    ok = part_a and part_b and part_c
    verdict(5, ok, f"(a) unit ratios and zero loss: {part_a}; "
                   f"(b) shift-invariant advantages and gradients: {part_b}; "
                   f"(c) equal rewards freeze adapters: {part_c}")
    assert ok


# ---------------------------------------------------------------------------
# 6 and 7: the training criteria (shared artifacts)
# ---------------------------------------------------------------------------


def gen_kind(stream, kind, world):
    if kind == "replace":
        return pairs.make_replacement_pair(stream, world)
    if kind == "global":
        return pairs.make_global_pair(stream, world)
    return pairs.make_add_remove_pair(stream, world, kind=kind)


@pytest.fixture(scope="session")
def trained_stack(tmp_path_factory):
    """512-pair dataset, one SFT run, and the frozen 64-task benchmark."""
    root = tmp_path_factory.mktemp("acceptance")
    world = pairs.WorldConfig()
    rng = Rng(2024)
    train_pairs = []
    for i in range(512):
        p = gen_kind(rng.stream("data", i), KINDS[i % 4], world)
        ok, reason = pairs.quality_filter(p)
        assert ok, reason
        train_pairs.append(pairs.maybe_flip(p, rng.stream("data", i, 1),
                                            world.flip_prob))
    data_dir = root / "data"
    dataset.write_dataset(str(data_dir), train_pairs, {"seed": 2024})
    heldout = [gen_kind(rng.stream("data", 10_000 + i), KINDS[i % 4], world)
               for i in range(HELDOUT_TASKS)]

    reader = dataset.DatasetReader(str(data_dir))
    model_cfg = ModelConfig()
    instructor_cfg = InstructorConfig()
    sft_cfg = SftConfig(steps=SFT_STEPS, batch=32, lr=SFT_LR, log_every=250)
    rows: list[dict] = []
    net, refiner, encoder = train_sft(reader, world, model_cfg,
                                      instructor_cfg, sft_cfg, seed=31,
                                      log_rows=rows)
    return {
        "world": world, "net": net, "refiner": refiner, "encoder": encoder,
        "heldout": heldout, "reader": reader, "loss_rows": rows,
        "embedder": Embedder(), "weights": RewardWeights(),
    }


def _mean_if(rows):
    return float(np.mean([r["if_score"] for r in rows]))


def test_criterion_6_sft_efficacy(trained_stack):
    stack = trained_stack
    ev_cfg = flow.SamplerConfig(steps=50, variant="ode")
    rows = evaluate_sft(stack["net"], stack["refiner"], stack["encoder"],
                        stack["heldout"], ev_cfg, seed=7,
                        embedder=stack["embedder"], weights=stack["weights"])
    trained_if = _mean_if(rows)
    local_psnrs = [r["outside_psnr"] for r in rows
                   if r["edit_kind"] in ("replace", "add", "remove")
                   and r["outside_psnr"] is not None]
    mean_psnr = float(np.mean(local_psnrs))

    copy_rows = [evalbench.score_video_row(i, p.source.data, p,
                                           stack["embedder"], stack["weights"])
                 for i, p in enumerate(stack["heldout"])]
    copy_if = _mean_if(copy_rows)

    rand_net = VelocityNet(ModelConfig(), (8, 32, 32, 3), Rng(909))
    rand_refiner = TokenRefiner(InstructorConfig(), Rng(909))
    rand_rows = evaluate_sft(rand_net, rand_refiner, stack["encoder"],
                             stack["heldout"], ev_cfg, seed=7,
                             embedder=stack["embedder"],
                             weights=stack["weights"])
    rand_if = _mean_if(rand_rows)

    ok = (trained_if - copy_if >= 0.3 and trained_if - rand_if >= 0.3
          and mean_psnr >= 25.0)
    verdict(6, ok, f"held-out IF {trained_if:.3f} vs copy {copy_if:.3f} and "
                   f"random-init {rand_if:.3f} (need +0.3); outside-mask "
                   f"PSNR {mean_psnr:.1f} dB (need >= 25)")
    assert ok


def test_criterion_7_grpo_improvement(trained_stack):
    stack = trained_stack
    ev_cfg = flow.SamplerConfig(steps=50, variant="ode")
    # rollout conditions come from the training set (triplets); the frozen
    # benchmark stays held out
    conditions = []
    reader = stack["reader"]
    for i in reader.video_indices[:64]:
        pair = reader.load(i)
        grounded = stack["encoder"].ground_pair_frames(
            pair.instruction, pair.source.data,
            pair.reference.data if pair.reference is not None else None)
        tokens = stack["refiner"].refine(
            Tensor(grounded.data[None])).data[0]
        conditions.append(grpo.EditCondition(
            uid=i, src=pair.source.data, instruction=pair.instruction,
            caption_src=pair.caption_src, caption_edit=pair.caption_edit,
            cond_tokens=tokens))

    sft_scores, grpo_scores = [], []
    for seed in GRPO_SEEDS:
        base_rows = evaluate_sft(stack["net"], stack["refiner"],
                                 stack["encoder"], stack["heldout"], ev_cfg,
                                 seed=seed, embedder=stack["embedder"],
                                 weights=stack["weights"])
        sft_scores.append(float(np.mean([r["composite_reward"]
                                         for r in base_rows])))
        adapters = attach_lora(stack["net"], rank=8, alpha=16.0,
                               rng=Rng(seed))
        policy = grpo.PolicyPair(net=stack["net"], adapters=adapters)
        cfg = grpo.GrpoConfig(group_size=8, iterations=GRPO_ITERATIONS,
                              groups_per_batch=2, lr=1e-4,
                              sampler=flow.SamplerConfig(
                                  steps=10, variant="flow-sde", eta=0.7))
        grpo.train_grpo(conditions, policy, cfg, seed=seed,
                        embedder=stack["embedder"], weights=stack["weights"])
        tuned_rows = evaluate_sft(stack["net"], stack["refiner"],
                                  stack["encoder"], stack["heldout"], ev_cfg,
                                  seed=seed, embedder=stack["embedder"],
                                  weights=stack["weights"], adapters=adapters)
        grpo_scores.append(float(np.mean([r["composite_reward"]
                                          for r in tuned_rows])))

    sft_scores = np.asarray(sft_scores)
    grpo_scores = np.asarray(grpo_scores)
    improvements = grpo_scores - sft_scores
    all_up = bool(np.all(improvements > 0))
    spread = float(np.std(sft_scores))
    strong = float(improvements.mean()) > 2.0 * spread
    ok = all_up and strong
    verdict(7, ok, f"composite reward per seed: "
            + ", ".join(f"{s:.4f}->{g:.4f}" for s, g in
                        zip(sft_scores, grpo_scores))
            + f"; mean improvement {improvements.mean():.4f} vs "
              f"2x SFT-score std {2 * spread:.4f}")
    assert ok


# ---------------------------------------------------------------------------
# 8. guidance contract
# ---------------------------------------------------------------------------


def test_criterion_8_cfg_contract():
    pair, encoder, refiner, _ = mini_condition(seed=81, dtype=np.float32)
    net = mini_net(seed=82, dtype=np.float32)
    from vivalab.instructor import null_text
    grounded = encoder.ground_pair_frames(pair.instruction, pair.source.data)
    cond = refiner.refine(Tensor(grounded.data[None])).detach()
    null_cond = refiner.refine(Tensor(null_text(grounded).data[None])).detach()
    x = Tensor(Rng(83).stream("sde-noise").normal(
        (1,) + pair.source.data.shape))
    src = Tensor(pair.source.data[None])
    t = np.array([0.5])

    v_cond = net.forward(x, t, src, cond).data
    v_null = net.forward(x, t, src, null_cond).data
    s1 = np.array_equal(
        flow.cfg_velocity(net, x, t, src, cond, null_cond, 1.0).data, v_cond)
    s0 = np.array_equal(
        flow.cfg_velocity(net, x, t, src, cond, null_cond, 0.0).data, v_null)
    v2 = flow.cfg_velocity(net, x, t, src, cond, null_cond, 2.0).data
    smoke = np.allclose(v2, 2 * v_cond - v_null, rtol=1e-5, atol=1e-6)
    ok = s1 and s0 and smoke
    verdict(8, ok, f"s=1 bit-exact conditional: {s1}; s=0 bit-exact "
                   f"unconditional: {s0}; s=2 arithmetic: {smoke}")
    assert ok


# ---------------------------------------------------------------------------
# 9. data pipeline soundness
# ---------------------------------------------------------------------------


def test_criterion_9_data_pipeline():
    world = pairs.WorldConfig()
    rng = Rng(99)
    n = 10_000
    outside_violations = 0
    grammar_failures = 0
    injected_caught = 0
    injected_total = 0
    for i in range(n):
        kind = KINDS[i % 4]
        p = gen_kind(rng.stream("data", i), kind, world)
        if kind in pairs.LOCAL_KINDS:
            outside = p.mask.data[..., 0] == 0
            if np.any(p.source.data[outside] != p.target.data[outside]):
                outside_violations += 1
        try:
            ins = grammar.parse_instruction(p.instruction)
            round_trip = grammar.instruction_tokens(ins) == p.instruction
            grammar.parse_caption(p.caption_src)
            grammar.parse_caption(p.caption_edit)
        except grammar.GrammarError:
            round_trip = False
        if not round_trip:
            grammar_failures += 1
        if i % 100 == 0:
            # inject violations and expect the filter to catch each
            bad_range = pairs.EditPair(**{**p.__dict__})
            bad_range.target = type(p.target)(p.target.data.copy())
            bad_range.target.data[0, 0, 0, 0] = 1.5
            injected_total += 1
            injected_caught += int(not pairs.quality_filter(bad_range)[0])
            if kind in pairs.LOCAL_KINDS:
                bad_mask = pairs.EditPair(**{**p.__dict__})
                bad_mask.target = type(p.target)(p.target.data.copy())
                outside_idx = np.argwhere(p.mask.data[..., 0] == 0)
                f, y, x = outside_idx[0]
                bad_mask.target.data[f, y, x] = 1.0 - bad_mask.target.data[f, y, x]
                injected_total += 1
                injected_caught += int(not pairs.quality_filter(bad_mask)[0])
    ok = (outside_violations == 0 and grammar_failures == 0
          and injected_caught == injected_total)
    verdict(9, ok, f"{n} pairs: {outside_violations} outside-mask violations, "
                   f"{grammar_failures} grammar round-trip failures, "
                   f"{injected_caught}/{injected_total} injected violations "
                   f"rejected")
    assert ok


# ---------------------------------------------------------------------------
# 10. reproducibility
# ---------------------------------------------------------------------------


def test_criterion_10_reproducibility(tmp_path):
    from vivalab.cli import main
    config = {
        "world": {"frames": 2, "height": 16, "width": 16, "min_size": 5,
                  "max_size": 6, "max_entities": 1, "max_speed": 0.5},
        "model": {"patch": [1, 4, 4], "d_model": 24, "n_layers": 1,
                  "n_heads": 2, "d_ff": 32, "d_time": 8, "d_patch": 16},
        "instructor": {"d_enc": 12, "d_model": 24, "image_patch": 8},
        "sft": {"steps": 5, "batch": 2, "log_every": 1},
        "eval_sampler": {"steps": 3, "variant": "ode"},
        "datagen": {"video_count": 4, "image_count": 2},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))

    # each stage runs twice from identical inputs (identical manifests);
    # only the output directory differs
    outputs = {"a": {}, "b": {}}
    for run in ("a", "b"):
        data = tmp_path / f"data_{run}"
        assert main(["datagen", "--config", str(cfg_path), "--out", str(data),
                     "--seed", "11"]) == 0
        outputs[run]["data_manifest"] = (data / "manifest.json").read_bytes()
        outputs[run]["dataset"] = (data / "pairs.bin").read_bytes()
        outputs[run]["sidecar"] = (data / "pairs.jsonl").read_bytes()
    shared_data = tmp_path / "data_a"
    for run in ("a", "b"):
        sft_out = tmp_path / f"sft_{run}"
        assert main(["sft", "--data", str(shared_data), "--config",
                     str(cfg_path), "--out", str(sft_out), "--seed", "12"]) == 0
        outputs[run]["sft_manifest"] = (sft_out / "manifest.json").read_bytes()
        outputs[run]["ckpt"] = (sft_out / "checkpoint.vckp").read_bytes()
    shared_ckpt = tmp_path / "sft_a" / "checkpoint.vckp"
    for run in ("a", "b"):
        eval_out = tmp_path / f"eval_{run}"
        assert main(["eval", "--ckpt", str(shared_ckpt), "--bench",
                     str(shared_data), "--out", str(eval_out), "--config",
                     str(cfg_path), "--seed", "13"]) == 0
        outputs[run]["eval_manifest"] = (eval_out / "manifest.json").read_bytes()
        outputs[run]["report"] = (eval_out / "report.jsonl").read_bytes()
        outputs[run]["csv"] = (eval_out / "report.csv").read_bytes()
    same = {k: outputs["a"][k] == outputs["b"][k] for k in outputs["a"]}
    ok = all(same.values())
    verdict(10, ok, "byte-identical across two runs: "
            + ", ".join(f"{k}={v}" for k, v in same.items()))
    assert ok
