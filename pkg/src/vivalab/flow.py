"""Rectified-flow objective, masked variant, and samplers.

Time runs from t=0 (noise) to t=1 (data): x_t = (1-t) x_0 + t x_1, and the
network regresses the constant-speed velocity x_1 - x_0.

The stochastic sampler injects Gaussian noise per Euler step while keeping
the ODE marginals: with any step-noise schedule sigma_t, the drift correction
is  v - sigma_t^2 / (2 (1 - t)) * (x - t v),  which follows from the score of
the linear-interpolation marginal, nabla log p_t = -(x - t v) / (1 - t).
Schedules: "flow-sde" uses sigma_t = eta * sqrt((1-t)/t) (strong exploration
early, decaying toward the data end; the noise-level form of the familiar
eta * sqrt(u/(1-u)) schedule), and "coeff-preserving" uses
sigma_t = sin(eta*pi/2) * dt, whose per-step noise vanishes with the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import ContractError, Tensor, broadcast_to, mul, sub, tmean
from .numerics.rng import Stream
from .synthworld.scene import VideoTensor

VARIANTS = ("ode", "flow-sde", "coeff-preserving")


@dataclass
class SamplerConfig:
    steps: int = 50
    t_min: float = 0.02
    t_max: float = 0.98
    eta: float = 0.0
    variant: str = "ode"
    cfg_scale: float = 1.0

    def validate(self) -> None:
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown sampler variant {self.variant!r}")
        if self.eta < 0:
            raise ContractError("eta must be >= 0")
        if self.cfg_scale < 0:
            raise ContractError("cfg_scale must be >= 0")
        if self.variant == "ode":
            if not 0.0 <= self.t_min < self.t_max <= 1.0:
                raise ContractError("need 0 <= t_min < t_max <= 1")
        elif not 0.0 < self.t_min < self.t_max < 1.0:
            # the stochastic schedules are singular at the interval ends
            raise ContractError(
                "stochastic variants need 0 < t_min < t_max < 1")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "t_min": self.t_min, "t_max": self.t_max,
                "eta": self.eta, "variant": self.variant,
                "cfg_scale": self.cfg_scale}

    @staticmethod
    def from_dict(d: dict) -> "SamplerConfig":
        cfg = SamplerConfig()
        for k, v in d.items():
            setattr(cfg, k, v)
        return cfg


def sigma_schedule(variant: str, eta: float, t: float, dt: float) -> float:
    if variant == "ode" or eta == 0.0:
        return 0.0
    if variant == "flow-sde":
        return eta * math.sqrt((1.0 - t) / t)
    if variant == "coeff-preserving":
        return math.sin(eta * math.pi / 2.0) * dt
    raise ContractError(f"unknown sampler variant {variant!r}")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass
class FlowBatch:
    """One training batch: noise, data, interpolants, mask, and sources."""

    x0: np.ndarray          # (B, F, H, W, C) noise
    x1: np.ndarray          # (B, F, H, W, C) targets
    t: np.ndarray           # (B,)
    xt: np.ndarray          # (B, F, H, W, C) interpolants
    mask: np.ndarray        # (B, F, H, W, 1) binary
    w_m: float
    src: np.ndarray         # (B, F, H, W, C) source videos


def interpolate(x0: np.ndarray, x1: np.ndarray, t: np.ndarray) -> np.ndarray:
    tb = t.reshape((-1,) + (1,) * (x0.ndim - 1)).astype(x0.dtype)
    return (1.0 - tb) * x0 + tb * x1


def make_flow_batch(x1: np.ndarray, src: np.ndarray, mask: np.ndarray,
                    t: np.ndarray, noise: np.ndarray, w_m: float) -> FlowBatch:
    return FlowBatch(x0=noise, x1=x1, t=np.asarray(t), xt=interpolate(noise, x1, t),
                     mask=mask, w_m=w_m, src=src)


def _weighted_residual_mean(batch: FlowBatch, net, cond, weight: np.ndarray,
                            adapters=None) -> Tensor:
    v = net.forward(Tensor(batch.xt), batch.t, Tensor(batch.src), cond,
                    adapters=adapters)
    if v.shape != batch.x1.shape:
        raise ContractError(
            f"velocity shape {v.shape} != batch shape {batch.x1.shape}")
    residual = sub(v, Tensor((batch.x1 - batch.x0).astype(v.dtype)))
    sq = mul(residual, residual)
    w = broadcast_to(Tensor(weight.astype(v.dtype)), sq.shape)
    return tmean(mul(w, sq))


def fm_loss(batch: FlowBatch, net, cond, adapters=None) -> Tensor:
    """Mean squared error of the velocity against x_1 - x_0."""
    ones = np.ones_like(batch.mask)
    return _weighted_residual_mean(batch, net, cond, ones, adapters)


def masked_loss(batch: FlowBatch, net, cond, adapters=None) -> Tensor:
    """Flow loss upweighted by (1 + w_m * M) inside the edit mask.

    Degenerates bit-exactly to `fm_loss` at w_m = 0.
    """
    m = batch.mask
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ContractError("mask must be binary")
    weight = 1.0 + batch.w_m * m
    return _weighted_residual_mean(batch, net, cond, weight, adapters)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Everything needed to replay a stochastic rollout's transition
    densities: x_{k+1} = mu_k + std_k * eps_k holds exactly by construction."""

    states: np.ndarray          # (T+1, *dims)
    means: np.ndarray           # (T, *dims)
    stds: np.ndarray            # (T,) per-step transition std (sigma_t sqrt(dt))
    eps: np.ndarray             # (T, *dims)
    ts: np.ndarray              # (T,)
    dt: float
    logps: np.ndarray | None    # (T,) rollout-time transition log-densities
    variant: str
    eta: float
    cond_id: str = ""

    @property
    def steps(self) -> int:
        return self.means.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


def logp_constants(std: float, d: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """(2 std^2, d (log std + log sqrt(2pi))) rounded once to dtype.

    Shared by the rollout-time density and the differentiable replay so the
    two agree bit-for-bit at identical means.
    """
    if std <= 0:
        raise ContractError("transition density needs std > 0")
    denom = np.asarray(2.0 * std * std, dtype=dtype)
    cterm = np.asarray(d * (math.log(std) + 0.5 * math.log(2.0 * math.pi)),
                       dtype=dtype)
    return denom, cterm


def gaussian_logp(x: np.ndarray, mean: np.ndarray, std: float) -> np.ndarray:
    """Diagonal-Gaussian log density with one shared std, in x's dtype."""
    denom, cterm = logp_constants(std, x.size, x.dtype)
    diff = x - mean
    ss = np.sum(diff * diff)
    return (-(ss / denom)) - cterm


def decode_video(x: np.ndarray) -> VideoTensor:
    return VideoTensor(np.clip(x, 0.0, 1.0).astype(np.float32))


def _velocity(net, x: Tensor, t_vec: np.ndarray, src: Tensor, cond,
              null_cond, scale: float) -> np.ndarray:
    if scale == 1.0 or null_cond is None:
        return net.forward(x, t_vec, src, cond).data
    return cfg_velocity(net, x, t_vec, src, cond, null_cond, scale).data


def sample_group(net, cond, src: np.ndarray, rng, cfg: SamplerConfig,
                 null_cond=None, want_traj: bool = True):
    """Batched Euler / Euler-Maruyama integration from noise at t_min.

    `src` is (G, *dims); `rng` is one Stream (shared batch draws) or a list
    of G Streams (one independent stream per member). Returns the raw
    terminal batch and, for stochastic variants with `want_traj`, one
    Trajectory per member.
    """
    cfg.validate()
    dims = tuple(src.shape[1:])
    g = src.shape[0]
    dtype = src.dtype
    per_member = isinstance(rng, (list, tuple))
    if per_member and len(rng) != g:
        raise ContractError(f"need {g} streams, got {len(rng)}")

    def draw():
        if per_member:
            return np.stack([s.normal(dims, dtype=dtype) for s in rng])
        return rng.normal((g,) + dims, dtype=dtype)

    t_grid = np.array([cfg.t_min + k * (cfg.t_max - cfg.t_min) / cfg.steps
                       for k in range(cfg.steps)])
    dt = (cfg.t_max - cfg.t_min) / cfg.steps
    x = draw()
    stochastic = cfg.variant != "ode"
    record = want_traj and stochastic
    if record:
        states = np.empty((cfg.steps + 1, g) + dims, dtype=dtype)
        means = np.empty((cfg.steps, g) + dims, dtype=dtype)
        eps_all = np.empty((cfg.steps, g) + dims, dtype=dtype)
        stds = np.empty(cfg.steps, dtype=dtype)
        logps = np.empty((cfg.steps, g), dtype=dtype)
        states[0] = x
    src_t = Tensor(src)
    any_zero_std = False
    for k, t_k in enumerate(t_grid):
        t_vec = np.full(g, t_k, dtype=np.float64)
        v = _velocity(net, Tensor(x), t_vec, src_t, cond, null_cond,
                      cfg.cfg_scale)
        sigma = sigma_schedule(cfg.variant, cfg.eta, float(t_k), dt)
        if stochastic:
            e = draw()
        if sigma == 0.0:
            mu = x + v * np.asarray(dt, dtype=dtype)
            x_next = mu
            std = np.asarray(0.0, dtype=dtype)
            any_zero_std = True
        else:
            c = (sigma * sigma) / (2.0 * (1.0 - t_k))
            drift = v - np.asarray(c, dtype=dtype) * (x - np.asarray(t_k, dtype=dtype) * v)
            mu = x + drift * np.asarray(dt, dtype=dtype)
            # stored as the dtype value actually used, so the replay identity
            # x_{k+1} == mu_k + std_k * eps_k holds bitwise
            std = np.asarray(sigma * math.sqrt(dt), dtype=dtype)
            x_next = mu + std * e
        if record:
            means[k] = mu
            eps_all[k] = e
            stds[k] = std
            states[k + 1] = x_next
            if std > 0:
                for i in range(g):
                    logps[k, i] = gaussian_logp(x_next[i], mu[i], float(std))
        x = x_next
    if not record:
        return x, None
    trajs = []
    for i in range(g):
        trajs.append(Trajectory(
            states=states[:, i].copy(), means=means[:, i].copy(),
            stds=stds.copy(), eps=eps_all[:, i].copy(), ts=t_grid.copy(),
            dt=dt, logps=None if any_zero_std else logps[:, i].copy(),
            variant=cfg.variant, eta=cfg.eta))
    return x, trajs


def sample_ode(net, cond, src: np.ndarray, rng: Stream,
               cfg: SamplerConfig, null_cond=None) -> VideoTensor:
    """Deterministic Euler integration of one sample; clipped to [0,1]."""
    if cfg.variant != "ode":
        raise ContractError("sample_ode requires variant == 'ode'")
    x, _ = sample_group(net, _lift_cond(cond), src[None], rng, cfg,
                        null_cond=_lift_cond(null_cond), want_traj=False)
    return decode_video(x[0])


def sample_sde(net, cond, src: np.ndarray, rng: Stream,
               cfg: SamplerConfig, null_cond=None) -> tuple[VideoTensor, Trajectory]:
    """One stochastic rollout with its full transition record."""
    if cfg.variant == "ode":
        raise ContractError("sample_sde requires a stochastic variant")
    x, trajs = sample_group(net, _lift_cond(cond), src[None], rng, cfg,
                            null_cond=_lift_cond(null_cond), want_traj=True)
    return decode_video(x[0]), trajs[0]


def _lift_cond(cond):
    if cond is None:
        return None
    if isinstance(cond, Tensor) and cond.ndim == 2:
        from .numerics import reshape
        return reshape(cond, (1,) + cond.shape)
    return cond


def cfg_velocity(net, x_t: Tensor, t, src: Tensor, cond, null_cond,
                 scale: float) -> Tensor:
    """Guided velocity v_u + s (v_c - v_u). s=1 is exactly the conditional
    forward and s=0 exactly the unconditional one (no arithmetic applied)."""
    if scale < 0:
        raise ContractError("guidance scale must be >= 0")
    if scale == 1.0:
        return net.forward(x_t, t, src, cond)
    if scale == 0.0:
        return net.forward(x_t, t, src, null_cond)
    v_c = net.forward(x_t, t, src, cond)
    v_u = net.forward(x_t, t, src, null_cond)
    s = Tensor(np.asarray(scale, dtype=v_c.dtype))
    from .numerics import add
    return add(v_u, mul(s, sub(v_c, v_u)))
