"""Velocity network: patch tokens from source and noisy videos are channel-
concatenated, projected to model width, and run through transformer blocks
with self-attention, cross-attention to conditioning tokens, and per-block
timestep modulation. Low-rank adapters can be attached to every attention
projection for the post-training stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (NonFiniteError, NumericsError, Rng, Tensor, add,
                       broadcast_to, concat, gather_rows, layer_norm,
                       matmul, mul, relu2, reshape, softmax, sub, transpose)


class ConfigError(Exception):
    """Model configuration violates a structural constraint."""


@dataclass
class ModelConfig:
    patch: tuple[int, int, int] = (1, 8, 8)   # (p_f, p_h, p_w)
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    d_time: int = 32
    d_patch: int = 96
    # "data": network predicts the clean video and the velocity
    # (xhat_1 - x_t) / (1 - t) is formed analytically; "direct": the head
    # output is the velocity itself
    parameterization: str = "data"

    def to_dict(self) -> dict:
        return {"patch": list(self.patch), "d_model": self.d_model,
                "n_layers": self.n_layers, "n_heads": self.n_heads,
                "d_ff": self.d_ff, "d_time": self.d_time,
                "d_patch": self.d_patch,
                "parameterization": self.parameterization}

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        cfg = ModelConfig()
        for k, v in d.items():
            setattr(cfg, k, tuple(v) if k == "patch" else v)
        return cfg


def _check_divisible(dims: tuple[int, int, int], patch: tuple[int, int, int]):
    for name, n, p in zip("FHW", dims, patch):
        if n % p != 0:
            raise ConfigError(f"{name}={n} not divisible by patch {p}")


def patch_counts(dims: tuple[int, int, int], patch: tuple[int, int, int]) -> int:
    _check_divisible(dims, patch)
    return (dims[0] // patch[0]) * (dims[1] // patch[1]) * (dims[2] // patch[2])


def patchify(video: Tensor, patch: tuple[int, int, int]) -> Tensor:
    """(B,)F,H,W,C -> (B,)L,c_patch with c_patch = p_f*p_h*p_w*C; exact
    inverse of `unpatchify`."""
    squeeze = video.ndim == 4
    v = reshape(video, (1,) + video.shape) if squeeze else video
    b, f, h, w, c = v.shape
    pf, ph, pw = patch
    _check_divisible((f, h, w), patch)
    x = reshape(v, (b, f // pf, pf, h // ph, ph, w // pw, pw, c))
    x = transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    x = reshape(x, (b, (f // pf) * (h // ph) * (w // pw), pf * ph * pw * c))
    return reshape(x, x.shape[1:]) if squeeze else x


def unpatchify(tokens: Tensor, patch: tuple[int, int, int],
               dims: tuple[int, int, int, int]) -> Tensor:
    squeeze = tokens.ndim == 2
    x = reshape(tokens, (1,) + tokens.shape) if squeeze else tokens
    f, h, w, c = dims
    pf, ph, pw = patch
    b = x.shape[0]
    x = reshape(x, (b, f // pf, h // ph, w // pw, pf, ph, pw, c))
    x = transpose(x, (0, 1, 4, 2, 5, 3, 6, 7))
    x = reshape(x, (b, f, h, w, c))
    return reshape(x, x.shape[1:]) if squeeze else x


@dataclass
class LoRAAdapter:
    """Additive low-rank delta (alpha/rank) * B @ A on one projection."""

    a: Tensor            # (rank, d_in)
    b: Tensor            # (d_out, rank)
    rank: int
    alpha: float

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.b.data @ self.a.data)

    def apply(self, x: Tensor) -> Tensor:
        low = matmul(x, transpose(self.a))
        out = matmul(low, transpose(self.b))
        return mul(out, Tensor(np.asarray(self.scale, dtype=x.dtype)))


_ATTN_PROJECTIONS = ("attn.wq", "attn.wk", "attn.wv", "attn.wo",
                     "cross.wq", "cross.wk", "cross.wv", "cross.wo")


def attach_lora(net: "VelocityNet", rank: int, alpha: float,
                rng: Rng, dtype=None) -> dict[str, LoRAAdapter]:
    """Adapters on every self- and cross-attention projection.

    A is Gaussian, B is zero, so the initial effective delta is exactly zero
    and the adapted model starts at the base model.
    """
    if rank < 1:
        raise ConfigError(f"lora rank must be >= 1, got {rank}")
    d = net.cfg.d_model
    if rank > d:
        raise ConfigError(f"lora rank {rank} exceeds projection dim {d}")
    dtype = dtype or net.dtype
    stream = rng.stream("init", 202)
    adapters: dict[str, LoRAAdapter] = {}
    for i in range(net.cfg.n_layers):
        for proj in _ATTN_PROJECTIONS:
            name = f"block{i}.{proj}"
            a = stream.normal((rank, d), dtype=dtype) / math.sqrt(rank)
            adapters[name] = LoRAAdapter(
                a=Tensor(a, requires_grad=True),
                b=Tensor(np.zeros((d, rank), dtype=dtype), requires_grad=True),
                rank=rank, alpha=alpha)
    return adapters


def adapter_params(adapters: dict[str, LoRAAdapter]) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for name, ad in adapters.items():
        out[f"{name}.lora_a"] = ad.a
        out[f"{name}.lora_b"] = ad.b
    return out


class VelocityNet:
    """v_theta(x_t, t | source video, conditioning tokens)."""

    def __init__(self, cfg: ModelConfig, dims: tuple[int, int, int, int],
                 rng: Rng, dtype=np.float32, zero_init_head: bool = True,
                 zero_init_mod: bool = True):
        self.cfg = cfg
        self.dims = tuple(dims)   # (F, H, W, C)
        self.dtype = dtype
        f, h, w, c = dims
        _check_divisible((f, h, w), cfg.patch)
        pf, ph, pw = cfg.patch
        self.c_patch = pf * ph * pw * c
        self.l_max = patch_counts((f, h, w), cfg.patch)
        if cfg.d_model % cfg.n_heads:
            raise ConfigError("d_model must divide evenly into heads")
        self.head_dim = cfg.d_model // cfg.n_heads

        s = rng.stream("init", 7)
        d = cfg.d_model

        def lin(shape, scale=None):
            scale = scale if scale is not None else 1.0 / math.sqrt(shape[0])
            return Tensor(s.normal(shape, dtype=dtype) * scale,
                          requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        def ones(shape):
            return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

        p: dict[str, Tensor] = {
            "patch_embed.w": lin((self.c_patch, cfg.d_patch)),
            "proj.w": lin((2 * cfg.d_patch, d)),
            "proj.b": zeros((d,)),
            "pos": Tensor(s.normal((self.l_max, d), dtype=dtype) * 0.02,
                          requires_grad=True),
            "time.w1": lin((cfg.d_time, d)),
            "time.b1": zeros((d,)),
            "time.w2": lin((d, d)),
            "time.b2": zeros((d,)),
            "final.ln.g": ones((d,)),
            "final.ln.b": zeros((d,)),
            "head.w": zeros((d, self.c_patch)) if zero_init_head
            else lin((d, self.c_patch)),
            "head.b": zeros((self.c_patch,)),
            # time-gated per-channel skips from x_t and the source video to
            # the velocity output; the rectified-flow optimum contains a
            # -x_t/(1-t) component that patch tokens alone cannot carry once
            # c_patch exceeds d_model
            "skip_x.w": zeros((d, c)) if zero_init_head else lin((d, c), 0.02),
            "skip_x.b": zeros((c,)),
            "skip_src.w": zeros((d, c)) if zero_init_head else lin((d, c), 0.02),
            "skip_src.b": zeros((c,)),
        }
        for i in range(cfg.n_layers):
            pre = f"block{i}."
            p[pre + "ln1.g"] = ones((d,))
            p[pre + "ln1.b"] = zeros((d,))
            p[pre + "ln2.g"] = ones((d,))
            p[pre + "ln2.b"] = zeros((d,))
            p[pre + "ln3.g"] = ones((d,))
            p[pre + "ln3.b"] = zeros((d,))
            for proj in _ATTN_PROJECTIONS:
                p[pre + proj] = lin((d, d))
            for site in ("mod_attn", "mod_mlp"):
                for part in ("scale", "shift"):
                    p[f"{pre}{site}.{part}.w"] = (
                        zeros((d, d)) if zero_init_mod else lin((d, d), 0.02))
                    p[f"{pre}{site}.{part}.b"] = zeros((d,))
            p[pre + "mlp.w1"] = lin((d, cfg.d_ff))
            p[pre + "mlp.b1"] = zeros((cfg.d_ff,))
            p[pre + "mlp.w2"] = lin((cfg.d_ff, d))
            p[pre + "mlp.b2"] = zeros((d,))
        self.params = p

    # -- parameter management -------------------------------------------------

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def export_params(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_params(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in tensors:
                raise ConfigError(f"checkpoint missing parameter {name}")
            if tensors[name].shape != p.data.shape:
                raise ConfigError(
                    f"parameter {name}: shape {tensors[name].shape} "
                    f"!= expected {p.data.shape}")
            p.data = tensors[name].astype(p.data.dtype).copy()

    # -- forward --------------------------------------------------------------

    def _bias(self, name: str, like_shape) -> Tensor:
        return broadcast_to(self.params[name],
                            tuple(like_shape[:-1]) + self.params[name].shape)

    def _linear(self, x: Tensor, w_name: str, b_name: str | None = None,
                adapters: dict[str, LoRAAdapter] | None = None) -> Tensor:
        y = matmul(x, self.params[w_name])
        if adapters is not None and w_name in adapters:
            y = add(y, adapters[w_name].apply(x))
        if b_name is not None:
            y = add(y, self._bias(b_name, y.shape))
        return y

    def time_embedding(self, t: np.ndarray) -> Tensor:
        """Sinusoidal features of t in [0,1], refined by a small MLP."""
        t = np.atleast_1d(np.asarray(t, dtype=self.dtype))
        half = self.cfg.d_time // 2
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
        ang = t[:, None].astype(np.float64) * freqs[None, :] * 1000.0
        feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
        emb = Tensor(feats.astype(self.dtype))
        h = add(matmul(emb, self.params["time.w1"]),
                self._bias("time.b1", (t.shape[0], self.cfg.d_model)))
        return add(matmul(relu2(h), self.params["time.w2"]),
                   self._bias("time.b2", (t.shape[0], self.cfg.d_model)))

    def context_tokens(self, z_src: Tensor, z_noise: Tensor) -> Tensor:
        """Channel-concatenate source and noise patch tokens, project to
        model width. Token count is preserved."""
        if z_src.shape[-2] != z_noise.shape[-2]:
            raise ConfigError(
                f"token counts differ: {z_src.shape} vs {z_noise.shape}")
        joint = concat([z_src, z_noise], axis=-1)
        return add(matmul(joint, self.params["proj.w"]),
                   self._bias("proj.b", joint.shape[:-1] + (self.cfg.d_model,)))

    def _modulate(self, x: Tensor, temb: Tensor, site: str, layer: int) -> Tensor:
        pre = f"block{layer}.{site}."
        b, l, d = x.shape
        scale = add(matmul(temb, self.params[pre + "scale.w"]),
                    self._bias(pre + "scale.b", (b, d)))
        shift = add(matmul(temb, self.params[pre + "shift.w"]),
                    self._bias(pre + "shift.b", (b, d)))
        scale = broadcast_to(reshape(scale, (b, 1, d)), (b, l, d))
        shift = broadcast_to(reshape(shift, (b, 1, d)), (b, l, d))
        one = Tensor(np.asarray(1.0, dtype=x.dtype))
        return add(mul(x, add(scale, one)), shift)

    def _attention(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        b, lq, d = q.shape
        lk = k.shape[1]
        nh, hd = self.cfg.n_heads, self.head_dim

        def heads(x, l):
            return transpose(reshape(x, (b, l, nh, hd)), (0, 2, 1, 3))

        qh, kh, vh = heads(q, lq), heads(k, lk), heads(v, lk)
        scores = matmul(qh, transpose(kh, (0, 1, 3, 2)))
        scores = mul(scores, Tensor(np.asarray(1.0 / math.sqrt(hd),
                                               dtype=q.dtype)))
        attn = softmax(scores, axis=-1)
        out = matmul(attn, vh)
        return reshape(transpose(out, (0, 2, 1, 3)), (b, lq, d))

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _block(self, i: int, h: Tensor, temb: Tensor, cond: Tensor,
               adapters) -> Tensor:
        pre = f"block{i}."
        a = self._modulate(self._ln(h, pre + "ln1"), temb, "mod_attn", i)
        q = self._linear(a, pre + "attn.wq", adapters=adapters)
        k = self._linear(a, pre + "attn.wk", adapters=adapters)
        v = self._linear(a, pre + "attn.wv", adapters=adapters)
        attn_out = self._attention(q, k, v)
        h = add(h, self._linear(attn_out, pre + "attn.wo", adapters=adapters))

        cq = self._linear(self._ln(h, pre + "ln2"), pre + "cross.wq",
                          adapters=adapters)
        ck = self._linear(cond, pre + "cross.wk", adapters=adapters)
        cv = self._linear(cond, pre + "cross.wv", adapters=adapters)
        cross_out = self._attention(cq, ck, cv)
        h = add(h, self._linear(cross_out, pre + "cross.wo", adapters=adapters))

        m = self._modulate(self._ln(h, pre + "ln3"), temb, "mod_mlp", i)
        m = relu2(self._linear(m, pre + "mlp.w1", pre + "mlp.b1"))
        m = self._linear(m, pre + "mlp.w2", pre + "mlp.b2")
        return add(h, m)

    def core_from_tokens(self, z_src_raw: Tensor, z_noise_raw: Tensor,
                         t, cond: Tensor,
                         adapters: dict[str, LoRAAdapter] | None = None,
                         pos_ids: np.ndarray | None = None) -> Tensor:
        """Per-token head output from raw patch tokens. Permuting the token
        axis of both inputs together with `pos_ids` permutes the output rows
        the same way."""
        zs = matmul(z_src_raw, self.params["patch_embed.w"])
        zn = matmul(z_noise_raw, self.params["patch_embed.w"])
        h = self.context_tokens(zs, zn)
        b, l, d = h.shape
        if pos_ids is None:
            pos_ids = np.arange(l)
        h = add(h, gather_rows(self.params["pos"], np.asarray(pos_ids)))
        temb = self.time_embedding(t)
        for i in range(self.cfg.n_layers):
            try:
                h = self._block(i, h, temb, cond, adapters)
            except NonFiniteError as e:
                raise NumericsError(f"non-finite activations in block {i}: {e}") from e
        y = self._ln(h, "final.ln")
        return self._linear(y, "head.w", "head.b")

    def forward(self, x_t: Tensor, t, src: Tensor, cond: Tensor,
                adapters: dict[str, LoRAAdapter] | None = None) -> Tensor:
        """Velocity field with the same shape as `x_t`.

        Accepts a single video (F,H,W,C) with scalar t, or a batch
        (B,F,H,W,C) with a length-B t vector. `cond` is (L_c, d_model) or
        (B, L_c, d_model) to match.
        """
        single = x_t.ndim == 4
        if single:
            x_t = reshape(x_t, (1,) + x_t.shape)
            src = reshape(src, (1,) + src.shape)
            if cond.ndim == 2:
                cond = reshape(cond, (1,) + cond.shape)
        if x_t.shape != src.shape:
            raise ConfigError(f"x_t {x_t.shape} and src {src.shape} differ")
        dims = tuple(x_t.shape[1:])
        tokens = self.core_from_tokens(
            patchify(src, self.cfg.patch), patchify(x_t, self.cfg.patch),
            t, cond, adapters=adapters)
        out = unpatchify(tokens, self.cfg.patch, dims)
        temb = self.time_embedding(t)
        out = add(out, self._channel_skip(temb, x_t, "skip_x"))
        out = add(out, self._channel_skip(temb, src, "skip_src"))
        if self.cfg.parameterization == "data":
            # out is xhat_1; the velocity follows from the interpolation rule
            t_arr = np.atleast_1d(np.asarray(t, dtype=self.dtype))
            inv = (1.0 / (1.0 - np.clip(t_arr, 0.0, 0.995))).astype(self.dtype)
            inv_b = Tensor(inv.reshape((-1,) + (1,) * (out.ndim - 1)))
            vel = mul(broadcast_to(inv_b, out.shape), sub(out, x_t))
        elif self.cfg.parameterization == "direct":
            vel = out
        else:
            raise ConfigError(
                f"unknown parameterization {self.cfg.parameterization!r}")
        return reshape(vel, vel.shape[1:]) if single else vel

    def _channel_skip(self, temb: Tensor, video: Tensor, name: str) -> Tensor:
        b = video.shape[0]
        c = video.shape[-1]
        coef = add(matmul(temb, self.params[name + ".w"]),
                   self._bias(name + ".b", (b, c)))
        coef = reshape(coef, (b,) + (1,) * (video.ndim - 2) + (c,))
        return mul(broadcast_to(coef, video.shape), video)
