"""Conditional UNet noise predictor eps(x_t, t, z).

Every residual block modulates its second normalization with a scale and a
shift computed from the time embedding and the semantic code (adaptive group
norm).  Without a code the network substitutes a learned null code.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv2d, GroupNorm, Linear, Module, param, sinusoidal_embedding
from .tensor import Tensor


@dataclass
class UNetConfig:
    image_size: int = 16
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    num_res_blocks: int = 2
    attention_resolutions: tuple[int, ...] = ()   # extra attention inside the levels at these extents
    mid_attention: bool = True
    time_dim: int = 128
    cond_dim: int = 64
    groups: int = 8
    heads: int = 1

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        self.attention_resolutions = tuple(self.attention_resolutions)
        levels = len(self.channel_mults)
        if self.image_size % (2 ** (levels - 1)):
            raise ValueError(
                f"image size {self.image_size} not divisible by 2^{levels - 1} for {levels} levels"
            )
        for m in self.channel_mults:
            if (m * self.base_channels) % self.groups:
                raise ValueError(f"{m * self.base_channels} channels not divisible into {self.groups} groups")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d


class AdaGN(Module):
    """Scale/shift heads over (time embedding, semantic code)."""

    def __init__(self, channels: int, time_dim: int, cond_dim: int, groups: int, rng, dtype):
        self.groups = groups
        self.t_scale = Linear(time_dim, channels, rng, dtype)
        self.t_shift = Linear(time_dim, channels, rng, dtype)
        self.z_scale = Linear(cond_dim, channels, rng, dtype, bias=False)
        self.z_shift = Linear(cond_dim, channels, rng, dtype, bias=False)
        self.t_scale.b.data[:] = 1.0

    def __call__(self, h: Tensor, t_emb: Tensor, z: Tensor) -> Tensor:
        return inject_condition(h, t_emb, z, self)


def inject_condition(features: Tensor, t_emb: Tensor, z: Tensor, heads: AdaGN) -> Tensor:
    """``s * GN(features) + b`` with s, b affine in the time embedding and the code."""
    if z.shape[-1] != heads.z_scale.w.shape[0]:
        raise ValueError(f"condition dim {z.shape[-1]} does not match block dim {heads.z_scale.w.shape[0]}")
    s = heads.t_scale(t_emb) + heads.z_scale(z)
    b = heads.t_shift(t_emb) + heads.z_shift(z)
    return T.channel_affine(T.group_norm(features, heads.groups), s, b)


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, cfg: UNetConfig, rng, dtype):
        self.norm1 = GroupNorm(cfg.groups, c_in, dtype)
        self.conv1 = Conv2d(c_in, c_out, 3, rng, dtype)
        self.cond = AdaGN(c_out, cfg.time_dim, cfg.cond_dim, cfg.groups, rng, dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, dtype)
        self.skip = Conv2d(c_in, c_out, 1, rng, dtype) if c_in != c_out else None

    def __call__(self, x: Tensor, t_emb: Tensor, z: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        h = self.conv2(T.silu(self.cond(h, t_emb, z)))
        return (self.skip(x) if self.skip is not None else x) + h


class AttnBlock(Module):
    def __init__(self, channels: int, cfg: UNetConfig, rng, dtype):
        if channels % cfg.heads:
            raise ValueError(f"{channels} channels not divisible by {cfg.heads} heads")
        self.heads = cfg.heads
        self.norm = GroupNorm(cfg.groups, channels, dtype)
        self.qkv = Linear(channels, 3 * channels, rng, dtype)
        self.proj = Linear(channels, channels, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        h = self.heads
        tok = T.transpose(T.reshape(self.norm(x), (B, C, H * W)), (0, 2, 1))
        qkv = T.transpose(T.reshape(self.qkv(tok), (B, H * W, 3, h, C // h)), (2, 0, 3, 1, 4))
        out = T.softmax_attention(qkv[0], qkv[1], qkv[2])
        out = self.proj(T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, H * W, C)))
        return x + T.reshape(T.transpose(out, (0, 2, 1)), (B, C, H, W))


class UNet(Module):
    def __init__(self, cfg: UNetConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        base = cfg.base_channels
        self.time_fc1 = Linear(base, cfg.time_dim, rng, dtype)
        self.time_fc2 = Linear(cfg.time_dim, cfg.time_dim, rng, dtype)
        self.null_code = param(np.zeros(cfg.cond_dim), dtype)
        self.conv_in = Conv2d(cfg.in_channels, base, 3, rng, dtype)

        chans = [base]
        ch = base
        res = cfg.image_size
        levels = len(cfg.channel_mults)
        self.down_res, self.down_attn, self.downsamplers = [], [], []
        for lvl, mult in enumerate(cfg.channel_mults):
            for _ in range(cfg.num_res_blocks):
                self.down_res.append(ResBlock(ch, mult * base, cfg, rng, dtype))
                ch = mult * base
                self.down_attn.append(AttnBlock(ch, cfg, rng, dtype) if res in cfg.attention_resolutions else None)
                chans.append(ch)
            if lvl != levels - 1:
                self.downsamplers.append(Conv2d(ch, ch, 2, rng, dtype, stride=2, pad=0))
                chans.append(ch)
                res //= 2

        self.mid1 = ResBlock(ch, ch, cfg, rng, dtype)
        self.mid_attn = AttnBlock(ch, cfg, rng, dtype) if cfg.mid_attention else None
        self.mid2 = ResBlock(ch, ch, cfg, rng, dtype)

        self.up_res, self.up_attn, self.upsamplers = [], [], []
        for lvl, mult in reversed(list(enumerate(cfg.channel_mults))):
            for _ in range(cfg.num_res_blocks + 1):
                self.up_res.append(ResBlock(ch + chans.pop(), mult * base, cfg, rng, dtype))
                ch = mult * base
                self.up_attn.append(AttnBlock(ch, cfg, rng, dtype) if res in cfg.attention_resolutions else None)
            if lvl:
                self.upsamplers.append(Conv2d(ch, ch, 3, rng, dtype))
                res *= 2

        self.norm_out = GroupNorm(cfg.groups, ch, dtype)
        self.conv_out = Conv2d(ch, cfg.in_channels, 3, rng, dtype, zero=True)

    def time_embedding(self, t) -> Tensor:
        base = sinusoidal_embedding(t, self.cfg.base_channels, dtype=self.conv_in.w.dtype)
        return self.time_fc2(T.silu(self.time_fc1(Tensor(base))))

    def __call__(self, x_t, t, z=None) -> Tensor:
        cfg = self.cfg
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=self.conv_in.w.dtype))
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ValueError(
                f"UNet expects (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {x.shape}"
            )
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (B,))
        if z is None:
            z = T.expand(self.null_code, B)
        elif not isinstance(z, Tensor):
            z = Tensor(np.asarray(z, dtype=self.conv_in.w.dtype).reshape(B, -1))
        if z.shape != (B, cfg.cond_dim):
            raise ValueError(f"condition shape {z.shape} does not match (B={B}, d={cfg.cond_dim})")
        temb = T.silu(self.time_embedding(t))

        h = self.conv_in(x)
        hs = [h]
        i = 0
        for lvl in range(len(cfg.channel_mults)):
            for _ in range(cfg.num_res_blocks):
                h = self.down_res[i](h, temb, z)
                if self.down_attn[i] is not None:
                    h = self.down_attn[i](h)
                hs.append(h)
                i += 1
            if lvl < len(self.downsamplers):
                h = self.downsamplers[lvl](h)
                hs.append(h)

        h = self.mid1(h, temb, z)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid2(h, temb, z)

        i = 0
        for lvl in range(len(cfg.channel_mults)):
            for _ in range(cfg.num_res_blocks + 1):
                h = self.up_res[i](T.concat([h, hs.pop()], axis=1), temb, z)
                if self.up_attn[i] is not None:
                    h = self.up_attn[i](h)
                i += 1
            if lvl < len(self.upsamplers):
                h = self.upsamplers[lvl](T.upsample_nearest(h))

        return self.conv_out(T.silu(self.norm_out(h)))


def predict_noise(x_t, t, z, unet: UNet, batch_size: int | None = None) -> np.ndarray:
    """Tape-free noise estimate; ``z`` may be None (null code) or a (B, d) array."""
    x_t = np.asarray(x_t)
    B = x_t.shape[0]
    t = np.broadcast_to(np.asarray(t), (B,))
    if batch_size is None or B <= batch_size:
        with T.no_grad():
            return unet(x_t, t, z).data
    parts = []
    for lo in range(0, B, batch_size):
        zz = None if z is None else np.asarray(z)[lo:lo + batch_size]
        with T.no_grad():
            parts.append(unet(x_t[lo:lo + batch_size], t[lo:lo + batch_size], zz).data)
    return np.concatenate(parts)
