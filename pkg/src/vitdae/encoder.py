"""Vision-transformer semantic encoder: image -> projected cls token."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, param
from .tensor import Tensor


@dataclass
class ViTConfig:
    image_size: int = 16
    patch_size: int = 4
    in_channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    code_dim: int = 64

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not divide image size {self.image_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SemanticCode:
    values: np.ndarray   # (d,) or (B, d)
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("semantic code has non-finite entries")

    @property
    def dim(self) -> int:
        return self.values.shape[-1]


@dataclass
class CodeStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean and std must have the same length")
        if np.any(self.std <= 0):
            raise ValueError("code-normalization std entries must be positive")

    @classmethod
    def fit(cls, codes: np.ndarray, floor: float = 1e-8) -> "CodeStats":
        codes = np.asarray(codes, dtype=np.float64)
        return cls(codes.mean(axis=0), np.maximum(codes.std(axis=0), floor))


def normalize_code(code: SemanticCode, stats: CodeStats) -> SemanticCode:
    if code.normalized:
        raise ValueError("code is already normalized")
    if code.dim != stats.mean.shape[0]:
        raise ValueError(f"code dim {code.dim} does not match stats dim {stats.mean.shape[0]}")
    return SemanticCode((code.values - stats.mean) / stats.std, normalized=True)


def unnormalize_code(code: SemanticCode, stats: CodeStats) -> SemanticCode:
    if not code.normalized:
        raise ValueError("code is not normalized")
    if code.dim != stats.mean.shape[0]:
        raise ValueError(f"code dim {code.dim} does not match stats dim {stats.mean.shape[0]}")
    return SemanticCode(code.values * stats.std + stats.mean, normalized=False)


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(C, H, W) -> (n, C*patch*patch) in raster order; a leading batch axis is carried through."""
    image = np.asarray(image)
    batched = image.ndim == 4
    x = image if batched else image[None]
    B, C, H, W = x.shape
    if H % patch or W % patch:
        raise ValueError(f"patch size {patch} does not divide image extents {H}x{W}")
    gh, gw = H // patch, W // patch
    rows = x.reshape(B, C, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5).reshape(B, gh * gw, -1)
    return rows if batched else rows[0]


def unpatchify(rows: np.ndarray, patch: int, channels: int, height: int, width: int) -> np.ndarray:
    rows = np.asarray(rows)
    batched = rows.ndim == 3
    r = rows if batched else rows[None]
    B = r.shape[0]
    gh, gw = height // patch, width // patch
    img = r.reshape(B, gh, gw, channels, patch, patch).transpose(0, 3, 1, 4, 2, 5)
    img = img.reshape(B, channels, height, width)
    return img if batched else img[0]


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        B, n, D = x.shape
        h = self.heads
        qkv = T.transpose(T.reshape(self.qkv(x), (B, n, 3, h, D // h)), (2, 0, 3, 1, 4))
        out = T.softmax_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, n, D)))


class Block(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng, dtype):
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, heads, rng, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        hidden = int(dim * mlp_ratio)
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(T.gelu(self.fc1(self.ln2(x))))


class ViTEncoder(Module):
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        D = cfg.embed_dim
        self.patch_embed = Linear(cfg.in_channels * cfg.patch_size**2, D, rng, dtype)
        self.cls = param(rng.standard_normal(D) * 0.02, dtype)
        self.pos = param(rng.standard_normal((cfg.num_patches + 1, D)) * 0.02, dtype)
        self.blocks = [Block(D, cfg.heads, cfg.mlp_ratio, rng, dtype) for _ in range(cfg.depth)]
        self.norm = LayerNorm(D, dtype)
        self.head = Linear(D, cfg.code_dim, rng, dtype)

    def __call__(self, images) -> Tensor:
        """(B, C, H, W) array -> (B, code_dim) tensor."""
        x = images.data if isinstance(images, Tensor) else np.asarray(images)
        c = self.cfg
        if x.ndim != 4 or x.shape[1:] != (c.in_channels, c.image_size, c.image_size):
            raise ValueError(
                f"encoder expects (B, {c.in_channels}, {c.image_size}, {c.image_size}), got {x.shape}"
            )
        B = x.shape[0]
        tokens = self.patch_embed(Tensor(patchify(x, c.patch_size).astype(self.cls.dtype, copy=False)))
        h = T.concat([T.reshape(T.expand(self.cls, B), (B, 1, c.embed_dim)), tokens], axis=1)
        h = T.bias_add(h, self.pos)
        for blk in self.blocks:
            h = blk(h)
        return self.head(self.norm(h[:, 0]))


def encode(images, encoder: ViTEncoder) -> SemanticCode:
    """Deterministic, tape-free encoding of one image (C, H, W) or a batch."""
    x = np.asarray(images)
    single = x.ndim == 3
    with T.no_grad():
        z = encoder(x[None] if single else x).data
    return SemanticCode(z[0] if single else z, normalized=False)
