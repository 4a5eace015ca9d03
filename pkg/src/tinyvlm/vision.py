"""ViT-style image encoder: image -> patch tokens -> visual features."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, InputError
from .nn import Block, LayerNorm, Linear, Module, normal
from .tensor import Tensor, get_default_dtype


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2

    def to_dict(self) -> dict:
        return asdict(self)


def _bilinear_taps(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def preprocess_image(raw: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize of an ``H x W x 3`` byte image to ``target x target``, scaled to [0, 1]."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3 or raw.shape[0] == 0 or raw.shape[1] == 0:
        raise InputError(f"expected a non-empty H x W x 3 image, got shape {raw.shape}")
    img = raw.astype(np.float64)
    ylo, yhi, fy = _bilinear_taps(img.shape[0], target)
    xlo, xhi, fx = _bilinear_taps(img.shape[1], target)
    top, bottom = img[ylo], img[yhi]
    rows = top + (bottom - top) * fy[:, None, None]
    left, right = rows[:, xlo], rows[:, xhi]
    out = left + (right - left) * fx[None, :, None]
    return (out / 255.0).astype(get_default_dtype())


def patchify(img: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``[..., H, W, 3]`` into ``[..., N, 3 * p * p]`` row-major patches.

    Patches are ordered left-to-right, top-to-bottom; each row flattens its
    patch in (y, x, channel) order.
    """
    img = np.asarray(img)
    *lead, h, w, c = img.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = img.reshape(*lead, gh, patch_size, gw, patch_size, c)
    k = len(lead)
    x = x.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, gh * gw, patch_size * patch_size * c)


class VisionEncoder(Module):
    """Patch embedding + learned positions + bidirectional pre-norm blocks + final norm."""

    def __init__(self, config: ViTConfig, rng: np.random.Generator):
        self.config = config
        d = config.embed_dim
        self.patch_embed = Linear(config.patch_dim, d, rng)
        self.pos_embed = normal(rng, config.num_patches, d)
        self.blocks = [Block(d, config.heads, config.mlp_ratio, rng, causal=False) for _ in range(config.depth)]
        self.ln_final = LayerNorm(d)

    def forward(self, images) -> Tensor:
        """``images``: ``[B, S, S, 3]`` (or a single ``[S, S, 3]``) in [0, 1]; returns ``[B, N, d_v]``."""
        images = np.asarray(images)
        single = images.ndim == 3
        if single:
            images = images[None]
        s = self.config.image_size
        if images.shape[1:] != (s, s, 3):
            raise ConfigError(f"encoder expects {s}x{s}x3 images, got {images.shape[1:]}")
        patches = Tensor(patchify(images, self.config.patch_size).astype(self.pos_embed.dtype))
        x = self.patch_embed(patches) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.ln_final(x)
        return x.reshape(x.shape[1:]) if single else x

    def encode(self, image) -> Tensor:
        """Visual features ``[N_patches, d_v]`` for one preprocessed image."""
        return self.forward(np.asarray(image)[None]).reshape(self.config.num_patches, self.config.embed_dim)
