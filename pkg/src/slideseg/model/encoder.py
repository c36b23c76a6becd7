"""ViT image encoder with a frozen backbone and low-rank adapted attention.

The backbone (transformer blocks, positional embedding, final norm) never
trains.  What does train: the patch embedding, which must absorb the 3-slice
input statistics, and the rank-r adapters on the query and value projections
of every attention block.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from ..errors import ConfigError, InvalidInputError
from .lora import LoraLinear


@dataclass
class EncoderConfig:
    """Hyperparameters for the whole network, serialized into checkpoints."""

    image_size: int = 128
    patch_size: int = 8
    embed_dim: int = 96
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    lora_rank: int = 4
    lora_alpha: float = 4.0
    decoder_depth: int = 2

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 8 != 0:
            raise ConfigError("embed_dim must be divisible by 8 for the mask upscaler")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if min(self.depth, self.heads, self.decoder_depth) < 1:
            raise ConfigError("depth, heads and decoder_depth must be >= 1")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad encoder config: {exc}") from exc


class Attention(nn.Module):
    """Multi-head self-attention with adapters on q and v.

    The attention math is written out with explicit matmuls: the output for a
    given token then depends only on that sample's tokens, never on how the
    batch is grouped, which the sliding-window engine relies on.
    """

    def __init__(self, dim: int, heads: int, rank: int, alpha: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.q = LoraLinear(nn.Linear(dim, dim), rank, alpha)
        self.k = nn.Linear(dim, dim)
        self.v = LoraLinear(nn.Linear(dim, dim), rank, alpha)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        q = self.q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, rank: int, alpha: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, rank, alpha)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    """Patchify a 3-channel slice stack and run it through the adapted ViT."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config.embed_dim
        self.patch_embed = nn.Conv2d(3, c, kernel_size=config.patch_size,
                                     stride=config.patch_size)
        n = config.grid_size ** 2
        self.pos_embed = nn.Parameter(torch.randn(1, n, c) * 0.02)
        self.blocks = nn.ModuleList(
            Block(c, config.heads, config.mlp_ratio, config.lora_rank, config.lora_alpha)
            for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(c)
        self._freeze_backbone()

    def _freeze_backbone(self):
        # Everything except the patch embedding and the adapters stays frozen.
        self.pos_embed.requires_grad_(False)
        for p in self.norm.parameters():
            p.requires_grad_(False)
        for block in self.blocks:
            for name, p in block.named_parameters():
                if ".down" not in name and ".up" not in name:
                    p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, 3, S, S)`` pixels in ``[0, 1]`` -> ``(B, C, g, g)`` features."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise InvalidInputError(f"encoder expects (B, 3, H, W), got {tuple(x.shape)}")
        s = self.config.image_size
        if x.shape[2] != s or x.shape[3] != s:
            raise InvalidInputError(
                f"encoder expects {s}x{s} input, got {x.shape[2]}x{x.shape[3]}"
            )
        feats = self.patch_embed(x)  # (B, C, g, g)
        b, c, g, _ = feats.shape
        tokens = feats.flatten(2).transpose(1, 2) + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)
        return tokens.transpose(1, 2).reshape(b, c, g, g)
