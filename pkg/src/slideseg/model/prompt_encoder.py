"""Prompt embedding: sparse tokens for clicks/boxes, dense maps for masks."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from ..errors import InvalidPromptError
from ..prompts import Prompt
from .encoder import EncoderConfig

# rows of the type embedding table
BG_POINT, FG_POINT, BOX_TL, BOX_BR = 0, 1, 2, 3


class LayerNorm2d(nn.Module):
    """Channel-wise layer norm for (B, C, H, W) maps."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class PromptEncoder(nn.Module):
    """Turn a :class:`Prompt` into decoder-ready embeddings.

    Coordinates are embedded with random Fourier features against a frozen
    gaussian matrix, then a learned per-type embedding is added (background
    click, foreground click, box top-left, box bottom-right).  Mask prompts
    run through a small conv stem that matches the encoder's 1/patch-size
    grid; absent masks contribute an all-zero dense map.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config.embed_dim
        self.register_buffer("pe_gauss", torch.randn(2, c // 2))
        self.type_embed = nn.Embedding(4, c)
        stem = max(c // 8, 4)
        self.mask_stem = nn.Sequential(
            nn.Conv2d(3, stem, kernel_size=2, stride=2),
            LayerNorm2d(stem),
            nn.GELU(),
            nn.Conv2d(stem, stem * 2, kernel_size=2, stride=2),
            LayerNorm2d(stem * 2),
            nn.GELU(),
            nn.Conv2d(stem * 2, c, kernel_size=2, stride=2),
        )
        if config.patch_size != 8:
            # keep the stem output aligned with the token grid for any patch size
            self.mask_resize = True
        else:
            self.mask_resize = False

    def _fourier(self, coords01: torch.Tensor) -> torch.Tensor:
        """``(..., 2)`` coordinates in [0, 1] -> ``(..., C)`` features."""
        projected = (2.0 * coords01 - 1.0) @ self.pe_gauss * (2.0 * np.pi)
        return torch.cat([torch.sin(projected), torch.cos(projected)], dim=-1)

    def grid_pe(self, grid: int) -> torch.Tensor:
        """Dense positional map ``(C, grid, grid)`` at pixel-center positions."""
        device = self.pe_gauss.device
        ramp = (torch.arange(grid, dtype=self.pe_gauss.dtype, device=device) + 0.5) / grid
        ys = ramp[:, None].expand(grid, grid)
        xs = ramp[None, :].expand(grid, grid)
        pe = self._fourier(torch.stack([xs, ys], dim=-1))
        return pe.permute(2, 0, 1)

    def _point_tokens(self, coords: torch.Tensor, types: torch.Tensor) -> torch.Tensor:
        size = float(self.config.image_size)
        feats = self._fourier((coords + 0.5) / size)
        return feats + self.type_embed(types)

    def encode(self, prompt: Prompt | None) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns ``(sparse (N, C), dense (C, g, g))`` for one window.

        With no prompt at all the sparse tensor is empty: the decoder then
        attends over its learned output tokens only.  Coordinates must already
        be in model pixel space; out-of-range values raise.
        """
        c = self.config.embed_dim
        g = self.config.grid_size
        device = self.pe_gauss.device
        dtype = self.pe_gauss.dtype
        sparse = torch.zeros(0, c, dtype=dtype, device=device)
        dense = torch.zeros(c, g, g, dtype=dtype, device=device)
        if prompt is None:
            return sparse, dense
        prompt.validate_bounds(self.config.image_size, self.config.image_size)
        pieces = []
        if prompt.points is not None:
            coords = torch.as_tensor(prompt.points, dtype=dtype, device=device)
            types = torch.as_tensor(
                np.where(prompt.point_labels > 0, FG_POINT, BG_POINT), device=device
            )
            pieces.append(self._point_tokens(coords, types))
        if prompt.box is not None:
            x0, y0, x1, y1 = prompt.box
            corners = torch.tensor([[x0, y0], [x1, y1]], dtype=dtype, device=device)
            types = torch.tensor([BOX_TL, BOX_BR], device=device)
            pieces.append(self._point_tokens(corners, types))
        if pieces:
            sparse = torch.cat(pieces, dim=0)
        if prompt.mask is not None:
            m = torch.as_tensor(prompt.mask, dtype=dtype, device=device)
            if m.shape[0] != self.config.image_size or m.shape[1] != self.config.image_size:
                raise InvalidPromptError(
                    f"mask prompt must be {self.config.image_size}^2, got {tuple(m.shape)}"
                )
            stem_out = self.mask_stem(m.permute(2, 0, 1)[None])
            if stem_out.shape[-1] != g:
                stem_out = nn.functional.interpolate(
                    stem_out, size=(g, g), mode="bilinear", align_corners=False
                )
            dense = stem_out[0]
        return sparse, dense
