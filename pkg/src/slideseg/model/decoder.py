"""Mask decoder: token/image cross-attention into per-slice, per-hypothesis masks.

The decoder receives the encoded window, positional maps and prompt tokens,
and emits logits for every (slice, hypothesis) pair plus one predicted IoU
per hypothesis.  Slices share everything except a small branch MLP applied to
the attended image features; hypotheses share everything except their mask
token and its hypernetwork.  That weight layout is what allows a single-slice
decoder to be duplicated into a 3-slice one without retraining.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError
from .encoder import EncoderConfig
from .prompt_encoder import LayerNorm2d

NUM_HYPOTHESES = 3


class MLP(nn.Module):
    def __init__(self, dim_in: int, dim_hidden: int, dim_out: int, layers: int,
                 sigmoid_out: bool = False):
        super().__init__()
        dims = [dim_in] + [dim_hidden] * (layers - 1)
        self.layers = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(dims, dims[1:] + [dim_out])
        )
        self.sigmoid_out = sigmoid_out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        if self.sigmoid_out:
            x = torch.sigmoid(x)
        return x


class CrossAttention(nn.Module):
    """Single-head-per-group attention with explicit matmuls (batch stable)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, q, k, v):
        b, nq, c = q.shape
        nk = k.shape[1]
        qh = self.q(q).view(b, nq, self.heads, self.head_dim).transpose(1, 2)
        kh = self.k(k).view(b, nk, self.heads, self.head_dim).transpose(1, 2)
        vh = self.v(v).view(b, nk, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(qh @ kh.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ vh).transpose(1, 2).reshape(b, nq, c)
        return self.proj(out)


class TwoWayBlock(nn.Module):
    """Tokens attend to themselves, then to the image, then the image back."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.self_attn = CrossAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = CrossAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim)
        )
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = CrossAttention(dim, heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens, image, token_pe, image_pe):
        q = tokens + token_pe
        tokens = self.norm1(tokens + self.self_attn(q, q, tokens))
        q = tokens + token_pe
        k = image + image_pe
        tokens = self.norm2(tokens + self.cross_t2i(q, k, image))
        tokens = self.norm3(tokens + self.mlp(tokens))
        q = image + image_pe
        k = tokens + token_pe
        image = self.norm4(image + self.cross_i2t(q, k, tokens))
        return tokens, image


class TwoWayTransformer(nn.Module):
    def __init__(self, dim: int, depth: int, heads: int):
        super().__init__()
        self.blocks = nn.ModuleList(TwoWayBlock(dim, heads) for _ in range(depth))
        self.final_t2i = CrossAttention(dim, heads)
        self.final_norm = nn.LayerNorm(dim)

    def forward(self, tokens, image, token_pe, image_pe):
        for block in self.blocks:
            tokens, image = block(tokens, image, token_pe, image_pe)
        q = tokens + token_pe
        k = image + image_pe
        tokens = self.final_norm(tokens + self.final_t2i(q, k, image))
        return tokens, image


class BranchMLP(nn.Module):
    """1x1-conv MLP that specializes shared features for one output slice."""

    def __init__(self, dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(dim, dim, kernel_size=1),
            nn.GELU(),
            nn.Conv2d(dim, dim, kernel_size=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class MaskDecoder(nn.Module):
    """Predict ``num_slices`` x ``NUM_HYPOTHESES`` mask logits and per-hypothesis IoU.

    Single-slice decoders (``num_slices=1``) are used as references whose
    trained weights seed all three branches of a 3-slice decoder.
    """

    def __init__(self, config: EncoderConfig, num_slices: int = 3):
        super().__init__()
        if num_slices < 1:
            raise ConfigError("num_slices must be >= 1")
        self.config = config
        self.num_slices = num_slices
        c = config.embed_dim
        self.iou_token = nn.Embedding(1, c)
        self.mask_tokens = nn.Embedding(NUM_HYPOTHESES, c)
        self.transformer = TwoWayTransformer(c, config.decoder_depth, config.heads)
        self.branches = nn.ModuleList(BranchMLP(c) for _ in range(num_slices))
        self.upscaler = nn.Sequential(
            nn.ConvTranspose2d(c, c // 4, kernel_size=2, stride=2),
            LayerNorm2d(c // 4),
            nn.GELU(),
            nn.ConvTranspose2d(c // 4, c // 8, kernel_size=2, stride=2),
            nn.GELU(),
        )
        self.hypernets = nn.ModuleList(
            MLP(c, c, c // 8, layers=3) for _ in range(NUM_HYPOTHESES)
        )
        self.iou_head = MLP(c, c, NUM_HYPOTHESES, layers=3, sigmoid_out=True)

    def forward(self, image_embed: torch.Tensor, image_pe: torch.Tensor,
                sparse: torch.Tensor, dense: torch.Tensor,
                output_size: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
        """Decode one window.

        Args:
            image_embed: ``(B, C, g, g)`` encoder features.
            image_pe: ``(C, g, g)`` positional map for the token grid.
            sparse: ``(B, N, C)`` prompt tokens (N may be 0).
            dense: ``(B, C, g, g)`` mask-prompt features, zeros when absent.
            output_size: ``(H, W)`` of the returned logit grid.

        Returns:
            masks ``(B, H, W, num_slices, NUM_HYPOTHESES)`` logits and
            iou ``(B, NUM_HYPOTHESES)`` predictions in ``[0, 1]``.
        """
        b, c, g, _ = image_embed.shape
        output_tokens = torch.cat([self.iou_token.weight, self.mask_tokens.weight], dim=0)
        output_tokens = output_tokens[None].expand(b, -1, -1)
        tokens = torch.cat([output_tokens, sparse], dim=1)
        # learned tokens double as their own positional encoding; prompt
        # tokens already carry coordinate features
        token_pe = tokens
        src = (image_embed + dense).flatten(2).transpose(1, 2)  # (B, g*g, C)
        pe = image_pe.flatten(1).transpose(0, 1)[None].expand(b, -1, -1)
        tokens, src = self.transformer(tokens, src, token_pe, pe)
        iou_out = tokens[:, 0]
        mask_tokens_out = tokens[:, 1 : 1 + NUM_HYPOTHESES]
        shared = src.transpose(1, 2).reshape(b, c, g, g)
        hyper = torch.stack(
            [self.hypernets[j](mask_tokens_out[:, j]) for j in range(NUM_HYPOTHESES)], dim=1
        )  # (B, J, c8)
        per_slice = []
        for branch in self.branches:
            up = self.upscaler(branch(shared))  # (B, c8, 4g, 4g)
            logits = torch.einsum("bjc,bchw->bjhw", hyper, up)
            per_slice.append(logits)
        masks = torch.stack(per_slice, dim=1)  # (B, S, J, 4g, 4g)
        s, j = masks.shape[1], masks.shape[2]
        flat = masks.reshape(b, s * j, masks.shape[3], masks.shape[4])
        flat = F.interpolate(flat, size=output_size, mode="bilinear", align_corners=False)
        masks = flat.reshape(b, s, j, output_size[0], output_size[1]).permute(0, 3, 4, 1, 2)
        iou = self.iou_head(iou_out)
        return masks, iou

    def load_reference(self, reference: "MaskDecoder | dict") -> None:
        """Seed this decoder from a trained single-slice reference.

        The reference's lone branch MLP is copied into every branch here; all
        remaining weights (transformer, tokens, upscaler, hypernetworks, IoU
        head) are loaded verbatim.  Shape mismatches raise ``ConfigError``.
        """
        state = reference.state_dict() if isinstance(reference, MaskDecoder) else dict(reference)
        ref_branches = sorted({k.split(".")[1] for k in state if k.startswith("branches.")})
        if ref_branches != ["0"]:
            raise ConfigError(f"reference must have exactly one branch, found {ref_branches}")
        target = self.state_dict()
        new_state = {}
        for key, value in target.items():
            source_key = key
            if key.startswith("branches."):
                source_key = "branches.0." + key.split(".", 2)[2]
            if source_key not in state:
                raise ConfigError(f"reference is missing weight {source_key}")
            ref_value = state[source_key]
            if tuple(ref_value.shape) != tuple(value.shape):
                raise ConfigError(
                    f"{source_key}: reference shape {tuple(ref_value.shape)} "
                    f"!= target {tuple(value.shape)}"
                )
            new_state[key] = ref_value.clone()
        extra = set(state) - {
            k if not k.startswith("branches.") else "branches.0." + k.split(".", 2)[2]
            for k in target
        }
        if extra:
            raise ConfigError(f"reference has unexpected weights: {sorted(extra)[:4]}")
        self.load_state_dict(new_state)

    def permute_hypotheses(self, perm: tuple[int, int, int]) -> None:
        """Reorder hypothesis slots in place (mask tokens, hypernets, IoU rows)."""
        if sorted(perm) != list(range(NUM_HYPOTHESES)):
            raise ConfigError(f"perm must rearrange {NUM_HYPOTHESES} slots, got {perm}")
        idx = torch.as_tensor(perm, dtype=torch.long)
        with torch.no_grad():
            self.mask_tokens.weight.copy_(self.mask_tokens.weight[idx].clone())
            final = self.iou_head.layers[-1]
            final.weight.copy_(final.weight[idx].clone())
            final.bias.copy_(final.bias[idx].clone())
        reordered = [self.hypernets[i] for i in perm]
        for slot, module in enumerate(reordered):
            self.hypernets[slot] = module
