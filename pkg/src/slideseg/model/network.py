"""Full promptable segmenter: encoder + prompt encoder + mask decoder."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from ..errors import InvalidInputError
from ..prompts import Prompt
from .decoder import NUM_HYPOTHESES, MaskDecoder
from .encoder import EncoderConfig, ImageEncoder
from .prompt_encoder import PromptEncoder


class PromptableSegmenter(nn.Module):
    """Segment a 3-slice window from point/box/mask prompts on the middle slice.

    ``forward`` returns logits ``(B, H, W, S, 3)`` — one mask per (slice,
    hypothesis) pair — and predicted IoUs ``(B, 3)``.  The image encoder is a
    frozen ViT with low-rank adapters; the prompt encoder and decoder train in
    full.
    """

    def __init__(self, config: EncoderConfig, num_slices: int = 3):
        super().__init__()
        self.config = config
        self.num_slices = num_slices
        self.encoder = ImageEncoder(config)
        self.prompt_encoder = PromptEncoder(config)
        self.decoder = MaskDecoder(config, num_slices=num_slices)

    # -- sub-stages -------------------------------------------------------

    def encode_image(self, pixels: torch.Tensor) -> torch.Tensor:
        """``(B, 3, S, S)`` pixels in display range [0, 255] -> features."""
        if pixels.ndim != 4:
            raise InvalidInputError(f"expected (B, 3, H, W), got {tuple(pixels.shape)}")
        return self.encoder(pixels / 255.0)

    def encode_prompts(self, prompt: Prompt | None):
        return self.prompt_encoder.encode(prompt)

    def decode_masks(self, image_embed: torch.Tensor, sparse: torch.Tensor,
                     dense: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        image_pe = self.prompt_encoder.grid_pe(self.config.grid_size)
        size = (self.config.image_size, self.config.image_size)
        return self.decoder(image_embed, image_pe, sparse, dense, size)

    # -- whole window -----------------------------------------------------

    def forward(self, pixels: torch.Tensor, prompts: list[Prompt | None]):
        """Run a batch of windows, one prompt per window.

        The encoder runs batched; decoding loops over windows because prompts
        have ragged token counts.  Batch grouping therefore cannot change any
        individual result.
        """
        if len(prompts) != pixels.shape[0]:
            raise InvalidInputError(f"{pixels.shape[0]} windows but {len(prompts)} prompts")
        embed = self.encode_image(pixels)
        masks, ious = [], []
        for i, prompt in enumerate(prompts):
            sparse, dense = self.encode_prompts(prompt)
            m, u = self.decode_masks(embed[i : i + 1], sparse[None], dense[None])
            masks.append(m[0])
            ious.append(u[0])
        return torch.stack(masks), torch.stack(ious)

    # -- parameter partition ----------------------------------------------

    def trainable_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def frozen_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if not p.requires_grad]

    def init_from_reference(self, reference: "PromptableSegmenter | MaskDecoder | dict") -> None:
        """Adopt decoder weights from a single-slice reference model."""
        if isinstance(reference, PromptableSegmenter):
            reference = reference.decoder
        self.decoder.load_reference(reference)


def window_to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """``(H, W, 3)`` numpy window -> ``(3, H, W)`` float tensor."""
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInputError(f"expected (H, W, 3) window, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def create_model(config: EncoderConfig | None = None, seed: int = 0,
                 num_slices: int = 3) -> PromptableSegmenter:
    """Deterministically initialize a model from a seed."""
    config = config or EncoderConfig()
    generator_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = PromptableSegmenter(config, num_slices=num_slices)
    finally:
        torch.random.set_rng_state(generator_state)
    return model
