"""Low-rank adapters bolted onto frozen linear projections."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError


def lora_forward(base_weight, down, up, x, scale: float = 1.0, bias=None):
    """``y = W x + scale * B (A x)`` for a single input or a batch.

    ``down`` is the rank-reducing matrix A of shape ``(r, in)``, ``up`` the
    rank-expanding matrix B of shape ``(out, r)``.  With B zero the adapter is
    an exact no-op, which is how adapted layers start out.
    """
    base_weight = torch.as_tensor(base_weight)
    down = torch.as_tensor(down, dtype=base_weight.dtype)
    up = torch.as_tensor(up, dtype=base_weight.dtype)
    x = torch.as_tensor(x, dtype=base_weight.dtype)
    if down.shape[0] != up.shape[1]:
        raise ConfigError(f"adapter rank mismatch: A is {tuple(down.shape)}, B is {tuple(up.shape)}")
    if down.shape[1] != base_weight.shape[1] or up.shape[0] != base_weight.shape[0]:
        raise ConfigError(
            f"adapter {tuple(up.shape)}x{tuple(down.shape)} does not fit base {tuple(base_weight.shape)}"
        )
    y = F.linear(x, base_weight, bias)
    return y + scale * F.linear(F.linear(x, down), up)


class LoraLinear(nn.Module):
    """A frozen ``nn.Linear`` with a trainable low-rank residual.

    Only ``down`` (A) and ``up`` (B) receive gradients.  B starts at zero so a
    freshly adapted layer computes exactly what the base layer did.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        if rank < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {rank}")
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.rank = rank
        self.scale = alpha / rank
        self.down = nn.Parameter(torch.empty(rank, base.in_features))
        self.up = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.down, a=5 ** 0.5)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * F.linear(F.linear(x, self.down), self.up)

    def extra_repr(self) -> str:
        return f"rank={self.rank}, scale={self.scale}"
