"""Visual complementary fusion: adapter alignment plus stacked residual fusion blocks."""

from __future__ import annotations

import torch
from torch import nn

from . import numerics as nx


class Adapter(nn.Module):
    """``down(GELU(up(x)))`` with a 2x channel expansion."""

    def __init__(self, dim: int, zero_init: bool = False):
        super().__init__()
        self.dim = dim
        self.up = nn.Linear(dim, 2 * dim)
        self.down = nn.Linear(2 * dim, dim)
        if zero_init:
            nn.init.zeros_(self.down.weight)
            nn.init.zeros_(self.down.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise nx.ShapeError("adapter", x.shape, (self.dim,))
        return self.down(nx.gelu(self.up(x)))


class SelfAttention(nn.Module):
    """Multi-head self-attention with its own residual + LayerNorm."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = nx.MultiHeadAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, mask=None):
        return self.norm(x + self.attn(x, x, x, mask))


class FusionBlock(nn.Module):
    def __init__(self, dim: int, heads: int = 2, zero_init: bool = True):
        super().__init__()
        self.dim = dim
        self.sa_content = SelfAttention(dim, heads)
        self.sa_visual = SelfAttention(dim, heads)
        self.cross = nx.MultiHeadAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)
        self.adapter = Adapter(dim, zero_init=zero_init)

    def fuse(self, cf_prev: torch.Tensor, vf_prime: torch.Tensor, visual_mask=None) -> torch.Tensor:
        """The attention-fused intermediate ``Z`` (content-length rows)."""
        if cf_prev.shape[-1] != self.dim or vf_prime.shape[-1] != self.dim:
            raise nx.ShapeError("fusion_block", cf_prev.shape, vf_prime.shape)
        q = self.sa_content(cf_prev)
        kv = self.sa_visual(vf_prime, visual_mask)
        cross_mask = None
        if visual_mask is not None:
            # visual_mask is (B, m, m) over visual rows; queries see every valid key
            cross_mask = visual_mask[:, :1, :].expand(-1, cf_prev.shape[-2], -1)
        return self.norm(self.cross(q, kv, kv, cross_mask))

    def forward(self, cf_prev, vf_prime, visual_mask=None):
        return cf_prev + self.adapter(self.fuse(cf_prev, vf_prime, visual_mask))


class VCFM(nn.Module):
    """Align VF once with an adapter, then refine CF through ``K`` fusion blocks."""

    def __init__(self, dim: int, blocks: int = 2, heads: int = 2, zero_init: bool = True):
        super().__init__()
        if blocks < 0:
            raise ValueError("block count must be >= 0")
        self.visual_adapter = Adapter(dim)
        self.blocks = nn.ModuleList(FusionBlock(dim, heads, zero_init) for _ in range(blocks))
        self.adapter_calls = 0

    def forward(self, cf: torch.Tensor, vf: torch.Tensor, visual_mask=None) -> torch.Tensor:
        if not self.blocks:
            return cf
        vf_prime = self.visual_adapter(vf)
        self.adapter_calls += 1
        for block in self.blocks:
            cf = block(cf, vf_prime, visual_mask)
        return cf
