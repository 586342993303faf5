"""Shared cross-attention fusion trunk and the four task heads.

The same trunk runs in two directions: text tokens querying visual tokens
(image-text matching, masked language modeling) and quantized visual tokens
querying text tokens (masked image modeling, pixel reconstruction). Only the
heads are direction specific.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .encoders import FeedForward, MultiHeadAttention, init_weights
from .errors import ContractError

TEXT_QUERY = "text_query_visual_kv"
VISUAL_QUERY = "visual_query_text_kv"


@dataclass
class FusedSequence:
    tokens: torch.Tensor  # (B, L, d); position 0 is the query stream's CLS
    direction: str


class FusionLayer(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, x, kv, kv_pad_mask=None, query_pad_mask=None, self_maps=None, cross_maps=None):
        x = x + self.self_attn(self.norm1(x), key_pad_mask=query_pad_mask, maps=self_maps)
        x = x + self.cross_attn(self.norm2(x), context=kv, key_pad_mask=kv_pad_mask, maps=cross_maps)
        return x + self.mlp(self.norm3(x))


class FusionEncoder(nn.Module):
    """Stack of self-attn -> cross-attn -> FFN layers, registered as ``layer{i}``."""

    def __init__(self, dim=64, layers=4, heads=4, mlp_ratio=4):
        super().__init__()
        self.dim = dim
        self.num_layers = layers
        for i in range(layers):
            self.add_module(f"layer{i}", FusionLayer(dim, heads, mlp_ratio))
        self.norm = nn.LayerNorm(dim)
        self.apply(init_weights)

    def layers(self):
        return [getattr(self, f"layer{i}") for i in range(self.num_layers)]

    def forward(
        self,
        query: torch.Tensor,
        kv: torch.Tensor,
        kv_pad_mask: Optional[torch.Tensor] = None,
        query_pad_mask: Optional[torch.Tensor] = None,
        self_maps: Optional[list] = None,
        cross_maps: Optional[list] = None,
    ) -> torch.Tensor:
        if query.shape[-1] != self.dim or kv.shape[-1] != self.dim:
            raise ContractError(f"fusion expects width {self.dim}, got query {query.shape[-1]}, kv {kv.shape[-1]}")
        x = query
        for layer in self.layers():
            x = layer(x, kv, kv_pad_mask, query_pad_mask, self_maps, cross_maps)
        return self.norm(x)


def cross_fuse(
    fusion: FusionEncoder,
    query_seq: torch.Tensor,
    kv_seq: torch.Tensor,
    kv_pad_mask: Optional[torch.Tensor] = None,
    direction: str = TEXT_QUERY,
    query_pad_mask: Optional[torch.Tensor] = None,
    cross_maps: Optional[list] = None,
) -> FusedSequence:
    if direction not in (TEXT_QUERY, VISUAL_QUERY):
        raise ContractError(f"unknown fusion direction {direction!r}")
    tokens = fusion(query_seq, kv_seq, kv_pad_mask, query_pad_mask, cross_maps=cross_maps)
    return FusedSequence(tokens=tokens, direction=direction)


class PixelHead(nn.Module):
    def __init__(self, dim: int, patch_dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, patch_dim)

    def forward(self, x):
        return torch.sigmoid(self.proj(x))


class Heads(nn.ModuleDict):
    def __init__(self, dim: int, vocab_size: int, num_codes: int, patch_dim: int):
        super().__init__({
            "itm": nn.Linear(dim, 2),
            "mlm": nn.Linear(dim, vocab_size),
            "mim": nn.Linear(dim, num_codes),
            "pixel": PixelHead(dim, patch_dim),
        })
        self.apply(init_weights)
        # matching starts undecided: every pair scores exactly 0.5
        nn.init.zeros_(self["itm"].weight)
        nn.init.zeros_(self["itm"].bias)
        self.dim = dim

    def _check(self, x):
        if x.shape[-1] != self.dim:
            raise ContractError(f"head input width {x.shape[-1]} != {self.dim}")
        return x

    def itm_logits(self, fused_cls):
        return self["itm"](self._check(fused_cls))

    def mlm_logits(self, fused_text_tokens):
        return self["mlm"](self._check(fused_text_tokens))

    def mim_logits(self, fused_visual_tokens):
        return self["mim"](self._check(fused_visual_tokens))

    def pixel_values(self, fused_visual_tokens):
        return self["pixel"](self._check(fused_visual_tokens))
