"""Patchification, tokenization and the two unimodal transformer encoders."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ContractError, InputError

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")
NON_MASKABLE = (PAD, CLS, SEP)


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------

@dataclass
class ImagePatchGrid:
    image: np.ndarray
    patch_size: int
    grid: np.ndarray  # (N, P*P*C), row-major patch order

    @property
    def num_patches(self) -> int:
        return self.grid.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        h, w = self.image.shape[:2]
        return h // self.patch_size, w // self.patch_size


def _check_divisible(h: int, w: int, p: int) -> None:
    if p <= 0 or h % p or w % p:
        raise InputError(f"image of size {h}x{w} is not divisible into {p}x{p} patches")


def patchify(image: np.ndarray, patch_size: int) -> ImagePatchGrid:
    """Split an H x W x C image into N row-major patch vectors of length P*P*C."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise InputError(f"expected an H x W x C image, got shape {image.shape}")
    h, w, c = image.shape
    _check_divisible(h, w, patch_size)
    if image.size and (np.nanmin(image) < 0 or np.nanmax(image) > 1 or not np.isfinite(image).all()):
        raise InputError("image values must lie in [0, 1]")
    p = patch_size
    grid = image.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4).reshape(-1, p * p * c)
    return ImagePatchGrid(image=image, patch_size=p, grid=grid)


def unpatchify(grid: np.ndarray, patch_size: int, height: int, width: int) -> np.ndarray:
    p = patch_size
    c = grid.shape[-1] // (p * p)
    return grid.reshape(height // p, width // p, p, p, c).transpose(0, 2, 1, 3, 4).reshape(height, width, c)


def patchify_batch(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, H, W, C) -> (B, N, P*P*C); same layout as :func:`patchify`."""
    b, h, w, c = images.shape
    _check_divisible(h, w, patch_size)
    p = patch_size
    x = images.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify_batch(patches: torch.Tensor, patch_size: int, height: int, width: int) -> torch.Tensor:
    b, n, d = patches.shape
    p = patch_size
    c = d // (p * p)
    x = patches.reshape(b, height // p, width // p, p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, height, width, c)


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

class Vocab:
    """Closed word vocabulary; index = position, specials occupy 0..4."""

    def __init__(self, words: Iterable[str]):
        tokens = list(SPECIAL_TOKENS)
        for w in words:
            if w not in tokens:
                tokens.append(w)
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def id(self, word: str) -> int:
        return self.index.get(word, UNK)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text().splitlines()
        if tuple(lines[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise InputError(f"{path}: vocabulary must start with {', '.join(SPECIAL_TOKENS)}")
        return cls(lines[len(SPECIAL_TOKENS):])


def tokenize(caption: str, vocab: Vocab, max_len: int = 16) -> list[int]:
    """Lowercase, split on whitespace, wrap in [CLS]/[SEP], pad or truncate to ``max_len``."""
    words = caption.lower().split()
    ids = [CLS] + [vocab.id(w) for w in words][: max_len - 2] + [SEP]
    return ids + [PAD] * (max_len - len(ids))


def tokenize_batch(captions: Sequence[str], vocab: Vocab, max_len: int = 16) -> torch.Tensor:
    return torch.tensor([tokenize(c, vocab, max_len) for c in captions], dtype=torch.long)


# ---------------------------------------------------------------------------
# Transformer pieces
# ---------------------------------------------------------------------------

class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention that can hand its maps to a caller-owned list."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ContractError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context=None, key_pad_mask=None, maps: Optional[list] = None):
        context = x if context is None else context
        b, lq, d = x.shape
        lk = context.shape[1]
        h, dh = self.heads, d // self.heads
        q = self.q(x).view(b, lq, h, dh).transpose(1, 2)
        k = self.k(context).view(b, lk, h, dh).transpose(1, 2)
        v = self.v(context).view(b, lk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(dh)
        if key_pad_mask is not None:
            scores = scores.masked_fill(key_pad_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        if maps is not None:
            maps.append(attn)
        out = (attn @ v).transpose(1, 2).reshape(b, lq, d)
        return self.out(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mlp_ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, x, key_pad_mask=None, maps=None):
        x = x + self.attn(self.norm1(x), key_pad_mask=key_pad_mask, maps=maps)
        return x + self.mlp(self.norm2(x))


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.normal_(module.weight, std=0.02)


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

@dataclass
class VisualSequence:
    cls: torch.Tensor
    tokens: torch.Tensor
    mask_positions: frozenset = field(default_factory=frozenset)


@dataclass
class TextSequence:
    token_ids: torch.Tensor
    embeddings: torch.Tensor
    mask_positions: frozenset = field(default_factory=frozenset)
    mlm_labels: dict = field(default_factory=dict)


class VisualEncoder(nn.Module):
    """ViT over flattened patches; masked patches become a learned [MASK] embedding
    after projection and before the transformer stack."""

    def __init__(self, image_size=32, patch_size=8, channels=3, dim=64, layers=4, heads=4, mlp_ratio=4):
        super().__init__()
        self.patch_size = patch_size
        self.num_patches = (image_size // patch_size) ** 2
        self.patch_dim = patch_size * patch_size * channels
        self.patch_proj = nn.Linear(self.patch_dim, dim)
        self.cls_token = nn.Parameter(torch.zeros(dim))
        self.mask_token = nn.Parameter(torch.zeros(dim))
        self.pos_embed = nn.Parameter(torch.zeros(self.num_patches + 1, dim))
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        self.apply(init_weights)
        for p in (self.cls_token, self.mask_token, self.pos_embed):
            nn.init.trunc_normal_(p, std=0.02)

    def forward(self, patches: torch.Tensor, mask: Optional[torch.Tensor] = None, maps: Optional[list] = None):
        """patches: (B, N, P*P*C); mask: (B, N) bool, True = masked. Returns (B, N+1, d)."""
        b, n, _ = patches.shape
        if n != self.num_patches:
            raise ContractError(f"expected {self.num_patches} patches, got {n}")
        x = self.patch_proj(patches)
        if mask is not None:
            x = torch.where(mask[..., None], self.mask_token.to(x.dtype), x)
        x = torch.cat([self.cls_token.expand(b, 1, -1), x], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x, maps=maps)
        return self.norm(x)


class TextEncoder(nn.Module):
    def __init__(self, vocab_size, max_len=16, dim=64, layers=4, heads=4, mlp_ratio=4, positional=True):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.positional = positional
        self.tok_embed = nn.Embedding(vocab_size, dim)
        self.pos_embed = nn.Parameter(torch.zeros(max_len, dim))
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        self.apply(init_weights)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, ids: torch.Tensor, pad_mask: Optional[torch.Tensor] = None, maps: Optional[list] = None):
        """ids: (B, L) token ids. ``pad_mask`` defaults to ``ids == [PAD]``."""
        if ids.dtype != torch.long or ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ContractError(f"token ids must be integers in [0, {self.vocab_size})")
        if ids.shape[1] > self.max_len:
            raise ContractError(f"sequence length {ids.shape[1]} exceeds max_len {self.max_len}")
        if pad_mask is None:
            pad_mask = ids == PAD
        x = self.tok_embed(ids)
        if self.positional:
            x = x + self.pos_embed[: ids.shape[1]]
        for blk in self.blocks:
            x = blk(x, key_pad_mask=pad_mask, maps=maps)
        return self.norm(x)


def visual_encode(encoder: VisualEncoder, grid: ImagePatchGrid, mask_positions=()) -> VisualSequence:
    """Encode a single patch grid, substituting [MASK] at ``mask_positions``."""
    positions = frozenset(int(i) for i in mask_positions)
    n = grid.num_patches
    if any(i < 0 or i >= n for i in positions):
        raise ContractError(f"mask positions must lie in [0, {n})")
    dtype = next(encoder.parameters()).dtype
    patches = torch.as_tensor(grid.grid, dtype=dtype)[None]
    mask = torch.zeros(1, n, dtype=torch.bool)
    mask[0, list(positions)] = True
    out = encoder(patches, mask)[0]
    return VisualSequence(cls=out[0], tokens=out[1:], mask_positions=positions)


def text_encode(encoder: TextEncoder, token_ids: Sequence[int]) -> TextSequence:
    ids = torch.as_tensor(list(token_ids), dtype=torch.long)[None]
    out = encoder(ids)[0]
    return TextSequence(token_ids=ids[0], embeddings=out)
