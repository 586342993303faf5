"""The full pretraining model: two unimodal encoders, codebook, fusion trunk, heads."""
from __future__ import annotations

from typing import Optional

import torch
from torch import nn
from torch.nn import functional as F

from .codebook import Codebook, QuantizationResult, quantize_sequence, squared_distances
from .encoders import PAD, TextEncoder, VisualEncoder, init_weights, patchify_batch
from .fusion import TEXT_QUERY, VISUAL_QUERY, FusionEncoder, Heads, cross_fuse

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CodebookVLP(nn.Module):
    def __init__(self, cfg, vocab_size: int):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.image_size = cfg.image_size
        d = cfg.dim
        self.visual = VisualEncoder(cfg.image_size, cfg.patch_size, cfg.channels, d,
                                    cfg.vision_layers, cfg.heads, cfg.mlp_ratio)
        self.text = TextEncoder(vocab_size, cfg.text_max_len, d, cfg.text_layers, cfg.heads, cfg.mlp_ratio)
        # The quantizer reads the trunk through its own projection. With
        # code_detach the commitment pull stops at that projection, so it
        # cannot shrink the features that matching and fusion consume; with
        # code_norm the code vectors sit on the unit sphere, so the projection
        # cannot shrink either.
        if cfg.code_projection or cfg.code_dim != d:
            self.to_code, self.from_code = nn.Linear(d, cfg.code_dim), nn.Linear(cfg.code_dim, d)
            self.to_code.apply(init_weights)
            self.from_code.apply(init_weights)
        else:
            self.to_code, self.from_code = nn.Identity(), nn.Identity()
        self.code_detach = cfg.code_detach
        self.code_norm = cfg.code_norm
        self.codebook = Codebook(cfg.codebook_size, cfg.code_dim)
        self.fusion = FusionEncoder(d, cfg.fusion_layers, cfg.heads, cfg.mlp_ratio)
        self.heads = Heads(d, vocab_size, cfg.codebook_size, self.visual.patch_dim)
        self.image_proj = nn.Linear(d, cfg.sim_dim)
        self.text_proj = nn.Linear(d, cfg.sim_dim)

    @property
    def dtype(self) -> torch.dtype:
        return self.codebook.vectors.dtype

    # -- unimodal ---------------------------------------------------------

    def patches(self, images: torch.Tensor) -> torch.Tensor:
        return patchify_batch(images.to(self.dtype), self.patch_size)

    def encode_images(self, patches, mask=None, maps=None):
        return self.visual(patches, mask, maps=maps)

    def encode_texts(self, ids, pad_mask=None):
        if pad_mask is None:
            pad_mask = ids == PAD
        return self.text(ids, pad_mask), pad_mask

    def code_space(self, visual_tokens):
        """Patch embeddings (without CLS) mapped into the codebook dimension."""
        if self.code_detach:
            visual_tokens = visual_tokens.detach()
        e = self.to_code(visual_tokens)
        return F.normalize(e, dim=-1) if self.code_norm else e

    def quantize(self, encoder_out, mode="hard", temperature=1.0, rng=None, noise=False,
                 codebook_grad=True) -> QuantizationResult:
        vectors = self.codebook.vectors if codebook_grad else self.codebook.vectors.detach()
        return quantize_sequence(encoder_out, vectors, mode, temperature, rng, noise)

    @torch.no_grad()
    def hard_indices(self, encoder_out) -> torch.Tensor:
        return torch.argmin(squared_distances(encoder_out.detach(), self.codebook.vectors.detach()), dim=-1)

    # -- fusion -----------------------------------------------------------

    def fuse_text_query(self, text_emb, text_pad, visual_emb, cross_maps=None):
        return cross_fuse(self.fusion, text_emb, visual_emb, None, TEXT_QUERY,
                          query_pad_mask=text_pad, cross_maps=cross_maps)

    def visual_query(self, visual_emb, quantized, mask):
        """CLS + quantized embeddings at visible positions, encoder outputs at masked ones."""
        tokens = visual_emb[:, 1:]
        if mask is not None:
            tokens = torch.where(mask[..., None], tokens, self.from_code(quantized))
        else:
            tokens = self.from_code(quantized)
        return torch.cat([visual_emb[:, :1], tokens], dim=1)

    def fuse_visual_query(self, query, text_emb, text_pad, cross_maps=None):
        return cross_fuse(self.fusion, query, text_emb, text_pad, VISUAL_QUERY, cross_maps=cross_maps)

    def itm_logits(self, text_emb, text_pad, visual_emb, cross_maps=None):
        fused = self.fuse_text_query(text_emb, text_pad, visual_emb, cross_maps)
        return self.heads.itm_logits(fused.tokens[:, 0])


def build_model(cfg, vocab_size: int) -> CodebookVLP:
    """Construct a model whose initial weights depend only on ``cfg.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = CodebookVLP(cfg, vocab_size)
    return model.to(DTYPES[cfg.dtype])
