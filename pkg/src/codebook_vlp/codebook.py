"""Learnable visual codebook: nearest-neighbour quantization and its losses.

Two gradient paths are supported. ``hard`` mode snaps every vector to its
nearest codeword and passes upstream gradients straight through to the
encoder output. ``gumbel`` mode replaces the one-hot selection with a
tempered softmax over negative squared distances (optionally perturbed with
Gumbel noise), which is differentiable with respect to both the encoder
output and the codewords.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .errors import ConfigError, ContractError, InputError, MaintenanceError

MODES = ("hard", "gumbel")


class Codebook(nn.Module):
    """K codewords of dimension ``code_dim`` stored as a (K, code_dim) parameter."""

    def __init__(self, num_codes: int, code_dim: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        if num_codes < 2 or code_dim < 1:
            raise ConfigError(f"codebook needs K >= 2 and d_c >= 1, got K={num_codes}, d_c={code_dim}")
        bound = 1.0 / num_codes
        init = torch.empty(num_codes, code_dim).uniform_(-bound, bound, generator=generator)
        self.vectors = nn.Parameter(init)

    @property
    def num_codes(self) -> int:
        return self.vectors.shape[0]

    @property
    def code_dim(self) -> int:
        return self.vectors.shape[1]

    def extra_repr(self) -> str:
        return f"K={self.num_codes}, d_c={self.code_dim}"


@dataclass
class QuantizationResult:
    """Output of :func:`quantize_sequence`.

    ``quantized`` is what downstream modules consume. ``codewords`` has the
    same forward value but only carries gradient into the codebook; the VQ
    alignment/commitment terms are built on it so that their stop-gradients
    are exact in both modes.
    """

    indices: torch.Tensor
    quantized: torch.Tensor
    codewords: torch.Tensor
    soft_assignments: Optional[torch.Tensor]
    mode: str


class _StraightThrough(torch.autograd.Function):
    # Forward emits the codewords bit-for-bit; backward hands the upstream
    # gradient to the encoder output unchanged and nothing to the codebook.

    @staticmethod
    def forward(ctx, seq, codewords):
        return codewords.clone()

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def _vectors(cb) -> torch.Tensor:
    return cb.vectors if isinstance(cb, Codebook) else cb


def squared_distances(seq: torch.Tensor, vectors: torch.Tensor) -> torch.Tensor:
    """Exact pairwise squared L2 distances, shape (..., K).

    Computed from explicit differences rather than the expanded dot-product
    form so that equidistant codewords produce bitwise-equal distances.
    """
    diff = seq.unsqueeze(-2) - vectors
    return (diff * diff).sum(-1)


def nearest_codeword(v: torch.Tensor, cb) -> tuple[int, torch.Tensor]:
    """Return ``(index, codeword)`` of the codeword closest to ``v``.

    Ties resolve to the lowest index.
    """
    vectors = _vectors(cb)
    if v.dim() != 1 or v.shape[0] != vectors.shape[1]:
        raise ContractError(f"expected a vector of length {vectors.shape[1]}, got shape {tuple(v.shape)}")
    if not torch.isfinite(v).all():
        raise InputError("vector to quantize contains non-finite values")
    dist = squared_distances(v, vectors)
    index = int(torch.argmin(dist))
    return index, vectors[index]


def gumbel_assign(
    logits: torch.Tensor,
    temperature: float,
    rng: Optional[torch.Generator] = None,
    noise_enabled: bool = True,
) -> torch.Tensor:
    """Row-wise ``softmax((logits + g) / temperature)`` with g ~ Gumbel(0, 1)."""
    return _gumbel_assign(logits, temperature, rng, noise_enabled)[0]


def _gumbel_assign(logits, temperature, rng, noise_enabled):
    if not temperature > 0:
        raise ConfigError(f"gumbel temperature must be positive, got {temperature}")
    if not torch.isfinite(logits).all():
        raise InputError("gumbel logits contain non-finite values")
    perturbed = logits
    if noise_enabled:
        exp = torch.empty_like(logits).exponential_(generator=rng)
        perturbed = logits - exp.log()
    return torch.softmax(perturbed / temperature, dim=-1), perturbed


def quantize_sequence(
    seq: torch.Tensor,
    cb,
    mode: str = "hard",
    temperature: float = 1.0,
    rng: Optional[torch.Generator] = None,
    noise_enabled: bool = True,
) -> QuantizationResult:
    """Quantize every row of ``seq`` (shape (..., d_c)) against the codebook.

    Args:
      seq: encoder outputs projected to the code dimension.
      cb: a :class:`Codebook` or a raw (K, d_c) tensor.
      mode: ``"hard"`` (nearest neighbour, straight-through gradient) or
        ``"gumbel"`` (soft assignment).
      temperature: softmax temperature, gumbel mode only.
      rng: generator for the Gumbel noise.
      noise_enabled: set False for deterministic soft assignments.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown quantization mode {mode!r}")
    vectors = _vectors(cb)
    if seq.shape[-1] != vectors.shape[1]:
        raise ContractError(f"sequence width {seq.shape[-1]} != code dim {vectors.shape[1]}")
    if not torch.isfinite(seq).all():
        raise InputError("sequence to quantize contains non-finite values")

    if mode == "gumbel" and not temperature > 0:
        raise ConfigError(f"gumbel temperature must be positive, got {temperature}")

    dist = squared_distances(seq, vectors)
    if mode == "hard":
        indices = torch.argmin(dist, dim=-1)
        codewords = vectors[indices]
        quantized = _StraightThrough.apply(seq, codewords)
        return QuantizationResult(indices, quantized, codewords, None, mode)

    soft, perturbed = _gumbel_assign(-dist, temperature, rng, noise_enabled)
    # argmax of the softmax argument equals argmax of the softmax, without
    # the risk of two saturated probabilities rounding to the same value.
    indices = torch.argmax(perturbed, dim=-1)
    quantized = soft @ vectors
    codewords = soft.detach() @ vectors
    return QuantizationResult(indices, quantized, codewords, soft, mode)


def vq_losses(encoder_out: torch.Tensor, result: QuantizationResult, beta: float = 0.25):
    """Codebook alignment and commitment terms.

    alignment  = mean_i ||sg[e_i] - c_i||^2   (moves codewords only)
    commitment = beta * mean_i ||e_i - sg[c_i]||^2   (moves the encoder only)
    """
    if encoder_out.shape != result.codewords.shape:
        raise ContractError(
            f"encoder output {tuple(encoder_out.shape)} and quantized {tuple(result.codewords.shape)} differ"
        )
    if beta < 0:
        raise ConfigError(f"beta must be non-negative, got {beta}")
    alignment = ((encoder_out.detach() - result.codewords) ** 2).sum(-1).mean()
    commitment = beta * ((encoder_out - result.codewords.detach()) ** 2).sum(-1).mean()
    return alignment, commitment


def usage_counts(indices: torch.Tensor, num_codes: int) -> torch.Tensor:
    return torch.bincount(indices.reshape(-1), minlength=num_codes)


def dead_codes(counts: torch.Tensor, threshold: int = 1) -> torch.Tensor:
    return torch.nonzero(counts < threshold).flatten()


@torch.no_grad()
def refresh_dead_codes(
    cb: Codebook,
    counts: torch.Tensor,
    threshold: int,
    donor_batch: torch.Tensor,
    rng: Optional[torch.Generator] = None,
    noise_scale: float = 0.01,
) -> Codebook:
    """Re-seed codewords used fewer than ``threshold`` times, in place.

    Each dead codeword is replaced by a randomly chosen donor vector plus
    noise drawn uniformly from [-noise_scale, noise_scale] per coordinate, so
    the new row lies within ``noise_scale * sqrt(d_c)`` of its donor. Donors
    are drawn without replacement while enough are available.
    """
    dead = dead_codes(counts, threshold)
    if dead.numel() == 0:
        return cb
    donors = donor_batch.reshape(-1, cb.code_dim)
    if donors.shape[0] == 0:
        raise MaintenanceError(f"{dead.numel()} dead codewords but the donor batch is empty")
    n_dead, n_donors = dead.numel(), donors.shape[0]
    if n_dead <= n_donors:
        pick = torch.randperm(n_donors, generator=rng)[:n_dead]
    else:
        pick = torch.randint(n_donors, (n_dead,), generator=rng)
    noise = (torch.rand(n_dead, cb.code_dim, generator=rng, dtype=donors.dtype) * 2 - 1) * noise_scale
    cb.vectors[dead] = (donors[pick] + noise).to(cb.vectors.dtype)
    return cb

