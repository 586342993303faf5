"""Masking, in-batch hard-negative sampling and the pretraining losses.

Mask counts use round-half-up: ``floor(ratio * n + 0.5)``.
"""
from __future__ import annotations

import math
from typing import Mapping, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import MASK, NON_MASKABLE
from .errors import ContractError, InputError, SamplingError

COMPONENTS = ("itm", "mlm", "mim", "pixel", "alignment", "commitment")
CODEBOOK_COMPONENTS = ("pixel", "alignment", "commitment")
# Optional InfoNCE term on the similarity space, off by default.
EXTRA_COMPONENTS = ("contrastive",)
IGNORE = -100


def mask_count(n: int, ratio: float, minimum: int = 0) -> int:
    return max(minimum, math.floor(ratio * n + 0.5))


def mask_text(token_ids, ratio: float = 0.15, rng: Optional[np.random.Generator] = None):
    """Replace a random ``max(1, round(ratio * M))`` of the M maskable tokens with [MASK].

    Special tokens ([PAD], [CLS], [SEP]) are never selected. Every selected
    token becomes [MASK]; there is no random/keep split.

    Returns:
      (masked_ids, positions, labels) where ``labels[i]`` is the original id at
      ``positions[i]``.
    """
    rng = np.random.default_rng() if rng is None else rng
    ids = np.asarray(token_ids, dtype=np.int64)
    maskable = np.flatnonzero(~np.isin(ids, NON_MASKABLE))
    if maskable.size == 0:
        raise InputError("caption has no maskable tokens")
    k = mask_count(maskable.size, ratio, minimum=1)
    positions = np.sort(rng.choice(maskable, size=k, replace=False))
    labels = ids[positions].copy()
    masked = ids.copy()
    masked[positions] = MASK
    return masked, positions, labels


def mask_visual(n: int, ratio: float = 0.75, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Uniform random subset of ``round(ratio * n)`` patch positions, sorted."""
    if n < 4:
        raise InputError(f"need at least 4 patches to mask, got {n}")
    rng = np.random.default_rng() if rng is None else rng
    return np.sort(rng.choice(n, size=mask_count(n, ratio), replace=False))


def similarity_matrix(image_cls, text_cls, image_proj=None, text_proj=None) -> torch.Tensor:
    """Cosine similarity between (optionally projected) unimodal CLS embeddings, (B, B)."""
    if image_cls.shape[0] < 2 or image_cls.shape[0] != text_cls.shape[0]:
        raise ContractError("similarity needs matching batches of size >= 2")
    if image_proj is not None:
        image_cls = image_proj(image_cls)
    if text_proj is not None:
        text_cls = text_proj(text_cls)
    return F.normalize(image_cls, dim=-1) @ F.normalize(text_cls, dim=-1).T


def _sample_rows(sim: torch.Tensor, rng) -> torch.Tensor:
    eye = torch.eye(sim.shape[0], dtype=torch.bool)
    weights = torch.softmax(sim.masked_fill(eye, float("-inf")), dim=1)
    return torch.multinomial(weights, 1, generator=rng).squeeze(1)


@torch.no_grad()
def sample_hard_negatives(sim: torch.Tensor, rng: Optional[torch.Generator] = None):
    """For every image pick a negative text, for every text a negative image.

    ``sim[i, j]`` is the similarity of image i and text j. Negatives are drawn
    from a softmax (temperature 1) over the off-diagonal entries, so more
    similar mismatches are more likely.

    Returns:
      (neg_text_for_image, neg_image_for_text), both LongTensors of length B.
    """
    if sim.dim() != 2 or sim.shape[0] != sim.shape[1]:
        raise ContractError(f"expected a square similarity matrix, got {tuple(sim.shape)}")
    if sim.shape[0] < 2:
        raise SamplingError("hard negatives need a batch of at least 2 pairs")
    sim = sim.detach().double()
    return _sample_rows(sim, rng), _sample_rows(sim.T, rng)


def itm_loss(pos_logits: torch.Tensor, neg_logits: torch.Tensor) -> torch.Tensor:
    """Mean 2-way cross-entropy over positives (label 1) and negatives (label 0)."""
    logits = torch.cat([pos_logits, neg_logits], dim=0)
    labels = torch.cat([
        torch.ones(pos_logits.shape[0], dtype=torch.long),
        torch.zeros(neg_logits.shape[0], dtype=torch.long),
    ])
    return F.cross_entropy(logits, labels)


def _masked_ce(logits, targets, mask):
    labels = torch.where(mask, targets, torch.full_like(targets, IGNORE))
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=IGNORE)


def mlm_loss(logits: torch.Tensor, labels: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Cross-entropy over masked text positions only.

    ``labels`` holds the original ids; positions outside ``mask`` (or equal to
    -100 when no mask is given) are ignored.
    """
    if mask is None:
        mask = labels != IGNORE
    return _masked_ce(logits, labels, mask)


def mim_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of K-way codeword logits against target indices, masked positions only."""
    return _masked_ce(logits, targets.detach(), mask)


def pixel_loss(pred: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-pixel mean squared error over masked patches (all patches if ``mask`` is None)."""
    sq = (pred - target) ** 2
    if mask is None:
        return sq.mean()
    m = mask[..., None].to(sq.dtype)
    return (sq * m).sum() / (m.sum() * sq.shape[-1])


def total_loss(
    components: Mapping[str, torch.Tensor],
    active,
    weights: Optional[Mapping[str, float]] = None,
) -> torch.Tensor:
    """Weighted sum of the active components; inactive ones are skipped entirely."""
    total = None
    for name in COMPONENTS + EXTRA_COMPONENTS:
        if name not in active or name not in components:
            continue
        w = 1.0 if weights is None else weights.get(name, 1.0)
        term = components[name] if w == 1.0 else w * components[name]
        total = term if total is None else total + term
    if total is None:
        ref = next(iter(components.values()), None)
        return torch.zeros((), dtype=torch.get_default_dtype() if ref is None else ref.dtype)
    return total


def info_nce(sim: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """Symmetric in-batch contrastive loss; only used when explicitly enabled."""
    labels = torch.arange(sim.shape[0])
    return 0.5 * (F.cross_entropy(sim / temperature, labels) + F.cross_entropy(sim.T / temperature, labels))
