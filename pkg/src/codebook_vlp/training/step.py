"""Batch masking, the multi-objective forward pass and a single optimizer step."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from ..codebook import vq_losses
from ..encoders import patchify_batch
from ..errors import ContractError, NumericalError
from ..fusion import TEXT_QUERY, VISUAL_QUERY
from ..objectives import (
    IGNORE,
    info_nce,
    itm_loss,
    mask_text,
    mask_visual,
    mim_loss,
    mlm_loss,
    pixel_loss,
    sample_hard_negatives,
    similarity_matrix,
    total_loss,
)
from .schedule import ScheduleState

# Which fusion direction feeds each objective.
DIRECTIONS = {"itm": TEXT_QUERY, "mlm": TEXT_QUERY, "mim": VISUAL_QUERY, "pixel": VISUAL_QUERY}
QUANTIZED_OBJECTIVES = frozenset({"mim", "pixel", "alignment", "commitment"})


@dataclass
class MaskedBatch:
    images: torch.Tensor       # (B, H, W, C) in [0, 1]
    patches: torch.Tensor      # (B, N, P*P*C)
    text_ids: torch.Tensor     # (B, L)
    masked_ids: torch.Tensor   # (B, L), [MASK] at text_mask
    text_mask: torch.Tensor    # (B, L) bool
    mlm_labels: torch.Tensor   # (B, L) original ids at masked positions, -100 elsewhere
    visual_mask: torch.Tensor  # (B, N) bool

    def __len__(self) -> int:
        return self.text_ids.shape[0]


def make_batch(images: torch.Tensor, text_ids: torch.Tensor, patch_size: int,
               rng: np.random.Generator, text_ratio: float = 0.15, visual_ratio: float = 0.75) -> MaskedBatch:
    """Mask text and patches independently for every pair."""
    b = images.shape[0]
    patches = patchify_batch(images, patch_size)
    n = patches.shape[1]
    masked_ids = text_ids.clone()
    labels = torch.full_like(text_ids, IGNORE)
    text_mask = torch.zeros_like(text_ids, dtype=torch.bool)
    visual_mask = torch.zeros(b, n, dtype=torch.bool)
    for i in range(b):
        ids_i, pos, lab = mask_text(text_ids[i].numpy(), text_ratio, rng)
        masked_ids[i] = torch.from_numpy(ids_i)
        labels[i, pos] = torch.from_numpy(lab)
        text_mask[i, pos] = True
        visual_mask[i, mask_visual(n, visual_ratio, rng)] = True
    return MaskedBatch(images, patches, text_ids, masked_ids, text_mask, labels, visual_mask)


@dataclass
class LossOutput:
    components: dict
    directions: dict = field(default_factory=dict)
    hard_indices: Optional[torch.Tensor] = None
    encoder_out: Optional[torch.Tensor] = None
    mim_targets: Optional[torch.Tensor] = None
    negatives: Optional[tuple] = None


def _clone_generator(rng: Optional[torch.Generator]) -> Optional[torch.Generator]:
    if rng is None:
        return None
    g = torch.Generator()
    g.set_state(rng.get_state())
    return g


def forward_losses(model, batch: MaskedBatch, state: ScheduleState, cfg,
                   rng: Optional[torch.Generator] = None, noise: bool = True) -> LossOutput:
    """Compute every active loss component for one batch.

    Inactive components are not computed at all, so they carry neither value
    nor gradient.
    """
    active = state.active_objectives
    dtype = model.dtype
    patches = batch.patches.to(dtype)
    out = LossOutput(components={})
    comps = out.components

    v_full = model.encode_images(patches)
    t_emb, t_pad = model.encode_texts(batch.text_ids)
    b = len(batch)

    e_full = None
    if active & QUANTIZED_OBJECTIVES:
        e_full = model.code_space(v_full[:, 1:])
        out.encoder_out = e_full.detach()
        out.hard_indices = model.hard_indices(e_full)
        if {"alignment", "commitment"} & active:
            q_full = model.quantize(e_full, cfg.quantize_mode, state.gumbel_temperature, rng, noise)
            alignment, commitment = vq_losses(e_full, q_full, cfg.beta)
            if "alignment" in active:
                comps["alignment"] = alignment
            if "commitment" in active:
                comps["commitment"] = commitment

    if "itm" in active or "contrastive" in active:
        sim = similarity_matrix(v_full[:, 0], t_emb[:, 0], model.image_proj, model.text_proj)
        if "contrastive" in active:
            comps["contrastive"] = info_nce(sim)
        if "itm" in active:
            neg_text, neg_image = sample_hard_negatives(sim, rng)
            out.negatives = (neg_text, neg_image)
            text_q = torch.cat([t_emb, t_emb[neg_text], t_emb])
            text_pad = torch.cat([t_pad, t_pad[neg_text], t_pad])
            vis_kv = torch.cat([v_full, v_full, v_full[neg_image]])
            logits = model.itm_logits(text_q, text_pad, vis_kv)
            comps["itm"] = itm_loss(logits[:b], logits[b:])
            out.directions["itm"] = TEXT_QUERY

    if "mlm" in active:
        t_masked, _ = model.encode_texts(batch.masked_ids, t_pad)
        fused = model.fuse_text_query(t_masked, t_pad, v_full)
        comps["mlm"] = mlm_loss(model.heads.mlm_logits(fused.tokens), batch.mlm_labels, batch.text_mask)
        out.directions["mlm"] = fused.direction

    if {"pixel", "mim"} & active:
        mask = batch.visual_mask
        v_masked = model.encode_images(patches, mask)
        e_masked = model.code_space(v_masked[:, 1:])
        tau = state.gumbel_temperature
        shared = _clone_generator(rng)
        fused_pix = None
        if "pixel" in active:
            q = model.quantize(e_masked, cfg.quantize_mode, tau, rng, noise)
            fused_pix = model.fuse_visual_query(model.visual_query(v_masked, q.quantized, mask), t_emb, t_pad)
            pred = model.heads.pixel_values(fused_pix.tokens[:, 1:])
            comps["pixel"] = pixel_loss(pred, patches, None if cfg.pixel_loss_full else mask)
            out.directions["pixel"] = fused_pix.direction
        if "mim" in active:
            # Codebook gradient is frozen for this term. Under straight-through
            # quantization the pixel pass already carries none, so it is reused.
            if fused_pix is not None and cfg.quantize_mode == "hard":
                fused_mim = fused_pix
            else:
                q = model.quantize(e_masked, cfg.quantize_mode, tau, shared, noise, codebook_grad=False)
                fused_mim = model.fuse_visual_query(model.visual_query(v_masked, q.quantized, mask), t_emb, t_pad)
            out.mim_targets = out.hard_indices
            logits = model.heads.mim_logits(fused_mim.tokens[:, 1:])
            comps["mim"] = mim_loss(logits, out.mim_targets, mask)
            out.directions["mim"] = fused_mim.direction
    return out


def check_directions(directions: dict) -> None:
    for name, direction in directions.items():
        if DIRECTIONS[name] != direction:
            raise ContractError(f"{name} computed with fusion direction {direction}, expected {DIRECTIONS[name]}")


def make_optimizer(model, cfg) -> torch.optim.Optimizer:
    """AdamW; weight decay applies to weight matrices only (not biases, norms, tokens or the codebook)."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.dim() >= 2 and name != "codebook.vectors" and "embed" not in name:
            decay.append(p)
        else:
            no_decay.append(p)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.init_lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
                             eps=cfg.adam_eps, foreach=False)


def train_step(model, optimizer, batch: MaskedBatch, state: ScheduleState, cfg,
               rng: Optional[torch.Generator] = None):
    """One AdamW update on the gated total loss.

    Returns:
      (metrics, LossOutput). ``metrics`` holds every component (None when
      inactive), the total, lr, gumbel temperature and batch codebook
      utilization.
    """
    model.train()
    for group in optimizer.param_groups:
        group["lr"] = state.current_lr
    out = forward_losses(model, batch, state, cfg, rng, noise=True)
    check_directions(out.directions)
    total = total_loss(out.components, state.active_objectives, cfg.loss_weights)
    values = {k: float(v.detach()) for k, v in out.components.items()}
    if not math.isfinite(float(total.detach())):
        dump = ", ".join(f"{k}={v!r}" for k, v in values.items())
        raise NumericalError(f"non-finite loss at step {state.global_step}: {dump}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()

    metrics = {"step": state.global_step, "lr": state.current_lr, "gumbel_temperature": state.gumbel_temperature}
    for name in ("itm", "mlm", "mim", "pixel", "alignment", "commitment", "contrastive"):
        metrics[name] = values.get(name)
    metrics["total"] = float(total.detach())
    if out.hard_indices is not None:
        k = model.codebook.num_codes
        metrics["utilization"] = len(torch.unique(out.hard_indices)) / k
    else:
        metrics["utilization"] = None
    return metrics, out
