"""Codeword patch grids, masked-reconstruction triptychs and Grad-CAM word maps.

These functions return arrays; :mod:`codebook_vlp.plotting` turns them into
figures and the CLI writes both.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import patchify_batch, tokenize, unpatchify_batch
from .errors import InputError
from .evaluation import codebook_assignments
from .objectives import mask_visual

MASK_GRAY = 128


def _as_uint8(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr
    if arr.min() < 0 or arr.max() > 1:
        raise InputError("float images must lie in [0, 1]")
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def _check_image(model, image: np.ndarray) -> None:
    s = model.image_size
    if image.shape != (s, s, 3):
        raise InputError(f"model expects {s}x{s}x3 images, got {image.shape}")


def eval_quantization(cfg, step: int):
    """(mode, temperature) used outside training: the schedule's value at ``step``, no noise."""
    from .training.schedule import gumbel_temperature

    return cfg.quantize_mode, gumbel_temperature(step, cfg)


# ---------------------------------------------------------------------------
# Codeword grids
# ---------------------------------------------------------------------------

@dataclass
class CodewordGrid:
    codeword: int
    grid: np.ndarray                # (rows*P, cols*P, C) uint8, or (0, 0, C) when empty
    sources: list = field(default_factory=list)  # (image_index, patch_index) per tile
    warning: Optional[str] = None

    @property
    def count(self) -> int:
        return len(self.sources)


def tile_patches(patches: np.ndarray, patch_size: int, channels: int = 3) -> np.ndarray:
    """Row-major tiling of (n, P*P*C) patches into a near-square grid; spare tiles are black."""
    n = len(patches)
    if n == 0:
        return np.zeros((0, 0, channels), dtype=np.uint8)
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    p = patch_size
    canvas = np.zeros((rows * p, cols * p, channels), dtype=np.uint8)
    for i, patch in enumerate(patches):
        r, c = divmod(i, cols)
        canvas[r * p:(r + 1) * p, c * p:(c + 1) * p] = patch.reshape(p, p, channels)
    return canvas


def codeword_patch_grid(model, dataset, codeword_ids: Sequence[int], max_patches: int = 64,
                        seed: int = 0) -> dict[int, CodewordGrid]:
    """Group raw pixel patches by the codeword their encoded patch quantizes to.

    Patches are collected in dataset order; when a codeword has more than
    ``max_patches`` assignments a seeded subset (kept in dataset order) is shown.
    """
    k = model.codebook.num_codes
    bad = [c for c in codeword_ids if not 0 <= int(c) < k]
    if bad:
        raise InputError(f"codeword ids out of range [0, {k}): {bad}")
    if max_patches < 1:
        raise InputError("max_patches must be positive")
    images = torch.from_numpy(dataset.images)
    idx = codebook_assignments(model, images.to(model.dtype) / 255.0).numpy()
    raw = patchify_batch(images, model.patch_size).numpy()  # uint8 patches
    rng = np.random.default_rng(seed)
    grids = {}
    for code in codeword_ids:
        code = int(code)
        img_i, patch_i = np.nonzero(idx == code)
        order = np.arange(len(img_i))
        if len(order) > max_patches:
            order = np.sort(rng.choice(len(order), size=max_patches, replace=False))
        sources = [(int(img_i[j]), int(patch_i[j])) for j in order]
        tiles = np.stack([raw[a, b] for a, b in sources]) if sources else np.zeros((0, raw.shape[-1]), np.uint8)
        grid = tile_patches(tiles, model.patch_size, dataset.images.shape[-1])
        warning = None if sources else f"codeword {code} has no assigned patches"
        grids[code] = CodewordGrid(code, grid, sources, warning)
    return grids


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------

@dataclass
class Triptych:
    original: np.ndarray
    masked_view: np.ndarray
    reconstruction: np.ndarray
    mask_positions: np.ndarray


@torch.no_grad()
def reconstruct_triptych(model, image, mask_seed: int, cfg, step: int, vocab,
                         caption: Optional[str] = None) -> Triptych:
    """Mask ``visual_mask_ratio`` of the patches and decode them with the pixel head.

    The reconstruction keeps the original pixels at visible patches and shows
    the pixel head's prediction at masked ones. Decoding is conditioned on
    ``caption`` (an empty caption when None).
    """
    model.eval()
    original = _as_uint8(image)
    _check_image(model, original)
    p, s = model.patch_size, model.image_size
    x = torch.from_numpy(original.copy())[None].to(model.dtype) / 255.0
    patches = patchify_batch(x, p)
    n = patches.shape[1]
    positions = mask_visual(n, cfg.visual_mask_ratio, np.random.default_rng(mask_seed))
    mask = torch.zeros(1, n, dtype=torch.bool)
    mask[0, positions] = True

    mode, tau = eval_quantization(cfg, step)
    v = model.encode_images(patches, mask)
    q = model.quantize(model.code_space(v[:, 1:]), mode, tau, noise=False)
    ids = torch.tensor([tokenize(caption or "", vocab, cfg.text_max_len)])
    t, pad = model.encode_texts(ids)
    fused = model.fuse_visual_query(model.visual_query(v, q.quantized, mask), t, pad)
    pred = model.heads.pixel_values(fused.tokens[:, 1:])
    pred_img = unpatchify_batch(pred, p, s, s)[0].numpy()
    pred_u8 = np.clip(np.rint(pred_img * 255.0), 0, 255).astype(np.uint8)

    pixel_mask = unpatchify_batch(mask[..., None].expand(1, n, p * p * 3).to(torch.uint8), p, s, s)[0].numpy() > 0
    masked_view = np.where(pixel_mask, np.uint8(MASK_GRAY), original)
    reconstruction = np.where(pixel_mask, pred_u8, original)
    return Triptych(original, masked_view, reconstruction, positions)


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------

def gradcam_from_attention(attn: torch.Tensor, grad: torch.Tensor, grid_hw, out_hw,
                           upsample: str = "bilinear") -> np.ndarray:
    """Combine one query row of attention maps with their gradients.

    Args:
      attn, grad: (heads, N) attention weights over the N patch keys and the
        gradient of the target score with respect to them.
      grid_hw: patch grid shape (h, w) with h * w = N.
      out_hw: output heatmap shape.

    Returns:
      Non-negative (H, W) map scaled so its maximum is 1 (all-zero maps stay zero).
    """
    cam = torch.relu(grad * attn).mean(0).reshape(1, 1, *grid_hw)
    if upsample == "bilinear":
        cam = F.interpolate(cam, size=tuple(out_hw), mode="bilinear", align_corners=False)
    elif upsample == "nearest":
        cam = F.interpolate(cam, size=tuple(out_hw), mode="nearest")
    else:
        raise InputError(f"unknown upsampling mode {upsample!r}")
    cam = cam[0, 0].clamp_min(0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam.detach().double().numpy()


def gradcam_word_heatmap(model, image, caption: str, word_index: int, vocab, max_len: int = 16,
                         upsample: str = "bilinear") -> np.ndarray:
    """Grad-CAM of the matching logit over the last fusion layer's cross-attention
    from the chosen caption word to the image patches."""
    words = caption.lower().split()
    if not 0 <= word_index < min(len(words), max_len - 2):
        raise InputError(f"word index {word_index} outside caption of {len(words)} words")
    original = _as_uint8(image)
    _check_image(model, original)
    model.eval()
    x = torch.from_numpy(original.copy())[None].to(model.dtype) / 255.0
    ids = torch.tensor([tokenize(caption, vocab, max_len)])
    with torch.enable_grad():
        v = model.encode_images(model.patches(x))
        t, pad = model.encode_texts(ids)
        maps: list = []
        logits = model.itm_logits(t, pad, v, cross_maps=maps)
        last = maps[-1]  # (1, heads, L_text, N + 1)
        (grad,) = torch.autograd.grad(logits[0, 1], last)
    row = word_index + 1  # skip [CLS]
    s, p = model.image_size, model.patch_size
    return gradcam_from_attention(last[0, :, row, 1:].detach(), grad[0, :, row, 1:], (s // p, s // p), (s, s), upsample)
