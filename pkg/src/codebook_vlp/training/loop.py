"""Training orchestration.

All randomness is derived from ``(cfg.seed, step)`` or ``(cfg.seed, epoch)``,
so a run resumed from a checkpoint continues bit-for-bit like the original.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from ..codebook import dead_codes, refresh_dead_codes, usage_counts
from ..encoders import Vocab, tokenize_batch
from ..model import build_model
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, save_config
from .data import PairedDataset, load_dataset, synthetic_splits, synthetic_vocab
from .schedule import schedule_at
from .step import QUANTIZED_OBJECTIVES, make_batch, make_optimizer, train_step

log = logging.getLogger(__name__)

# Stream tags keep the per-purpose generators independent.
_SHUFFLE, _MASK, _NOISE, _REFRESH = 11, 12, 13, 14


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def torch_rng(*keys: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(*keys))


def load_splits(cfg: TrainConfig):
    """(train, heldout, vocab) from ``cfg.data_dir`` or the synthetic generator."""
    if cfg.data_dir:
        train = load_dataset(cfg.data_dir, "train")
        heldout = load_dataset(cfg.data_dir, "heldout")
        vocab_path = Path(cfg.data_dir) / "vocab.txt"
        vocab = Vocab.load(vocab_path) if vocab_path.exists() else synthetic_vocab()
        return train, heldout, vocab
    train, heldout = synthetic_splits(cfg.n_train, cfg.n_heldout, cfg.seed, cfg.image_size)
    return train, heldout, synthetic_vocab()


def batch_indices(step: int, cfg: TrainConfig, n: int) -> np.ndarray:
    spe = max(1, n // cfg.batch_size)
    epoch, pos = divmod(step, spe)
    perm = np.random.default_rng(derive_seed(cfg.seed, epoch, _SHUFFLE)).permutation(n)
    bs = min(cfg.batch_size, n)
    return perm[pos * bs:(pos + 1) * bs]


def batch_for_step(step: int, cfg: TrainConfig, data: PairedDataset, vocab, dtype=torch.float32):
    idx = batch_indices(step, cfg, len(data))
    images = torch.from_numpy(data.images[idx]).to(dtype) / 255.0
    ids = tokenize_batch([data.captions[i] for i in idx], vocab, cfg.text_max_len)
    rng = np.random.default_rng(derive_seed(cfg.seed, step, _MASK))
    return make_batch(images, ids, cfg.patch_size, rng, cfg.text_mask_ratio, cfg.visual_mask_ratio)


@dataclass
class TrainResult:
    model: torch.nn.Module
    cfg: TrainConfig
    global_step: int
    metrics: list = field(default_factory=list)
    eval_metrics: dict = field(default_factory=dict)
    checkpoint: Optional[Path] = None
    heldout_utilization: Optional[float] = None


def _reset_rows(optimizer, param, rows) -> None:
    st = optimizer.state.get(param)
    if st:
        st["exp_avg"][rows] = 0
        st["exp_avg_sq"][rows] = 0


def train(
    cfg: TrainConfig,
    resume: Optional[str] = None,
    out_dir: Optional[str] = None,
    write_files: bool = True,
    evaluate: bool = True,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Run ``cfg.total_steps`` optimizer steps, logging one record per step.

    Writes ``metrics.jsonl``, ``config.txt``, periodic ``ckpt_stepXXXXXX.npz``
    and ``final.npz`` under ``out_dir`` (default ``cfg.out_dir``). The final
    record of the log holds held-out retrieval metrics.
    """
    from ..evaluation import codebook_utilization, evaluate_retrieval

    out = Path(out_dir or cfg.out_dir)
    train_data, heldout, vocab = load_splits(cfg)
    model = build_model(cfg, len(vocab))
    optimizer = make_optimizer(model, cfg)
    start = 0
    counts = torch.zeros(cfg.codebook_size, dtype=torch.long)
    if resume:
        ckpt = load_checkpoint(resume)
        if ckpt.config != cfg:
            log.warning("resuming with a config that differs from the checkpoint's")
        model.load_state_dict(ckpt.model_state())
        ckpt.restore_optimizer(model, optimizer)
        start = ckpt.global_step
        if "train.usage_counts" in ckpt.tensors:
            counts = torch.from_numpy(ckpt.tensors["train.usage_counts"].copy())

    if write_files:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.txt")
        vocab.save(out / "vocab.txt")
        log_fh = open(out / "metrics.jsonl", "a" if resume else "w")
    else:
        log_fh = None

    def ckpt(path, step):
        return save_checkpoint(path, model, cfg, step, vocab, optimizer, {"usage_counts": counts.numpy()})

    spe = max(1, len(train_data) // cfg.batch_size)
    uses_codebook = bool(cfg.objective_set & QUANTIZED_OBJECTIVES)
    dtype = model.dtype
    records = []
    try:
        for step in range(start, cfg.total_steps):
            state = schedule_at(step, cfg)
            batch = batch_for_step(step, cfg, train_data, vocab, dtype)
            metrics, fwd = train_step(model, optimizer, batch, state, cfg, torch_rng(cfg.seed, step, _NOISE))
            if fwd.hard_indices is not None:
                counts += usage_counts(fwd.hard_indices, cfg.codebook_size)
            if (step + 1) % spe == 0 and uses_codebook:
                metrics["epoch_utilization"] = float((counts > 0).float().mean())
                if cfg.dead_code_refresh and fwd.encoder_out is not None:
                    dead = dead_codes(counts, cfg.dead_code_threshold)
                    refresh_dead_codes(model.codebook, counts, cfg.dead_code_threshold, fwd.encoder_out,
                                       torch_rng(cfg.seed, step // spe, _REFRESH), cfg.dead_code_noise)
                    _reset_rows(optimizer, model.codebook.vectors, dead)
                    metrics["refreshed_codes"] = int(dead.numel())
                counts.zero_()
            records.append(metrics)
            if log_fh:
                log_fh.write(json.dumps(metrics) + "\n")
            if on_step:
                on_step(metrics)
            done = step + 1
            if write_files and cfg.ckpt_every > 0 and done % cfg.ckpt_every == 0 and done < cfg.total_steps:
                ckpt(out / f"ckpt_step{done:06d}.npz", done)

        result = TrainResult(model, cfg, cfg.total_steps, records)
        if write_files:
            result.checkpoint = ckpt(out / "final.npz", cfg.total_steps)
        if evaluate:
            result.eval_metrics = evaluate_retrieval(model, heldout, vocab, cfg.text_max_len, cfg.eval_batch)
            if uses_codebook:
                result.heldout_utilization = codebook_utilization(model, heldout)
                result.eval_metrics["codebook_utilization"] = result.heldout_utilization
            if log_fh:
                log_fh.write(json.dumps({"step": cfg.total_steps, "eval": result.eval_metrics}) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return result


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
