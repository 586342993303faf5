"""Checkpoint container: an uncompressed ``.npz`` of named tensors plus a JSON header.

Model tensors keep their module paths (``codebook.vectors``,
``fusion.layer{i}.*``, ``heads.{itm,mlm,mim,pixel}.*``, ...). Optimizer
moments are stored as ``optim.<param>.{exp_avg,exp_avg_sq,step}`` and the
header (format, version, full config, global step, vocabulary) lives under
``__meta__``. Entries are written in sorted order and zip timestamps are
fixed, so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..encoders import Vocab
from ..errors import InputError
from ..model import CodebookVLP, build_model
from .config import TrainConfig

FORMAT = "codebook-vlp-checkpoint"
VERSION = 1
META_KEY = "__meta__"


@dataclass
class Checkpoint:
    config: TrainConfig
    global_step: int
    tensors: dict  # name -> np.ndarray, model and optimizer entries
    vocab: list
    extra: dict = field(default_factory=dict)

    def model_state(self) -> dict:
        return {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()
                if not k.startswith(("optim.", "train."))}

    def build(self) -> CodebookVLP:
        model = build_model(self.config, len(self.vocab))
        model.load_state_dict(self.model_state())
        return model

    def restore_optimizer(self, model, optimizer) -> None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                name = names[id(p)]
                key = f"optim.{name}"
                if f"{key}.exp_avg" not in self.tensors:
                    continue
                optimizer.state[p] = {
                    "step": torch.tensor(float(self.tensors[f"{key}.step"])),
                    "exp_avg": torch.from_numpy(self.tensors[f"{key}.exp_avg"].copy()),
                    "exp_avg_sq": torch.from_numpy(self.tensors[f"{key}.exp_avg_sq"].copy()),
                }


def collect_tensors(model, optimizer=None, extra_tensors: Optional[dict] = None) -> dict:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, st in optimizer.state.items():
            if not st:
                continue
            key = f"optim.{names[id(p)]}"
            tensors[f"{key}.exp_avg"] = st["exp_avg"].detach().cpu().numpy()
            tensors[f"{key}.exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
            tensors[f"{key}.step"] = np.asarray(float(st["step"]), dtype=np.float64)
    for k, v in (extra_tensors or {}).items():
        tensors[f"train.{k}"] = np.asarray(v)
    return tensors


def write_checkpoint(path, ckpt: Checkpoint) -> Path:
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "config": ckpt.config.to_dict(),
        "global_step": int(ckpt.global_step),
        "vocab": list(ckpt.vocab),
        "codebook": {"K": ckpt.config.codebook_size, "d_c": ckpt.config.code_dim},
        "extra": ckpt.extra,
    }
    arrays = {k: ckpt.tensors[k] for k in sorted(ckpt.tensors)}
    arrays[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def save_checkpoint(path, model, cfg: TrainConfig, global_step: int, vocab: Vocab,
                    optimizer=None, extra_tensors=None, extra=None) -> Path:
    tensors = collect_tensors(model, optimizer, extra_tensors)
    return write_checkpoint(path, Checkpoint(cfg, global_step, tensors, list(vocab.tokens), extra or {}))


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from None
    if META_KEY not in arrays:
        raise InputError(f"{path} is not a checkpoint (missing header)")
    meta = json.loads(str(arrays.pop(META_KEY)))
    if meta.get("format") != FORMAT or meta.get("version") != VERSION:
        raise InputError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
    cfg = TrainConfig.from_dict(meta["config"])
    return Checkpoint(cfg, meta["global_step"], arrays, meta["vocab"], meta.get("extra", {}))


def load_model(path):
    """Return ``(model, vocab, checkpoint)`` ready for inference."""
    ckpt = load_checkpoint(path)
    model = ckpt.build()
    model.eval()
    return model, Vocab(ckpt.vocab[5:]), ckpt
