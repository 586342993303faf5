"""Zero-shot image-text retrieval and the objective ablation harness.

Every (image, text) pair is scored by the fusion encoder's matching
probability; there is no embedding-similarity prefilter. TR ranks texts for
each image query, IR ranks images for each text query.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .encoders import tokenize_batch
from .errors import ContractError, InputError
from .objectives import COMPONENTS

log = logging.getLogger(__name__)

KS = (1, 5, 10)
METRIC_COLUMNS = tuple(f"{d}_r{k}" for d in ("tr", "ir") for k in KS)

ABLATION_ROWS = (
    ("MLM+ITM", "itm,mlm"),
    ("MLM+ITM+Pixel", "itm,mlm,pixel,alignment,commitment"),
    ("MLM+ITM+Pixel+MIM", ",".join(COMPONENTS)),
)


@torch.no_grad()
def score_all_pairs(model, images: torch.Tensor, text_ids: torch.Tensor, chunk: int = 2048) -> np.ndarray:
    """Matching probability for every (image, text) pair, shape (Q images, G texts).

    Args:
      model: a :class:`~codebook_vlp.model.CodebookVLP`.
      images: (Q, H, W, C) in [0, 1].
      text_ids: (G, L) token ids.
      chunk: number of pairs fused per forward pass.
    """
    model.eval()
    patches = model.patches(images)
    vis = model.encode_images(patches)
    txt, pad = model.encode_texts(text_ids)
    q, g = vis.shape[0], txt.shape[0]
    scores = torch.empty(q * g, dtype=torch.float64)
    for start in range(0, q * g, chunk):
        flat = torch.arange(start, min(start + chunk, q * g))
        qi, gi = flat // g, flat % g
        logits = model.itm_logits(txt[gi], pad[gi], vis[qi])
        scores[flat] = torch.softmax(logits.double(), dim=-1)[:, 1]
    return scores.reshape(q, g).numpy()


def ranks_of_truth(scores: np.ndarray, ground_truth: Sequence[int]) -> np.ndarray:
    """0-based rank of each query's true item; ties go to the lower column index."""
    scores = np.asarray(scores)
    gt = np.asarray(ground_truth)
    true = scores[np.arange(len(gt)), gt]
    higher = (scores > true[:, None]).sum(1)
    cols = np.arange(scores.shape[1])
    tied_before = ((scores == true[:, None]) & (cols[None, :] < gt[:, None])).sum(1)
    return higher + tied_before


def recall_at_k(scores: np.ndarray, ground_truth: Sequence[int], k: int) -> float:
    scores = np.asarray(scores)
    if scores.ndim != 2 or len(ground_truth) != scores.shape[0]:
        raise ContractError("scores must be (Q, G) with one ground-truth index per query")
    if not 1 <= k <= scores.shape[1]:
        raise ContractError(f"k must lie in [1, {scores.shape[1]}], got {k}")
    return float((ranks_of_truth(scores, ground_truth) < k).mean())


def retrieval_metrics(scores: np.ndarray, ks=KS) -> dict:
    """TR/IR recall at each k for a square score matrix with the diagonal as ground truth."""
    q, g = scores.shape
    if q != g:
        raise ContractError("paired retrieval expects a square score matrix")
    gt = np.arange(q)
    out = {}
    for k in ks:
        kk = min(k, g)
        out[f"tr_r{k}"] = recall_at_k(scores, gt, kk)
        out[f"ir_r{k}"] = recall_at_k(scores.T, gt, kk)
    return out


def evaluate_retrieval(model, data, vocab, max_len: int = 16, chunk: int = 2048, return_scores=False):
    images = torch.from_numpy(data.images).to(model.dtype) / 255.0
    ids = tokenize_batch(data.captions, vocab, max_len)
    scores = score_all_pairs(model, images, ids, chunk)
    metrics = retrieval_metrics(scores)
    return (metrics, scores) if return_scores else metrics


@torch.no_grad()
def codebook_assignments(model, images: torch.Tensor, batch: int = 256) -> torch.Tensor:
    """Hard codeword index of every patch of every image, shape (n, N)."""
    model.eval()
    out = []
    for start in range(0, images.shape[0], batch):
        patches = model.patches(images[start:start + batch])
        v = model.encode_images(patches)
        out.append(model.hard_indices(model.code_space(v[:, 1:])))
    return torch.cat(out)


def codebook_utilization(model, data) -> float:
    """Fraction of codewords assigned to at least one patch of ``data``."""
    images = torch.from_numpy(data.images).to(model.dtype) / 255.0
    idx = codebook_assignments(model, images)
    return len(torch.unique(idx)) / model.codebook.num_codes


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    name: str
    objectives: str
    per_seed: list  # one metrics dict per seed

    def mean(self, col: str) -> float:
        return float(np.mean([m[col] for m in self.per_seed]))

    def std(self, col: str) -> float:
        vals = [m[col] for m in self.per_seed]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


@dataclass
class AblationTable:
    rows: list
    seeds: list

    def as_records(self) -> list[dict]:
        recs = []
        for row in self.rows:
            rec = {"objectives": row.name, "gate": row.objectives, "seeds": list(self.seeds)}
            for col in METRIC_COLUMNS:
                rec[col] = {"mean": row.mean(col), "std": row.std(col), "per_seed": [m[col] for m in row.per_seed]}
            recs.append(rec)
        return recs


def ablation_configs(base_cfg):
    return [(name, base_cfg.replace(objectives=objs)) for name, objs in ABLATION_ROWS]


def run_ablation(base_cfg, seeds: Sequence[int], train_fn: Optional[Callable] = None) -> AblationTable:
    """Train each objective subset for every seed and evaluate held-out retrieval.

    ``train_fn(cfg) -> TrainResult`` defaults to an in-memory
    :func:`~codebook_vlp.training.loop.train`; pass a caching wrapper to reuse runs.
    """
    from .training.loop import train

    if not seeds:
        raise InputError("ablation needs at least one seed")
    if train_fn is None:
        def train_fn(cfg):
            return train(cfg, write_files=False)
    rows = []
    for name, cfg in ablation_configs(base_cfg):
        per_seed = []
        for seed in seeds:
            log.info("ablation %s seed %d", name, seed)
            result = train_fn(cfg.replace(seed=int(seed)))
            per_seed.append({c: result.eval_metrics[c] for c in METRIC_COLUMNS})
        rows.append(AblationRow(name, cfg.objectives, per_seed))
    return AblationTable(rows, [int(s) for s in seeds])


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def format_retrieval_report(metrics: dict, split: str, n: int) -> str:
    lines = [f"# zero-shot retrieval\tsplit={split}\tpairs={n}", "direction\tR@1\tR@5\tR@10"]
    for d, label in (("tr", "TR"), ("ir", "IR")):
        lines.append("\t".join([label] + [f"{metrics[f'{d}_r{k}']:.4f}" for k in KS]))
    return "\n".join(lines) + "\n"


def format_ablation_report(table: AblationTable) -> str:
    header = ["objectives"] + [f"{c[:2].upper()} R@{c[4:]}" for c in METRIC_COLUMNS]
    lines = [f"# ablation\tseeds={','.join(map(str, table.seeds))}", "\t".join(header)]
    for row in table.rows:
        cells = [f"{row.mean(c):.4f}±{row.std(c):.4f}" for c in METRIC_COLUMNS]
        lines.append("\t".join([row.name] + cells))
    return "\n".join(lines) + "\n"


def write_report(text: str, records, path) -> tuple[Path, Path]:
    """Write the delimited report at ``path`` and JSON records next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    rec_path = path.with_suffix(".records.json")
    rec_path.write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")
    return path, rec_path
