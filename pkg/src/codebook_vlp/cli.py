"""``codebook-vlp`` command-line interface.

Exit codes: 0 success, 1 input error, 2 config error, 3 runtime or numerical error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import CodebookVLPError, InputError

log = logging.getLogger("codebook_vlp")

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """Usage errors are input errors (exit 1) rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _csv_ints(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    from .evaluation import format_retrieval_report, write_report
    from .plotting import plot_retrieval, plot_training_curves
    from .training.config import load_config
    from .training.loop import train

    cfg = load_config(args.config)
    if args.resume and not Path(args.resume).exists():
        raise InputError(f"checkpoint not found: {args.resume}")
    result = train(cfg, resume=args.resume)
    out = Path(cfg.out_dir)
    plot_training_curves(result.metrics, out / "training_curves.png")
    if result.eval_metrics:
        n = cfg.n_heldout
        write_report(format_retrieval_report(result.eval_metrics, "heldout", n), result.eval_metrics,
                     out / "heldout_retrieval.tsv")
        plot_retrieval(result.eval_metrics, out / "heldout_retrieval.png")
    print(json.dumps({"checkpoint": str(result.checkpoint), "eval": result.eval_metrics}, sort_keys=True))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .training.data import generate_synthetic_dataset, save_dataset, synthetic_vocab

    if args.n < 2:
        raise InputError("--n must be at least 2")
    out = Path(args.out)
    n_held = max(2, args.n // 5)
    train = generate_synthetic_dataset(args.n, args.seed)
    heldout = generate_synthetic_dataset(n_held, args.seed, offset=args.n)
    save_dataset(train, out / "train")
    save_dataset(heldout, out / "heldout")
    synthetic_vocab().save(out / "vocab.txt")
    print(json.dumps({"train": len(train), "heldout": len(heldout), "out": str(out)}))
    return EXIT_OK


def _vocab_for(data_dir, fallback):
    from .encoders import Vocab

    path = Path(data_dir) / "vocab.txt"
    return Vocab.load(path) if path.exists() else fallback


def cmd_eval_retrieval(args) -> int:
    from .evaluation import evaluate_retrieval, format_retrieval_report, write_report
    from .plotting import plot_retrieval
    from .training.checkpoint import load_model
    from .training.data import load_dataset

    model, vocab, ckpt = load_model(args.ckpt)
    data = load_dataset(args.data, args.split)
    cfg = ckpt.config
    metrics = evaluate_retrieval(model, data, vocab, cfg.text_max_len, cfg.eval_batch)
    record = dict(metrics, split=args.split, pairs=len(data), checkpoint=str(args.ckpt), step=ckpt.global_step)
    report, _ = write_report(format_retrieval_report(metrics, args.split, len(data)), record, args.out)
    plot_retrieval(metrics, report.with_suffix(".png"), title=f"zero-shot retrieval ({args.split})")
    print(report.read_text(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluation import format_ablation_report, run_ablation, write_report
    from .plotting import plot_ablation
    from .training.config import load_config

    cfg = load_config(args.config)
    table = run_ablation(cfg, args.seeds)
    report, _ = write_report(format_ablation_report(table), table.as_records(), args.out)
    plot_ablation(table, report.with_suffix(".png"))
    print(report.read_text(), end="")
    return EXIT_OK


def cmd_viz_codebook(args) -> int:
    from .plotting import plot_codeword_grids
    from .training.checkpoint import load_model
    from .training.data import load_dataset, save_image
    from .viz import codeword_patch_grid

    model, _, _ = load_model(args.ckpt)
    data = load_dataset(args.data, args.split)
    grids = codeword_patch_grid(model, data, args.codewords, args.max_patches, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for code, g in grids.items():
        rec = {"codeword": code, "count": g.count,
               "sources": [{"image": data.ids[i], "patch": p} for i, p in g.sources]}
        if g.count:
            name = f"codeword_{code:04d}.png"
            save_image(g.grid, out / name)
            rec["grid"] = name
        else:
            rec["warning"] = g.warning
            log.warning(g.warning)
        records.append(rec)
    with open(out / "grids.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    plot_codeword_grids(grids, out / "codewords.png")
    print(json.dumps({"codewords": len(records), "empty": sum(not g.count for g in grids.values())}))
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .plotting import plot_triptych
    from .training.checkpoint import load_model
    from .training.data import load_image, lookup_caption, save_image
    from .viz import reconstruct_triptych

    model, vocab, ckpt = load_model(args.ckpt)
    image = load_image(args.image)
    caption = args.caption if args.caption is not None else (lookup_caption(args.image) or "")
    tri = reconstruct_triptych(model, image, args.seed, ckpt.config, ckpt.global_step, vocab, caption)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(tri.original, out / "original.png")
    save_image(tri.masked_view, out / "masked.png")
    save_image(tri.reconstruction, out / "reconstruction.png")
    plot_triptych(tri, out / "triptych.png", caption)
    _write_json({"image": str(args.image), "seed": args.seed, "caption": caption,
                 "masked_patches": [int(i) for i in tri.mask_positions]}, out / "reconstruct.json")
    print(json.dumps({"out": str(out), "masked": len(tri.mask_positions)}))
    return EXIT_OK


def cmd_gradcam(args) -> int:
    import numpy as np

    from .plotting import plot_gradcam
    from .training.checkpoint import load_model
    from .training.data import load_image, save_image
    from .viz import gradcam_word_heatmap

    model, vocab, ckpt = load_model(args.ckpt)
    image = load_image(args.image)
    heat = gradcam_word_heatmap(model, image, args.caption, args.word, vocab, ckpt.config.text_max_len,
                                upsample=args.upsample)
    out = Path(args.out)
    word = args.caption.lower().split()[args.word]
    plot_gradcam(image, heat, out, args.caption, word)
    stem = out.with_suffix("")
    gray = np.clip(np.rint(heat * 255.0), 0, 255).astype(np.uint8)
    save_image(np.repeat(gray[..., None], 3, axis=-1), f"{stem}.heatmap.png")
    np.save(f"{stem}.heatmap.npy", heat)
    _write_json({"image": str(args.image), "caption": args.caption, "word_index": args.word, "word": word,
                 "upsample": args.upsample, "max": float(heat.max()), "min": float(heat.min())},
                f"{stem}.json")
    print(json.dumps({"out": str(out), "word": word}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="codebook-vlp", description="Codebook vision-language pretraining toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("gen-data", help="write a synthetic image-caption dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="number of training pairs")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("eval-retrieval", help="zero-shot image-text retrieval")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True, help="report path; records and figure are written beside it")
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("ablate", help="objective ablation over several seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=_csv_ints, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("viz-codebook", help="patch grids for selected codewords")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--codewords", type=_csv_ints, required=True)
    p.add_argument("--max-patches", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=0, help="subsampling seed for crowded codewords")
    p.set_defaults(func=cmd_viz_codebook)

    p = sub.add_parser("reconstruct", help="masked-patch reconstruction triptych")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--caption", default=None, help="conditioning caption (default: looked up beside the image)")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("gradcam", help="Grad-CAM heatmap for one caption word")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--word", type=int, required=True, help="0-based word index in the caption")
    p.add_argument("--out", required=True)
    p.add_argument("--upsample", choices=("bilinear", "nearest"), default="bilinear")
    p.set_defaults(func=cmd_gradcam)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CodebookVLPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (RuntimeError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
