import json

import numpy as np
import pytest

from codebook_vlp.cli import EXIT_CONFIG, EXIT_INPUT, EXIT_OK, main
from codebook_vlp.training.checkpoint import load_checkpoint
from codebook_vlp.training.config import save_config
from codebook_vlp.training.data import load_dataset, load_image

from .conftest import tiny_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-data followed by a tiny pretrain run, shared by the read-only commands."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--out", str(data), "--n", "16", "--seed", "3"]) == EXIT_OK
    cfg = tiny_config(data_dir=str(data), image_size=32, patch_size=8, out_dir=str(root / "run"),
                      total_steps=4, ckpt_every=2)
    save_config(cfg, root / "cfg.txt")
    assert main(["pretrain", "--config", str(root / "cfg.txt")]) == EXIT_OK
    return root


def test_gen_data_layout_and_determinism(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--n", "10", "--seed", "1"]) == EXIT_OK
    for split, n in (("train", 10), ("heldout", 2)):
        a = load_dataset(tmp_path / "a", split)
        b = load_dataset(tmp_path / "b", split)
        assert len(a) == n and a.captions == b.captions and np.array_equal(a.images, b.images)
    train, held = load_dataset(tmp_path / "a", "train"), load_dataset(tmp_path / "a", "heldout")
    assert not set(train.ids) & set(held.ids)
    assert (tmp_path / "a" / "vocab.txt").exists()


def test_pretrain_outputs(workspace):
    run = workspace / "run"
    for name in ("final.npz", "ckpt_step000002.npz", "metrics.jsonl", "config.txt",
                 "training_curves.png", "heldout_retrieval.tsv", "heldout_retrieval.png"):
        assert (run / name).exists(), name


def test_resume_continues_to_identical_checkpoint(workspace, tmp_path):
    cfg_text = (workspace / "cfg.txt").read_text().replace(str(workspace / "run"), str(tmp_path / "resumed"))
    (tmp_path / "cfg.txt").write_text(cfg_text)
    ckpt = workspace / "run" / "ckpt_step000002.npz"
    assert main(["pretrain", "--config", str(tmp_path / "cfg.txt"), "--resume", str(ckpt)]) == EXIT_OK
    a = load_checkpoint(tmp_path / "resumed" / "final.npz")
    b = load_checkpoint(workspace / "run" / "final.npz")
    assert a.tensors.keys() == b.tensors.keys()
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


def test_eval_retrieval_report(workspace, tmp_path):
    out = tmp_path / "r.tsv"
    args = ["eval-retrieval", "--ckpt", str(workspace / "run" / "final.npz"), "--data", str(workspace / "data"),
            "--split", "heldout", "--out", str(out)]
    assert main(args) == EXIT_OK
    rec = json.loads(out.with_suffix(".records.json").read_text())
    assert rec["pairs"] == 3 and 0 <= rec["tr_r1"] <= 1
    first = out.read_text()
    assert main(args) == EXIT_OK
    assert out.read_text() == first
    assert out.with_suffix(".png").exists()


def test_viz_codebook(workspace, tmp_path):
    out = tmp_path / "viz"
    assert main(["viz-codebook", "--ckpt", str(workspace / "run" / "final.npz"), "--data", str(workspace / "data"),
                 "--codewords", "0,1,2,3", "--max-patches", "6", "--out", str(out)]) == EXIT_OK
    recs = [json.loads(line) for line in (out / "grids.jsonl").read_text().splitlines()]
    assert [r["codeword"] for r in recs] == [0, 1, 2, 3]
    for r in recs:
        assert r["count"] <= 6
        assert ("grid" in r) == (r["count"] > 0) and ("warning" in r) == (r["count"] == 0)
    assert (out / "codewords.png").exists()


def test_reconstruct(workspace, tmp_path):
    image = workspace / "data" / "heldout" / "images"
    image = sorted(image.iterdir())[0]
    out = tmp_path / "rec"
    assert main(["reconstruct", "--ckpt", str(workspace / "run" / "final.npz"), "--image", str(image),
                 "--seed", "5", "--out", str(out)]) == EXIT_OK
    meta = json.loads((out / "reconstruct.json").read_text())
    assert meta["caption"] and len(meta["masked_patches"]) == 12  # 75% of 16
    assert np.array_equal(load_image(out / "original.png"), load_image(image))
    assert (out / "triptych.png").exists()


def test_gradcam(workspace, tmp_path):
    data = load_dataset(workspace / "data", "heldout")
    image = sorted((workspace / "data" / "heldout" / "images").iterdir())[0]
    out = tmp_path / "cam.png"
    assert main(["gradcam", "--ckpt", str(workspace / "run" / "final.npz"), "--image", str(image),
                 "--caption", data.captions[0], "--word", "1", "--out", str(out)]) == EXIT_OK
    heat = np.load(tmp_path / "cam.heatmap.npy")
    assert heat.shape == (32, 32) and heat.min() >= 0 and heat.max() <= 1
    assert json.loads((tmp_path / "cam.json").read_text())["word"] == data.captions[0].lower().split()[1]


def test_ablate(tmp_path):
    cfg = tiny_config(out_dir=str(tmp_path / "runs"), total_steps=2, warmup_iters=1)
    save_config(cfg, tmp_path / "cfg.txt")
    out = tmp_path / "ablation.tsv"
    assert main(["ablate", "--config", str(tmp_path / "cfg.txt"), "--seeds", "0,1", "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert len(lines) == 5 and all(len(line.split("\t")) == 7 for line in lines[1:])
    assert out.with_suffix(".png").exists()


def _exit_code(argv):
    try:
        return main(argv)
    except SystemExit as exc:  # argparse usage errors
        return exc.code


@pytest.mark.parametrize("argv", [
    ["eval-retrieval", "--ckpt", "missing.npz", "--data", ".", "--split", "x", "--out", "r.tsv"],
    ["reconstruct", "--ckpt", "missing.npz", "--image", "x.png", "--seed", "0", "--out", "o"],
    ["gen-data", "--out", "d", "--n", "1", "--seed", "0"],
    ["ablate", "--config", "c.txt", "--seeds", "a,b", "--out", "r"],
    ["gradcam", "--ckpt", "c"],
    ["no-such-command"],
])
def test_input_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert _exit_code(argv) == EXIT_INPUT


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("no_such_key = 3\n")
    assert main(["pretrain", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["pretrain", "--config", str(tmp_path / "absent.txt")]) == EXIT_CONFIG
    bad.write_text("patch_size = 5\n")
    assert main(["ablate", "--config", str(bad), "--seeds", "0", "--out", str(tmp_path / "r")]) == EXIT_CONFIG


def test_gradcam_bad_word_is_input_error(workspace, tmp_path):
    image = sorted((workspace / "data" / "heldout" / "images").iterdir())[0]
    assert main(["gradcam", "--ckpt", str(workspace / "run" / "final.npz"), "--image", str(image),
                 "--caption", "a red circle", "--word", "9", "--out", str(tmp_path / "c.png")]) == EXIT_INPUT
