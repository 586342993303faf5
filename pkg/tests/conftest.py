import numpy as np
import pytest
import torch

from codebook_vlp.training.config import TrainConfig
from codebook_vlp.training.data import synthetic_vocab


def tiny_config(**overrides) -> TrainConfig:
    """Small model and dataset for fast end-to-end tests."""
    base = dict(
        n_train=16, n_heldout=8, image_size=16, patch_size=4, dim=32, heads=2,
        vision_layers=1, text_layers=1, fusion_layers=1, mlp_ratio=2, sim_dim=16,
        codebook_size=16, code_dim=32, batch_size=8, total_steps=6, warmup_iters=2,
        ckpt_every=0, eval_batch=512,
    )
    base.update(overrides)
    return TrainConfig(**base)


def raw_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Row-major (N, P*P*C) patches of a uint8 image, pixels untouched."""
    from codebook_vlp.encoders import patchify_batch

    return patchify_batch(torch.from_numpy(np.ascontiguousarray(image)[None]), patch_size)[0].numpy()


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def vocab():
    return synthetic_vocab()


@pytest.fixture
def tiny_model(tiny_cfg, vocab):
    from codebook_vlp.model import build_model

    return build_model(tiny_cfg, len(vocab)).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# criterion number -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
