import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from codebook_vlp.codebook import (
    Codebook,
    dead_codes,
    gumbel_assign,
    nearest_codeword,
    quantize_sequence,
    refresh_dead_codes,
    squared_distances,
    usage_counts,
    vq_losses,
)
from codebook_vlp.errors import ConfigError, ContractError, InputError, MaintenanceError


def brute_force_nearest(v: np.ndarray, vectors: np.ndarray) -> int:
    """Linear scan keeping the first strictly smaller distance."""
    best, best_d = 0, math.inf
    for k, c in enumerate(vectors):
        d = sum((float(a) - float(b)) ** 2 for a, b in zip(v, c))
        if d < best_d:
            best, best_d = k, d
    return best


def test_codebook_init_bounds():
    cb = Codebook(64, 8)
    assert cb.vectors.shape == (64, 8)
    assert cb.vectors.abs().max() <= 1 / 64


@pytest.mark.parametrize("k,d", [(1, 4), (8, 0)])
def test_codebook_rejects_degenerate_sizes(k, d):
    with pytest.raises(ConfigError):
        Codebook(k, d)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_nearest_matches_scan(k, d, seed):
    g = np.random.default_rng(seed)
    # small integer grid makes exact ties common
    vectors = g.integers(-2, 3, size=(k, d)).astype(np.float64)
    v = g.integers(-2, 3, size=d).astype(np.float64)
    idx, code = nearest_codeword(torch.from_numpy(v), torch.from_numpy(vectors))
    assert idx == brute_force_nearest(v, vectors)
    assert torch.equal(code, torch.from_numpy(vectors[idx]))


def test_tie_goes_to_lowest_index():
    vectors = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    idx, _ = nearest_codeword(torch.zeros(2), vectors)
    assert idx == 0
    dup = torch.tensor([[5.0, 5.0], [0.5, 0.5], [0.5, 0.5]])
    assert nearest_codeword(torch.tensor([0.4, 0.4]), dup)[0] == 1


def test_nearest_contract_errors():
    vectors = torch.zeros(4, 3)
    with pytest.raises(ContractError):
        nearest_codeword(torch.zeros(2), vectors)
    with pytest.raises(InputError):
        nearest_codeword(torch.tensor([0.0, float("nan"), 0.0]), vectors)


def test_squared_distances_match_cdist():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(5, 7, 3, dtype=torch.float64, generator=g)
    c = torch.randn(9, 3, dtype=torch.float64, generator=g)
    ref = torch.cdist(x.reshape(-1, 3), c).reshape(5, 7, 9) ** 2
    assert torch.allclose(squared_distances(x, c), ref, atol=1e-12)


def test_hard_forward_is_codewords_and_backward_is_identity():
    g = torch.Generator().manual_seed(1)
    cb = Codebook(8, 4, generator=g)
    seq = torch.randn(3, 5, 4, generator=g, requires_grad=True)
    res = quantize_sequence(seq, cb, "hard")
    assert torch.equal(res.quantized, cb.vectors[res.indices])
    upstream = torch.randn(3, 5, 4, generator=g)
    (res.quantized * upstream).sum().backward()
    assert torch.equal(seq.grad, upstream)
    assert cb.vectors.grad is None


def test_vq_loss_values_match_formula():
    g = torch.Generator().manual_seed(2)
    cb = Codebook(6, 3, generator=g)
    e = torch.randn(2, 4, 3, generator=g)
    res = quantize_sequence(e, cb, "hard")
    align, commit = vq_losses(e, res, beta=0.25)
    en, cn = e.numpy(), cb.vectors.detach().numpy()[res.indices.numpy()]
    expected = ((en - cn) ** 2).sum(-1).mean()
    assert align.item() == pytest.approx(expected, rel=1e-6)
    assert commit.item() == pytest.approx(0.25 * expected, rel=1e-6)


@pytest.mark.parametrize("mode", ["hard", "gumbel"])
def test_stop_gradients_are_exact(mode):
    g = torch.Generator().manual_seed(3)
    cb = Codebook(6, 3, generator=g)
    e = torch.randn(2, 4, 3, generator=g, requires_grad=True)
    res = quantize_sequence(e, cb, mode, temperature=0.5, rng=torch.Generator().manual_seed(0))
    align, commit = vq_losses(e, res)
    ge, gc = torch.autograd.grad(align, (e, cb.vectors), allow_unused=True)
    assert ge is None or torch.count_nonzero(ge) == 0
    assert torch.count_nonzero(gc) > 0
    ge, gc = torch.autograd.grad(commit, (e, cb.vectors), allow_unused=True)
    assert torch.count_nonzero(ge) > 0
    assert gc is None or torch.count_nonzero(gc) == 0


def test_vq_losses_contracts():
    cb = Codebook(4, 3)
    res = quantize_sequence(torch.zeros(2, 3), cb)
    with pytest.raises(ContractError):
        vq_losses(torch.zeros(2, 4), res)
    with pytest.raises(ConfigError):
        vq_losses(torch.zeros(2, 3), res, beta=-1.0)


def test_gumbel_rows_are_distributions():
    logits = torch.randn(10, 7, generator=torch.Generator().manual_seed(4))
    soft = gumbel_assign(logits, 0.7, torch.Generator().manual_seed(0))
    assert torch.allclose(soft.sum(-1), torch.ones(10))
    assert (soft >= 0).all()


def test_gumbel_noise_free_matches_plain_softmax():
    logits = torch.randn(4, 5, dtype=torch.float64)
    ref = torch.softmax(logits / 0.3, dim=-1)
    assert torch.allclose(gumbel_assign(logits, 0.3, noise_enabled=False), ref, atol=0, rtol=0)


def test_gumbel_noise_is_seeded():
    logits = torch.zeros(3, 6)
    a = gumbel_assign(logits, 1.0, torch.Generator().manual_seed(9))
    b = gumbel_assign(logits, 1.0, torch.Generator().manual_seed(9))
    c = gumbel_assign(logits, 1.0, torch.Generator().manual_seed(10))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_gumbel_noise_distribution():
    # argmax of logits + Gumbel noise samples softmax(logits)
    res = quantize_sequence(torch.zeros(20000, 1), torch.tensor([[0.0], [1.0], [2.0]]), "gumbel",
                            temperature=1.0, rng=torch.Generator().manual_seed(0))
    # distances are 0, 1, 4 so logits are 0, -1, -4
    probs = torch.softmax(torch.tensor([0.0, -1.0, -4.0]), 0)
    freq = torch.bincount(res.indices, minlength=3).double() / 20000
    assert torch.allclose(freq, probs.double(), atol=0.015)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_gumbel_rejects_nonpositive_temperature(tau):
    with pytest.raises(ConfigError):
        gumbel_assign(torch.zeros(2, 2), tau)


def test_gumbel_low_temperature_equals_hard():
    g = torch.Generator().manual_seed(5)
    cb = Codebook(16, 4, generator=g)
    seq = torch.randn(50, 4, generator=g) * 0.05
    hard = quantize_sequence(seq, cb, "hard")
    soft = quantize_sequence(seq, cb, "gumbel", temperature=1e-6, noise_enabled=False)
    assert torch.equal(hard.indices, soft.indices)


def test_quantize_contracts():
    cb = Codebook(4, 3)
    with pytest.raises(ContractError):
        quantize_sequence(torch.zeros(2, 5), cb)
    with pytest.raises(ConfigError):
        quantize_sequence(torch.zeros(2, 3), cb, mode="soft")
    with pytest.raises(InputError):
        quantize_sequence(torch.full((2, 3), float("inf")), cb)


def test_usage_and_dead_codes():
    counts = usage_counts(torch.tensor([[0, 0, 3], [3, 3, 1]]), 5)
    assert counts.tolist() == [2, 1, 0, 3, 0]
    assert dead_codes(counts, 1).tolist() == [2, 4]
    assert dead_codes(counts, 2).tolist() == [1, 2, 4]


def test_refresh_moves_only_dead_codes_near_donors():
    g = torch.Generator().manual_seed(6)
    cb = Codebook(8, 5, generator=g)
    before = cb.vectors.detach().clone()
    counts = torch.tensor([3, 0, 1, 0, 5, 0, 2, 1])
    donors = torch.randn(4, 6, 5, generator=g)
    refresh_dead_codes(cb, counts, 1, donors, torch.Generator().manual_seed(0), noise_scale=0.01)
    after = cb.vectors.detach()
    live = counts >= 1
    assert torch.equal(after[live], before[live])
    flat = donors.reshape(-1, 5)
    bound = 0.01 * math.sqrt(5)
    for k in torch.nonzero(~live).flatten():
        dist = (flat - after[k]).norm(dim=-1).min()
        assert dist < bound
    # distinct donors while enough are available
    assert len({tuple(after[k].tolist()) for k in torch.nonzero(~live).flatten()}) == 3


def test_refresh_without_donors_fails():
    cb = Codebook(4, 2)
    with pytest.raises(MaintenanceError):
        refresh_dead_codes(cb, torch.tensor([0, 1, 1, 1]), 1, torch.zeros(0, 2))


def test_refresh_noop_when_all_alive():
    cb = Codebook(4, 2)
    before = cb.vectors.detach().clone()
    refresh_dead_codes(cb, torch.ones(4, dtype=torch.long), 1, torch.zeros(0, 2))
    assert torch.equal(cb.vectors.detach(), before)
