import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from codebook_vlp.encoders import (
    CLS,
    MASK,
    PAD,
    SEP,
    UNK,
    MultiHeadAttention,
    TextEncoder,
    VisualEncoder,
    Vocab,
    patchify,
    patchify_batch,
    text_encode,
    tokenize,
    unpatchify,
    unpatchify_batch,
    visual_encode,
)
from codebook_vlp.errors import ContractError, InputError


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(0, 999))
def test_patchify_roundtrip(gh, gw, p, c, seed):
    img = np.random.default_rng(seed).random((gh * p, gw * p, c))
    grid = patchify(img, p)
    assert grid.grid.shape == (gh * gw, p * p * c)
    assert np.array_equal(unpatchify(grid.grid, p, gh * p, gw * p), img)


def test_patch_order_is_row_major():
    img = np.zeros((4, 4, 1))
    img[0:2, 2:4] = 1.0  # top-right patch
    grid = patchify(img, 2)
    assert grid.grid.sum(1).tolist() == [0, 4, 0, 0]


def test_batch_patchify_matches_single():
    imgs = np.random.default_rng(0).random((3, 8, 8, 3))
    batch = patchify_batch(torch.from_numpy(imgs), 4).numpy()
    for i in range(3):
        assert np.array_equal(batch[i], patchify(imgs[i], 4).grid)
    back = unpatchify_batch(torch.from_numpy(batch), 4, 8, 8).numpy()
    assert np.array_equal(back, imgs)


def test_patchify_input_errors():
    with pytest.raises(InputError):
        patchify(np.zeros((6, 8, 3)), 4)
    with pytest.raises(InputError):
        patchify(np.full((8, 8, 3), 2.0), 4)


def test_vocab_roundtrip(tmp_path):
    v = Vocab(["red", "circle", "above"])
    assert v.id("red") == 5 and v.id("nope") == UNK
    v.save(tmp_path / "v.txt")
    w = Vocab.load(tmp_path / "v.txt")
    assert w.tokens == v.tokens
    assert w.decode([CLS, 5, SEP]) == ["[CLS]", "red", "[SEP]"]


def test_vocab_load_rejects_bad_header(tmp_path):
    (tmp_path / "v.txt").write_text("red\ncircle\n")
    with pytest.raises(InputError):
        Vocab.load(tmp_path / "v.txt")


def test_tokenize_layout():
    v = Vocab(["a", "red", "circle"])
    ids = tokenize("A red  CIRCLE blob", v, max_len=8)
    assert ids == [CLS, v.id("a"), v.id("red"), v.id("circle"), UNK, SEP, PAD, PAD]
    assert tokenize("a a a a a a a", v, max_len=5) == [CLS, 5, 5, 5, SEP]


def _sdpa_oracle(mha, x, context, pad):
    b, lq, d = x.shape
    h = mha.heads
    q = F.linear(x, mha.q.weight, mha.q.bias).view(b, lq, h, -1).transpose(1, 2)
    k = F.linear(context, mha.k.weight, mha.k.bias).view(b, context.shape[1], h, -1).transpose(1, 2)
    v = F.linear(context, mha.v.weight, mha.v.bias).view(b, context.shape[1], h, -1).transpose(1, 2)
    attn_mask = None if pad is None else ~pad[:, None, None, :]
    o = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
    return F.linear(o.transpose(1, 2).reshape(b, lq, d), mha.out.weight, mha.out.bias)


def test_attention_matches_torch_sdpa():
    torch.manual_seed(0)
    mha = MultiHeadAttention(16, 4).double()
    x = torch.randn(2, 5, 16, dtype=torch.float64)
    ctx = torch.randn(2, 7, 16, dtype=torch.float64)
    pad = torch.zeros(2, 7, dtype=torch.bool)
    pad[1, 5:] = True
    maps = []
    out = mha(x, ctx, pad, maps=maps)
    assert torch.allclose(out, _sdpa_oracle(mha, x, ctx, pad), atol=1e-12)
    assert maps[0].shape == (2, 4, 5, 7)
    assert torch.count_nonzero(maps[0][1, :, :, 5:]) == 0


def test_attention_rejects_indivisible_width():
    with pytest.raises(ContractError):
        MultiHeadAttention(10, 3)


def test_visual_encoder_shapes_and_mask_erasure():
    torch.manual_seed(0)
    enc = VisualEncoder(image_size=8, patch_size=4, dim=16, layers=2, heads=2).eval()
    patches = torch.rand(2, 4, 48)
    out = enc(patches)
    assert out.shape == (2, 5, 16)
    mask = torch.tensor([[True, False, False, True], [False] * 4])
    other = patches.clone()
    other[0, 0] = torch.rand(48)
    other[0, 3] = torch.rand(48)
    # masked pixels never reach the transformer
    assert torch.equal(enc(patches, mask), enc(other, mask))
    with pytest.raises(ContractError):
        enc(torch.rand(2, 3, 48))


def test_visual_encode_single_grid():
    torch.manual_seed(0)
    enc = VisualEncoder(image_size=8, patch_size=4, dim=16, layers=1, heads=2).eval()
    grid = patchify(np.random.default_rng(0).random((8, 8, 3)), 4)
    seq = visual_encode(enc, grid, mask_positions=[1])
    assert seq.cls.shape == (16,) and seq.tokens.shape == (4, 16)
    assert seq.mask_positions == frozenset({1})
    with pytest.raises(ContractError):
        visual_encode(enc, grid, mask_positions=[4])


def test_text_encoder_ignores_pad_content():
    torch.manual_seed(0)
    enc = TextEncoder(vocab_size=12, max_len=8, dim=16, layers=2, heads=2).eval()
    ids = torch.tensor([[CLS, 5, 6, SEP, PAD, PAD, PAD, PAD]])
    pad = ids == PAD
    other = ids.clone()
    other[0, 4:] = torch.tensor([7, 8, MASK, 9])
    a, b = enc(ids, pad), enc(other, pad)
    assert torch.equal(a[:, :4], b[:, :4])


def test_text_encoder_contracts():
    enc = TextEncoder(vocab_size=6, max_len=4, dim=8, layers=1, heads=2)
    with pytest.raises(ContractError):
        enc(torch.tensor([[CLS, 6, SEP, PAD]]))
    with pytest.raises(ContractError):
        enc(torch.zeros(1, 5, dtype=torch.long))
    seq = text_encode(enc, [CLS, 5, SEP, PAD])
    assert seq.embeddings.shape == (4, 8)
