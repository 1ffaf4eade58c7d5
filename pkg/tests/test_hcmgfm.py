import pytest
import torch

from dgsan.hcmgfm import (
    HCMGFM,
    ClassifierHead,
    CrossAttentionBlock,
    FusionConfig,
    SelfAttentionBlock,
    fuse,
)

SEQUENCES = ["CAB,CAB", "SAB,SAB", "SAB,CAB", "CAB,SAB", "CAB,SAB,CAB", "SAB,CAB,SAB"]


def _dense_cross(direction, x, other):
    """Hand-enumerated attention of one cross direction (no batching tricks)."""
    attn = direction.attn
    q = attn.q(direction.norm_q(x))
    k = attn.k(direction.norm_kv(other))
    v = attn.v(direction.norm_kv(other))
    d = x.shape[-1]
    hd = d // attn.heads
    out = torch.zeros_like(q)
    for h in range(attn.heads):
        sl = slice(h * hd, (h + 1) * hd)
        for i in range(q.shape[0]):
            scores = torch.stack([q[i, sl] @ k[j, sl] / hd**0.5 for j in range(k.shape[0])])
            w = torch.softmax(scores, 0)
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(k.shape[0]))
    x = x + attn.out(out)
    return x + direction.ff(direction.norm2(x))


# ---- config -------------------------------------------------------------------------


def test_fusion_config_parsing():
    cfg = FusionConfig(sequence="sab, cab ,SAB")
    assert cfg.sequence == ["SAB", "CAB", "SAB"]
    with pytest.raises(ValueError):
        FusionConfig(sequence=[])
    with pytest.raises(ValueError):
        FusionConfig(sequence=["SAB", "XAB"])
    with pytest.raises(ValueError):
        FusionConfig(d=10, heads=4)


# ---- blocks -------------------------------------------------------------------------


def test_sab_zero_output_is_identity():
    torch.manual_seed(0)
    blk = SelfAttentionBlock(16, 4)
    blk.zero_output()
    x = torch.randn(5, 16)
    assert torch.equal(blk(x), x)


def test_sab_single_token_is_value_projection():
    torch.manual_seed(0)
    blk = SelfAttentionBlock(16, 4)
    x = torch.randn(1, 16)
    h = blk.norm1(x)
    expected = x + blk.attn.out(blk.attn.v(h))
    expected = expected + blk.ff(blk.norm2(expected))
    assert torch.allclose(blk(x), expected, atol=1e-6)


def test_sab_rows_sum_to_one():
    torch.manual_seed(0)
    blk = SelfAttentionBlock(16, 4)
    blk(torch.randn(5, 16))
    assert torch.allclose(blk.attn.last_attention.sum(-1), torch.ones(()), atol=1e-6)


def test_cab_zero_output_is_identity():
    torch.manual_seed(0)
    blk = CrossAttentionBlock(16, 4)
    blk.zero_output()
    a, b = torch.randn(2, 16), torch.randn(3, 16)
    a2, b2 = blk(a, b)
    assert torch.equal(a2, a) and torch.equal(b2, b)


def test_cab_identical_context_rows():
    # every query sees the same value vector whatever its attention weights
    torch.manual_seed(0)
    blk = CrossAttentionBlock(16, 4)
    a = torch.randn(4, 16)
    b = torch.randn(1, 16).expand(3, 16)
    d = blk.a_from_b
    context = d.attn.out(d.attn.v(d.norm_kv(b[:1])))
    x = a + context
    expected = x + d.ff(d.norm2(x))
    assert torch.allclose(blk(a, b)[0], expected, atol=1e-5)


def test_cab_dense_oracle():
    torch.manual_seed(0)
    blk = CrossAttentionBlock(8, 2)
    a, b = torch.randn(2, 8), torch.randn(3, 8)
    a2, b2 = blk(a, b)
    assert (a2 - _dense_cross(blk.a_from_b, a, b)).abs().max() <= 1e-6
    assert (b2 - _dense_cross(blk.b_from_a, b, a)).abs().max() <= 1e-6
    for direction in (blk.a_from_b, blk.b_from_a):
        assert torch.allclose(direction.attn.last_attention.sum(-1), torch.ones(()), atol=1e-6)


def test_cab_directions_share_nothing():
    torch.manual_seed(0)
    blk = CrossAttentionBlock(8, 2)
    a_params = {id(p) for p in blk.a_from_b.parameters()}
    b_params = {id(p) for p in blk.b_from_a.parameters()}
    assert not a_params & b_params
    a, b = torch.randn(2, 8), torch.randn(3, 8)
    a2, _ = blk(a, b)
    grads = torch.autograd.grad(a2.sum(), list(blk.b_from_a.parameters()), allow_unused=True)
    assert all(g is None or torch.all(g == 0) for g in grads)


def test_cab_width_mismatch():
    with pytest.raises(ValueError):
        CrossAttentionBlock(8, 2)(torch.randn(2, 8), torch.randn(2, 4))


# ---- fusion stack -----------------------------------------------------------------------


def test_default_joint_token_count():
    torch.manual_seed(0)
    rep = fuse(torch.randn(2, 16, 224), torch.randn(2, 3, 224), HCMGFM())
    assert rep.tokens.shape == (2, 19, 224)
    assert torch.allclose(rep.pooled, rep.tokens.mean(dim=1))


def test_zero_stack_pools_raw_tokens():
    torch.manual_seed(0)
    m = HCMGFM(FusionConfig(d=32, heads=4))
    m.zero_output()
    a, b = torch.randn(16, 32), torch.randn(3, 32)
    rep = m(a, b)
    assert torch.allclose(rep.pooled, torch.cat([a, b]).mean(0), atol=1e-6)


@pytest.mark.parametrize("seq", SEQUENCES)
def test_all_sequences_run(seq):
    torch.manual_seed(0)
    m = HCMGFM(FusionConfig(sequence=seq, d=32, heads=4))
    rep = m(torch.randn(2, 16, 32), torch.randn(2, 3, 32))
    assert rep.tokens.shape == (2, 19, 32)
    rep.pooled.sum().backward()


def test_dual_path_sab_has_separate_weights():
    m = HCMGFM(FusionConfig(d=32, heads=4))
    first = m.blocks[0]
    assert len(first) == 2
    assert first[0].attn.q.weight is not first[1].attn.q.weight


def test_no_cab_keeps_streams_independent():
    # without CAB the streams are concatenated up front, so the pre-concat
    # intra rows cannot depend on the inter tokens
    torch.manual_seed(0)
    m = HCMGFM(FusionConfig(sequence="SAB,SAB", d=32, heads=4))
    a = torch.randn(16, 32)
    rep1 = m(a, torch.randn(3, 32))
    rep2 = m(a, torch.randn(3, 32))
    assert torch.equal(rep1.streams[0], rep2.streams[0])


def test_cab_mixes_streams():
    torch.manual_seed(0)
    m = HCMGFM(FusionConfig(d=32, heads=4))
    a = torch.randn(16, 32)
    rep1 = m(a, torch.randn(3, 32))
    rep2 = m(a, torch.randn(3, 32))
    assert not torch.allclose(rep1.streams[0], rep2.streams[0])


def test_empty_stream_rejected():
    with pytest.raises(ValueError):
        HCMGFM(FusionConfig(d=32, heads=4))(torch.randn(0, 32), torch.randn(3, 32))


# ---- head ----------------------------------------------------------------------------------


def test_head_zero_weights():
    head = ClassifierHead(16)
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    logits = head(torch.randn(16))
    assert logits.tolist() == [0.0, 0.0]
    assert torch.softmax(logits, -1).tolist() == [0.5, 0.5]


def test_head_shape_and_shift_invariance():
    torch.manual_seed(0)
    head = ClassifierHead(16).double()
    logits = head(torch.randn(5, 16, dtype=torch.float64))
    assert logits.shape == (5, 2)
    p = torch.softmax(logits, -1)
    assert torch.allclose(torch.softmax(logits + 7.5, -1), p, atol=1e-9)
    with pytest.raises(ValueError):
        head(torch.randn(15, dtype=torch.float64))


def test_head_parameter_count():
    from dgsan.model import count_parameters

    assert count_parameters(ClassifierHead(128))["total"] == 258
