import numpy as np
import pytest

from relbridge import tensor as T
from relbridge.errors import ConfigurationError, InvalidArgumentError
from relbridge.table import EncodingReport, TableFeatures
from relbridge.tnn import AttentionBlock, ColumnTokenizer, TableEncoder, TnnConfig, attention_block, table_encode, tokenize

from conftest import check_grads


def features(rng, n, cards, m):
    cat = np.stack([rng.integers(0, c, n) for c in cards], axis=1) if cards else np.zeros((n, 0), dtype=np.int64)
    return TableFeatures(cat, rng.normal(size=(n, m)), list(cards), EncodingReport())


def dense_ln(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + eps)


def dense_block(x, blk):
    """Direct per-row, per-head evaluation of a pre-norm attention block."""
    d, h = blk.attn.d, blk.attn.heads
    dh = d // h
    p = {k: v.data for k, v in blk.named_parameters()}
    out = np.empty_like(x)
    for r in range(x.shape[0]):
        t = x[r]
        z = dense_ln(t) * p["norm1.gamma"] + p["norm1.beta"]
        q = z @ p["attn.q.weight"] + p["attn.q.bias"]
        k = z @ p["attn.k.weight"] + p["attn.k.bias"]
        v = z @ p["attn.v.weight"] + p["attn.v.bias"]
        heads = []
        for j in range(h):
            s = slice(j * dh, (j + 1) * dh)
            logits = q[:, s] @ k[:, s].T / np.sqrt(dh)
            w = np.exp(logits - logits.max(1, keepdims=True))
            w /= w.sum(1, keepdims=True)
            heads.append(w @ v[:, s])
        t = t + np.concatenate(heads, axis=1) @ p["attn.out.weight"] + p["attn.out.bias"]
        z = dense_ln(t) * p["norm2.gamma"] + p["norm2.beta"]
        ff = np.maximum(z @ p["ff1.weight"] + p["ff1.bias"], 0) @ p["ff2.weight"] + p["ff2.bias"]
        out[r] = t + ff
    return out


def test_tokenizer_lookup_and_missing_rows():
    tok = ColumnTokenizer([2], 2, np.random.default_rng(0))
    tok.tables[0].data[...] = [[0.0, 0.0], [1.0, 1.0]]
    np.testing.assert_array_equal(tokenize(np.array([[1], [0]]), tok).data, [[[1, 1]], [[0, 0]]])
    tok = ColumnTokenizer([3, 4], 4, np.random.default_rng(0))
    out = tok(np.zeros((3, 2), dtype=np.int64)).data
    assert out.shape == (3, 2, 4)
    np.testing.assert_array_equal(out[:, 1], np.tile(tok.tables[1].data[0], (3, 1)))


def test_tokenizer_rejects_out_of_vocab_code():
    tok = ColumnTokenizer([3], 4, np.random.default_rng(0))
    with pytest.raises(InvalidArgumentError):
        tok(np.array([[3]]))


def test_heads_must_divide_dim():
    with pytest.raises(ConfigurationError):
        TnnConfig(d=10, heads=4)
    with pytest.raises(ConfigurationError):
        AttentionBlock(10, 4, np.random.default_rng(0))


def test_block_matches_dense_oracle():
    rng = np.random.default_rng(1)
    blk = AttentionBlock(8, 2, rng)
    for p in blk.parameters():
        p.data[...] = rng.normal(size=p.shape) * 0.5
    x = rng.normal(size=(2, 3, 8))
    np.testing.assert_allclose(attention_block(T.Tensor(x), blk).data, dense_block(x, blk), rtol=0, atol=1e-10)


def test_single_token_attention_is_value_path():
    rng = np.random.default_rng(2)
    blk = AttentionBlock(4, 2, rng)
    x = rng.normal(size=(3, 1, 4))
    np.testing.assert_allclose(blk(T.Tensor(x)).data, dense_block(x, blk), atol=1e-12)
    scores = T.softmax(T.Tensor(rng.normal(size=(3, 1, 1)))).data
    np.testing.assert_array_equal(scores, 1.0)


def test_identical_tokens_get_identical_attention_output():
    rng = np.random.default_rng(3)
    blk = AttentionBlock(8, 4, rng)
    tok = rng.normal(size=8)
    x = np.stack([tok, tok, rng.normal(size=8)])[None]
    attn = blk.attn(blk.norm1(T.Tensor(x))).data
    np.testing.assert_array_equal(attn[0, 0], attn[0, 1])


def test_attention_is_equivariant_over_columns():
    rng = np.random.default_rng(4)
    blk = AttentionBlock(8, 2, rng)
    x = rng.normal(size=(3, 4, 8))
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_allclose(blk(T.Tensor(x[:, perm])).data, blk(T.Tensor(x)).data[:, perm], atol=1e-12)


def test_encoder_degenerate_stacks():
    rng = np.random.default_rng(5)
    f = features(rng, 4, [3, 2], 0)
    enc = TableEncoder(0, [3, 2], TnnConfig(d=4, heads=2, n_blocks=0, d_table=5), seed=0)
    flat = np.concatenate([enc.tokenizer.tables[j].data[f.categorical[:, j]] for j in range(2)], axis=1)
    expected = np.maximum(flat @ enc.proj.weight.data + enc.proj.bias.data, 0)
    np.testing.assert_allclose(enc(f).data, expected, rtol=1e-12)

    g = features(rng, 6, [], 3)
    enc = TableEncoder(3, [], TnnConfig(d=4, heads=2, d_table=5), seed=0)
    assert enc.blocks == []
    expected = np.maximum(dense_ln(g.numerical) @ enc.proj.weight.data, 0)
    np.testing.assert_allclose(enc(g).data, expected, rtol=1e-10)


def test_encoder_needs_some_feature():
    with pytest.raises(ConfigurationError):
        TableEncoder(0, [], TnnConfig(), seed=0)


def test_table_encode_shape_and_determinism():
    rng = np.random.default_rng(6)
    f = features(rng, 7, [4, 5, 3], 2)
    cfg = TnnConfig(d=8, heads=2, n_blocks=2, d_table=6)
    a, b = table_encode(f, cfg, seed=3), table_encode(f, cfg, seed=3)
    assert a.shape == (7, 6)
    np.testing.assert_array_equal(a.data, b.data)


def test_row_independence_is_exact():
    rng = np.random.default_rng(7)
    f = features(rng, 40, [4, 5, 3], 2)
    enc = TableEncoder(2, [4, 5, 3], TnnConfig(d=8, heads=2, n_blocks=2, d_table=6), seed=1)
    full = enc(f).data
    rows = rng.choice(40, 11, replace=False)
    assert np.array_equal(enc(f.take(rows)).data, full[rows])


@pytest.mark.parametrize("seed", range(3))
def test_encoder_gradient_check(seed):
    rng = np.random.default_rng(seed)
    f = features(rng, 3, [3, 4], 2)
    cfg = TnnConfig(d=4, heads=2, n_blocks=1, d_table=3)
    enc = TableEncoder(2, [3, 4], cfg, seed=seed)
    for p in enc.parameters():
        p.data[...] = rng.normal(size=p.shape) * 0.5
    names = [n for n, _ in enc.named_parameters()]
    target = rng.normal(size=(3, 3))

    def build(*params):
        _bind(enc, dict(zip(names, params)))
        return T.sum(T.mul(enc(f), T.Tensor(target)))

    check_grads(build, [p.data.copy() for p in enc.parameters()])


def _bind(module, state):
    """Point every parameter attribute of ``module`` at the tensors in ``state``."""
    for name, tensor in state.items():
        *path, leaf = name.split(".")
        obj = module
        for part in path:
            obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
        if isinstance(obj, list):
            obj[int(leaf)] = tensor
        else:
            setattr(obj, leaf, tensor)
