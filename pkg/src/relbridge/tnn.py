"""TabTransformer-style table encoder.

Categorical columns become tokens (one embedding table per column) and pass
through pre-norm multi-head self-attention blocks; numerical columns skip the
attention stack and join after layer normalization.  A final linear + ReLU
projects the concatenation to the table embedding.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, InvalidArgumentError
from .nn import LayerNorm, Linear, Module, component_rng
from .tensor import Parameter


@dataclass
class TnnConfig:
    d: int = 32
    heads: int = 4
    n_blocks: int = 2
    d_table: int = 64
    ff_mult: int = 4

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigurationError(f"token dim {self.d} is not divisible by {self.heads} heads")
        if self.n_blocks < 0 or self.d_table < 1:
            raise ConfigurationError("n_blocks must be >= 0 and d_table >= 1")


class ColumnTokenizer(Module):
    """One ``(vocab, d)`` embedding table per categorical column; row 0 is missing/unseen."""

    def __init__(self, cardinalities, d, rng):
        self.d = d
        self.tables = [
            Parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(card, d)), f"col{j}")
            for j, card in enumerate(cardinalities)
        ]

    def forward(self, codes):
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim != 2 or codes.shape[1] != len(self.tables):
            raise DimensionError(f"expected codes of shape (n, {len(self.tables)}), got {codes.shape}")
        if not self.tables:
            raise InvalidArgumentError("tokenize needs at least one categorical column")
        n = codes.shape[0]
        tokens = [T.reshape(T.embedding(tab, codes[:, j]), (n, 1, self.d)) for j, tab in enumerate(self.tables)]
        return tokens[0] if len(tokens) == 1 else T.concat(tokens, axis=1)


def tokenize(codes, tokenizer):
    return tokenizer(codes)


class MultiHeadAttention(Module):
    def __init__(self, d, heads, rng):
        if d % heads:
            raise ConfigurationError(f"token dim {d} is not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)

    def forward(self, x):
        # x: (n, c, d); each row attends over its own c column tokens
        dh = self.d // self.heads
        q, k, v = self.q(x), self.k(x), self.v(x)
        outputs = []
        for h in range(self.heads):
            lo, hi = h * dh, (h + 1) * dh
            qh, kh, vh = (T.narrow(t, -1, lo, hi) for t in (q, k, v))
            scores = T.scale(T.bmm(qh, T.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
            outputs.append(T.bmm(T.softmax(scores), vh))
        merged = outputs[0] if len(outputs) == 1 else T.concat(outputs, axis=-1)
        return self.out(merged)


class AttentionBlock(Module):
    """``x + MHA(LN(x))`` followed by ``x + FF(LN(x))``."""

    def __init__(self, d, heads, rng, ff_mult=4):
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.ff1 = Linear(d, ff_mult * d, rng)
        self.ff2 = Linear(ff_mult * d, d, rng)

    def forward(self, x):
        x = T.add(x, self.attn(self.norm1(x)))
        return T.add(x, self.ff2(T.relu(self.ff1(self.norm2(x)))))


def attention_block(tokens, block):
    return block(tokens)


class TableEncoder(Module):
    """Table rows -> ``(n, d_table)`` embeddings."""

    def __init__(self, n_numerical, cardinalities, cfg, seed):
        if not cardinalities and n_numerical == 0:
            raise ConfigurationError("table encoder needs at least one feature column")
        self.cfg = cfg
        self.n_categorical = len(cardinalities)
        self.n_numerical = n_numerical
        rng = component_rng(seed, "tnn")
        self.tokenizer = ColumnTokenizer(cardinalities, cfg.d, rng)
        self.blocks = [AttentionBlock(cfg.d, cfg.heads, rng, cfg.ff_mult) for _ in range(cfg.n_blocks if cardinalities else 0)]
        # layer norm over a single value is constant, so one numerical column passes through as z-scored
        self.num_norm = LayerNorm(n_numerical) if n_numerical > 1 else None
        self.proj = Linear(self.n_categorical * cfg.d + n_numerical, cfg.d_table, rng)

    def forward(self, features):
        n = features.n_rows
        if features.n_categorical != self.n_categorical or features.n_numerical != self.n_numerical:
            raise DimensionError("features do not match the encoder's column layout")
        parts = []
        if self.n_categorical:
            h = self.tokenizer(features.categorical)
            for block in self.blocks:
                h = block(h)
            parts.append(T.reshape(h, (n, self.n_categorical * self.cfg.d)))
        if self.n_numerical:
            num = T.Tensor(features.numerical)
            parts.append(self.num_norm(num) if self.num_norm is not None else num)
        x = parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)
        return T.relu(self.proj(x))


def table_encode(features, cfg, seed, encoder=None):
    encoder = encoder or TableEncoder(features.n_numerical, features.cardinalities, cfg, seed)
    return encoder(features)
