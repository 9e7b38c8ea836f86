"""Parameterized sequence-model layers on top of the autodiff core.

Every layer is a pure function of (params, inputs): embeddings, linear score
heads, an LSTM with padded-step state carry, and a pre-norm transformer block
with strictly causal multi-head self-attention. Masks and ids are plain numpy
arrays; only real-valued data lives in Tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DimensionError,
    Tensor,
    add,
    broadcast_last,
    concat,
    div,
    gather_rows,
    matmul,
    mean_last,
    mul,
    relu,
    reshape,
    scale,
    shift,
    sigmoid,
    softmax_masked,
    sqrt,
    sub,
    tanh,
    take_step,
    transpose,
)

LAYER_NORM_EPS = 1e-5


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingTable:
    """Id -> dense vector lookup. Row 0 is the padding id and stays all-zero.

    The padding row is excluded from updates by zeroing its gradient before
    each optimizer step (see ``freeze_padding_row``).
    """

    rows: int
    dim: int
    weights: Tensor
    name: str = ""

    @classmethod
    def create(cls, rows: int, dim: int, rng: np.random.Generator, name: str = "") -> "EmbeddingTable":
        w = rng.normal(0.0, 0.1, size=(rows, dim))
        w[0] = 0.0
        return cls(rows=rows, dim=dim, weights=Tensor(w, requires_grad=True), name=name)

    def freeze_padding_row(self) -> None:
        if self.weights.grad is not None:
            self.weights.grad[0] = 0.0


def embed_lookup(table: EmbeddingTable, ids: np.ndarray) -> Tensor:
    """Row lookup: output[..., :] = weights[ids[...]]."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        bad = int(idx.min() if idx.min() < 0 else idx.max())
        raise IndexError(
            f"id {bad} out of range for embedding table '{table.name}' with {table.rows} rows"
        )
    return gather_rows(table.weights, idx)


# ---------------------------------------------------------------------------
# LSTM


@dataclass
class LstmParams:
    """Gate weights for one LSTM. Each gate maps concat(x_t, h_{t-1}) -> hidden."""

    input_dim: int
    hidden_dim: int
    w_i: Tensor
    w_f: Tensor
    w_o: Tensor
    w_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    @classmethod
    def create(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> "LstmParams":
        z = input_dim + hidden_dim

        def gate():
            return xavier(rng, z, hidden_dim)

        return cls(
            input_dim=input_dim,
            hidden_dim=hidden_dim,
            w_i=gate(),
            w_f=gate(),
            w_o=gate(),
            w_g=gate(),
            b_i=zeros_param(hidden_dim),
            # forget gate biased open so early training keeps state
            b_f=Tensor(np.ones(hidden_dim), requires_grad=True),
            b_o=zeros_param(hidden_dim),
            b_g=zeros_param(hidden_dim),
        )


def lstm_forward(params: LstmParams, x: Tensor, valid_mask: np.ndarray) -> Tensor:
    """Run the LSTM over [B, T, input_dim], carrying state through padding.

    h_0 = c_0 = 0. At steps where ``valid_mask`` is false the hidden and cell
    states pass through unchanged, so right-padding never alters state.
    """
    b_rows, t_len, in_dim = x.shape
    if in_dim != params.input_dim:
        raise DimensionError(f"lstm input dim {in_dim} != params input dim {params.input_dim}")
    hid = params.hidden_dim
    valid = np.asarray(valid_mask, dtype=bool)
    h = Tensor(np.zeros((b_rows, hid)))
    c = Tensor(np.zeros((b_rows, hid)))
    steps = []
    for t in range(t_len):
        col = valid[:, t]
        if not col.any():
            steps.append(reshape(h, (b_rows, 1, hid)))
            continue
        xt = take_step(x, t, axis=1)
        z = concat([xt, h], axis=1)
        gi = sigmoid(add(matmul(z, params.w_i), params.b_i))
        gf = sigmoid(add(matmul(z, params.w_f), params.b_f))
        go = sigmoid(add(matmul(z, params.w_o), params.b_o))
        gg = tanh(add(matmul(z, params.w_g), params.b_g))
        c_new = add(mul(gf, c), mul(gi, gg))
        h_new = mul(go, tanh(c_new))
        if col.all():
            h, c = h_new, c_new
        else:
            keep = np.repeat(col[:, None].astype(np.float64), hid, axis=1)
            keep_t = Tensor(keep)
            drop_t = Tensor(1.0 - keep)
            h = add(mul(keep_t, h_new), mul(drop_t, h))
            c = add(mul(keep_t, c_new), mul(drop_t, c))
        steps.append(reshape(h, (b_rows, 1, hid)))
    return concat(steps, axis=1)


# ---------------------------------------------------------------------------
# attention / transformer


@dataclass
class AttentionParams:
    """One pre-norm transformer block: causal MHSA plus a 4x feed-forward."""

    model_dim: int
    n_heads: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_ff1: Tensor
    w_ff2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    @classmethod
    def create(cls, model_dim: int, n_heads: int, rng: np.random.Generator) -> "AttentionParams":
        if model_dim % n_heads != 0:
            raise DimensionError(f"model_dim {model_dim} not divisible by n_heads {n_heads}")
        ff = 4 * model_dim
        return cls(
            model_dim=model_dim,
            n_heads=n_heads,
            w_q=xavier(rng, model_dim, model_dim),
            w_k=xavier(rng, model_dim, model_dim),
            w_v=xavier(rng, model_dim, model_dim),
            w_o=xavier(rng, model_dim, model_dim),
            w_ff1=xavier(rng, model_dim, ff),
            w_ff2=xavier(rng, ff, model_dim),
            ln1_gain=Tensor(np.ones(model_dim), requires_grad=True),
            ln1_bias=zeros_param(model_dim),
            ln2_gain=Tensor(np.ones(model_dim), requires_grad=True),
            ln2_bias=zeros_param(model_dim),
        )


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    d = x.shape[-1]
    centered = sub(x, broadcast_last(mean_last(x), d))
    var = mean_last(mul(centered, centered))
    std = sqrt(shift(var, LAYER_NORM_EPS))
    normed = div(centered, broadcast_last(std, d))
    return add(mul(normed, gain), bias)


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> Tensor:
    """Inverted-dropout multiplier: 0 with prob rate, else 1/(1-rate)."""
    keep = rng.random(shape) >= rate
    return Tensor(keep.astype(np.float64) / (1.0 - rate))


def attention_mask(valid_mask: np.ndarray, n_heads: int) -> np.ndarray:
    """Combined [B, H, T, T] mask: target attends keys <= its position and valid."""
    valid = np.asarray(valid_mask, dtype=bool)
    b_rows, t_len = valid.shape
    causal = np.tril(np.ones((t_len, t_len), dtype=bool))
    m = causal[None, :, :] & valid[:, None, :]
    # windows fill from position 0, so every row keeps at least key 0
    return np.broadcast_to(m[:, None, :, :], (b_rows, n_heads, t_len, t_len))


def causal_self_attention(
    params: AttentionParams,
    x: Tensor,
    valid_mask: np.ndarray,
    n_heads: int | None = None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Multi-head self-attention where position t reads only positions <= t."""
    b_rows, t_len, d = x.shape
    if d != params.model_dim:
        raise DimensionError(f"input dim {d} != model_dim {params.model_dim}")
    heads = n_heads if n_heads is not None else params.n_heads
    if d % heads != 0:
        raise DimensionError(f"model_dim {d} not divisible by head count {heads}")
    dh = d // heads

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (b_rows, t_len, heads, dh)), (0, 2, 1, 3))

    q = split_heads(matmul(x, params.w_q))
    k = split_heads(matmul(x, params.w_k))
    v = split_heads(matmul(x, params.w_v))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = softmax_masked(scores, attention_mask(valid_mask, heads))
    if dropout > 0.0 and rng is not None:
        probs = mul(probs, dropout_mask(rng, probs.shape, dropout))
    ctx = matmul(probs, v)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b_rows, t_len, d))
    return matmul(merged, params.w_o)


def transformer_block(
    params: AttentionParams,
    x: Tensor,
    valid_mask: np.ndarray,
    n_heads: int | None = None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-norm residual block: x + Attn(LN1(x)), then + FFN(LN2(.))."""
    attn = causal_self_attention(
        params, layer_norm(x, params.ln1_gain, params.ln1_bias),
        valid_mask, n_heads=n_heads, dropout=dropout, rng=rng,
    )
    y = add(x, attn)
    hidden = relu(matmul(layer_norm(y, params.ln2_gain, params.ln2_bias), params.w_ff1))
    if dropout > 0.0 and rng is not None:
        hidden = mul(hidden, dropout_mask(rng, hidden.shape, dropout))
    return add(y, matmul(hidden, params.w_ff2))


# ---------------------------------------------------------------------------
# score head


@dataclass
class LinearHead:
    """Per-step scalar logit: x[b, t] . w + b, no activation."""

    w: Tensor
    b: Tensor

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator) -> "LinearHead":
        return cls(w=xavier(rng, dim, 1), b=zeros_param(1))


def linear_head(head: LinearHead, x: Tensor) -> Tensor:
    b_rows, t_len, _ = x.shape
    out = add(matmul(x, head.w), head.b)
    return reshape(out, (b_rows, t_len))
