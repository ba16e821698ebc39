"""Transformer building blocks over column-layout sequences (..., d, L).

Pre-norm residual wiring throughout: x + Sublayer(LayerNorm(x)). Feed-forward
stacks use tanh, which is smooth everywhere so difference-based gradient
verification stays tight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor


@dataclass
class LinearParams:
    w: Tensor  # (out, in)
    b: Tensor  # (out, 1)


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> LinearParams:
    w = rng.normal(0.0, fan_in**-0.5, size=(fan_out, fan_in)).astype(dtype)
    b = np.zeros((fan_out, 1), dtype=dtype)
    return LinearParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


def linear(x, p: LinearParams) -> Tensor:
    return T.matmul(p.w, x) + p.b


@dataclass
class NormParams:
    gamma: Tensor  # (d, 1)
    beta: Tensor  # (d, 1)


def init_norm(d: int, dtype=np.float64) -> NormParams:
    return NormParams(
        Tensor(np.ones((d, 1), dtype=dtype), requires_grad=True),
        Tensor(np.zeros((d, 1), dtype=dtype), requires_grad=True),
    )


def norm_features(x, p: NormParams) -> Tensor:
    # Feature axis is -2 in column layout.
    return T.layer_norm(x, p.gamma, p.beta, axis=-2)


class Dropout:
    """Seeded dropout hook threaded through the blocks; None disables it."""

    def __init__(self, rate: float, rng: np.random.Generator, training: bool = True):
        self.rate = rate
        self.rng = rng
        self.training = training

    def __call__(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.rate, self.rng, training=self.training)


@dataclass
class AttentionParams:
    heads: int
    ln_q: NormParams
    ln_kv: NormParams | None  # present only for cross-attention
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams


def init_attention(
    rng: np.random.Generator, d: int, heads: int, cross: bool = False, dtype=np.float64
) -> AttentionParams:
    if d % heads != 0:
        raise ConfigError(f"head count {heads} must divide feature dim {d}")
    return AttentionParams(
        heads=heads,
        ln_q=init_norm(d, dtype),
        ln_kv=init_norm(d, dtype) if cross else None,
        q=init_linear(rng, d, d, dtype),
        k=init_linear(rng, d, d, dtype),
        v=init_linear(rng, d, d, dtype),
        o=init_linear(rng, d, d, dtype),
    )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, d, length = x.shape
    return x.reshape((*lead, heads, d // heads, length))


def attention_block(q_in: Tensor, kv_in: Tensor, p: AttentionParams, drop: Dropout | None = None) -> Tensor:
    """Residual multi-head attention; queries from q_in, keys/values from kv_in."""
    if q_in.shape[-2] != kv_in.shape[-2]:
        raise DimensionError(f"feature dims differ: {q_in.shape} vs {kv_in.shape}")
    hq = norm_features(q_in, p.ln_q)
    if kv_in is q_in:
        hkv = hq
    else:
        if p.ln_kv is None:
            raise ContractError("cross-attention call on self-attention parameters")
        hkv = norm_features(kv_in, p.ln_kv)
    q = _split_heads(linear(hq, p.q), p.heads)
    k = _split_heads(linear(hkv, p.k), p.heads)
    v = _split_heads(linear(hkv, p.v), p.heads)
    dh = q.shape[-2]
    scores = T.matmul(q.swapaxes(-1, -2), k) * (dh**-0.5)  # (..., h, Lq, Lk)
    weights = T.softmax(scores, axis=-1)
    if drop is not None:
        weights = drop(weights)
    ctx = T.matmul(v, weights.swapaxes(-1, -2))  # (..., h, dh, Lq)
    *lead, _, _, lq = ctx.shape
    out = linear(ctx.reshape((*lead, p.heads * dh, lq)), p.o)
    if drop is not None:
        out = drop(out)
    return q_in + out


@dataclass
class FfnParams:
    ln: NormParams
    inner: LinearParams
    out: LinearParams


def init_ffn(rng: np.random.Generator, d: int, hidden: int, dtype=np.float64) -> FfnParams:
    return FfnParams(
        ln=init_norm(d, dtype),
        inner=init_linear(rng, d, hidden, dtype),
        out=init_linear(rng, hidden, d, dtype),
    )


def ffn_block(x: Tensor, p: FfnParams, drop: Dropout | None = None) -> Tensor:
    h = T.ttanh(linear(norm_features(x, p.ln), p.inner))
    out = linear(h, p.out)
    if drop is not None:
        out = drop(out)
    return x + out


@dataclass
class EncoderBlockParams:
    attn: AttentionParams
    ffn: FfnParams


def init_encoder_block(
    rng: np.random.Generator, d: int, heads: int, ffn_hidden: int, dtype=np.float64
) -> EncoderBlockParams:
    return EncoderBlockParams(
        attn=init_attention(rng, d, heads, cross=False, dtype=dtype),
        ffn=init_ffn(rng, d, ffn_hidden, dtype),
    )


def encoder_block(x: Tensor, p: EncoderBlockParams, drop: Dropout | None = None) -> Tensor:
    return ffn_block(attention_block(x, x, p.attn, drop), p.ffn, drop)


def named_tensors(obj, prefix: str = ""):
    """Yield (dotted_name, Tensor) pairs from nested dataclasses / lists / dicts."""
    import dataclasses

    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for field in dataclasses.fields(obj):
            value = getattr(obj, field.name)
            sub = f"{prefix}.{field.name}" if prefix else field.name
            yield from named_tensors(value, sub)
    elif isinstance(obj, (list, tuple)):
        for i, value in enumerate(obj):
            yield from named_tensors(value, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key in obj:
            yield from named_tensors(obj[key], f"{prefix}.{key}" if prefix else str(key))
