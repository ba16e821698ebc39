"""Progressive attention encoding.

One layer (``pael``) self-refines a source sequence and then injects it into a
companion sequence through cross-attention: queries come from the companion,
keys and values from the freshly refined source, so the two updates are serial
rather than parallel. Two stack styles are built on top of it:

* the spatial stack guides filtered visual tokens with replicated instruction
  embeddings, carrying the instruction-query branch from layer to layer;
* the temporal stack runs over text tokens, each layer re-querying itself with
  a projection of the previous layer's output.

Both read the head token (column 0) of the final carried sequence through one
linear map, and the resulting local embedding is added to the encoder's global
token to form the final vision/text embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import (
    AttentionParams,
    Dropout,
    FfnParams,
    LinearParams,
    attention_block,
    ffn_block,
    init_attention,
    init_ffn,
    init_linear,
    linear,
)
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class PaelParams:
    self_attn: AttentionParams
    self_ffn: FfnParams
    cross_attn: AttentionParams
    cross_ffn: FfnParams
    dropout: float = 0.0


def init_pael(
    rng: np.random.Generator,
    d: int,
    heads: int,
    ffn_hidden: int | None = None,
    dropout: float = 0.0,
    dtype=np.float64,
) -> PaelParams:
    hidden = ffn_hidden if ffn_hidden is not None else 2 * d
    return PaelParams(
        self_attn=init_attention(rng, d, heads, cross=False, dtype=dtype),
        self_ffn=init_ffn(rng, d, hidden, dtype),
        cross_attn=init_attention(rng, d, heads, cross=True, dtype=dtype),
        cross_ffn=init_ffn(rng, d, hidden, dtype),
        dropout=dropout,
    )


def pael(h_s: Tensor, h_c: Tensor, params: PaelParams, drop: Dropout | None = None):
    """Return (refined_s, refined_c); shapes (d, N) and (d, N') are preserved.

    refined_s = FFN(SelfAttn(h_s)); refined_c = FFN(CrossAttn(h_c, refined_s)).
    """
    if h_s.shape[-2] != h_c.shape[-2]:
        raise DimensionError(f"feature dims differ: {h_s.shape} vs {h_c.shape}")
    s_out = ffn_block(attention_block(h_s, h_s, params.self_attn, drop), params.self_ffn, drop)
    c_out = ffn_block(attention_block(h_c, s_out, params.cross_attn, drop), params.cross_ffn, drop)
    return s_out, c_out


@dataclass
class SpatialPaeStack:
    layers: list
    guide_w: list  # per-layer (d, d) projections of the instruction sequence
    head: LinearParams


@dataclass
class TemporalPaeStack:
    layers: list
    step_w: list  # per-layer (d, d) projections of the previous output
    head: LinearParams


def init_spatial_stack(
    rng: np.random.Generator, d: int, heads: int, n_units: int, dropout: float = 0.0, dtype=np.float64
) -> SpatialPaeStack:
    if n_units < 1:
        raise ConfigError("spatial stack needs at least one unit")
    layers = [init_pael(rng, d, heads, dropout=dropout, dtype=dtype) for _ in range(n_units)]
    guides = [
        Tensor(rng.normal(0.0, d**-0.5, size=(d, d)).astype(dtype), requires_grad=True)
        for _ in range(n_units)
    ]
    return SpatialPaeStack(layers=layers, guide_w=guides, head=init_linear(rng, d, d, dtype))


def init_temporal_stack(
    rng: np.random.Generator, d: int, heads: int, n_units: int, dropout: float = 0.0, dtype=np.float64
) -> TemporalPaeStack:
    if n_units < 1:
        raise ConfigError("temporal stack needs at least one unit")
    layers = [init_pael(rng, d, heads, dropout=dropout, dtype=dtype) for _ in range(n_units)]
    steps = [
        Tensor(rng.normal(0.0, d**-0.5, size=(d, d)).astype(dtype), requires_grad=True)
        for _ in range(n_units)
    ]
    return TemporalPaeStack(layers=layers, step_w=steps, head=init_linear(rng, d, d, dtype))


def _head_token(seq: Tensor, head: LinearParams) -> Tensor:
    out = linear(T.gather(seq, np.array([0]), axis=-1), head)  # (..., d, 1)
    return out.reshape(out.shape[:-1])


def spatial_pae(tokens: Tensor, f_ins: Tensor, stack: SpatialPaeStack, drop: Dropout | None = None) -> Tensor:
    """Instruction-guided local embedding from refined tokens (..., d, k).

    Each unit self-refines the carried sequence and re-queries it with a fresh
    projection of the instruction embedding replicated k times; the query
    branch output is carried forward. f_ins is (..., d) or (d,).
    """
    k = tokens.shape[-1]
    ins_col = f_ins.reshape((*f_ins.shape, 1))
    cur = tokens
    for w, layer in zip(stack.guide_w, stack.layers):
        guide = T.broadcast_to(T.matmul(w, ins_col), (*cur.shape[:-1], k))
        _, cur = pael(cur, guide, layer, drop)
    return _head_token(cur, stack.head)


def temporal_pae(t_cls: Tensor, f_t: Tensor, stack: TemporalPaeStack, drop: Dropout | None = None) -> Tensor:
    """Local text embedding from the global token (..., d) and tokens (..., d, n).

    The carried sequence starts as [t_cls, F_t]; each unit re-queries it with a
    projection of itself, so the previous step's output activates the next.
    """
    cur = T.concat([t_cls.reshape((*t_cls.shape, 1)), f_t], axis=-1)
    for w, layer in zip(stack.step_w, stack.layers):
        _, cur = pael(cur, T.matmul(w, cur), layer, drop)
    return _head_token(cur, stack.head)


def compose_vision_embedding(f_cls: Tensor, f_loc: Tensor) -> Tensor:
    """Global + local, elementwise."""
    return f_cls + f_loc


def compose_text_embedding(t_cls: Tensor, t_loc: Tensor) -> Tensor:
    """Global + local, elementwise."""
    return t_cls + t_loc
