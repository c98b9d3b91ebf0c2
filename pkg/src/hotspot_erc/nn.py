"""Attention, feed-forward and pre-norm residual blocks on the tape engine.

The same functions serve single blocks and stacked expert banks: when the
weights carry a leading expert axis (``E x h x h``) the outputs gain that axis
too, so all experts are evaluated with one matmul per projection.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, fields, is_dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LN_EPS = 1e-5


@dataclass
class AttentionParams:
    head_count: int
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @property
    def width(self) -> int:
        return self.wq.shape[-1]


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    activation: str = "relu"


@dataclass
class NormParams:
    gain: Tensor
    shift: Tensor


@dataclass
class BlockParams:
    attn: AttentionParams
    ffn: FeedForwardParams
    norm1: NormParams
    norm2: NormParams


# ---------------------------------------------------------------- init


def derive_rng(seed: int, name: str) -> np.random.Generator:
    """PCG64 stream keyed by (seed, component name), stable across runs."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, lead: tuple[int, ...] = ()) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=lead + (fan_in, fan_out)), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def _bias(width: int, lead: tuple[int, ...]) -> Tensor:
    # stacked banks keep a unit row axis so the bias broadcasts over sequence rows
    return zeros(lead + (1, width) if lead else (width,))


def init_attention(rng: np.random.Generator, width: int, head_count: int, lead: tuple[int, ...] = ()) -> AttentionParams:
    if width % head_count:
        raise ShapeError(f"model width {width} is not divisible by head count {head_count}")
    return AttentionParams(
        head_count,
        xavier(rng, width, width, lead), _bias(width, lead),
        xavier(rng, width, width, lead), _bias(width, lead),
        xavier(rng, width, width, lead), _bias(width, lead),
        xavier(rng, width, width, lead), _bias(width, lead),
    )


def init_ffn(rng: np.random.Generator, width: int, inner: int, lead: tuple[int, ...] = (), activation: str = "relu") -> FeedForwardParams:
    return FeedForwardParams(
        xavier(rng, width, inner, lead), _bias(inner, lead),
        xavier(rng, inner, width, lead), _bias(width, lead),
        activation,
    )


def init_norm(width: int) -> NormParams:
    return NormParams(ones((width,)), zeros((width,)))


def init_block(rng: np.random.Generator, width: int, head_count: int, inner: int) -> BlockParams:
    return BlockParams(
        init_attention(rng, width, head_count),
        init_ffn(rng, width, inner),
        init_norm(width),
        init_norm(width),
    )


def named_tensors(obj, prefix: str = "") -> list[tuple[str, Tensor]]:
    """Flatten nested dataclasses / dicts / lists into dotted (name, Tensor) pairs."""
    out: list[tuple[str, Tensor]] = []
    if isinstance(obj, Tensor):
        return [(prefix, obj)]
    if is_dataclass(obj):
        items = [(f.name, getattr(obj, f.name)) for f in fields(obj)]
    elif isinstance(obj, dict):
        items = [(str(k), v) for k, v in obj.items()]
    elif isinstance(obj, (list, tuple)):
        items = [(str(i), v) for i, v in enumerate(obj)]
    else:
        return out
    for key, value in items:
        out.extend(named_tensors(value, f"{prefix}.{key}" if prefix else key))
    return out


def zero_residual_branches(block: BlockParams) -> None:
    """Zero the output projection and second FFN layer so the block is the identity."""
    for t in (block.attn.wo, block.attn.bo, block.ffn.w2, block.ffn.b2):
        t.data[...] = 0.0


# ---------------------------------------------------------------- forward


def sinusoidal_positions(length: int, width: int) -> np.ndarray:
    """Fixed absolute position table (length x width), sin on even and cos on odd features."""
    pos = np.arange(length)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, width, 2) / width))
    table = np.zeros((length, width))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: width // 2])
    return table



def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, width = x.shape
    x = T.reshape(x, (*lead, length, heads, width // heads))
    n = len(lead)
    return T.transpose(x, (*range(n), n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dk = x.shape
    n = len(lead)
    x = T.transpose(x, (*range(n), n + 1, n, n + 2))
    return T.reshape(x, (*lead, length, heads * dk))


def attention(query_seq: Tensor, key_value_seq: Tensor, params: AttentionParams, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention of ``query_seq`` over ``key_value_seq``.

    ``mask`` (Lq x Lk, True = attend) may not leave a query row with no keys.
    """
    h = params.width
    if query_seq.shape[-1] != h or key_value_seq.shape[-1] != h:
        raise ShapeError(f"attention: widths {query_seq.shape[-1]}, {key_value_seq.shape[-1]} must equal {h}")
    heads = params.head_count
    q = _split_heads(T.affine(query_seq, params.wq, params.bq), heads)
    k = _split_heads(T.affine(key_value_seq, params.wk, params.bk), heads)
    v = _split_heads(T.affine(key_value_seq, params.wv, params.bv), heads)
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / np.sqrt(h // heads))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (query_seq.shape[-2], key_value_seq.shape[-2]):
            raise ShapeError(f"attention: mask {mask.shape} does not match scores")
        if not mask.any(axis=-1).all():
            raise T.DegenerateMaskError("attention: a query row has every key masked")
        scores = T.masked_fill(scores, mask)
    weights = T.softmax(scores, axis=-1)
    return T.affine(_merge_heads(T.matmul(weights, v)), params.wo, params.bo)


def self_attention(x: Tensor, params: AttentionParams, mask: np.ndarray | None = None) -> Tensor:
    return attention(x, x, params, mask)


_ACTIVATIONS = {"relu": T.relu, "tanh": T.tanh, "sigmoid": T.sigmoid}


def feed_forward(x: Tensor, params: FeedForwardParams) -> Tensor:
    act = _ACTIVATIONS[params.activation]
    return T.affine(act(T.affine(x, params.w1, params.b1)), params.w2, params.b2)


def norm(x: Tensor, params: NormParams) -> Tensor:
    return T.layer_norm(x, params.gain, params.shift, LN_EPS)


def encoder_block(x: Tensor, params: BlockParams) -> Tensor:
    y = T.add(x, self_attention(norm(x, params.norm1), params.attn))
    return T.add(y, feed_forward(norm(y, params.norm2), params.ffn))


def cross_block(target: Tensor, source: Tensor, params: BlockParams) -> Tensor:
    y = T.add(target, attention(norm(target, params.norm1), source, params.attn))
    return T.add(y, feed_forward(norm(y, params.norm2), params.ffn))
