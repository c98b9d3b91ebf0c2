"""Mixture-of-Aligners: routed cross-attention experts per ordered modality pair.

Every function here is generic over leading axes. A single pair uses target
and source sequences of shape L x h; the model stacks all ordered pairs
along a leading pair axis (P x L x h) with parameters stacked the same way,
so the six aligners run as one batched computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, is_dataclass
from itertools import permutations

import numpy as np

from . import tensor as T
from .nn import (
    AttentionParams,
    BlockParams,
    FeedForwardParams,
    attention,
    cross_block,
    encoder_block,
    feed_forward,
    init_attention,
    init_block,
    init_ffn,
    sinusoidal_positions,
    xavier,
    zeros,
)
from .tensor import ShapeError, Tensor


class RoutingError(ValueError):
    pass


def ordered_pairs(modalities) -> list[tuple[str, str]]:
    """(target, source) pairs, grouped by target, sources in modality order."""
    return list(permutations(modalities, 2))


def pair_key(target: str, source: str) -> str:
    return f"{target}<-{source}"


@dataclass
class ExpertBank:
    """E aligner experts with weights stacked along a leading expert axis."""

    attn: AttentionParams
    ffn: FeedForwardParams

    @property
    def size(self) -> int:
        return self.attn.wq.shape[-3]


@dataclass
class RouterParams:
    weight: Tensor  # 2h x E
    bias: Tensor  # (E,)


@dataclass
class PairParams:
    experts: ExpertBank
    router: RouterParams
    restore: BlockParams


@dataclass
class MoAParams:
    """All ordered pairs stacked on axis 0 (order of ``keys``); memory blocks stacked per target."""

    keys: tuple[str, ...]
    pairs: PairParams
    memory: BlockParams


@dataclass
class RoutingDecision:
    logits: np.ndarray
    weights: np.ndarray
    kept: tuple[int, ...]


@dataclass
class UsageAccumulator:
    experts: int
    total: np.ndarray | None = None
    count: int = 0
    kept_hist: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.total is None:
            self.total = np.zeros(self.experts)

    def add(self, weights: np.ndarray) -> None:
        weights = np.atleast_2d(weights)
        self.total = self.total + weights.sum(axis=0)
        self.count += weights.shape[0]
        for row in weights:
            kept = tuple(int(i) for i in np.flatnonzero(row > 0))
            self.kept_hist[kept] = self.kept_hist.get(kept, 0) + 1

    def merge(self, other: "UsageAccumulator") -> None:
        self.total = self.total + other.total
        self.count += other.count
        for k, v in other.kept_hist.items():
            self.kept_hist[k] = self.kept_hist.get(k, 0) + v

    @property
    def usage(self) -> np.ndarray:
        if self.count < 1:
            raise RoutingError("usage undefined before any utterance is routed")
        return self.total / self.count


@dataclass
class MoAOutput:
    aligned: dict[str, Tensor]
    memory: dict[str, Tensor]
    combined: Tensor
    weights: Tensor  # P x L x E
    keys: tuple[str, ...]

    def routing(self) -> dict[str, np.ndarray]:
        return {k: self.weights.data[i] for i, k in enumerate(self.keys)}

    def usage(self) -> dict[str, np.ndarray]:
        return {k: w.mean(axis=0) for k, w in self.routing().items()}


# ---------------------------------------------------------------- init


def init_pair(rng: np.random.Generator, hidden: int, heads: int, inner: int, experts: int) -> PairParams:
    lead = (experts,)
    bank = ExpertBank(init_attention(rng, hidden, heads, lead), init_ffn(rng, hidden, inner, lead))
    router = RouterParams(xavier(rng, 2 * hidden, experts), zeros((experts,)))
    return PairParams(bank, router, init_block(rng, hidden, heads, inner))


def stack_params(items: list):
    """Stack structurally identical parameter trees along a new leading axis.

    1-D leaves (biases, norm gains) gain a unit row axis so they keep
    broadcasting over sequence rows.
    """
    first = items[0]
    if isinstance(first, Tensor):
        data = np.stack([t.data for t in items])
        if first.ndim == 1:
            data = data[:, None, :]
        return Tensor(data, requires_grad=True)
    if is_dataclass(first):
        kwargs = {}
        for f in fields(first):
            values = [getattr(it, f.name) for it in items]
            if isinstance(values[0], (Tensor,)) or is_dataclass(values[0]):
                kwargs[f.name] = stack_params(values)
            else:
                kwargs[f.name] = values[0]
        return type(first)(**kwargs)
    raise TypeError(f"cannot stack {type(first).__name__}")


def init_moa(rngs: dict[str, np.random.Generator], modalities, hidden: int, heads: int, inner: int, experts: int) -> MoAParams:
    """``rngs`` maps pair keys and ``memory.<m>`` to generators."""
    keys = tuple(pair_key(j, k) for j, k in ordered_pairs(modalities))
    pairs = stack_params([init_pair(rngs[key], hidden, heads, inner, experts) for key in keys])
    width = (len(modalities) - 1) * hidden
    memory = stack_params([init_block(rngs[f"memory.{m}"], width, heads, 2 * inner) for m in modalities])
    return MoAParams(keys, pairs, memory)


# ---------------------------------------------------------------- routing


def topk_keep_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries along the last axis; ties go to the lowest index."""
    logits = np.asarray(logits, dtype=np.float64)
    if k < 1:
        raise RoutingError(f"K must be >= 1, got {k}")
    if not np.all(np.isfinite(logits)):
        raise RoutingError("router logits must be finite")
    n = logits.shape[-1]
    if k >= n:
        return np.ones(logits.shape, dtype=bool)
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    keep = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(keep, order, True, axis=-1)
    return keep


def topk_masked_softmax(logits: Tensor, k: int) -> Tensor:
    """Softmax over the top-k logits along the last axis; all other weights are exactly 0."""
    keep = topk_keep_mask(logits.data, k)
    if keep.all():
        return T.softmax(logits, axis=-1)
    return T.softmax(T.masked_fill(logits, keep), axis=-1)


def topk_mask_softmax(logits, k: int) -> RoutingDecision:
    """Routing decision for a single logit vector of length E."""
    vec = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    if vec.ndim != 1 or vec.shape[0] < 1:
        raise RoutingError(f"expected a non-empty logit vector, got shape {vec.shape}")
    keep = topk_keep_mask(vec.data, k)
    pi = topk_masked_softmax(vec, k).data
    return RoutingDecision(vec.data.copy(), pi, tuple(int(i) for i in np.flatnonzero(keep)))


def router_logits(x_target: Tensor, x_source: Tensor, router: RouterParams) -> Tensor:
    """Logits from [target row ; mean-pooled source] for every target row (... x L x E)."""
    if x_source.shape[-2] < 1:
        raise RoutingError("cannot route against an empty source sequence")
    pooled = T.mean(x_source, axis=-2, keepdims=True)
    context = T.broadcast_to(pooled, x_target.shape[:-1] + (pooled.shape[-1],))
    return T.affine(T.concat([x_target, context], axis=-1), router.weight, router.bias)


def route_weights(x_target: Tensor, x_source: Tensor, router: RouterParams, k: int) -> Tensor:
    return topk_masked_softmax(router_logits(x_target, x_source, router), k)


def route_utterance(x_target: Tensor, x_source: Tensor, t: int, router: RouterParams, k: int) -> RoutingDecision:
    if not 0 <= t < x_target.shape[0]:
        raise IndexError(f"utterance {t} out of range for length {x_target.shape[0]}")
    return topk_mask_softmax(router_logits(x_target, x_source, router).data[t], k)


# ---------------------------------------------------------------- experts


def _with_expert_axis(x: Tensor) -> Tensor:
    return T.reshape(x, x.shape[:-2] + (1,) + x.shape[-2:])


def expert_outputs(x_target: Tensor, x_source: Tensor, bank: ExpertBank) -> Tensor:
    """All experts on the full target sequence (... x E x L x h).

    Expert e computes z = X_j + CrossAttn_e(X_j, X_k), then z + FFN_e(z).
    """
    q = _with_expert_axis(x_target)
    z = T.add(q, attention(q, _with_expert_axis(x_source), bank.attn))
    return T.add(z, feed_forward(z, bank.ffn))


def mix_experts(outputs: Tensor, weights: Tensor) -> Tensor:
    """Row-wise sum_e pi[t, e] * f_e[t] for outputs ... x E x L x h and weights ... x L x E."""
    w = T.swap_last(weights)
    w = T.reshape(w, w.shape + (1,))
    return T.sum(T.mul(outputs, w), axis=-3)


def align_pair(x_target: Tensor, x_source: Tensor, params: PairParams, k: int) -> tuple[Tensor, Tensor]:
    """Aligned target sequence (... x L x h) and routing weights (... x L x E)."""
    if x_target.shape[-1] != x_source.shape[-1]:
        raise ShapeError(f"align_pair: widths {x_target.shape[-1]} and {x_source.shape[-1]} differ")
    weights = route_weights(x_target, x_source, params.router, k)
    mixed = mix_experts(expert_outputs(x_target, x_source, params.experts), weights)
    return cross_block(mixed, x_source, params.restore), weights


def build_memory(aligned, memory: BlockParams, modalities) -> tuple[dict[str, Tensor], Tensor]:
    """Per target: concat of aligned sources then one self-attention block; then concat over targets.

    ``aligned`` is either a dict keyed ``"j<-k"`` or a P x L x h tensor in
    ``ordered_pairs`` order. Returns the per-target memories (L x (M-1)h) and
    the combined L x M(M-1)h representation.
    """
    modalities = tuple(modalities)
    n = len(modalities)
    if isinstance(aligned, dict):
        parts = []
        for j, k in ordered_pairs(modalities):
            key = pair_key(j, k)
            if key not in aligned:
                raise KeyError(f"missing aligned representation for pair {key}")
            x = aligned[key]
            parts.append(T.reshape(x, (1,) + x.shape))
        stacked = T.concat(parts, axis=0)
    else:
        stacked = aligned
    length, h = stacked.shape[-2:]
    # P x L x h -> M x (M-1) x L x h -> M x L x (M-1)h
    per_target = T.reshape(T.transpose(T.reshape(stacked, (n, n - 1, length, h)), (0, 2, 1, 3)), (n, length, (n - 1) * h))
    mem = encoder_block(per_target, memory)
    combined = T.reshape(T.transpose(mem, (1, 0, 2)), (length, n * (n - 1) * h))
    memories = {m: T.gather(mem, i) for i, m in enumerate(modalities)}
    return memories, combined


def moa_forward(encoded: dict[str, Tensor], params: MoAParams, k: int, modalities, positions: bool = True) -> MoAOutput:
    """All ordered pairs in one batched pass; ``positions`` adds a fixed
    utterance-index encoding to the aligner inputs."""
    modalities = tuple(modalities)
    index = {m: i for i, m in enumerate(modalities)}
    pairs = ordered_pairs(modalities)
    enc = T.concat([T.reshape(encoded[m], (1,) + encoded[m].shape) for m in modalities], axis=0)
    if positions:
        length, h = enc.shape[1:]
        enc = T.add(enc, Tensor(sinusoidal_positions(length, h)[None]))
    targets = T.gather(enc, np.array([index[j] for j, _ in pairs]))
    sources = T.gather(enc, np.array([index[s] for _, s in pairs]))
    aligned, weights = align_pair(targets, sources, params.pairs, k)
    memories, combined = build_memory(aligned, params.memory, modalities)
    keys = tuple(pair_key(j, s) for j, s in pairs)
    aligned_map = {key: T.gather(aligned, i) for i, key in enumerate(keys)}
    return MoAOutput(aligned_map, memories, combined, weights, keys)


# ---------------------------------------------------------------- load balancing


def load_balance_value(usage: np.ndarray) -> float:
    """sum_e u_e log u_e + log E, with 0 log 0 = 0."""
    u = np.asarray(usage, dtype=np.float64)
    pos = u > 0
    return float(np.sum(u[pos] * np.log(u[pos])) + math.log(u.size))


def load_balance_loss(acc) -> float:
    """Regularizer value from one accumulator, or the mean over a dict of them."""
    if isinstance(acc, UsageAccumulator):
        return load_balance_value(acc.usage)
    return float(np.mean([load_balance_value(a.usage) for a in acc.values()]))


def load_balance_tensor(weights: Tensor) -> Tensor:
    """Differentiable regularizer for ... x L x E routing weights, averaged over routers.

    Usage u_e is the mean routing weight over the L utterances.
    """
    experts = weights.shape[-1]
    usage = T.mean(weights, axis=-2)
    per_router = T.sum(T.xlogx(usage), axis=-1)
    return T.add(T.mean(per_router), Tensor(math.log(experts)))
