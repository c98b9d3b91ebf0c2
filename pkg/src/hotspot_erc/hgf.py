"""Hotspot-gated fusion and per-modality encoders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BlockParams, encoder_block, init_block, xavier, zeros
from .tensor import ShapeError, Tensor

MODALITIES = ("T", "A", "V")


@dataclass
class ModalPair:
    modality: str
    content: Tensor
    hotspot: Tensor

    def __post_init__(self):
        if self.content.shape != self.hotspot.shape or self.content.ndim != 2:
            raise ShapeError(
                f"modality {self.modality}: content {self.content.shape} and hotspot {self.hotspot.shape} must be equal L x d"
            )
        if self.content.shape[0] < 1:
            raise ShapeError(f"modality {self.modality}: empty sequence")


@dataclass
class GateParams:
    weight: Tensor  # 2d x 1
    bias: Tensor  # (1,)


@dataclass
class EncoderParams:
    proj_w: Tensor
    proj_b: Tensor
    block: BlockParams


@dataclass
class EncodedModality:
    modality: str
    x: Tensor


def init_gate(rng: np.random.Generator, dim: int) -> GateParams:
    return GateParams(xavier(rng, 2 * dim, 1), zeros((1,)))


def init_encoder(rng: np.random.Generator, dim: int, hidden: int, heads: int, inner: int) -> EncoderParams:
    return EncoderParams(xavier(rng, dim, hidden), zeros((hidden,)), init_block(rng, hidden, heads, inner))


def hgf_gate(pair: ModalPair, params: GateParams) -> tuple[Tensor, Tensor]:
    """Return the fused sequence Z and the per-utterance gate alpha (L x 1).

    alpha = sigmoid([C || H] W + b);  Z = C + alpha * (H - C)
    """
    c, h = pair.content, pair.hotspot
    if params.weight.shape != (2 * c.shape[1], 1):
        raise ShapeError(f"gate weight {params.weight.shape} does not fit feature width {c.shape[1]}")
    alpha = T.sigmoid(T.affine(T.concat([c, h], axis=1), params.weight, params.bias))
    z = T.add(c, T.mul(alpha, T.sub(h, c)))
    # rounding can overshoot the hull by an ulp; the correction carries no gradient
    hull = np.clip(z.data, np.minimum(c.data, h.data), np.maximum(c.data, h.data))
    if not np.array_equal(hull, z.data):
        z = T.add(z, Tensor(hull - z.data))
    return z, alpha


def ablation_bypass(pair: ModalPair) -> Tensor:
    """No-fusion baseline input: the content sequence, hotspots ignored."""
    return pair.content


def encode_modality(z: Tensor, params: EncoderParams, modality: str = "") -> EncodedModality:
    x = T.affine(z, params.proj_w, params.proj_b)
    return EncodedModality(modality, encoder_block(x, params.block))
