"""Full model: gated fusion -> encoders -> {MoA || relational graph} -> classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .graph import RelationalGNNParams, cached_graph, init_rgnn, multi_concat, pack_nodes, rgnn_forward
from .hgf import (
    MODALITIES,
    EncoderParams,
    GateParams,
    ModalPair,
    ablation_bypass,
    encode_modality,
    hgf_gate,
    init_encoder,
    init_gate,
)
from .moa import MoAParams, init_moa, load_balance_tensor, moa_forward, ordered_pairs, pair_key
from .nn import derive_rng, named_tensors, xavier, zeros
from .tensor import ShapeError, Tensor

MODES = ("baseline", "hgf", "hgf+moa")


@dataclass
class ModelConfig:
    dims: dict = field(default_factory=lambda: {"T": 16, "A": 16, "V": 16})
    hidden: int = 32
    heads: int = 4
    ffn_inner: int = 64
    experts: int = 4
    top_k: int = 2
    lb_weight: float = 0.01
    classes: int = 6
    class_weights: list | None = None
    mode: str = "hgf+moa"
    window_past: int = 4
    window_future: int = 4
    cross_modal: bool = True
    gnn_layers: int = 2
    moa_positions: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown ablation mode '{self.mode}', expected one of {MODES}")
        if self.lb_weight < 0:
            raise ValueError("lb_weight must be >= 0")
        if self.top_k < 1 or self.experts < 1:
            raise ValueError("experts and top_k must be >= 1")
        if any(int(d) < 1 for d in self.dims.values()) or self.hidden < 1 or self.classes < 2:
            raise ValueError("dimensions must be positive")
        if self.hidden % self.heads or (2 * self.hidden) % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.class_weights is not None and len(self.class_weights) != self.classes:
            raise ValueError("class_weights must have one entry per class")

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m in self.dims)

    @property
    def uses_gate(self) -> bool:
        return self.mode != "baseline"

    @property
    def uses_moa(self) -> bool:
        return self.mode == "hgf+moa"

    @property
    def representation_width(self) -> int:
        n = len(self.modalities)
        graph = n * self.hidden
        return graph + n * (n - 1) * self.hidden if self.uses_moa else graph

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class ModelParams:
    encoders: dict[str, EncoderParams]
    gnn: RelationalGNNParams
    classifier_w: Tensor
    classifier_b: Tensor
    gates: dict[str, GateParams] | None = None
    moa: MoAParams | None = None
    flat: np.ndarray | None = field(default=None, repr=False)
    _named: list | None = field(default=None, repr=False)

    def named(self) -> list[tuple[str, Tensor]]:
        if self._named is None:
            out = []
            for name in ("gates", "encoders", "moa", "gnn"):
                part = getattr(self, name)
                if part is not None:
                    out.extend(named_tensors(part, name))
            out.append(("classifier.w", self.classifier_w))
            out.append(("classifier.b", self.classifier_b))
            self._named = out
        return self._named

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    def pack(self) -> np.ndarray:
        """Move every parameter into one contiguous buffer (tensors become views)."""
        tensors = self.tensors()
        flat = np.concatenate([t.data.ravel() for t in tensors])
        pos = 0
        for t in tensors:
            n = t.data.size
            t.data = flat[pos : pos + n].reshape(t.data.shape)
            pos += n
        self.flat = flat
        return flat

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([np.zeros(t.data.size) if t.grad is None else t.grad.ravel() for t in self.tensors()])


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Each component draws from its own (seed, name) stream, so components
    shared between ablation modes start from identical values."""
    h, mods = config.hidden, config.modalities
    encoders = {
        m: init_encoder(derive_rng(seed, f"encoder.{m}"), int(config.dims[m]), h, config.heads, config.ffn_inner)
        for m in mods
    }
    gnn = init_rgnn(derive_rng(seed, "gnn"), h, mods, config.gnn_layers)
    crng = derive_rng(seed, f"classifier.{config.mode == 'hgf+moa'}")
    params = ModelParams(encoders, gnn, xavier(crng, config.representation_width, config.classes), zeros((config.classes,)))
    if config.uses_gate:
        params.gates = {m: init_gate(derive_rng(seed, f"gate.{m}"), int(config.dims[m])) for m in mods}
    if config.uses_moa:
        rngs = {pair_key(j, k): derive_rng(seed, f"pair.{j}<-{k}") for j, k in ordered_pairs(mods)}
        rngs.update({f"memory.{m}": derive_rng(seed, f"memory.{m}") for m in mods})
        params.moa = init_moa(rngs, mods, h, config.heads, config.ffn_inner, config.experts)
    params.pack()
    return params


@dataclass
class ForwardOutput:
    logits: Tensor
    lb: Tensor | None
    gates: dict[str, np.ndarray]
    routing: dict[str, np.ndarray]
    representation: Tensor


def dialogue_pairs(sample) -> dict[str, ModalPair]:
    return {
        m: ModalPair(m, Tensor(sample.content[m]), Tensor(sample.hotspot[m])) for m in sample.content
    }


def forward(pairs: dict[str, ModalPair], params: ModelParams, config: ModelConfig) -> ForwardOutput:
    mods = config.modalities
    missing = [m for m in mods if m not in pairs]
    if missing:
        raise KeyError(f"dialogue is missing modalities {missing}")
    lengths = {pairs[m].content.shape[0] for m in mods}
    if len(lengths) != 1:
        raise ShapeError(f"modalities disagree on dialogue length: {sorted(lengths)}")
    length = lengths.pop()

    encoded, gates = {}, {}
    for m in mods:
        if config.uses_gate:
            z, alpha = hgf_gate(pairs[m], params.gates[m])
            gates[m] = alpha.data[:, 0]
        else:
            z = ablation_bypass(pairs[m])
        encoded[m] = encode_modality(z, params.encoders[m], m).x

    edges = cached_graph(length, mods, config.window_past, config.window_future, config.cross_modal)
    nodes = rgnn_forward(pack_nodes(encoded, mods), edges, params.gnn)
    h_gnn = multi_concat(nodes, length, len(mods))

    lb, routing = None, {}
    if config.uses_moa:
        moa = moa_forward(encoded, params.moa, config.top_k, mods, config.moa_positions)
        rep = T.concat([moa.combined, h_gnn], axis=1)
        lb = load_balance_tensor(moa.weights)
        routing = moa.routing()
    else:
        rep = h_gnn
    logits = T.affine(rep, params.classifier_w, params.classifier_b)
    return ForwardOutput(logits, lb, gates, routing, rep)


def probabilities(logits: Tensor) -> np.ndarray:
    return T.softmax(logits, axis=-1).data


def task_loss(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Mean negative log-likelihood; with weights, normalized by sum of w[y_t]."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label outside [0, {c})")
    picked = T.gather(T.log_softmax(logits, axis=-1), (np.arange(n), labels))
    if class_weights is None:
        return T.neg(T.mean(picked))
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    return T.scale(T.sum(T.mul(picked, Tensor(w))), -1.0 / w.sum())


@dataclass
class LossBreakdown:
    task: float
    lb: float
    lb_weight: float
    total: float
    usage: dict[str, list[float]] = field(default_factory=dict)


def total_loss(task, lb, lb_weight: float) -> tuple[Tensor, LossBreakdown]:
    """total = task + lb_weight * lb; ``lb=None`` (MoA disabled) records 0."""
    if lb_weight < 0:
        raise ValueError("lb_weight must be >= 0")
    task = task if isinstance(task, Tensor) else Tensor(float(task))
    if lb is not None and not isinstance(lb, Tensor):
        lb = Tensor(float(lb))
    if lb is None:
        return task, LossBreakdown(task.item(), 0.0, lb_weight, task.item())
    total = T.add(task, T.scale(lb, lb_weight))
    return total, LossBreakdown(task.item(), lb.item(), lb_weight, total.item())


def inverse_frequency_weights(labels, classes: int) -> list[float]:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=classes).astype(np.float64)
    total = counts.sum()
    counts[counts == 0] = 1.0  # absent classes get the weight of a singleton
    w = total / (classes * counts)
    return w.tolist()
