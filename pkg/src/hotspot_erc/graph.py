"""Typed utterance graph over (modality, utterance) nodes and a relational GCN."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .nn import xavier
from .tensor import ShapeError, Tensor


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Relation:
    direction: int  # +1 past->present, -1 future->present, 0 same time
    source: str
    target: str

    def __str__(self) -> str:
        return f"({self.direction:+d},{self.source}->{self.target})"


@dataclass
class TypedEdgeList:
    modalities: tuple[str, ...]
    length: int
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray
    relations: tuple[Relation, ...]
    coefficients: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.src.size)

    def node(self, idx: int) -> tuple[str, int]:
        return self.modalities[idx // self.length], idx % self.length

    def triples(self) -> set[tuple[tuple[str, int], tuple[str, int], Relation]]:
        return {
            (self.node(s), self.node(d), self.relations[r])
            for s, d, r in zip(self.src.tolist(), self.dst.tolist(), self.rel.tolist())
        }

    def dump(self) -> str:
        nodes = [list(self.node(i)) for i in range(len(self.modalities) * self.length)]
        edges = [
            {"src": int(s), "dst": int(d), "relation": str(self.relations[r])}
            for s, d, r in zip(self.src, self.dst, self.rel)
        ]
        return json.dumps({"nodes": nodes, "edges": edges})


@dataclass
class RelationalGNNParams:
    relation_weights: list[Tensor]  # per layer: R x g_in x g_out
    self_weights: list[Tensor]  # per layer: g_in x g_out
    relations: tuple[Relation, ...]

    @property
    def layers(self) -> int:
        return len(self.self_weights)


def relation_types(modalities, cross_modal: bool = True) -> tuple[Relation, ...]:
    rels = [Relation(s, m, m) for m in modalities for s in (1, -1)]
    if cross_modal:
        rels += [Relation(0, k, j) for j in modalities for k in modalities if k != j]
    return tuple(rels)


def build_graph(length: int, modalities, window_past: int, window_future: int, cross_modal: bool) -> TypedEdgeList:
    if window_past < 0 or window_future < 0:
        raise ValueError("windows must be non-negative")
    modalities = tuple(modalities)
    relations = relation_types(modalities, True)
    index = {r: i for i, r in enumerate(relations)}
    src, dst, rel = [], [], []
    for mi, m in enumerate(modalities):
        base = mi * length
        for t in range(length):
            for tp in range(max(0, t - window_past), t):
                src.append(base + tp)
                dst.append(base + t)
                rel.append(index[Relation(1, m, m)])
            for tp in range(t + 1, min(length, t + window_future + 1)):
                src.append(base + tp)
                dst.append(base + t)
                rel.append(index[Relation(-1, m, m)])
    if cross_modal:
        for ji, j in enumerate(modalities):
            for ki, k in enumerate(modalities):
                if k == j:
                    continue
                for t in range(length):
                    src.append(ki * length + t)
                    dst.append(ji * length + t)
                    rel.append(index[Relation(0, k, j)])
    as_int = lambda xs: np.asarray(xs, dtype=np.int64)  # noqa: E731
    return TypedEdgeList(modalities, length, as_int(src), as_int(dst), as_int(rel), relations)


@lru_cache(maxsize=256)
def cached_graph(length: int, modalities: tuple, window_past: int, window_future: int, cross_modal: bool) -> TypedEdgeList:
    """``build_graph`` memoized on its arguments; callers must not mutate the result."""
    edges = build_graph(length, modalities, window_past, window_future, cross_modal)
    edges.coefficients = _edge_coefficients(edges, len(edges.modalities) * length)[:, None]
    return edges


def init_rgnn(rng: np.random.Generator, width: int, modalities, layers: int = 2) -> RelationalGNNParams:
    relations = relation_types(modalities, True)
    return RelationalGNNParams(
        [xavier(rng, width, width, (len(relations),)) for _ in range(layers)],
        [xavier(rng, width, width) for _ in range(layers)],
        relations,
    )


def _edge_coefficients(edges: TypedEdgeList, n_nodes: int) -> np.ndarray:
    """1 / |N_r(dst)| for each edge."""
    counts = np.zeros((len(edges.relations), n_nodes))
    np.add.at(counts, (edges.rel, edges.dst), 1.0)
    return 1.0 / counts[edges.rel, edges.dst]


def rgnn_forward(x: Tensor, edges: TypedEdgeList, params: RelationalGNNParams) -> Tensor:
    """h' = act(h W_0 + sum_r mean_{u in N_r(v)} h_u W_r); ReLU between layers only."""
    n = x.shape[0]
    if len(edges) and (edges.src.max() >= n or edges.dst.max() >= n or edges.src.min() < 0 or edges.dst.min() < 0):
        raise GraphError(f"edge endpoint outside the {n} nodes")
    if len(edges):
        if edges.relations == params.relations:
            rel = edges.rel
        else:
            lookup = {r: i for i, r in enumerate(params.relations)}
            try:
                rel = np.asarray([lookup[edges.relations[r]] for r in edges.rel], dtype=np.int64)
            except KeyError as exc:
                raise GraphError(f"relation {exc.args[0]} has no GNN weight") from None
        coef = edges.coefficients
        if coef is None:
            coef = _edge_coefficients(edges, n)[:, None]
        coef = Tensor(coef)
    h = x
    for layer in range(params.layers):
        out = T.matmul(h, params.self_weights[layer])
        if len(edges):
            transformed = T.matmul(h, params.relation_weights[layer])  # R x N x g
            messages = T.mul(T.gather(transformed, (rel, edges.src)), coef)
            out = T.add(out, T.scatter_add(messages, edges.dst, n))
        h = T.relu(out) if layer < params.layers - 1 else out
    return h


def pack_nodes(encoded: dict[str, Tensor], modalities) -> Tensor:
    """Stack modality sequences into the node matrix (modality-major)."""
    return T.concat([encoded[m] for m in modalities], axis=0)


def multi_concat(nodes: Tensor, length: int, n_modalities: int, keys: list[tuple[int, int]] | None = None) -> Tensor:
    """Rows t = concat over modalities of node (m, t); ``keys`` gives (m, t) per stored row."""
    if nodes.shape[0] != length * n_modalities:
        raise ShapeError(f"multi_concat: {nodes.shape[0]} nodes for {n_modalities} x {length}")
    if keys is not None:
        pos = np.empty(length * n_modalities, dtype=np.int64)
        for row, (m, t) in enumerate(keys):
            pos[m * length + t] = row
        nodes = T.gather(nodes, pos)
    g = nodes.shape[1]
    stacked = T.transpose(T.reshape(nodes, (n_modalities, length, g)), (1, 0, 2))
    return T.reshape(stacked, (length, n_modalities * g))
