"""Randomized finite-difference gradient suites for the engine and each module.

Each suite draws small random shapes and parameters per seed, reduces the
module output to a scalar with a fixed random projection and compares tape
gradients with central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import build_graph, init_rgnn, multi_concat, pack_nodes, rgnn_forward
from .hgf import ModalPair, encode_modality, hgf_gate, init_encoder, init_gate
from .model import ModelConfig, forward, init_model, task_loss, total_loss
from .moa import init_moa, load_balance_tensor, moa_forward, ordered_pairs, pair_key
from .nn import named_tensors
from .tensor import Tensor, grad_check

PRIMITIVE_TOL = 1e-5
MODULE_TOL = 1e-4
SUITES = ("primitives", "hgf", "moa", "graph", "model")


@dataclass
class SuiteResult:
    name: str
    seeds: int
    tol: float
    worst: float
    failures: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "suite": self.name,
            "seeds": self.seeds,
            "tol": self.tol,
            "max_rel_error": self.worst,
            "failures": self.failures,
            "seconds": round(self.seconds, 3),
            "passed": self.passed,
        }


def _leaf(rng, *shape, positive=False) -> Tensor:
    data = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
    return Tensor(data, requires_grad=True)


def _projected(out: Tensor, proj: np.ndarray) -> Tensor:
    return T.sum(T.mul(out, Tensor(proj)))


def _jitter(named, rng, scale=0.1) -> dict[str, Tensor]:
    """Move every parameter off its init (zero biases, unit gains) so all paths carry signal."""
    for _, t in named:
        t.data += scale * rng.normal(size=t.shape)
    return dict(named)


# ---------------------------------------------------------------- primitives


def _primitive_cases(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    row = _leaf(rng, 1, 4)
    pos = _leaf(rng, 3, 4, positive=True)
    m1, m2 = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    w, bias = _leaf(rng, 4, 2), _leaf(rng, 2)
    gain, shift = _leaf(rng, 4), _leaf(rng, 4)
    keep = rng.random((3, 4)) < 0.7
    keep[:, 0] = True
    idx = rng.integers(0, 3, size=5)
    proj = {k: rng.normal(size=s) for k, s in [("34", (3, 4)), ("234", (2, 3, 5)), ("32", (3, 2)), ("54", (5, 4)), ("44", (4, 4)), ("423", (4, 2, 3))]}
    return [
        ("add", lambda: _projected(T.add(a, row), proj["34"]), [a, row]),
        ("sub", lambda: _projected(T.sub(a, b), proj["34"]), [a, b]),
        ("mul", lambda: _projected(T.mul(a, b), proj["34"]), [a, b]),
        ("sigmoid", lambda: _projected(T.sigmoid(a), proj["34"]), [a]),
        ("tanh", lambda: _projected(T.tanh(a), proj["34"]), [a]),
        ("relu", lambda: _projected(T.relu(a), proj["34"]), [a]),
        ("exp", lambda: _projected(T.exp(a), proj["34"]), [a]),
        ("log", lambda: _projected(T.log(pos), proj["34"]), [pos]),
        ("xlogx", lambda: _projected(T.xlogx(pos), proj["34"]), [pos]),
        ("matmul", lambda: _projected(T.matmul(m1, m2), proj["234"]), [m1, m2]),
        ("affine", lambda: _projected(T.affine(a, w, bias), proj["32"]), [a, w, bias]),
        ("mean", lambda: _projected(T.mean(a, axis=0, keepdims=True), proj["34"][:1]), [a]),
        ("concat", lambda: _projected(T.concat([a, b], axis=0), np.vstack([proj["34"], proj["34"][::-1]])), [a, b]),
        ("transpose", lambda: _projected(T.transpose(m1, (2, 0, 1)), proj["423"]), [m1]),
        ("softmax", lambda: _projected(T.softmax(a, axis=-1), proj["34"]), [a]),
        ("masked_softmax", lambda: _projected(T.softmax(T.masked_fill(a, keep), axis=-1), proj["34"]), [a]),
        ("log_softmax", lambda: _projected(T.log_softmax(a, axis=-1), proj["34"]), [a]),
        ("layer_norm", lambda: _projected(T.layer_norm(a, gain, shift), proj["34"]), [a, gain, shift]),
        ("gather", lambda: _projected(T.gather(a, idx), proj["54"]), [a]),
        ("scatter_add", lambda: _projected(T.scatter_add(T.gather(a, idx), idx[::-1].copy(), 4), proj["44"]), [a]),
    ]


def _run_primitives(seed: int) -> list[tuple[str, float, float]]:
    rng = np.random.default_rng([seed, 101])
    out = []
    for name, f, inputs in _primitive_cases(rng):
        report = grad_check(f, inputs, tol=PRIMITIVE_TOL)
        out.append((name, report.max_rel_error, PRIMITIVE_TOL))
    return out


# ---------------------------------------------------------------- modules


def _run_hgf(seed: int) -> list[tuple[str, float, float]]:
    rng = np.random.default_rng([seed, 102])
    length, dim, hidden, heads = int(rng.integers(2, 5)), int(rng.integers(2, 5)), 4, 2
    c, h = _leaf(rng, length, dim), _leaf(rng, length, dim)
    gate = init_gate(rng, dim)
    enc = init_encoder(rng, dim, hidden, heads, 6)
    inputs = _jitter(named_tensors({"gate": gate, "encoder": enc}), rng)
    inputs.update({"C": c, "H": h})
    proj = rng.normal(size=(length, hidden))

    def f():
        z, _ = hgf_gate(ModalPair("T", c, h), gate)
        return _projected(encode_modality(z, enc).x, proj)

    gate_only = lambda: _projected(hgf_gate(ModalPair("T", c, h), gate)[0], proj[:, :1] * np.ones((1, dim)))
    return [
        ("gate", grad_check(gate_only, {"C": c, "H": h, "W": gate.weight, "b": gate.bias}, tol=MODULE_TOL).max_rel_error, MODULE_TOL),
        ("gate+encoder", grad_check(f, inputs, tol=MODULE_TOL).max_rel_error, MODULE_TOL),
    ]


def _run_moa(seed: int, max_coords: int = 3) -> list[tuple[str, float, float]]:
    rng = np.random.default_rng([seed, 103])
    mods = ("T", "A", "V")
    length, hidden, heads = int(rng.integers(2, 5)), 4, 2
    experts = int(rng.integers(2, 4))
    k = int(rng.integers(1, experts + 1))
    rngs = {pair_key(j, s): rng for j, s in ordered_pairs(mods)}
    rngs.update({f"memory.{m}": rng for m in mods})
    params = init_moa(rngs, mods, hidden, heads, 6, experts)
    inputs = _jitter(named_tensors(params, "moa"), rng)
    encoded = {m: _leaf(rng, length, hidden) for m in mods}
    inputs.update({f"x.{m}": x for m, x in encoded.items()})
    proj = rng.normal(size=(length, 6 * hidden))
    lb_weight = float(rng.uniform(0.1, 1.0))

    def f():
        out = moa_forward(encoded, params, k, mods)
        return T.add(_projected(out.combined, proj), T.scale(load_balance_tensor(out.weights), lb_weight))

    report = grad_check(f, inputs, tol=MODULE_TOL, max_coords=max_coords, rng=rng)
    return [(f"E={experts},K={k}", report.max_rel_error, MODULE_TOL)]


def _run_graph(seed: int) -> list[tuple[str, float, float]]:
    rng = np.random.default_rng([seed, 104])
    mods = ("T", "A", "V")
    length, width = int(rng.integers(1, 5)), 3
    edges = build_graph(length, mods, int(rng.integers(0, 3)), int(rng.integers(0, 3)), bool(rng.integers(0, 2)))
    params = init_rgnn(rng, width, mods, 2)
    inputs = _jitter(named_tensors({"rel": params.relation_weights, "self": params.self_weights}), rng)
    encoded = {m: _leaf(rng, length, width) for m in mods}
    inputs.update({f"x.{m}": x for m, x in encoded.items()})
    proj = rng.normal(size=(length, 3 * width))

    def f():
        nodes = rgnn_forward(pack_nodes(encoded, mods), edges, params)
        return _projected(multi_concat(nodes, length, len(mods)), proj)

    return [(f"L={length}", grad_check(f, inputs, tol=MODULE_TOL).max_rel_error, MODULE_TOL)]


def _run_model(seed: int, max_coords: int = 3) -> list[tuple[str, float, float]]:
    rng = np.random.default_rng([seed, 105])
    results = []
    mode = ("baseline", "hgf", "hgf+moa")[seed % 3]
    experts = int(rng.integers(2, 4))
    config = ModelConfig(
        dims={"T": 3, "A": 2, "V": 4},
        hidden=4,
        heads=2,
        ffn_inner=6,
        experts=experts,
        top_k=int(rng.integers(1, experts + 1)),
        lb_weight=float(rng.uniform(0.1, 1.0)),
        classes=3,
        class_weights=rng.uniform(0.5, 2.0, size=3).tolist() if seed % 2 else None,
        mode=mode,
        window_past=1,
        window_future=1,
    )
    params = init_model(config, seed)
    inputs = _jitter(params.named(), rng)
    length = int(rng.integers(2, 4))
    pairs = {
        m: ModalPair(m, Tensor(rng.normal(size=(length, d))), Tensor(rng.normal(size=(length, d))))
        for m, d in config.dims.items()
    }
    labels = rng.integers(0, 3, size=length)

    def f():
        out = forward(pairs, params, config)
        task = task_loss(out.logits, labels, config.class_weights)
        return total_loss(task, out.lb, config.lb_weight)[0]

    report = grad_check(f, inputs, tol=MODULE_TOL, max_coords=max_coords, rng=rng)
    results.append((mode, report.max_rel_error, MODULE_TOL))
    return results


_RUNNERS = {
    "primitives": _run_primitives,
    "hgf": _run_hgf,
    "moa": _run_moa,
    "graph": _run_graph,
    "model": _run_model,
}


def run_suite(name: str, seeds: int = 20, start: int = 0) -> SuiteResult:
    if name not in _RUNNERS:
        raise KeyError(f"unknown gradient suite '{name}' (choose from {', '.join(SUITES)})")
    t0 = time.perf_counter()
    worst, failures, tol = 0.0, [], MODULE_TOL
    for seed in range(start, start + seeds):
        for case, err, tol in _RUNNERS[name](seed):
            worst = max(worst, err)
            if not err <= tol:
                failures.append({"seed": seed, "case": case, "rel_error": err})
    tol = PRIMITIVE_TOL if name == "primitives" else MODULE_TOL
    return SuiteResult(name, seeds, tol, worst, failures, time.perf_counter() - t0)


def run_all(seeds: int = 20, suites=SUITES) -> list[SuiteResult]:
    return [run_suite(name, seeds) for name in suites]
