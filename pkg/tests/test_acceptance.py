"""Acceptance suite: one test per top-level criterion, each recording a verdict line.

The ladder and load-balancing comparisons train real models and take
several minutes; they are marked ``slow``.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.special import softmax

from conftest import record
from hotspot_erc import gradsuite
from hotspot_erc.checkpoint import Checkpoint
from hotspot_erc.graph import build_graph, init_rgnn, rgnn_forward
from hotspot_erc.hgf import GateParams, ModalPair, hgf_gate
from hotspot_erc.metrics import metrics
from hotspot_erc.moa import load_balance_value, topk_keep_mask, topk_masked_softmax
from hotspot_erc.synthdata import SynthSpec, nearest_prototype_content, prototypes
from hotspot_erc.tensor import Tensor
from hotspot_erc.train import RunConfig, evaluate, evaluate_params, load_model, train
from oracles import brute_force_edges, counting_metrics, dense_rgnn, np_topk_softmax

MODS = ("T", "A", "V")
ACCEPTANCE_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "acceptance.json"
SEEDS = range(5)


def acceptance_run(**overrides) -> RunConfig:
    base = json.loads(ACCEPTANCE_CONFIG.read_text())
    seed = overrides.pop("seed", 0)
    synth = {**base.pop("synth", {}), **overrides.pop("synth", {}), "seed": seed}
    return RunConfig.from_dict({**base, **overrides, "seed": seed, "synth": synth})


# ---------------------------------------------------------------- ladder


@pytest.fixture(scope="module")
def ladder():
    start = time.perf_counter()
    runs = {}
    for seed in SEEDS:
        for mode in ("baseline", "hgf", "hgf+moa"):
            result = train(acceptance_run(mode=mode, seed=seed))
            params, config, _ = load_model(result.checkpoint)
            runs[mode, seed] = (result, evaluate_params(result.splits[2], params, config))
    return runs, time.perf_counter() - start


@pytest.mark.slow
class TestAblationLadder:
    def test_trend_and_margins(self, ladder):
        runs, seconds = ladder
        mean = {m: 100 * np.mean([runs[m, s][1].accuracy for s in SEEDS]) for m in ("baseline", "hgf", "hgf+moa")}
        checks = {
            "baseline < hgf < full": mean["baseline"] < mean["hgf"] < mean["hgf+moa"],
            "hgf >= baseline + 5": mean["hgf"] >= mean["baseline"] + 5,
            "full >= hgf + 2": mean["hgf+moa"] >= mean["hgf"] + 2,
            "runtime <= 900 s": seconds <= 900,
        }
        detail = (
            f"mean test acc baseline={mean['baseline']:.2f} hgf={mean['hgf']:.2f} full={mean['hgf+moa']:.2f}; "
            f"{seconds:.0f}s; " + ", ".join(f"{k}: {'ok' if v else 'NO'}" for k, v in checks.items())
        )
        record("1 ablation ladder", all(checks.values()), detail)
        assert all(checks.values()), detail

    def test_full_mode_beats_content_rule(self, ladder):
        runs, _ = ladder
        rows = []
        for s in SEEDS:
            result = runs["hgf+moa", s][0]
            dev = result.splits[1]
            spec = SynthSpec(seed=s)
            rule = float(np.mean(nearest_prototype_content(dev, prototypes(spec)) == np.concatenate([x.labels for x in dev])))
            rows.append((result.checkpoint.dev_metrics["accuracy"], rule))
        ok = all(model > rule for model, rule in rows)
        record("train: full dev acc > content rule", ok, " ".join(f"{m:.3f}>{r:.3f}" for m, r in rows))
        assert ok

    def test_loss_trend(self, ladder):
        runs, _ = ladder
        losses = [json.loads(line)["loss"] for line in runs["hgf+moa", 0][0].log[:10]]
        bumps = sum(b >= a for a, b in zip(losses, losses[1:]))
        ok = len(losses) == 10 and losses[-1] < losses[0] and bumps <= 2
        record("train: loss trend over 10 epochs", ok, f"{bumps} non-monotone epochs, {losses[0]:.3f} -> {losses[-1]:.3f}")
        assert ok


# ---------------------------------------------------------------- gradients


class TestGradientSuite:
    def test_all_suites(self):
        start = time.perf_counter()
        results = gradsuite.run_all(20)
        seconds = time.perf_counter() - start
        ok = all(r.passed for r in results) and seconds <= 120
        detail = ", ".join(f"{r.name} {r.worst:.1e}<={r.tol:.0e}" for r in results) + f"; {seconds:.0f}s"
        record("2 gradient suite", ok, detail)
        assert ok, detail


# ---------------------------------------------------------------- routing


class TestRoutingInvariants:
    def test_invariants(self):
        rng = np.random.default_rng(0)
        total, problems = 0, []
        for e in (2, 4, 8):
            n = 34_000 if e != 8 else 32_000
            total += n
            # dyadic logits and integer shifts keep the shifted ordering exact
            logits = np.round(rng.normal(scale=3.0, size=(n, e)) * 2**20) / 2**20
            shift = rng.integers(-50, 51, size=(n, 1)).astype(float)
            for k in range(1, e + 1):
                pi = topk_masked_softmax(Tensor(logits), k).data
                shifted = topk_masked_softmax(Tensor(logits + shift), k).data
                if (np.count_nonzero(pi, axis=1) > k).any():
                    problems.append(f"support E={e} K={k}")
                if np.abs(pi.sum(axis=1) - 1).max() > 1e-9:
                    problems.append(f"sum E={e} K={k}")
                if not np.array_equal(pi > 0, shifted > 0) or np.abs(pi - shifted).max() > 1e-12:
                    problems.append(f"shift E={e} K={k}")
            if np.abs(topk_masked_softmax(Tensor(logits), e).data - softmax(logits, axis=1)).max() > 1e-12:
                problems.append(f"dense E={e}")
            # constructed ties on a coarse integer grid
            tied = rng.integers(0, 3, size=(2000, e)).astype(float)
            for k in range(1, e + 1):
                keep = topk_keep_mask(tied, k)
                for row, mask in zip(tied[:400], keep[:400]):
                    want = np_topk_softmax(row, k)[0] > 0
                    if not np.array_equal(mask, want):
                        problems.append(f"tie E={e} K={k}")
                        break
        ok = not problems and total == 100_000
        record("3 routing invariants", ok, f"{total} vectors, all K; " + ("clean" if ok else "; ".join(problems[:5])))
        assert ok, problems


# ---------------------------------------------------------------- load balancing


def _max_deviation(log_line: str) -> float:
    usage = json.loads(log_line)["usage"]
    return max(float(np.abs(np.asarray(u) - 1 / len(u)).max()) for u in usage.values())


class TestLoadBalancing:
    def test_bounds(self):
        rng = np.random.default_rng(1)
        worst_low, worst_high, problems = np.inf, -np.inf, []
        for e in (2, 4, 8):
            u = rng.dirichlet(np.full(e, 0.3), size=33_334)
            vals = np.sum(np.where(u > 0, u * np.log(np.where(u > 0, u, 1)), 0), axis=1) + math.log(e)
            sample = [load_balance_value(x) for x in u[:2000]]
            if np.abs(np.asarray(sample) - vals[:2000]).max() > 1e-12:
                problems.append(f"vector formula E={e}")
            worst_low = min(worst_low, vals.min())
            worst_high = max(worst_high, (vals - math.log(e)).max())
            if abs(load_balance_value(np.full(e, 1 / e))) > 1e-9:
                problems.append(f"uniform E={e}")
            if abs(load_balance_value(np.eye(e)[0]) - math.log(e)) > 1e-9:
                problems.append(f"one-hot E={e}")
        ok = not problems and worst_low >= -1e-12 and worst_high <= 1e-12
        record("4a load balance bounds", ok, f"min={worst_low:.2e} max-logE={worst_high:.2e}; " + (", ".join(problems) or "clean"))
        assert ok

    @pytest.mark.slow
    def test_regularizer_flattens_usage(self):
        wins, rows = 0, []
        for seed in SEEDS:
            dev = {}
            for lam in (0.0, 0.01):
                run = acceptance_run(seed=seed, mode="hgf+moa", lb_weight=lam, epochs=4, synth={"dialogues": 120})
                dev[lam] = _max_deviation(train(run).log[-1])
            wins += dev[0.01] <= dev[0.0]
            rows.append(f"{dev[0.01]:.3f}/{dev[0.0]:.3f}")
        ok = wins >= 4
        record("4b load balance training", ok, f"{wins}/5 seeds no worse under lambda; lambda/none: " + " ".join(rows))
        assert ok


# ---------------------------------------------------------------- HGF


class TestHGFBounds:
    def test_random_triples(self):
        rng = np.random.default_rng(2)
        outside, fixed_point_breaks = 0, 0
        for _ in range(10_000):
            length, d = int(rng.integers(1, 5)), int(rng.integers(1, 6))
            c = rng.normal(scale=rng.choice([0.1, 1, 10]), size=(length, d))
            h = rng.normal(scale=rng.choice([0.1, 1, 10]), size=(length, d))
            gate = GateParams(Tensor(rng.normal(scale=3, size=(2 * d, 1))), Tensor([rng.normal(scale=3)]))
            z, _ = hgf_gate(ModalPair("T", Tensor(c), Tensor(h)), gate)
            outside += int(np.any(z.data < np.minimum(c, h)) or np.any(z.data > np.maximum(c, h)))
            z_eq, _ = hgf_gate(ModalPair("T", Tensor(c), Tensor(c.copy())), gate)
            fixed_point_breaks += int(not np.array_equal(z_eq.data, c))
        ok = outside == 0 and fixed_point_breaks == 0
        record("5 HGF bounds", ok, f"10000 triples, {outside} out of bounds, {fixed_point_breaks} H==C mismatches")
        assert ok


# ---------------------------------------------------------------- graph


class TestGraphOracle:
    def test_build_and_rgnn(self):
        rng = np.random.default_rng(3)
        build_bad = 0
        for _ in range(200):
            length = int(rng.integers(1, 11))
            wp, wf, cross = int(rng.integers(0, 6)), int(rng.integers(0, 6)), bool(rng.integers(0, 2))
            edges = build_graph(length, MODS, wp, wf, cross)
            got = {(s, d, (r.direction, r.source, r.target)) for s, d, r in edges.triples()}
            build_bad += int(got != brute_force_edges(length, MODS, wp, wf, cross) or len(got) != len(edges))
        worst = 0.0
        for _ in range(50):
            length = int(rng.integers(1, 11))
            edges = build_graph(length, MODS, int(rng.integers(0, 5)), int(rng.integers(0, 5)), bool(rng.integers(0, 2)))
            width = int(rng.integers(1, 6))
            params = init_rgnn(rng, width, MODS, 2)
            for w in params.relation_weights + params.self_weights:
                w.data[:] = rng.normal(size=w.shape)
            x = rng.normal(size=(3 * length, width))
            ref = dense_rgnn(
                x,
                {(s, d, (r.direction, r.source, r.target)) for s, d, r in edges.triples()},
                {edges.node(i): i for i in range(3 * length)},
                {(r.direction, r.source, r.target): i for i, r in enumerate(params.relations)},
                [w.data for w in params.relation_weights],
                [w.data for w in params.self_weights],
            )
            worst = max(worst, float(np.abs(rgnn_forward(Tensor(x), edges, params).data - ref).max()))
        ok = build_bad == 0 and worst <= 1e-10
        record("6 graph oracle", ok, f"200 builds, {build_bad} mismatches; 50 rgnn cases, max abs diff {worst:.1e}")
        assert ok


# ---------------------------------------------------------------- metrics


class TestMetricsOracle:
    def test_counting_oracle(self):
        rng = np.random.default_rng(4)
        mismatches = 0
        for _ in range(1000):
            classes = int(rng.integers(2, 8))
            n = int(rng.integers(1, 60))
            pred, true = rng.integers(0, classes, n), rng.integers(0, classes, n)
            r = metrics(pred, true, classes)
            acc, wf1, f1 = counting_metrics(pred.tolist(), true.tolist(), classes)
            mismatches += int(r.accuracy != acc or r.weighted_f1 != wf1 or r.f1.tolist() != f1)
        fixture = metrics([0, 0, 1, 1], [0, 0, 0, 1]).weighted_f1
        ok = mismatches == 0 and abs(fixture - 0.766667) <= 1e-6
        record("7 metrics oracle", ok, f"1000 vectors, {mismatches} mismatches; fixture w-F1={fixture:.6f}")
        assert ok


# ---------------------------------------------------------------- reproducibility


class TestReproducibility:
    def test_logs_and_checkpoint(self, tmp_path):
        run = RunConfig(synth={"dialogues": 30, "seed": 9}, hidden=16, heads=2, ffn_inner=16, epochs=3, seed=9, output_dir=str(tmp_path))
        logs, blobs = [], []
        for _ in range(2):
            result = train(run)
            logs.append((tmp_path / "metrics.jsonl").read_bytes())
            blobs.append((tmp_path / "best.ckpt").read_bytes())
        params, config, _ = load_model(result.checkpoint)
        test_split = result.splits[2]
        in_memory = evaluate_params(test_split, params, config).to_dict()
        from_disk = evaluate(Checkpoint.load(tmp_path / "best.ckpt"), test_split).to_dict()
        same_logs, same_ckpt, same_eval = logs[0] == logs[1] and bool(logs[0]), blobs[0] == blobs[1], in_memory == from_disk
        ok = same_logs and same_ckpt and same_eval
        record("8 reproducibility", ok, f"logs identical: {same_logs}, checkpoints identical: {same_ckpt}, round-trip eval equal: {same_eval}")
        assert ok
