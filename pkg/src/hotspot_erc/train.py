"""Training loop, evaluation, routing statistics and the ablation ladder."""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, capture, restore
from .metrics import MetricsReport, metrics
from .model import MODES, ModelConfig, ModelParams, dialogue_pairs, forward, init_model, inverse_frequency_weights, task_loss, total_loss
from .moa import UsageAccumulator, load_balance_value
from .optim import OptimizerState, ScheduleState, adam_step, plateau_schedule
from .synthdata import Corpus, SynthSpec, generate, read_corpus, split

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class RunConfig:
    # model
    dims: dict | None = None
    hidden: int = 32
    heads: int = 4
    ffn_inner: int = 64
    experts: int = 4
    top_k: int = 2
    lb_weight: float = 0.01
    class_weights: bool = False
    mode: str = "hgf+moa"
    window_past: int = 4
    window_future: int = 4
    cross_modal: bool = True
    gnn_layers: int = 2
    moa_positions: bool = True
    # data: a corpus file, a generator spec file, or an inline generator spec
    corpus: str | None = None
    synth_spec: str | None = None
    synth: dict | None = None
    split: list = field(default_factory=lambda: [0.7, 0.15, 0.15])
    # optimization
    epochs: int = 40
    lr: float = 1e-3
    weight_decay: float = 0.0
    patience: int = 5
    min_lr: float = 1e-5
    dialogues_per_step: int = 1
    seed: int = 0
    output_dir: str | None = None
    nonfinite_guard: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.dialogues_per_step < 1:
            raise ValueError("dialogues_per_step must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown ablation mode '{self.mode}'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def model_config(run: RunConfig, corpus: Corpus, train_labels=None) -> ModelConfig:
    weights = None
    if run.class_weights:
        weights = inverse_frequency_weights(train_labels, corpus.classes)
    return ModelConfig(
        dims=dict(run.dims or corpus.dims),
        hidden=run.hidden,
        heads=run.heads,
        ffn_inner=run.ffn_inner,
        experts=run.experts,
        top_k=run.top_k,
        lb_weight=run.lb_weight,
        classes=corpus.classes,
        class_weights=weights,
        mode=run.mode,
        window_past=run.window_past,
        window_future=run.window_future,
        cross_modal=run.cross_modal,
        gnn_layers=run.gnn_layers,
        moa_positions=run.moa_positions,
    )


_CORPUS_CACHE: dict[str, Corpus] = {}


def load_corpus(run: RunConfig) -> Corpus:
    if run.corpus:
        return read_corpus(run.corpus)
    if run.synth_spec:
        spec = SynthSpec.from_dict(json.loads(Path(run.synth_spec).read_text(encoding="utf-8")))
    elif run.synth is not None:
        spec = SynthSpec.from_dict(run.synth)
    else:
        raise ValueError("run config names no corpus, synth_spec or synth section")
    key = json.dumps(spec.to_dict(), sort_keys=True)
    if key not in _CORPUS_CACHE:
        samples = generate(spec)
        dims = {m: int(d) for m, d in spec.dims.items()}
        _CORPUS_CACHE[key] = Corpus({"format": "hfl-1", "dims": dims, "classes": spec.classes, "generator": spec.to_dict()}, samples)
    return _CORPUS_CACHE[key]


@contextmanager
def inference(params: ModelParams):
    """Evaluate without recording a tape."""
    tensors = params.tensors()
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t in tensors:
            t.requires_grad = True


def predict(samples, params: ModelParams, config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    preds, labels = [], []
    with inference(params):
        for s in samples:
            out = forward(dialogue_pairs(s), params, config)
            preds.append(np.argmax(out.logits.data, axis=1))
            labels.append(s.labels)
    return np.concatenate(preds), np.concatenate(labels)


def evaluate_params(samples, params: ModelParams, config: ModelConfig) -> MetricsReport:
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    pred, true = predict(samples, params, config)
    return metrics(pred, true, config.classes)


def route_usage(samples, params: ModelParams, config: ModelConfig) -> dict[str, UsageAccumulator]:
    if not config.uses_moa:
        return {}
    accs: dict[str, UsageAccumulator] = {}
    with inference(params):
        for s in samples:
            out = forward(dialogue_pairs(s), params, config)
            for key, w in out.routing.items():
                accs.setdefault(key, UsageAccumulator(config.experts)).add(w)
    return accs


def usage_report(accs: dict[str, UsageAccumulator]) -> dict:
    return {
        key: {
            "usage": acc.usage.tolist(),
            "load_balance": load_balance_value(acc.usage),
            "kept_sets": {",".join(map(str, k)): v for k, v in sorted(acc.kept_hist.items())},
            "utterances": acc.count,
        }
        for key, acc in accs.items()
    }


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[str]
    params: ModelParams
    config: ModelConfig
    splits: tuple


def _dev_summary(report: MetricsReport) -> dict:
    return {"accuracy": report.accuracy, "weighted_f1": report.weighted_f1}


def train(run: RunConfig) -> TrainResult:
    """Seeded epoch loop with per-step Adam, dev evaluation, plateau schedule
    and best-dev checkpoint selection. Log lines are JSON, one per epoch."""
    prev_guard = T.nonfinite_guard_enabled()
    T.set_nonfinite_guard(run.nonfinite_guard)
    try:
        return _train(run)
    finally:
        T.set_nonfinite_guard(prev_guard)


def _train(run: RunConfig) -> TrainResult:
    corpus = load_corpus(run)
    train_set, dev_set, test_set = split(corpus.samples, run.split, run.seed)
    if not train_set:
        raise TrainingError("training split is empty")
    dev_eval = dev_set or train_set
    config = model_config(run, corpus, np.concatenate([s.labels for s in train_set]))
    params = init_model(config, run.seed)
    named = params.named()
    flat = {"params": params.flat}
    opt = OptimizerState(lr=run.lr, weight_decay=run.weight_decay)
    sched = ScheduleState(lr=run.lr, patience=run.patience, min_lr=run.min_lr)
    out_dir = Path(run.output_dir) if run.output_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    dev = evaluate_params(dev_eval, params, config)
    best_acc = dev.accuracy
    best = capture(named, run.to_dict(), 0, _dev_summary(dev))
    lines: list[str] = []
    order_rng = np.random.default_rng([run.seed, 4])

    for epoch in range(1, run.epochs + 1):
        order = order_rng.permutation(len(train_set))
        totals, tasks, lbs = [], [], []
        accs: dict[str, UsageAccumulator] = {}
        for start in range(0, len(order), run.dialogues_per_step):
            chunk = [train_set[i] for i in order[start : start + run.dialogues_per_step]]
            params.zero_grad()
            step_loss = None
            for s in chunk:
                out = forward(dialogue_pairs(s), params, config)
                task = task_loss(out.logits, s.labels, config.class_weights)
                loss, parts = total_loss(task, out.lb, config.lb_weight)
                if not np.isfinite(parts.total):
                    raise TrainingError(f"non-finite loss at epoch {epoch} on dialogue {s.id}: {parts}")
                for key, w in out.routing.items():
                    accs.setdefault(key, UsageAccumulator(config.experts)).add(w)
                totals.append(parts.total)
                tasks.append(parts.task)
                lbs.append(parts.lb)
                step_loss = loss if step_loss is None else T.add(step_loss, loss)
            if len(chunk) > 1:
                step_loss = T.scale(step_loss, 1.0 / len(chunk))
            step_loss.backward()
            opt.lr = sched.lr
            adam_step(flat, {"params": params.flat_grad()}, opt)

        dev = evaluate_params(dev_eval, params, config)
        lr = plateau_schedule(sched, dev.accuracy)
        record = {
            "epoch": epoch,
            "loss": float(np.mean(totals)),
            "task_loss": float(np.mean(tasks)),
            "lb_loss": float(np.mean(lbs)),
            "dev_accuracy": dev.accuracy,
            "dev_weighted_f1": dev.weighted_f1,
            "lr": lr,
            "usage": {k: acc.usage.tolist() for k, acc in accs.items()},
        }
        lines.append(json.dumps(record, sort_keys=True))
        log.info("epoch %d loss=%.4f dev_acc=%.4f lr=%.2e", epoch, record["loss"], dev.accuracy, lr)
        if dev.accuracy > best_acc:
            best_acc = dev.accuracy
            best = capture(named, run.to_dict(), epoch, _dev_summary(dev))
        if out_dir:
            (out_dir / "metrics.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")

    if out_dir:
        best.save(out_dir / "best.ckpt")
        if not lines:
            (out_dir / "metrics.jsonl").write_text("", encoding="utf-8")
    return TrainResult(best, lines, params, config, (train_set, dev_set, test_set))


def load_model(ckpt: Checkpoint) -> tuple[ModelParams, ModelConfig, RunConfig]:
    run = RunConfig.from_dict(ckpt.config)
    corpus = load_corpus(run) if (run.corpus or run.synth or run.synth_spec) else None
    if corpus is None:
        raise ValueError("checkpoint config does not identify its corpus")
    train_set = split(corpus.samples, run.split, run.seed)[0]
    config = model_config(run, corpus, np.concatenate([s.labels for s in train_set]))
    params = init_model(config, run.seed)
    restore(ckpt, params.named())
    return params, config, run


def check_dims(samples, config: ModelConfig) -> None:
    for s in samples[:1]:
        for m in config.modalities:
            if s.content[m].shape[1] != int(config.dims[m]):
                raise ValueError(
                    f"data modality {m} has width {s.content[m].shape[1]}, checkpoint expects {config.dims[m]}"
                )


def evaluate(ckpt: Checkpoint, samples) -> MetricsReport:
    params, config, _ = load_model(ckpt)
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    check_dims(samples, config)
    return evaluate_params(samples, params, config)


def ablation_ladder(run: RunConfig, modes=MODES) -> list[dict]:
    """Train each mode on the same corpus and seed; report test accuracy and w-F1."""
    rows = []
    for mode in modes:
        cfg = RunConfig.from_dict({**run.to_dict(), "mode": mode, "output_dir": None})
        result = train(cfg)
        params, config, _ = load_model(result.checkpoint)
        test = result.splits[2] or result.splits[1] or result.splits[0]
        report = evaluate_params(test, params, config)
        rows.append({"mode": mode, "accuracy": report.accuracy, "weighted_f1": report.weighted_f1})
    return rows
