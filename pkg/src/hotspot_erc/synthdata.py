"""Synthetic dialogues with lagged, sometimes-corrupted hotspot evidence.

Each utterance label injects a scaled class prototype into every modality's
hotspot sequence at a per-modality lag, while content rows carry only a weak
copy of the prototype. Corpora are serialized as JSON lines ("hfl-1").
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .hgf import MODALITIES

FORMAT_VERSION = "hfl-1"


class SpecError(ValueError):
    pass


class CorpusParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass
class SynthSpec:
    classes: int = 6
    dialogues: int = 500
    min_length: int = 6
    max_length: int = 12
    dims: dict = field(default_factory=lambda: {"T": 16, "A": 16, "V": 16})
    hotspot_gain: float = 3.0
    content_gain: float = 0.5
    noise: float = 1.0
    max_lag: int = 1
    corruption: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.classes < 2:
            raise SpecError("need at least two classes")
        if self.dialogues < 1 or not 1 <= self.min_length <= self.max_length:
            raise SpecError("invalid dialogue count or length range")
        if any(self.classes > int(d) for d in self.dims.values()):
            raise SpecError(f"{self.classes} classes do not fit feature dims {self.dims}")
        if self.hotspot_gain <= 0 or self.content_gain < 0 or self.content_gain >= self.hotspot_gain:
            raise SpecError("need hotspot_gain > content_gain >= 0")
        if self.noise < 0:
            raise SpecError("noise must be non-negative")
        if self.max_lag < 0 or not 0 <= self.corruption < 1:
            raise SpecError("need max_lag >= 0 and 0 <= corruption < 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class DialogueSample:
    id: str
    labels: np.ndarray
    content: dict[str, np.ndarray]
    hotspot: dict[str, np.ndarray]
    # generator ground truth, never serialized
    lags: dict[str, np.ndarray] | None = field(default=None, compare=False, repr=False)
    corrupted: dict[str, np.ndarray] | None = field(default=None, compare=False, repr=False)

    @property
    def length(self) -> int:
        return int(self.labels.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DialogueSample):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.labels, other.labels)
            and self.content.keys() == other.content.keys()
            and all(np.array_equal(self.content[m], other.content[m]) for m in self.content)
            and all(np.array_equal(self.hotspot[m], other.hotspot[m]) for m in self.hotspot)
        )


def prototypes(spec: SynthSpec) -> dict[str, np.ndarray]:
    """Per modality, the first C rows of a seeded orthonormal matrix."""
    out = {}
    for i, m in enumerate(MODALITIES):
        d = int(spec.dims[m])
        rng = np.random.default_rng([spec.seed, 7919, i])
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        out[m] = q[: spec.classes].copy()
    return out


def generate(spec: SynthSpec) -> list[DialogueSample]:
    spec.validate()
    protos = prototypes(spec)
    layout = np.random.default_rng([spec.seed, 1])
    lengths = layout.integers(spec.min_length, spec.max_length + 1, size=spec.dialogues)
    # balanced label pool, shuffled across the corpus
    pool = np.resize(np.arange(spec.classes), int(lengths.sum()))
    layout.shuffle(pool)
    offsets = np.concatenate([[0], np.cumsum(lengths)])

    samples = []
    for n in range(spec.dialogues):
        rng = np.random.default_rng([spec.seed, 2, n])
        labels = pool[offsets[n] : offsets[n + 1]].astype(np.int64)
        length = labels.size
        content, hotspot, lags, corrupted = {}, {}, {}, {}
        for m in MODALITIES:
            d = int(spec.dims[m])
            p = protos[m]
            c = spec.content_gain * p[labels] + spec.noise * rng.standard_normal((length, d))
            h = spec.noise * rng.standard_normal((length, d))
            lag = rng.integers(-spec.max_lag, spec.max_lag + 1, size=length)
            bad = rng.random(length) < spec.corruption
            pos = np.clip(np.arange(length) + lag, 0, length - 1)
            for t in np.flatnonzero(~bad):
                h[pos[t]] += spec.hotspot_gain * p[labels[t]]
            content[m], hotspot[m], lags[m], corrupted[m] = c, h, lag, bad
        samples.append(DialogueSample(f"d{n:05d}", labels, content, hotspot, lags, corrupted))
    return samples


# ---------------------------------------------------------------- closed-form rules


def nearest_prototype_content(samples, protos) -> np.ndarray:
    """Per-utterance argmax_c sum_m <C_m[t], p_m,c>, concatenated over the corpus."""
    preds = []
    for s in samples:
        score = sum(s.content[m] @ protos[m].T for m in s.content)
        preds.append(np.argmax(score, axis=1))
    return np.concatenate(preds)


def nearest_prototype_hotspot(samples, protos) -> np.ndarray:
    """Same rule on hotspot rows read at each modality's true lag."""
    preds = []
    for s in samples:
        if s.lags is None:
            raise ValueError(f"dialogue {s.id} carries no lag ground truth")
        pos_t = np.arange(s.length)
        score = 0.0
        for m in s.hotspot:
            rows = s.hotspot[m][np.clip(pos_t + s.lags[m], 0, s.length - 1)]
            score = score + rows @ protos[m].T
        preds.append(np.argmax(score, axis=1))
    return np.concatenate(preds)


def all_labels(samples) -> np.ndarray:
    return np.concatenate([s.labels for s in samples])


# ---------------------------------------------------------------- I/O


def _fmt_matrix(a: np.ndarray) -> str:
    return "[" + ",".join("[" + ",".join(format(float(v), ".17g") for v in row) + "]" for row in a) + "]"


def _dialogue_line(s: DialogueSample) -> str:
    parts = [
        f'"id":{json.dumps(s.id)}',
        f'"length":{s.length}',
        f'"labels":{json.dumps([int(y) for y in s.labels])}',
    ]
    for m in MODALITIES:
        if m in s.content:
            parts.append(f'"{m}":{{"content":{_fmt_matrix(s.content[m])},"hotspot":{_fmt_matrix(s.hotspot[m])}}}')
    return "{" + ",".join(parts) + "}"


def serialize(samples, spec: SynthSpec | None = None, classes: int | None = None) -> str:
    dims = {m: int(samples[0].content[m].shape[1]) for m in MODALITIES if m in samples[0].content}
    header = {
        "format": FORMAT_VERSION,
        "dims": dims,
        "classes": int(classes if classes is not None else spec.classes),
        "generator": spec.to_dict() if spec is not None else None,
    }
    lines = [json.dumps(header, sort_keys=True)] + [_dialogue_line(s) for s in samples]
    return "\n".join(lines) + "\n"


def write_corpus(samples, path, spec: SynthSpec | None = None, classes: int | None = None) -> None:
    if not samples:
        raise ValueError("refusing to write an empty corpus")
    Path(path).write_text(serialize(samples, spec, classes), encoding="utf-8")


@dataclass
class Corpus:
    header: dict
    samples: list[DialogueSample]

    @property
    def classes(self) -> int:
        return int(self.header["classes"])

    @property
    def dims(self) -> dict:
        return dict(self.header["dims"])


def read_corpus(path) -> Corpus:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorpusParseError("line 1: empty corpus file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusParseError(f"line 1: malformed header ({exc.msg})") from None
    if header.get("format") != FORMAT_VERSION:
        raise SchemaError(f"unsupported corpus format {header.get('format')!r}, expected {FORMAT_VERSION!r}")
    dims = header["dims"]
    classes = int(header["classes"])
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusParseError(f"line {lineno}: {exc.msg}") from None
        try:
            labels = np.asarray(rec["labels"], dtype=np.int64)
            if labels.size != rec["length"] or labels.size < 1:
                raise SchemaError(f"line {lineno}: length {rec['length']} vs {labels.size} labels")
            if labels.min() < 0 or labels.max() >= classes:
                raise SchemaError(f"line {lineno}: label outside [0, {classes})")
            content, hotspot = {}, {}
            for m, d in dims.items():
                c = np.asarray(rec[m]["content"], dtype=np.float64)
                h = np.asarray(rec[m]["hotspot"], dtype=np.float64)
                if c.shape != (labels.size, d) or h.shape != (labels.size, d):
                    raise SchemaError(f"line {lineno}: modality {m} has shapes {c.shape}/{h.shape}, header says {d}")
                content[m], hotspot[m] = c, h
        except KeyError as exc:
            raise CorpusParseError(f"line {lineno}: missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise CorpusParseError(f"line {lineno}: {exc}") from None
        samples.append(DialogueSample(str(rec["id"]), labels, content, hotspot))
    return Corpus(header, samples)


def split(samples, fractions=(0.7, 0.15, 0.15), seed: int = 0):
    """Seeded dialogue-level train/dev/test split."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negatives summing to 1, got {fractions}")
    n = len(samples)
    order = np.random.default_rng([seed, 3]).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_dev = min(n - n_train, int(round(fractions[1] * n)))
    parts = (order[:n_train], order[n_train : n_train + n_dev], order[n_train + n_dev :])
    return tuple([samples[i] for i in sorted(p)] for p in parts)
