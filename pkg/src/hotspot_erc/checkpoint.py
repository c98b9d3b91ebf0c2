"""Binary checkpoint format "hfl-ckpt-1".

Layout: one UTF-8 JSON header line (format tag, manifest of parameter names
and shapes, run config, epoch, dev metrics) terminated by a newline, then the
parameters as contiguous little-endian float64 values in manifest order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CKPT_FORMAT = "hfl-ckpt-1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    manifest: list[tuple[str, tuple[int, ...]]]
    arrays: list[np.ndarray]
    config: dict
    epoch: int
    dev_metrics: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        header = {
            "format": CKPT_FORMAT,
            "manifest": [[name, list(shape)] for name, shape in self.manifest],
            "config": self.config,
            "epoch": self.epoch,
            "dev_metrics": self.dev_metrics,
        }
        payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays)
        return json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        cut = blob.find(b"\n")
        if cut < 0:
            raise CheckpointError("missing checkpoint header")
        try:
            header = json.loads(blob[:cut].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
        if header.get("format") != CKPT_FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {header.get('format')!r}")
        manifest = [(name, tuple(int(s) for s in shape)) for name, shape in header["manifest"]]
        payload = blob[cut + 1 :]
        expected = sum(int(np.prod(shape)) for _, shape in manifest) * 8
        if len(payload) != expected:
            raise CheckpointError(f"payload has {len(payload)} bytes, manifest needs {expected}")
        values = np.frombuffer(payload, dtype="<f8")
        arrays, pos = [], 0
        for _, shape in manifest:
            n = int(np.prod(shape))
            arrays.append(values[pos : pos + n].astype(np.float64).reshape(shape))
            pos += n
        return cls(manifest, arrays, header["config"], int(header["epoch"]), header.get("dev_metrics", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def capture(named: list, config: dict, epoch: int, dev_metrics: dict | None = None) -> Checkpoint:
    return Checkpoint(
        [(name, tuple(t.shape)) for name, t in named],
        [t.data.copy() for _, t in named],
        config,
        epoch,
        dev_metrics or {},
    )


def restore(ckpt: Checkpoint, named: list) -> None:
    """Copy checkpoint values into the given (name, Tensor) list; names and shapes must match."""
    want = [(name, tuple(t.shape)) for name, t in named]
    if want != ckpt.manifest:
        if len(want) != len(ckpt.manifest):
            raise CheckpointError(f"checkpoint has {len(ckpt.manifest)} tensors, model has {len(want)}")
        first = next((w, c) for w, c in zip(want, ckpt.manifest) if w != c)
        raise CheckpointError(f"checkpoint entry {first[1]} does not match model parameter {first[0]}")
    for (_, t), arr in zip(named, ckpt.arrays):
        t.data[...] = arr
