"""Versioned checkpoint container.

Layout::

    QUOTEREC-CKPT <version>\\n
    <header byte length>\\n
    <header: UTF-8 JSON with config, vocabulary, quotations, metrics, tensor index>
    <tensor payload: little-endian float64, tensors back to back in index order>

The header is written with sorted keys and fixed separators so that
saving a loaded checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import QuotationSet, Vocabulary
from .model import QuoteRecModel

MAGIC = b"QUOTEREC-CKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint."""


@dataclass
class Checkpoint:
    model: QuoteRecModel
    config: TrainConfig
    vocab: Vocabulary
    quotes: QuotationSet
    metrics: dict = field(default_factory=dict)


def to_bytes(model: QuoteRecModel, vocab: Vocabulary, quotes: QuotationSet, metrics: dict | None = None) -> bytes:
    params = model.named_parameters()
    index, offset, blobs = [], 0, []
    for name, p in params.items():
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "vocab": vocab.id_to_token,
        "min_count": vocab.min_count,
        "quotations": quotes.texts,
        "metrics": metrics or {},
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return b"".join([MAGIC, b" %d\n" % FORMAT_VERSION, b"%d\n" % len(head), head] + blobs)


def save_checkpoint(path: str | Path, model: QuoteRecModel, vocab: Vocabulary, quotes: QuotationSet,
                    metrics: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(model, vocab, quotes, metrics))
    return path


def from_bytes(raw: bytes) -> Checkpoint:
    try:
        first, rest = raw.split(b"\n", 1)
        magic, version = first.split(b" ")
        size, rest = rest.split(b"\n", 1)
        size, version = int(size), int(version)
    except ValueError:
        raise CheckpointError("not a checkpoint file") from None
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(rest[:size].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    missing = {"config", "vocab", "min_count", "quotations", "metrics", "tensors"} - set(header)
    if missing:
        raise CheckpointError(f"checkpoint header lacks {sorted(missing)}")
    payload = rest[size:]

    config = TrainConfig.from_dict(header["config"])
    vocab = Vocabulary(header["vocab"][3:], min_count=header["min_count"])
    if vocab.id_to_token != header["vocab"]:
        raise CheckpointError("checkpoint vocabulary has unexpected reserved entries")
    texts = header["quotations"]
    quotes = QuotationSet(texts, [vocab.encode(q) for q in texts])
    model = QuoteRecModel(len(vocab), len(texts), config, np.random.default_rng(0))
    params = model.named_parameters()
    names = [t["name"] for t in header["tensors"]]
    if sorted(names) != sorted(params) or len(set(names)) != len(names):
        raise CheckpointError("checkpoint tensors do not match the model's parameter registry")
    for entry in header["tensors"]:
        p = params[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != p.shape:
            raise CheckpointError(f"tensor {entry['name']} has shape {shape}, model expects {p.shape}")
        n = int(np.prod(shape)) if shape else 1
        chunk = payload[entry["offset"]: entry["offset"] + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"tensor {entry['name']} is truncated")
        p.data[...] = np.frombuffer(chunk, dtype="<f8").reshape(shape)
    return Checkpoint(model, config, vocab, quotes, header["metrics"])


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
