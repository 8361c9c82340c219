"""Synthetic corpora whose query turns are learnable by construction.

Every quotation owns a disjoint set of topic words drawn from the
conversation vocabulary.  A conversation's query turn samples each token
from its gold quotation's topic set, except that with probability
``noise`` a token is a random filler word instead.  Earlier turns are all
filler.  Quotation texts use their own word pool, so the two sides do not
share surface forms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import write_corpus


@dataclass
class SynthSpec:
    seed: int = 0
    n_q: int = 10
    n_convs: int = 500
    vocab_size: int = 400
    noise: float = 0.1
    topic_size: int = 10
    quote_vocab: int = 200
    max_turns: int = 4
    turn_len: tuple[int, int] = (5, 12)
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)


def generate(spec: SynthSpec) -> tuple[dict[str, list[dict]], list[str], dict[int, list[str]]]:
    """Returns ``(splits, quotations, topics)`` without touching the disk."""
    if spec.n_q < 2:
        raise ValueError("synthetic corpus needs n_q >= 2")
    if not 0.0 <= spec.noise <= 1.0:
        raise ValueError("noise must lie in [0, 1]")
    n_topic = spec.n_q * spec.topic_size
    if spec.vocab_size <= n_topic:
        raise ValueError(f"vocab_size {spec.vocab_size} leaves no filler words after {n_topic} topic words")
    rng = np.random.default_rng(spec.seed)
    words = [f"w{i:04d}" for i in rng.permutation(spec.vocab_size)]
    topics = {k: words[k * spec.topic_size:(k + 1) * spec.topic_size] for k in range(spec.n_q)}
    filler = words[n_topic:]
    qwords = [f"q{i:04d}" for i in range(spec.quote_vocab)]

    quotations: list[str] = []
    seen = set()
    while len(quotations) < spec.n_q:
        text = " ".join(qwords[i] for i in rng.integers(0, spec.quote_vocab, rng.integers(5, 10)))
        if text not in seen:
            seen.add(text)
            quotations.append(text)

    lo, hi = spec.turn_len
    gold = rng.permutation(np.arange(spec.n_convs) % spec.n_q)
    records = []
    for c in range(spec.n_convs):
        k = int(gold[c])
        turns = []
        for _ in range(int(rng.integers(0, spec.max_turns))):
            turns.append(" ".join(filler[i] for i in rng.integers(0, len(filler), rng.integers(lo, hi + 1))))
        length = int(rng.integers(lo, hi + 1))
        noisy = rng.random(length) < spec.noise
        topic_pick = rng.integers(0, spec.topic_size, length)
        filler_pick = rng.integers(0, len(filler), length)
        query = [filler[f] if n else topics[k][t] for n, t, f in zip(noisy, topic_pick, filler_pick)]
        turns.append(" ".join(query))
        records.append({"id": f"c{c:05d}", "turns": turns, "quote": quotations[k]})

    n_train = int(round(spec.split[0] * spec.n_convs))
    n_valid = int(round(spec.split[1] * spec.n_convs))
    splits = {
        "train": records[:n_train],
        "valid": records[n_train:n_train + n_valid],
        "test": records[n_train + n_valid:],
    }
    return splits, quotations, topics


def synth_corpus(out: str | Path, seed: int = 0, n_q: int = 10, n_convs: int = 500,
                 vocab_size: int = 400, noise: float = 0.1, **kwargs) -> Path:
    """Write a synthetic corpus directory plus ``topics.json`` (quote id -> topic words)."""
    spec = SynthSpec(seed=seed, n_q=n_q, n_convs=n_convs, vocab_size=vocab_size, noise=noise, **kwargs)
    splits, quotations, topics = generate(spec)
    root = write_corpus(out, splits, quotations)
    (root / "topics.json").write_text(json.dumps({str(k): v for k, v in topics.items()}, indent=1) + "\n",
                                      encoding="utf-8")
    return root


def load_topics(root: str | Path) -> dict[int, list[str]]:
    raw = json.loads((Path(root) / "topics.json").read_text(encoding="utf-8"))
    return {int(k): v for k, v in raw.items()}

