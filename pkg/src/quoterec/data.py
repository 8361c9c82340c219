"""Corpus files, vocabulary, batching and pretrained-embedding loading.

On disk a corpus is a directory holding::

    quotations.txt            one quotation per line; line number (0-based) = id
    train.jsonl valid.jsonl test.jsonl
                              one {"id", "turns": [str, ...], "quote"} per line

``quote`` is the quotation text, its integer id, or null.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .layers import CLS, PAD, UNK, Embedding, pack_turns

SPLITS = ("train", "valid", "test")
RESERVED = ("<pad>", "<cls>", "<unk>")

_CJK = r"\u3040-\u30ff\u3400-\u4dbf\u4e00-\u9fff\uf900-\ufaff"
_TOKEN_RE = re.compile(rf"[{_CJK}]|[^\W_{_CJK}]+|[^\w\s]")


class CorpusError(ValueError):
    """Malformed corpus input."""


def tokenize(text: str) -> list[str]:
    """Lowercase; split on whitespace and punctuation; CJK one char per token."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = (), min_count: int = 2):
        self.min_count = min_count
        self.id_to_token: list[str] = list(RESERVED)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.token_to_id:
            self.token_to_id[token] = len(self.id_to_token)
            self.id_to_token.append(token)
        return self.token_to_id[token]

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 2, always: Iterable[str] = ()) -> Vocabulary:
        """Tokens seen ``min_count`` times in ``texts`` plus every token of ``always``.

        Ids follow first appearance, so the result is deterministic.
        """
        counts: Counter[str] = Counter()
        order: dict[str, None] = {}
        for text in texts:
            for tok in tokenize(text):
                counts[tok] += 1
                order.setdefault(tok, None)
        vocab = cls(min_count=min_count)
        for tok in order:
            if counts[tok] >= min_count:
                vocab.add(tok)
        for text in always:
            for tok in tokenize(text):
                vocab.add(tok)
        return vocab

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]


@dataclass
class Conversation:
    id: str
    turns: list[list[int]]
    gold: int | None = None
    text: list[str] = field(default_factory=list)

    @property
    def query(self) -> list[int]:
        return self.turns[-1]


@dataclass
class QuotationSet:
    texts: list[str]
    tokens: list[list[int]]

    def __post_init__(self):
        if len(self.texts) < 2:
            raise CorpusError(f"need at least 2 quotations, got {len(self.texts)}")

    def __len__(self) -> int:
        return len(self.texts)


@dataclass
class Corpus:
    train: list[Conversation]
    valid: list[Conversation]
    test: list[Conversation]
    quotes: QuotationSet
    vocab: Vocabulary

    def split(self, name: str) -> list[Conversation]:
        if name not in SPLITS:
            raise CorpusError(f"unknown split {name!r}")
        return getattr(self, name)


def _read_jsonl(path: Path) -> list[dict]:
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path.name}:{lineno}: malformed record ({exc.msg})") from None
            if (not isinstance(rec, dict) or not isinstance(rec.get("id"), str)
                    or not isinstance(rec.get("turns"), list)
                    or not all(isinstance(t, str) for t in rec["turns"])):
                raise CorpusError(f"{path.name}:{lineno}: record needs string 'id' and list of string 'turns'")
            if not rec["turns"]:
                raise CorpusError(f"{path.name}:{lineno}: conversation {rec['id']!r} has no turns")
            rec["_line"] = lineno
            records.append(rec)
    return records


def read_quotations(path: str | Path) -> list[str]:
    return [line.rstrip("\n") for line in Path(path).read_text(encoding="utf-8").splitlines()]


def _gold_id(rec: dict, quote_ids: dict[str, int], n_q: int, where: str) -> int | None:
    quote = rec.get("quote")
    if quote is None:
        return None
    if isinstance(quote, bool):
        raise CorpusError(f"{where}: record {rec['id']!r} has a non-quotation label")
    if isinstance(quote, int):
        if not 0 <= quote < n_q:
            raise CorpusError(f"{where}: record {rec['id']!r} has gold id {quote} outside 0..{n_q - 1}")
        return quote
    if isinstance(quote, str):
        if quote.strip() not in quote_ids:
            raise CorpusError(f"{where}: record {rec['id']!r} cites an unknown quotation {quote!r}")
        return quote_ids[quote.strip()]
    raise CorpusError(f"{where}: record {rec['id']!r} has a malformed quote field")


def load_corpus(path: str | Path, vocab: Vocabulary | None = None, min_count: int = 2) -> Corpus:
    """Read a corpus directory.

    Without ``vocab``, one is built from the train split (cutoff
    ``min_count``) plus every quotation token.
    """
    root = Path(path)
    for name in ("quotations.txt",) + tuple(f"{s}.jsonl" for s in SPLITS):
        if not (root / name).is_file():
            raise CorpusError(f"missing corpus file {root / name}")
    texts = read_quotations(root / "quotations.txt")
    quote_ids: dict[str, int] = {}
    for i, q in enumerate(texts):
        quote_ids.setdefault(q.strip(), i)
    raw = {s: _read_jsonl(root / f"{s}.jsonl") for s in SPLITS}
    if vocab is None:
        vocab = Vocabulary.build((t for r in raw["train"] for t in r["turns"]), min_count, always=texts)
    quotes = QuotationSet(texts, [vocab.encode(q) for q in texts])
    splits = {}
    for s in SPLITS:
        convs = []
        for rec in raw[s]:
            gold = _gold_id(rec, quote_ids, len(texts), f"{s}.jsonl:{rec['_line']}")
            convs.append(Conversation(rec["id"], [vocab.encode(t) for t in rec["turns"]], gold, list(rec["turns"])))
        splits[s] = convs
    return Corpus(splits["train"], splits["valid"], splits["test"], quotes, vocab)


def conversation_record(conv: Conversation, quotes: QuotationSet) -> dict:
    return {"id": conv.id, "turns": list(conv.text),
            "quote": None if conv.gold is None else quotes.texts[conv.gold]}


def write_corpus(root: str | Path, splits: dict[str, Sequence[dict]], quotations: Sequence[str]) -> Path:
    """Write raw records (``id``/``turns``/``quote`` dicts) as a corpus directory."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "quotations.txt").write_text("".join(q + "\n" for q in quotations), encoding="utf-8")
    for s in SPLITS:
        lines = [json.dumps({"id": r["id"], "turns": r["turns"], "quote": r.get("quote")}, ensure_ascii=False)
                 for r in splits.get(s, ())]
        (root / f"{s}.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return root


def save_corpus(corpus: Corpus, root: str | Path) -> Path:
    splits = {s: [conversation_record(c, corpus.quotes) for c in corpus.split(s)] for s in SPLITS}
    return write_corpus(root, splits, corpus.quotes.texts)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """A padded group of conversations.

    All turns of all conversations are packed into ``tokens[T, L]``;
    ``turn_index[b, i]`` is the row of turn ``i`` of conversation ``b``
    (0 past ``n_turns[b]``).
    """

    ids: list[str]
    tokens: np.ndarray
    mask: np.ndarray
    turn_index: np.ndarray
    n_turns: np.ndarray
    gold: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def query_rows(self) -> np.ndarray:
        return self.turn_index[np.arange(len(self.ids)), self.n_turns - 1]


def make_batch(convs: Sequence[Conversation], max_turn_len: int = 50) -> Batch:
    turns = [t for c in convs for t in c.turns]
    if any(not c.turns for c in convs):
        raise CorpusError("every conversation needs at least one turn")
    tokens, mask = pack_turns(turns, max_turn_len)
    n_turns = np.array([len(c.turns) for c in convs], dtype=np.int64)
    index = np.zeros((len(convs), int(n_turns.max())), dtype=np.int64)
    start = 0
    for b, n in enumerate(n_turns):
        index[b, :n] = np.arange(start, start + n)
        start += n
    gold = np.array([-1 if c.gold is None else c.gold for c in convs], dtype=np.int64)
    return Batch([c.id for c in convs], tokens, mask, index, n_turns, gold)


def batch(convs: Sequence[Conversation], batch_size: int = 32, max_turn_len: int = 50,
          shuffle: bool = False, rng: np.random.Generator | None = None) -> list[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(convs))
    if shuffle:
        if rng is None:
            raise ValueError("shuffling needs an rng")
        order = rng.permutation(len(convs))
    return [make_batch([convs[i] for i in order[s : s + batch_size]], max_turn_len)
            for s in range(0, len(convs), batch_size)]


# ---------------------------------------------------------------------------
# pretrained embeddings


def load_pretrained_embeddings(path: str | Path, vocab: Vocabulary, table: Embedding, dim: int = 200) -> float:
    """Overwrite rows of ``table`` for tokens found in a ``token v1 .. vdim`` file.

    Returns the fraction of non-reserved vocabulary entries covered.
    """
    from .config import ConfigError

    if table.dim != dim:
        raise ConfigError(f"embedding table width {table.dim} differs from file dim {dim}")
    found = set()
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            token, values = parts[0], parts[1:]
            if token not in vocab.token_to_id:
                continue
            if len(values) != dim:
                raise ConfigError(f"vector for {token!r} has {len(values)} values, expected {dim}")
            idx = vocab.token_to_id[token]
            if idx in (PAD, CLS, UNK):
                continue
            table.weight.data[idx] = np.array(values, dtype=np.float64)
            found.add(idx)
    total = len(vocab) - len(RESERVED)
    return len(found) / total if total else 0.0
