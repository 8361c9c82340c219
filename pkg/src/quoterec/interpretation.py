"""Indicative words for a quotation from its history queries.

For quotation ``k`` the history queries are the query turns of all
training conversations labelled ``k``.  Each history query gets a
query-level weight (softmax over dot products between the quotation
vector and the mapped query vectors) and every word in it gets a
word-level weight (CLS-row self-attention of the conversation
transformer).  A word's score is the sum over its occurrences of
query weight times word weight.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import Conversation, QuotationSet, Vocabulary
from .layers import CLS, PAD, UNK, pack_turns
from .model import QuoteRecModel
from .tensor import Tensor


class InterpretationError(ValueError):
    """No history to interpret, or an encoder without attention weights."""


@dataclass
class HistorySet:
    quote_id: int
    conv_ids: list[str]
    queries: list[list[int]]

    @property
    def m_k(self) -> int:
        return len(self.queries)


@dataclass
class IndicativeWords:
    quote_id: int
    words: list[tuple[str, float]]
    query_attention: list[tuple[str, float]]
    per_query: list[list[tuple[str, float]]] = field(default_factory=list)

    def record(self, quote_text: str = "") -> dict:
        return {
            "quote_id": self.quote_id,
            "quote_text": quote_text,
            "words": [[w, s] for w, s in self.words],
            "query_attention": [[c, a] for c, a in self.query_attention],
        }


def history_sets(convs: Iterable[Conversation]) -> dict[int, HistorySet]:
    out: dict[int, HistorySet] = {}
    for conv in convs:
        if conv.gold is None:
            continue
        h = out.setdefault(conv.gold, HistorySet(conv.gold, [], []))
        h.conv_ids.append(conv.id)
        h.queries.append(list(conv.query))
    return out


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _encode_queries(model: QuoteRecModel, queries: Sequence[Sequence[int]]):
    ids, mask = pack_turns(queries, model.config.max_turn_len)
    reps, attn = model.encode_turns(ids, mask)
    return ids, mask, reps, attn


def query_attention(model: QuoteRecModel, quote_repr, history: HistorySet, transformed: bool = True,
                    reps: Tensor | None = None) -> np.ndarray:
    """Weights ``a_{k,i}`` over the history queries of one quotation."""
    if history.m_k == 0:
        raise InterpretationError(f"quotation {history.quote_id} has no history queries")
    if reps is None:
        _, _, reps, _ = _encode_queries(model, history.queries)
    if transformed:
        reps = model.map_query(reps)
    r_q = quote_repr.data if isinstance(quote_repr, Tensor) else np.asarray(quote_repr)
    return _softmax(reps.data @ r_q)


def _cls_row_weights(attn: list, row: int, mask_row: np.ndarray, layer: int, heads: str) -> np.ndarray:
    a = attn[layer][row][:, 0, :]  # [heads, L]
    agg = a.max(axis=0) if heads == "max" else a.mean(axis=0)
    real = mask_row.copy()
    real[0] = False
    w = np.where(real, agg, 0.0)
    total = w.sum()
    return w / total if total > 0 else np.where(real, 1.0 / real.sum(), 0.0)


def _check_attention(model: QuoteRecModel) -> None:
    if model.conv_encoder.kind != "transformer" or model.config.n_layers == 0:
        raise InterpretationError("word-level scores need a transformer turn encoder with >= 1 layer")


def word_scores(model: QuoteRecModel, tokens: Sequence[int], layer: int = -1, heads: str = "mean") -> np.ndarray:
    """CLS-row attention over the real (non-CLS, non-PAD) tokens, summing to 1."""
    _check_attention(model)
    ids, mask, _, attn = _encode_queries(model, [tokens])
    w = _cls_row_weights(attn, 0, mask[0], layer, heads)
    return w[1 : mask[0].sum()]


def indicative_words(model: QuoteRecModel, quote_id: int, history: HistorySet, vocab: Vocabulary,
                     quotes: QuotationSet, top_k: int = 8, transformed: bool = True, layer: int = -1,
                     heads: str = "mean", stoplist: Iterable[str] = ()) -> IndicativeWords:
    _check_attention(model)
    if history.m_k == 0:
        raise InterpretationError(f"quotation {quote_id} has no history queries")
    Q = model.quotation_matrix(quotes)
    ids, mask, reps, attn = _encode_queries(model, history.queries)
    a = query_attention(model, Q.data[quote_id], history, transformed, reps=reps)
    stop = set(stoplist)
    scores: dict[str, float] = defaultdict(float)
    per_query = []
    for i in range(history.m_k):
        n_real = int(mask[i].sum())
        w = _cls_row_weights(attn, i, mask[i], layer, heads)[1:n_real]
        toks = vocab.decode(ids[i, 1:n_real])
        per_query.append([(t, float(x)) for t, x in zip(toks, w)])
        for tok_id, tok, x in zip(ids[i, 1:n_real], toks, w):
            if tok_id in (PAD, CLS, UNK) or tok in stop:
                continue
            scores[tok] += float(a[i] * x)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return IndicativeWords(
        quote_id,
        ranked[: max(0, top_k)],
        [(c, float(x)) for c, x in zip(history.conv_ids, a)],
        per_query,
    )


def heat_report(result: IndicativeWords, quote_text: str = "", max_queries: int = 5) -> str:
    """Plain-text rendering: top history queries with word weights, then the indicative words."""
    lines = [f"quotation {result.quote_id}: {quote_text}".rstrip()]
    order = sorted(range(len(result.query_attention)), key=lambda i: (-result.query_attention[i][1], i))
    for i in order[:max_queries]:
        conv_id, a = result.query_attention[i]
        words = " ".join(f"{t}({100 * w:.1f})" for t, w in result.per_query[i]) if result.per_query else ""
        lines.append(f"  [{conv_id} a={a:.3f}] {words}")
    lines.append("  indicative: " + " ".join(f"{t}({s:.3f})" for t, s in result.words))
    return "\n".join(lines)


def interpret_corpus(model: QuoteRecModel, corpus, quote_ids: Sequence[int] | None = None,
                     top_k: int = 8, **kwargs) -> list[IndicativeWords]:
    """Indicative words for ``quote_ids`` (default: every quotation with training history)."""
    histories = history_sets(corpus.train)
    if quote_ids is None:
        quote_ids = sorted(histories)
    out = []
    for k in quote_ids:
        if k not in histories:
            raise InterpretationError(f"quotation {k} has no history queries in the training split")
        out.append(indicative_words(model, k, histories[k], corpus.vocab, corpus.quotes, top_k, **kwargs))
    return out
