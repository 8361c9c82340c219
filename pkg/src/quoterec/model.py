"""Conversation encoder, quotation encoder, query-to-quotation mapping and ranking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import Batch, Conversation, QuotationSet, make_batch
from .data import batch as make_batches
from .layers import BiGRU, Module, TurnEncoder, pack_turns, xavier_uniform
from .tensor import Tensor


@dataclass
class Output:
    logits: Tensor    # [B, n_q]
    z: Tensor         # [B, n_q] query-quotation affinities
    mapped: Tensor    # [B, dim] mapped query representation
    h_c: Tensor       # [B, 2H] conversation representation
    r_query: Tensor   # [B, dim] query turn representation
    attn: list        # per-layer [T, heads, L, L] attention over every packed turn


@dataclass
class RankedResult:
    ids: list[int]
    probs: list[float]
    probabilities: np.ndarray  # full distribution indexed by quotation id


class QuoteRecModel(Module):
    """All learnable parameters plus the architecture switches.

    The conversation and quotation sides have separate embedding tables and
    encoders.  Without ``use_M`` the mapping is the identity and no ``M``
    parameter exists.
    """

    def __init__(self, vocab_size: int, n_quotes: int, config: TrainConfig, rng: np.random.Generator):
        if n_quotes < 2:
            raise ValueError(f"need at least 2 quotations, got {n_quotes}")
        c = config
        self.config = c
        self.n_quotes = n_quotes
        self.conv_encoder = TurnEncoder(vocab_size, c.dim, c.hidden, c.n_layers, c.n_heads, c.ffn_dim,
                                        c.dropout, c.turn_encoder, rng)
        self.quote_encoder = TurnEncoder(vocab_size, c.dim, c.hidden, c.n_layers, c.n_heads, c.ffn_dim,
                                         c.dropout, c.turn_encoder, rng)
        self.bigru = BiGRU(c.dim, c.hidden, rng)
        if c.use_M:
            self.M = Tensor(xavier_uniform(rng, c.dim, c.dim), requires_grad=True)
        features = n_quotes + 2 * c.hidden + c.dim
        self.W = Tensor(xavier_uniform(rng, features, n_quotes, (n_quotes, features)), requires_grad=True)
        self.b = Tensor(np.zeros(n_quotes), requires_grad=True)
        self._frozen_Q: Tensor | None = None

    @property
    def use_M(self) -> bool:
        return hasattr(self, "M")

    @property
    def dim(self) -> int:
        return self.config.dim

    # -- encoders ---------------------------------------------------------

    def encode_quotations(self, quotes: QuotationSet | Sequence[Sequence[int]], training: bool = False,
                          rng=None) -> Tensor:
        """Quotation matrix ``Q[n_q, dim]``, one row per quotation in list order."""
        tokens = quotes.tokens if isinstance(quotes, QuotationSet) else quotes
        ids, mask = pack_turns(tokens, self.config.max_turn_len)
        reps, _ = self.quote_encoder(ids, mask, training, rng)
        return reps

    def freeze_quotations(self, quotes: QuotationSet) -> Tensor:
        """Encode once in eval mode and cache for inference."""
        self._frozen_Q = Tensor(self.encode_quotations(quotes).data)
        return self._frozen_Q

    def quotation_matrix(self, quotes: QuotationSet) -> Tensor:
        return self._frozen_Q if self._frozen_Q is not None else self.freeze_quotations(quotes)

    def invalidate(self) -> None:
        self._frozen_Q = None

    def encode_turns(self, ids: np.ndarray, mask: np.ndarray, training: bool = False, rng=None):
        return self.conv_encoder(ids, mask, training, rng)

    def encode_batch(self, batch: Batch, training: bool = False, rng=None):
        """Returns ``(h_c[B, 2H], r_query[B, dim], attn)``."""
        reps, attn = self.encode_turns(batch.tokens, batch.mask, training, rng)
        r_query = T.take(reps, batch.query_rows)
        seq = T.take(T.dropout(reps, self.config.dropout, training, rng), batch.turn_index)
        _, h_c = self.bigru(seq, batch.n_turns)
        return h_c, r_query, attn

    # -- scoring ----------------------------------------------------------

    def map_query(self, r_query: Tensor) -> Tensor:
        if not self.use_M:
            return r_query
        return T.matmul(r_query, T.transpose(self.M)) if r_query.ndim == 2 else T.matmul(self.M, r_query)

    def score(self, h_c: Tensor, r_query: Tensor, Q: Tensor):
        """``(z, logits, mapped)`` for one conversation (1-D) or a batch (2-D)."""
        if Q.shape[0] != self.n_quotes:
            raise T.DimensionError(f"Q has {Q.shape[0]} rows but the output layer expects {self.n_quotes}")
        mapped = self.map_query(r_query)
        z = T.matmul(mapped, T.transpose(Q))
        features = T.concat([z, h_c, mapped], axis=-1)
        logits = T.add_bias(T.matmul(features, T.transpose(self.W)), self.b)
        return z, logits, mapped

    def forward(self, batch: Batch, Q: Tensor, training: bool = False, rng=None) -> Output:
        h_c, r_query, attn = self.encode_batch(batch, training, rng)
        z, logits, mapped = self.score(h_c, r_query, Q)
        return Output(logits, z, mapped, h_c, r_query, attn)


# -- functional surface -----------------------------------------------------


def encode_conversation(model: QuoteRecModel, conv: Conversation):
    """``(h_c[2H], r_query[dim], per_turn_attn)`` for a single conversation."""
    if not conv.turns:
        raise T.ContractError(f"conversation {conv.id!r} has no turns")
    h_c, r_query, attn = model.encode_batch(make_batch([conv], model.config.max_turn_len))
    return h_c[0], r_query[0], attn


def encode_quotations(model: QuoteRecModel, quotes: QuotationSet) -> Tensor:
    return model.encode_quotations(quotes)


def score(model: QuoteRecModel, h_c: Tensor, r_query: Tensor, Q: Tensor):
    z, logits, _ = model.score(h_c, r_query, Q)
    return z, logits


def rank_order(probs: np.ndarray) -> np.ndarray:
    """Quotation ids by descending probability; ties by ascending id."""
    probs = np.asarray(probs)
    return np.lexsort((np.arange(len(probs)), -probs))


def probabilities(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ranked_result(probs: np.ndarray, top_n: int | None = None) -> RankedResult:
    order = rank_order(probs)
    n = len(order) if top_n is None else max(0, min(top_n, len(order)))
    return RankedResult([int(i) for i in order[:n]], [float(probs[i]) for i in order[:n]], probs)


def predict(model: QuoteRecModel, conv: Conversation, quotes: QuotationSet, top_n: int | None = None) -> RankedResult:
    Q = model.quotation_matrix(quotes)
    out = model.forward(make_batch([conv], model.config.max_turn_len), Q)
    return ranked_result(probabilities(out.logits.data)[0], top_n)


def predict_batches(model: QuoteRecModel, convs: Sequence[Conversation], quotes: QuotationSet,
                    batch_size: int = 64) -> np.ndarray:
    """Probability matrix ``[len(convs), n_q]`` in eval mode."""
    Q = model.quotation_matrix(quotes)
    rows = [probabilities(model.forward(b, Q).logits.data)
            for b in make_batches(convs, batch_size, model.config.max_turn_len)]
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, model.n_quotes))
