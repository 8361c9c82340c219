"""Neural building blocks on top of :mod:`quoterec.tensor`.

Layers are plain classes holding parameter tensors; :class:`Module` only
provides a stable, ordered parameter registry.  All sequence layers work
on padded batches with an explicit boolean mask (true = real position).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD, CLS, UNK = 0, 1, 2


class Module:
    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(f"{prefix}{key}."))
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape or (fan_in, fan_out))


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        w = rng.uniform(-0.1, 0.1, (vocab_size, dim))
        w[PAD] = 0.0
        self.weight = _param(w)

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, ids) -> Tensor:
        return T.take(self.weight, ids)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = _param(xavier_uniform(rng, d_in, d_out))
        self.bias = _param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


def pack_turns(turns: Sequence[Sequence[int]], max_turn_len: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Prefix CLS, truncate, pad: returns ``(ids[T, L], mask[T, L])``.

    An empty turn becomes a single UNK token so every turn has at least one
    real word after CLS.
    """
    rows = [[CLS] + (list(t[:max_turn_len]) or [UNK]) for t in turns]
    width = max(len(r) for r in rows)
    ids = np.zeros((len(rows), width), dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = True
    return ids, mask


def embed_turn(table: Embedding, tokens: Sequence[int], max_turn_len: int = 50) -> tuple[Tensor, np.ndarray]:
    ids, mask = pack_turns([tokens], max_turn_len)
    return table(ids[0]), mask[0]


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: dim // 2])
    return pe


class MultiHeadSelfAttention(Module):
    """Self-attention with ``n_heads`` heads of width ``dim // n_heads``.

    When the heads do not tile ``dim`` exactly, the output projection maps
    ``n_heads * head_dim`` back up to ``dim``.
    """

    def __init__(self, dim: int, n_heads: int, dropout: float, rng: np.random.Generator):
        if n_heads < 1 or dim // n_heads < 1:
            raise ValueError(f"cannot split width {dim} into {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        inner = n_heads * self.head_dim
        self.query = Linear(dim, inner, rng)
        self.key = Linear(dim, inner, rng)
        self.value = Linear(dim, inner, rng)
        self.out = Linear(inner, dim, rng)
        self.dropout = dropout

    def _heads(self, x: Tensor) -> Tensor:
        n, length, _ = x.shape
        return T.transpose(T.reshape(x, (n, length, self.n_heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask: np.ndarray, training: bool = False, rng=None):
        n, length, _ = x.shape
        q, k, v = self._heads(self.query(x)), self._heads(self.key(x)), self._heads(self.value(x))
        scores = T.matmul(q, T.transpose(k)) * (1.0 / math.sqrt(self.head_dim))
        weights = T.softmax(scores, axis=-1, mask=mask[:, None, None, :])
        attn = weights.data
        weights = T.dropout(weights, self.dropout, training, rng)
        ctx = T.transpose(T.matmul(weights, v), (0, 2, 1, 3))
        ctx = T.reshape(ctx, (n, length, self.n_heads * self.head_dim))
        return self.out(ctx), attn


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.inner = Linear(dim, hidden, rng)
        self.outer = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(T.relu(self.inner(x)))


class TransformerLayer(Module):
    """Post-norm encoder layer: attention, add & norm, FFN, add & norm."""

    def __init__(self, dim: int, n_heads: int, ffn_dim: int, dropout: float, rng):
        self.attention = MultiHeadSelfAttention(dim, n_heads, dropout, rng)
        self.norm1 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)
        self.norm2 = LayerNorm(dim)
        self.dropout = dropout

    def __call__(self, x: Tensor, mask: np.ndarray, training: bool = False, rng=None):
        a, attn = self.attention(x, mask, training, rng)
        x = self.norm1(x + T.dropout(a, self.dropout, training, rng))
        f = self.ffn(x)
        x = self.norm2(x + T.dropout(f, self.dropout, training, rng))
        return x, attn


class TransformerEncoder(Module):
    def __init__(self, n_layers: int, dim: int, n_heads: int, ffn_dim: int, dropout: float, rng):
        self.layers = [TransformerLayer(dim, n_heads, ffn_dim, dropout, rng) for _ in range(n_layers)]
        self.dim = dim
        self.n_heads = n_heads

    def __call__(self, x: Tensor, mask: np.ndarray, training: bool = False, rng=None):
        """Returns the encoded batch and one ``[T, heads, L, L]`` array per layer."""
        attns = []
        for layer in self.layers:
            x, attn = layer(x, mask, training, rng)
            attns.append(attn)
        return x, attns


def encode_turn(enc: TransformerEncoder, embedded: Tensor, mask: np.ndarray):
    """CLS-position output for one turn plus per-layer ``[heads, L, L]`` attention."""
    length, dim = embedded.shape
    out, attns = enc(T.reshape(embedded, (1, length, dim)), np.asarray(mask)[None, :])
    return out[0, 0], [a[0] for a in attns]


class GRUCell(Module):
    """GRU with gates stacked as [update | reset | candidate] along the last axis."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.W = _param(np.concatenate([xavier_uniform(rng, d_in, hidden) for _ in range(3)], axis=1))
        self.U = _param(np.concatenate([xavier_uniform(rng, hidden, hidden) for _ in range(3)], axis=1))
        self.b = _param(np.zeros(3 * hidden))

    def project(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, self.W), self.b)

    def step(self, h: Tensor, xw: Tensor) -> Tensor:
        H = self.hidden
        hu = T.matmul(h, self.U)
        z = T.sigmoid(xw[..., :H] + hu[..., :H])
        r = T.sigmoid(xw[..., H : 2 * H] + hu[..., H : 2 * H])
        n = T.tanh(xw[..., 2 * H :] + r * hu[..., 2 * H :])
        return (1.0 - z) * n + z * h


def gru_step(cell: GRUCell, h_prev: Tensor, x: Tensor) -> Tensor:
    return cell.step(h_prev, cell.project(x))


class BiGRU(Module):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.forward_cell = GRUCell(d_in, hidden, rng)
        self.backward_cell = GRUCell(d_in, hidden, rng)

    def __call__(self, seq: Tensor, lengths=None):
        """Encode ``seq[B, n, D]``; rows past ``lengths[b]`` are padding.

        Returns ``states[B, n, 2H]`` and ``final[B, 2H]`` where ``final`` is
        the forward state at each row's last real step joined with the
        backward state at step 0.
        """
        B, n, _ = seq.shape
        if n < 1:
            raise T.ContractError("bigru needs a sequence of at least one step")
        lengths = np.full(B, n) if lengths is None else np.asarray(lengths)
        ragged = bool((lengths < n).any())
        zeros = Tensor(np.zeros((B, self.hidden)))

        fw_in = self.forward_cell.project(seq)
        h, fw = zeros, []
        for t in range(n):
            new = self.forward_cell.step(h, fw_in[:, t])
            h = T.where_rows(t < lengths, new, h) if ragged else new
            fw.append(h)
        h_fw = h

        bw_in = self.backward_cell.project(seq)
        h, bw = zeros, [None] * n
        for t in range(n - 1, -1, -1):
            new = self.backward_cell.step(h, bw_in[:, t])
            h = T.where_rows(t < lengths, new, h) if ragged else new
            bw[t] = h

        states = T.concat([T.stack(fw, axis=1), T.stack(bw, axis=1)], axis=-1)
        return states, T.concat([h_fw, h], axis=-1)


def bigru_encode(bigru: BiGRU, seq: Tensor):
    n, d = seq.shape
    states, final = bigru(T.reshape(seq, (1, n, d)))
    return states[0], final[0]


class TurnEncoder(Module):
    """Token ids of a batch of turns -> one vector per turn.

    ``kind="transformer"``: scaled embeddings plus sinusoidal positions,
    then a transformer stack; the CLS output is the turn vector.
    ``kind="bigru"``: a word-level Bi-GRU whose final states are projected
    back to ``dim``.
    """

    def __init__(self, vocab_size: int, dim: int, hidden: int, n_layers: int, n_heads: int,
                 ffn_dim: int, dropout: float, kind: str, rng: np.random.Generator):
        if kind not in ("transformer", "bigru"):
            raise ValueError(f"unknown turn encoder kind {kind!r}")
        self.kind = kind
        self.dim = dim
        self.embed = Embedding(vocab_size, dim, rng)
        if kind == "transformer":
            self.transformer = TransformerEncoder(n_layers, dim, n_heads, ffn_dim, dropout, rng)
        else:
            self.word_gru = BiGRU(dim, hidden, rng)
            self.proj = Linear(2 * hidden, dim, rng)

    def __call__(self, ids: np.ndarray, mask: np.ndarray, training: bool = False, rng=None):
        n, length = ids.shape
        x = self.embed(ids)
        if self.kind == "bigru":
            _, final = self.word_gru(x, mask.sum(axis=1))
            return self.proj(final), []
        pe = np.broadcast_to(sinusoidal_positions(length, self.dim), (n, length, self.dim))
        x = x * math.sqrt(self.dim) + Tensor(pe)
        out, attns = self.transformer(x, mask, training, rng)
        return out[:, 0], attns
