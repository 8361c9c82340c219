"""Recommendation loss, mapping loss, weight penalty and their combination.

Both losses are averaged over the batch so ``lam`` and the learning rate
do not depend on the batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConfigError
from .tensor import Tensor


@dataclass
class LossBreakdown:
    rec: float
    map: float
    l2: float
    total: float
    tensor: Tensor | None = None  # the differentiable total, when built on a tape

    def as_dict(self) -> dict:
        return {"rec": self.rec, "map": self.map, "l2": self.l2, "total": self.total}


def _gold_array(gold, n: int, rows: int) -> np.ndarray:
    g = np.atleast_1d(np.asarray(gold, dtype=np.int64))
    if g.shape != (rows,):
        raise T.DimensionError(f"expected {rows} gold ids, got shape {g.shape}")
    if (g < 0).any() or (g >= n).any():
        raise ValueError(f"gold id outside 0..{n - 1}: {g[(g < 0) | (g >= n)].tolist()}")
    return g


def recommendation_loss(logits: Tensor, gold) -> Tensor:
    """Mean negative log-probability of the gold quotation."""
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, logits.shape[0]))
    g = _gold_array(gold, logits.shape[1], logits.shape[0])
    return T.mean(T.pick(T.log_softmax(logits, axis=-1), g)) * -1.0


def mapping_distance(mapped: Tensor, Q: Tensor, gold) -> Tensor:
    """Mean over the batch of ``||mapped_b - Q[gold_b]||^2``."""
    if mapped.ndim == 1:
        g = _gold_array(gold, Q.shape[0], 1)
        return T.sqdist(mapped, T.take(Q, g)[0])
    g = _gold_array(gold, Q.shape[0], mapped.shape[0])
    diff = mapped - T.take(Q, g)
    return T.mean(T.sum(diff * diff, axis=-1))


def mapping_loss(M: Tensor | None, r_query: Tensor, Q: Tensor, gold) -> Tensor:
    """``||M r_query - Q[gold]||^2`` (identity map when ``M`` is None)."""
    if M is None:
        mapped = r_query
    elif r_query.ndim == 1:
        mapped = T.matmul(M, r_query)
    else:
        mapped = T.matmul(r_query, T.transpose(M))
    return mapping_distance(mapped, Q, gold)


def l2_penalty(named_params: dict[str, Tensor]) -> Tensor | None:
    """Sum of squares of every weight matrix; embedding PAD rows excluded."""
    terms = []
    for name, p in named_params.items():
        if p.ndim < 2:
            continue
        w = p[1:] if name.endswith("embed.weight") else p
        terms.append(T.sum(w * w))
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def combined_loss(rec, map_, lam: float, l2=None, mu: float = 0.0) -> LossBreakdown:
    """``rec + lam * map + mu * l2``; accepts tensors (differentiable) or floats."""
    if lam < 0 or mu < 0:
        raise ConfigError(f"loss coefficients must be non-negative (lam={lam}, mu={mu})")

    def val(x):
        return 0.0 if x is None else float(x.item() if isinstance(x, Tensor) else x)

    rec_v, map_v, l2_v = val(rec), val(map_), val(l2)
    total = rec if isinstance(rec, Tensor) else Tensor(rec_v)
    if lam and map_ is not None:
        total = total + (map_ * lam if isinstance(map_, Tensor) else lam * map_v)
    if mu and l2 is not None:
        total = total + (l2 * mu if isinstance(l2, Tensor) else mu * l2_v)
    return LossBreakdown(rec_v, map_v, l2_v, total.item(), total)
