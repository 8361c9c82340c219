"""Ranking metrics for the one-gold-quotation-per-conversation setting.

With a single relevant item per conversation:

* AP is ``1 / rank`` so MAP equals mean reciprocal rank,
* P@k is the hit indicator ``rank <= k``,
* nDCG@5 is ``1 / log2(rank + 1)`` inside the top 5, else 0 (ideal DCG = 1).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .model import RankedResult, rank_order


@dataclass
class EvalReport:
    map: float
    p1: float
    p3: float
    ndcg5: float
    ranks: list[int] = field(default_factory=list)
    n: int = 0

    def as_dict(self, with_ranks: bool = False) -> dict:
        out = {"MAP": self.map, "P@1": self.p1, "P@3": self.p3, "nDCG@5": self.ndcg5, "n": self.n}
        if with_ranks:
            out["ranks"] = list(self.ranks)
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    def table(self, title: str = "") -> str:
        head = f"{'':<10}{'MAP':>8}{'P@1':>8}{'P@3':>8}{'NG@5':>8}{'n':>7}"
        row = (f"{title[:10]:<10}{100 * self.map:8.1f}{100 * self.p1:8.1f}"
               f"{100 * self.p3:8.1f}{100 * self.ndcg5:8.1f}{self.n:7d}")
        return head + "\n" + row


def rank_of_gold(ranked: RankedResult | Sequence[float], gold: int) -> int:
    """1-based position of ``gold`` under the descending-probability, ascending-id order."""
    if isinstance(ranked, RankedResult):
        order = ranked.ids if len(ranked.ids) == len(ranked.probabilities) else rank_order(ranked.probabilities)
    else:
        order = rank_order(np.asarray(ranked))
    order = list(order)
    if gold not in order:
        raise ValueError(f"gold id {gold} missing from the ranking")
    return order.index(gold) + 1


def ranks_from_probabilities(probs: np.ndarray, gold: Sequence[int]) -> np.ndarray:
    """Vectorised :func:`rank_of_gold` over rows of ``probs``."""
    probs = np.asarray(probs)
    gold = np.asarray(gold, dtype=np.int64)
    p_gold = probs[np.arange(len(gold)), gold][:, None]
    ids = np.arange(probs.shape[1])[None, :]
    ahead = (probs > p_gold) | ((probs == p_gold) & (ids < gold[:, None]))
    return 1 + ahead.sum(axis=1)


def compute_metrics(ranks: Sequence[int], k_p: tuple[int, int] = (1, 3), k_ndcg: int = 5) -> EvalReport:
    r = np.asarray(ranks, dtype=np.int64)
    if r.size == 0:
        raise ValueError("cannot compute metrics over zero conversations")
    if (r < 1).any():
        raise ValueError("ranks are 1-based")
    ranks_ = [int(x) for x in r]
    n = len(ranks_)
    # correctly rounded means, so the result does not depend on summation order
    ap = [1.0 / x for x in ranks_]
    gains = [1.0 / math.log2(x + 1) if x <= k_ndcg else 0.0 for x in ranks_]
    return EvalReport(
        map=math.fsum(ap) / n,
        p1=sum(x <= k_p[0] for x in ranks_) / n,
        p3=sum(x <= k_p[1] for x in ranks_) / n,
        ndcg5=math.fsum(gains) / n,
        ranks=ranks_,
        n=n,
    )


def average_precisions(ranks: Sequence[int]) -> np.ndarray:
    return 1.0 / np.asarray(ranks, dtype=np.float64)


@dataclass
class TTestResult:
    p_value: float
    statistic: float
    degenerate: bool = False


def paired_ttest(per_item_a: Sequence[float], per_item_b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test.  Zero-variance differences give ``p = 1`` flagged degenerate."""
    a = np.asarray(per_item_a, dtype=np.float64)
    b = np.asarray(per_item_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired t-test needs two equal-length samples of size >= 2")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0 or not math.isfinite(sd):
        return TTestResult(1.0, 0.0, True)
    t = d.mean() / (sd / math.sqrt(d.size))
    p = 2.0 * stats.t.sf(abs(t), df=d.size - 1)
    return TTestResult(float(min(p, 1.0)), float(t))
