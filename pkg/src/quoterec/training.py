"""Adam, gradient clipping, the epoch loop with early stopping, and grid search."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import Corpus, batch, load_pretrained_embeddings
from .evaluation import EvalReport, compute_metrics, ranks_from_probabilities
from .losses import LossBreakdown, combined_loss, l2_penalty, mapping_distance, recommendation_loss
from .model import QuoteRecModel, predict_batches

logger = logging.getLogger(__name__)


class DivergenceError(ArithmeticError):
    """Loss or gradient became NaN/inf."""


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, T.Tensor], lr: float) -> None:
    """One bias-corrected Adam update in place, then zero the gradients."""
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = np.zeros_like(p.data)


def clip_grad_norm(params: dict[str, T.Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params.values() if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


def build_model(config: TrainConfig, corpus: Corpus, rng: np.random.Generator) -> QuoteRecModel:
    model = QuoteRecModel(len(corpus.vocab), len(corpus.quotes), config, rng)
    if config.embeddings:
        for enc in (model.conv_encoder, model.quote_encoder):
            coverage = load_pretrained_embeddings(config.embeddings, corpus.vocab, enc.embed, config.dim)
        logger.info("pretrained embeddings cover %.1f%% of the vocabulary", 100 * coverage)
    return model


def train_step(model: QuoteRecModel, batch_, quotes, config: TrainConfig, rng) -> LossBreakdown:
    """Forward + backward for one batch; gradients are left on the parameters."""
    params = model.named_parameters()
    with T.GradTape() as tape:
        Q = model.encode_quotations(quotes, training=True, rng=rng)
        out = model.forward(batch_, Q, training=True, rng=rng)
        rec = recommendation_loss(out.logits, batch_.gold)
        map_ = mapping_distance(out.mapped, Q, batch_.gold)
        l2 = l2_penalty(params) if config.l2 else None
        losses = combined_loss(rec, map_, config.effective_lam, l2, config.l2)
        if not math.isfinite(losses.total):
            raise DivergenceError(f"loss became {losses.total}")
        tape.backward(losses.tensor)
    return losses


def evaluate_model(model: QuoteRecModel, convs, quotes, batch_size: int = 64) -> tuple[EvalReport, np.ndarray]:
    model.invalidate()
    probs = predict_batches(model, convs, quotes, batch_size)
    gold = [c.gold for c in convs]
    return compute_metrics(ranks_from_probabilities(probs, gold)), probs


def mean_map_distance(model: QuoteRecModel, convs, quotes, batch_size: int = 64) -> float:
    """Mean ``||M r - r^q_gold||^2`` over ``convs`` in eval mode."""
    model.invalidate()
    Q = model.quotation_matrix(quotes)
    total = 0.0
    for b in batch(convs, batch_size, model.config.max_turn_len):
        out = model.forward(b, Q)
        total += mapping_distance(out.mapped, Q, b.gold).item() * len(b)
    return total / len(convs)


@dataclass
class TrainResult:
    model: QuoteRecModel
    config: TrainConfig
    log: list[dict]
    best_epoch: int
    best_metrics: dict
    steps: int


def _snapshot(model: QuoteRecModel) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.named_parameters().items()}


def _restore(model: QuoteRecModel, snap: dict[str, np.ndarray]) -> None:
    for k, v in model.named_parameters().items():
        v.data[...] = snap[k]
    model.invalidate()


def train(config: TrainConfig, corpus: Corpus, log_path: str | Path | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimise the combined loss; keep the parameters with the best validation MAP.

    Training stops once ``patience`` consecutive epochs fail to improve on
    the best validation MAP, or after ``max_epochs``.
    """
    if not corpus.train or not corpus.valid:
        raise ValueError("train and valid splits must be non-empty")
    rng = np.random.default_rng(config.seed)
    model = build_model(config, corpus, rng)
    params = model.named_parameters()
    adam = AdamState(config.beta1, config.beta2, config.eps)
    log: list[dict] = []
    best_map, best_epoch, best_metrics, best_snap = -1.0, 0, {}, _snapshot(model)
    bad_epochs = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            sums = np.zeros(4)
            batches = batch(corpus.train, config.batch_size, config.max_turn_len, shuffle=True, rng=rng)
            for step, b in enumerate(batches, 1):
                try:
                    losses = train_step(model, b, corpus.quotes, config, rng)
                    clip_grad_norm(params, config.clip_norm)
                    adam_step(adam, params, config.lr)
                except DivergenceError as exc:
                    raise DivergenceError(f"epoch {epoch} step {step}: {exc}") from None
                sums += np.array([losses.rec, losses.map, losses.l2, losses.total]) * len(b)
            sums /= len(corpus.train)
            report, _ = evaluate_model(model, corpus.valid, corpus.quotes)
            record = {"epoch": epoch, "rec_loss": sums[0], "map_loss": sums[1], "total": sums[3],
                      "valid_MAP": report.map, "valid_P1": report.p1, "valid_P3": report.p3,
                      "valid_NDCG5": report.ndcg5}
            record = {k: (float(v) if k != "epoch" else v) for k, v in record.items()}
            log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if on_epoch:
                on_epoch(record)
            logger.info("epoch %d  total %.4f  valid MAP %.4f", epoch, record["total"], report.map)
            if report.map > best_map:
                best_map, best_epoch, bad_epochs = report.map, epoch, 0
                best_metrics = report.as_dict()
                best_snap = _snapshot(model)
            else:
                bad_epochs += 1
                if bad_epochs > config.patience:
                    break
    finally:
        if log_fh:
            log_fh.close()
    _restore(model, best_snap)
    return TrainResult(model, config, log, best_epoch, best_metrics, adam.step)


@dataclass
class GridCell:
    index: int
    config: TrainConfig
    valid_map: float | None
    error: str | None = None
    result: TrainResult | None = None


def grid_search(configs: Sequence[TrainConfig], corpus: Corpus) -> tuple[TrainConfig, list[GridCell]]:
    """Train every config; the best validation MAP wins, earlier configs win ties."""
    if not configs:
        raise ValueError("grid_search needs at least one config")
    cells = []
    for i, cfg in enumerate(configs):
        try:
            res = train(cfg, corpus)
            cells.append(GridCell(i, cfg, res.best_metrics.get("MAP", 0.0), None, res))
        except Exception as exc:  # one failing cell must not sink the sweep
            logger.warning("grid cell %d failed: %s", i, exc)
            cells.append(GridCell(i, cfg, None, f"{type(exc).__name__}: {exc}"))
    ok = [c for c in cells if c.valid_map is not None]
    if not ok:
        raise RuntimeError("every grid cell failed: " + "; ".join(c.error for c in cells))
    best = max(ok, key=lambda c: (c.valid_map, -c.index))
    return best.config, cells


def lambda_grid(base: TrainConfig, lams: Sequence[float] = (1e-4, 1e-3)) -> list[TrainConfig]:
    return [dataclasses.replace(base, lam=lam) for lam in lams]


def grid_table(cells: Sequence[GridCell]) -> str:
    lines = [f"{'#':>3}  {'lam':>8}  {'lr':>8}  {'valid MAP':>9}  status"]
    for c in cells:
        status = "ok" if c.error is None else c.error
        vm = "-" if c.valid_map is None else f"{c.valid_map:.4f}"
        lines.append(f"{c.index:>3}  {c.config.lam:>8.0e}  {c.config.lr:>8.0e}  {vm:>9}  {status}")
    return "\n".join(lines)
