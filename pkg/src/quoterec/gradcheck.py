"""Finite-difference verification of every layer's backward rule.

Layer suites build a small random instance of one layer, reduces its output
to a scalar with a fixed random projection, and compares tape gradients
against central differences for every input and parameter.  The error of
one tensor is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``,
with the denominator floored at ``1e-3`` times the largest gradient in the
suite so that tensors whose exact gradient is zero (e.g. the key bias of
an attention layer) are not judged on rounding noise alone.  A suite
passes when the worst tensor is below the tolerance.  One extra suite per
tape primitive (named ``op:<primitive>``) makes a broken backward rule
show up under the name of the op itself.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from . import losses
from . import tensor as T
from .config import TrainConfig
from .data import Conversation, make_batch
from .model import QuoteRecModel
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    worst_tensor: str
    n_checked: int
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(name: str, loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor],
                    step: float = STEP, tolerance: float = TOLERANCE, max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> CheckResult:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``tensors`` must have ``requires_grad`` set.  With ``max_entries`` only
    that many randomly chosen entries per tensor are perturbed.
    """
    start = time.perf_counter()
    for t in tensors.values():
        t.grad = None
    with T.GradTape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    floor = 1e-3 * max(np.abs(t.grad).max(initial=0.0) for t in tensors.values())
    worst, worst_name, count = 0.0, "", 0
    for tname, t in tensors.items():
        analytic = t.grad.reshape(-1)
        flat = t.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        numeric = np.zeros(len(entries))
        for j, i in enumerate(entries):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * step)
        err = relative_error(analytic[entries], numeric, floor)
        count += len(entries)
        if err >= worst:
            worst, worst_name = err, tname
    return CheckResult(name, worst, worst_name, count, time.perf_counter() - start, tolerance)


def _leaf(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _proj(rng, out: Tensor) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.normal(size=out.shape))
    return lambda y: T.sum(y * w)


def _with_params(module: L.Module, **inputs: Tensor) -> dict[str, Tensor]:
    out = dict(inputs)
    out.update(module.named_parameters())
    return out


def _suite_primitives(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5)
    v = _leaf(rng, 3, 5)
    R = Tensor(rng.normal(size=(3, 5)))

    def f():
        y = T.matmul(a, b)
        y = T.tanh(y) * T.sigmoid(v) + T.relu(v) - y * 0.5
        y = T.concat([y[:, :2], T.softmax(y[:, 2:], axis=-1)], axis=-1)
        return T.sum(y * R) + T.sqdist(y, v) * 0.1 + T.mean(T.log_softmax(v, axis=0))

    return f, {"a": a, "b": b, "v": v}


def _suite_embedding(rng):
    table = L.Embedding(9, 5, rng)
    ids = np.array([[1, 4, 4, 0], [2, 8, 3, 4]])
    probe = _proj(rng, table(ids))
    return lambda: probe(table(ids)), table.named_parameters()


def _suite_attention(rng):
    att = L.MultiHeadSelfAttention(7, 3, 0.0, rng)
    x = _leaf(rng, 2, 5, 7)
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=bool)
    probe = _proj(rng, att(x, mask)[0])
    return lambda: probe(att(x, mask)[0] * Tensor(mask[..., None].repeat(7, -1).astype(float))), _with_params(att, x=x)


def _suite_ffn(rng):
    ffn = L.FeedForward(5, 8, rng)
    x = _leaf(rng, 3, 5)
    probe = _proj(rng, ffn(x))
    return lambda: probe(ffn(x)), _with_params(ffn, x=x)


def _suite_layer_norm(rng):
    ln = L.LayerNorm(6)
    ln.gamma.data[:] = rng.normal(size=6)
    ln.beta.data[:] = rng.normal(size=6)
    x = _leaf(rng, 2, 3, 6)
    probe = _proj(rng, ln(x))
    return lambda: probe(ln(x)), _with_params(ln, x=x)


def _suite_transformer(rng):
    enc = L.TransformerEncoder(2, 6, 2, 10, 0.0, rng)
    x = _leaf(rng, 2, 4, 6)
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    w = Tensor(rng.normal(size=(2, 6)))
    return lambda: T.sum(enc(x, mask)[0][:, 0] * w), _with_params(enc, x=x)


def _suite_gru(rng):
    cell = L.GRUCell(4, 3, rng)
    cell.b.data[:] = rng.normal(size=9)
    h, x = _leaf(rng, 2, 3), _leaf(rng, 2, 4)
    probe = _proj(rng, L.gru_step(cell, h, x))
    return lambda: probe(L.gru_step(cell, h, x)), _with_params(cell, h=h, x=x)


def _suite_bigru(rng):
    gru = L.BiGRU(4, 3, rng)
    seq = _leaf(rng, 3, 5, 4)
    lengths = np.array([5, 2, 3])
    w = Tensor(rng.normal(size=(3, 6)))
    return lambda: T.sum(gru(seq, lengths)[1] * w), _with_params(gru, seq=seq)


def _suite_mapping(rng):
    M, r = _leaf(rng, 5, 5), _leaf(rng, 3, 5)
    probe = Tensor(rng.normal(size=(3, 5)))
    return lambda: T.sum(T.matmul(r, T.transpose(M)) * probe), {"M": M, "r": r}


def _tiny_model(rng) -> QuoteRecModel:
    cfg = TrainConfig(dim=6, hidden=4, n_layers=1, n_heads=2, ffn_dim=8, dropout=0.0, l2=0.0)
    return QuoteRecModel(12, 3, cfg, rng)


def _suite_output(rng):
    model = _tiny_model(rng)
    h_c, r, Q = _leaf(rng, 2, 8), _leaf(rng, 2, 6), _leaf(rng, 3, 6)
    probe = Tensor(rng.normal(size=(2, 3)))
    tensors = {"h_c": h_c, "r": r, "Q": Q, "M": model.M, "W": model.W, "b": model.b}
    return lambda: T.sum(model.score(h_c, r, Q)[1] * probe), tensors


def _suite_rec_loss(rng):
    logits = _leaf(rng, 4, 5)
    gold = np.array([0, 3, 4, 1])
    return lambda: losses.recommendation_loss(logits, gold), {"logits": logits}


def _suite_map_loss(rng):
    M, r, Q = _leaf(rng, 5, 5), _leaf(rng, 3, 5), _leaf(rng, 4, 5)
    gold = np.array([1, 3, 1])
    return lambda: losses.mapping_loss(M, r, Q, gold), {"M": M, "r": r, "Q": Q}


def _suite_full_model(rng):
    model = _tiny_model(rng)
    convs = [Conversation("a", [[3, 4, 5], [6, 7]], 0), Conversation("b", [[8, 9, 10, 11]], 2)]
    quotes = [[3, 11], [5], [9, 4, 6]]
    b = make_batch(convs)

    def f():
        Q = model.encode_quotations(quotes)
        out = model.forward(b, Q)
        total = losses.combined_loss(losses.recommendation_loss(out.logits, b.gold),
                                     losses.mapping_distance(out.mapped, Q, b.gold), 1e-2,
                                     losses.l2_penalty(model.named_parameters()), 1e-3)
        return total.tensor

    return f, model.named_parameters()


def _op(build):
    """Suite for one primitive: ``build(rng)`` gives leaf tensors and a function of them."""

    def suite(rng):
        leaves, f = build(rng)
        y = f(*leaves.values())
        w = Tensor(rng.normal(size=y.shape))
        return lambda: T.sum(f(*leaves.values()) * w), leaves

    return suite


OP_SUITES: dict[str, Callable] = {
    "add": _op(lambda r: ({"a": _leaf(r, 3, 4), "b": _leaf(r, 3, 4)}, T.add)),
    "sub": _op(lambda r: ({"a": _leaf(r, 3, 4), "b": _leaf(r, 3, 4)}, T.sub)),
    "mul": _op(lambda r: ({"a": _leaf(r, 3, 4), "b": _leaf(r, 3, 4)}, T.mul)),
    "add_bias": _op(lambda r: ({"x": _leaf(r, 2, 3, 4), "b": _leaf(r, 4)}, T.add_bias)),
    "where_rows": _op(lambda r: ({"a": _leaf(r, 4, 3), "b": _leaf(r, 4, 3)},
                                 lambda a, b: T.where_rows(np.array([1, 0, 1, 0], bool), a, b))),
    "tanh": _op(lambda r: ({"x": _leaf(r, 3, 4)}, T.tanh)),
    "sigmoid": _op(lambda r: ({"x": _leaf(r, 3, 4)}, T.sigmoid)),
    # keep relu inputs away from the kink
    "relu": _op(lambda r: ({"x": Tensor(np.sign(r.normal(size=(3, 4))) * r.uniform(0.1, 2, (3, 4)),
                                        requires_grad=True)}, T.relu)),
    "matmul": _op(lambda r: ({"a": _leaf(r, 2, 3, 4), "b": _leaf(r, 4, 5)}, T.matmul)),
    "transpose": _op(lambda r: ({"x": _leaf(r, 2, 3, 4)}, lambda x: T.transpose(x, (2, 0, 1)))),
    "reshape": _op(lambda r: ({"x": _leaf(r, 2, 6)}, lambda x: T.reshape(x, (3, 4)))),
    "slice": _op(lambda r: ({"x": _leaf(r, 4, 5)}, lambda x: x[1:3, ::2])),
    "take": _op(lambda r: ({"x": _leaf(r, 5, 3)}, lambda x: T.take(x, np.array([[0, 4], [4, 2]])))),
    "pick": _op(lambda r: ({"x": _leaf(r, 3, 5)}, lambda x: T.pick(x, np.array([4, 0, 2])))),
    "concat": _op(lambda r: ({"a": _leaf(r, 2, 3), "b": _leaf(r, 2, 2)}, lambda a, b: T.concat([a, b], -1))),
    "stack": _op(lambda r: ({"a": _leaf(r, 2, 3), "b": _leaf(r, 2, 3)}, lambda a, b: T.stack([a, b], 1))),
    "sum": _op(lambda r: ({"x": _leaf(r, 3, 4)}, lambda x: T.sum(x, axis=0))),
    "sqdist": _op(lambda r: ({"a": _leaf(r, 3, 4), "b": _leaf(r, 3, 4)}, T.sqdist)),
    "softmax": _op(lambda r: ({"x": _leaf(r, 3, 4)}, lambda x: T.softmax(x, axis=-1))),
    "log_softmax": _op(lambda r: ({"x": _leaf(r, 3, 4)}, lambda x: T.log_softmax(x, axis=0))),
    "layer_norm": _op(lambda r: ({"x": _leaf(r, 3, 5), "g": _leaf(r, 5), "b": _leaf(r, 5)}, T.layer_norm)),
}


SUITES: dict[str, Callable] = {
    "primitives": _suite_primitives,
    "embedding": _suite_embedding,
    "attention": _suite_attention,
    "ffn": _suite_ffn,
    "layer_norm": _suite_layer_norm,
    "transformer": _suite_transformer,
    "gru": _suite_gru,
    "bigru": _suite_bigru,
    "mapping": _suite_mapping,
    "output_layer": _suite_output,
    "rec_loss": _suite_rec_loss,
    "map_loss": _suite_map_loss,
    "full_model": _suite_full_model,
}
SUITES.update({f"op:{name}": suite for name, suite in OP_SUITES.items()})


def run_gradcheck(seed: int = 0, tolerance: float = TOLERANCE, suites=None) -> list[CheckResult]:
    """Run the named suites (default all).  Suites ``op:<name>`` isolate one primitive."""
    results = []
    for i, name in enumerate(suites or SUITES):
        rng = np.random.default_rng([seed, i])
        loss_fn, tensors = SUITES[name](rng)
        max_entries = 12 if name == "full_model" else None
        results.append(check_gradients(name, loss_fn, tensors, STEP, tolerance, max_entries, rng))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = [f"{'suite':<14}{'max rel err':>13}{'entries':>9}{'sec':>7}  result  worst tensor"]
    for r in results:
        lines.append(f"{r.name:<14}{r.max_rel_error:>13.2e}{r.n_checked:>9d}{r.seconds:>7.2f}  "
                     f"{'pass' if r.passed else 'FAIL':<6}  {r.worst_tensor}")
    return "\n".join(lines)
