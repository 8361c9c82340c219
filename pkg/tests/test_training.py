import dataclasses
import json

import numpy as np
import pytest

from quoterec import tensor as T
from quoterec.checkpoint import from_bytes, to_bytes
from quoterec.config import TrainConfig
from quoterec.data import Conversation, make_batch
from quoterec.tensor import Tensor
from quoterec.training import (AdamState, DivergenceError, adam_step, clip_grad_norm, evaluate_model, grid_search,
                               grid_table, lambda_grid, train, train_step)

from conftest import tiny_config, tiny_model


class TestAdam:
    def test_first_step_scalar(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.array([1.0])
        adam_step(AdamState(), {"p": p}, 0.1)
        # bias-corrected m/sqrt(v) is exactly 1, so the step is lr / (1 + eps)
        assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
        assert p.data[0] == pytest.approx(-0.0999999990, abs=1e-10)

    def test_zero_grad_no_move(self):
        p = Tensor(np.array([0.5, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        state = AdamState()
        adam_step(state, {"p": p}, 0.1)
        assert p.data.tolist() == [0.5, -2.0]
        assert state.step == 1

    def test_grads_zeroed(self):
        p = Tensor(np.ones(3), requires_grad=True)
        p.grad = np.ones(3)
        adam_step(AdamState(), {"p": p}, 0.1)
        assert not p.grad.any()

    def test_nan_names_parameter(self):
        p = Tensor(np.ones(2), requires_grad=True)
        p.grad = np.array([1.0, np.nan])
        state = AdamState()
        with pytest.raises(DivergenceError, match="'enc.W'"):
            adam_step(state, {"enc.W": p}, 0.1)
        assert p.data.tolist() == [1.0, 1.0] and state.step == 0

    def test_bias_correction_constant_grad(self):
        # with a constant gradient every corrected step has size lr / (1 + eps/|g|)
        p = Tensor(np.zeros(1), requires_grad=True)
        state = AdamState()
        for _ in range(5):
            p.grad = np.array([0.3])
            adam_step(state, {"p": p}, 0.01)
        assert p.data[0] == pytest.approx(-0.05, rel=1e-6)


class TestClip:
    def test_scales_to_max(self):
        a, b = Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        norm = clip_grad_norm({"a": a, "b": b}, 1.0)
        assert norm == pytest.approx(5.0)
        total = np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum())
        assert total == pytest.approx(1.0, rel=1e-9)
        np.testing.assert_allclose(a.grad, [0.6, 0.0], rtol=1e-9)

    def test_below_threshold_untouched(self):
        a = Tensor(np.zeros(2), requires_grad=True)
        a.grad = np.array([0.3, 0.4])
        clip_grad_norm({"a": a}, 5.0)
        assert a.grad.tolist() == [0.3, 0.4]


def _fast(**kw):
    return tiny_config(**kw)


class TestTrain:
    def test_reproducible(self, small_corpus):
        a = train(_fast(dropout=0.2), small_corpus)
        b = train(_fast(dropout=0.2), small_corpus)
        pa, pb = a.model.named_parameters(), b.model.named_parameters()
        assert all(pa[k].data.tobytes() == pb[k].data.tobytes() for k in pa)
        assert a.log == b.log

    def test_patience_zero_stops_after_one_bad_epoch(self, small_corpus):
        res = train(_fast(lr=0.0, patience=0, max_epochs=10), small_corpus)
        # epoch 1 sets the best, epoch 2 cannot improve with lr 0
        assert len(res.log) == 2 and res.best_epoch == 1

    def test_restores_best(self, small_corpus):
        res = train(_fast(max_epochs=6, patience=6, lr=3e-2), small_corpus)
        maps = [r["valid_MAP"] for r in res.log]
        assert res.best_metrics["MAP"] == max(maps)
        assert res.best_epoch == maps.index(max(maps)) + 1
        report, _ = evaluate_model(res.model, small_corpus.valid, small_corpus.quotes)
        assert report.map == res.best_metrics["MAP"]

    def test_log_file(self, small_corpus, tmp_path):
        path = tmp_path / "log.jsonl"
        seen = []
        res = train(_fast(max_epochs=2, patience=5), small_corpus, log_path=path, on_epoch=seen.append)
        lines = [json.loads(x) for x in path.read_text().splitlines()]
        assert lines == res.log == seen
        assert [r["epoch"] for r in lines] == [1, 2]
        assert set(lines[0]) == {"epoch", "rec_loss", "map_loss", "total", "valid_MAP", "valid_P1",
                                 "valid_P3", "valid_NDCG5"}

    def test_map_loss_logged_when_ablated(self, small_corpus):
        res = train(_fast(max_epochs=1).ablate("no-map-loss"), small_corpus)
        rec = res.log[0]
        assert rec["map_loss"] > 0
        assert rec["total"] < rec["rec_loss"] + 1e-3 * rec["map_loss"]

    def test_divergence_reports_epoch_and_step(self, small_corpus):
        T.BACKWARD_HOOKS["tanh"] = lambda gs: [None if g is None else g * np.nan for g in gs]
        try:
            with pytest.raises(DivergenceError, match="epoch 1 step 1"):
                train(_fast(), small_corpus)
        finally:
            T.BACKWARD_HOOKS.pop("tanh", None)

    def test_no_M_checkpoint_has_no_M(self, small_corpus):
        res = train(_fast(max_epochs=1).ablate("no-M"), small_corpus)
        blob = to_bytes(res.model, small_corpus.vocab, small_corpus.quotes, res.best_metrics)
        model = from_bytes(blob).model
        assert "M" not in model.named_parameters()
        assert not model.use_M

    def test_empty_valid(self, small_corpus):
        with pytest.raises(ValueError):
            train(_fast(), dataclasses.replace(small_corpus, valid=[]))


def test_first_steps_non_increasing():
    """Small lr: the total loss on a fixed batch should not go up early on."""
    convs = [Conversation(f"c{i}", [[3 + i, 4 + i], [8 + i, 9, 10 + i]], i % 3) for i in range(4)]
    quotes = [[11, 12], [13], [14, 15, 16]]
    b = make_batch(convs)
    good = 0
    for seed in range(20):
        model = tiny_model(seed=seed, lr=1e-4)
        state, params = AdamState(), model.named_parameters()
        totals = []
        for _ in range(10):
            totals.append(train_step(model, b, quotes, model.config, np.random.default_rng(0)).total)
            adam_step(state, params, model.config.lr)
        good += all(y <= x for x, y in zip(totals, totals[1:]))
    assert good >= 19


class TestGrid:
    def test_single_config(self, small_corpus):
        cfg = _fast(max_epochs=1)
        best, cells = grid_search([cfg], small_corpus)
        assert best is cfg and len(cells) == 1

    def test_learnable_beats_frozen(self, small_corpus):
        frozen, learn = _fast(lr=0.0, max_epochs=4), _fast(lr=3e-2, max_epochs=4, patience=4)
        best, cells = grid_search([frozen, learn], small_corpus)
        assert best is learn
        assert cells[1].valid_map > cells[0].valid_map

    def test_failing_cell_recorded(self, small_corpus, tmp_path):
        broken = _fast(max_epochs=1, embeddings=str(tmp_path / "missing.txt"))
        ok = _fast(max_epochs=1)
        best, cells = grid_search([broken, ok], small_corpus)
        assert best is ok
        assert cells[0].valid_map is None and cells[0].error
        table = grid_table(cells).splitlines()
        assert len(table) == 3
        assert "ok" in table[2]

    def test_lambda_grid(self):
        cfgs = lambda_grid(TrainConfig(), (1e-4, 1e-3))
        assert [c.lam for c in cfgs] == [1e-4, 1e-3]

    def test_all_fail(self, small_corpus, tmp_path):
        broken = _fast(max_epochs=1, embeddings=str(tmp_path / "missing.txt"))
        with pytest.raises(RuntimeError):
            grid_search([broken], small_corpus)


@pytest.mark.slow
def test_pure_noise_is_near_random(tmp_path):
    from quoterec.data import load_corpus
    from quoterec.synth import synth_corpus
    corpus = load_corpus(synth_corpus(tmp_path / "noise", seed=5, n_q=10, n_convs=500, vocab_size=200, noise=1.0))
    cfg = tiny_config(dim=16, hidden=16, n_heads=2, ffn_dim=32, batch_size=32, max_epochs=8, patience=2, lr=1e-3)
    res = train(cfg, corpus)
    report, _ = evaluate_model(res.model, corpus.test, corpus.quotes)
    assert abs(report.map - 0.293) <= 0.1
