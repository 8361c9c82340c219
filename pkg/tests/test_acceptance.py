"""Acceptance criteria, one test each.  Every test prints a PASS/FAIL line
(also collected in the terminal summary) and then asserts it.

Criteria 3, 4 and 6 train full-size models and take several minutes.
"""

import math
import time

import numpy as np
import pytest

from quoterec.checkpoint import from_bytes, to_bytes
from quoterec.config import TrainConfig
from quoterec.data import load_corpus, make_batch
from quoterec.evaluation import compute_metrics, paired_ttest
from quoterec.gradcheck import TOLERANCE, run_gradcheck
from quoterec.interpretation import history_sets, interpret_corpus, query_attention
from quoterec.synth import load_topics, synth_corpus
from quoterec.training import build_model, evaluate_model, mean_map_distance, train

from conftest import random_conversations
from test_evaluation import brute_force_metrics

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture
def verdict(record_property):
    def report(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(line)
        record_property("acceptance", line)
        assert ok, line
    return report


@pytest.fixture(scope="module")
def corpus_01(tmp_path_factory):
    root = synth_corpus(tmp_path_factory.mktemp("noise01"), seed=0, n_q=10, n_convs=500, noise=0.1)
    return root, load_corpus(root)


@pytest.fixture(scope="module")
def trained_01(corpus_01):
    _, corpus = corpus_01
    start = time.perf_counter()
    res = train(TrainConfig(max_epochs=30, seed=0), corpus)
    return res, time.perf_counter() - start


def test_1_gradcheck(verdict):
    start = time.perf_counter()
    results = run_gradcheck(0)
    seconds = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    names = {r.name for r in results}
    layers = {"embedding", "attention", "ffn", "layer_norm", "gru", "bigru", "mapping", "output_layer", "rec_loss",
              "map_loss"}
    ok = all(r.passed for r in results) and layers <= names and seconds < 60
    verdict(1, ok, f"{len(results)} suites, worst {worst.name} rel err {worst.max_rel_error:.2e} "
                   f"(tol {TOLERANCE:g}), {seconds:.1f}s")


def test_2_metric_oracle(verdict):
    rng = np.random.default_rng(1)
    mismatches = 0
    for _ in range(1000):
        ranks = rng.integers(1, 16, size=rng.integers(1, 60)).tolist()
        rep = compute_metrics(ranks)
        mismatches += (rep.map, rep.p1, rep.p3, rep.ndcg5) != brute_force_metrics(ranks)
    single = compute_metrics([2])
    analytic = abs(single.map - 0.5) <= 1e-9 and abs(single.ndcg5 - 1 / math.log2(3)) <= 1e-9 \
        and abs(single.ndcg5 - 0.6309) <= 1e-4
    verdict(2, mismatches == 0 and analytic,
            f"{mismatches} mismatches over 1000 lists; rank 2 gives MAP {single.map}, nDCG@5 {single.ndcg5:.6f}")


def test_3_learnability(verdict, corpus_01, trained_01):
    _, corpus = corpus_01
    res, seconds = trained_01
    report, _ = evaluate_model(res.model, corpus.test, corpus.quotes)
    baseline = build_model(TrainConfig(seed=0), corpus, np.random.default_rng(0))
    base_report, _ = evaluate_model(baseline, corpus.test, corpus.quotes)
    # expected reciprocal rank of a uniform ranking over 10, by simulation
    sim_rng = np.random.default_rng(0)
    sim = float(np.mean(1.0 / sim_rng.integers(1, 11, size=200_000)))
    exact = sum(1 / r for r in range(1, 11)) / 10
    ok = (report.map >= 0.90 and len(res.log) <= 30 and seconds < 600
          and abs(base_report.map - 0.293) <= 0.05 and abs(sim - 0.293) <= 0.005)
    verdict(3, ok, f"test MAP {report.map:.4f} after {len(res.log)} epochs in {seconds:.0f}s; "
                   f"random-init MAP {base_report.map:.4f}; uniform MRR simulated {sim:.4f} (exact {exact:.4f})")


@pytest.fixture(scope="module")
def ablation_runs(tmp_path_factory):
    root = synth_corpus(tmp_path_factory.mktemp("noise03"), seed=0, n_q=10, n_convs=500, noise=0.3)
    corpus = load_corpus(root)
    variants = {"full": None, "no-map-loss": "no-map-loss", "no-M": "no-M"}
    out = {name: [] for name in variants}
    for seed in SEEDS:
        base = TrainConfig(max_epochs=30, seed=seed)
        for name, ablation in variants.items():
            cfg = base.ablate(ablation) if ablation else base
            res = train(cfg, corpus)
            report, _ = evaluate_model(res.model, corpus.test, corpus.quotes)
            dist = mean_map_distance(res.model, corpus.test, corpus.quotes)
            out[name].append((report.map, dist))
    return out


def test_4_ablation_order(verdict, ablation_runs):
    mean_map = {k: float(np.mean([m for m, _ in v])) for k, v in ablation_runs.items()}
    dist_full = float(np.mean([d for _, d in ablation_runs["full"]]))
    dist_zero = float(np.mean([d for _, d in ablation_runs["no-map-loss"]]))
    ok = mean_map["full"] >= mean_map["no-map-loss"] >= mean_map["no-M"] and dist_full < dist_zero
    per_seed = "; ".join(f"{k} " + ",".join(f"{m:.3f}" for m, _ in v) for k, v in ablation_runs.items())
    verdict(4, ok, f"mean test MAP full {mean_map['full']:.4f} >= no-map-loss {mean_map['no-map-loss']:.4f} "
                   f">= no-M {mean_map['no-M']:.4f}; mean distance lam=1e-3 {dist_full:.2f} < lam=0 "
                   f"{dist_zero:.2f} [{per_seed}]")


def test_5_batching(verdict, corpus_01):
    _, corpus = corpus_01
    model = build_model(TrainConfig(seed=0), corpus, np.random.default_rng(0))
    convs = random_conversations(np.random.default_rng(5), 50, vocab_size=len(corpus.vocab), max_turns=5,
                                 max_len=12, n_quotes=10)
    Q = model.quotation_matrix(corpus.quotes)
    together = model.forward(make_batch(convs), Q).logits.data
    worst = max(float(np.abs(model.forward(make_batch([c]), Q).logits.data[0] - together[i]).max())
                for i, c in enumerate(convs))
    verdict(5, worst <= 1e-9, f"max |batched - single| logit difference {worst:.2e} over 50 conversations")


def test_6_interpretation(verdict, corpus_01, trained_01):
    root, corpus = corpus_01
    res, _ = trained_01
    topics = load_topics(root)
    results = interpret_corpus(res.model, corpus, top_k=8)
    hits = [sum(w in set(topics[r.quote_id]) for w, _ in r.words) for r in results]
    Q = res.model.quotation_matrix(corpus.quotes).data
    worst_sum = max(abs(float(query_attention(res.model, Q[k], h).sum()) - 1.0)
                    for k, h in history_sets(corpus.train).items())
    avg = float(np.mean(hits))
    ok = len(results) == len(corpus.quotes) and avg >= 6 and worst_sum <= 1e-9
    verdict(6, ok, f"average {avg:.2f} of top-8 words are topic words (per quotation {hits}); "
                   f"attention sums off by at most {worst_sum:.1e}")


def test_7_determinism(verdict, corpus_01, trained_01):
    _, corpus = corpus_01
    cfg = TrainConfig(max_epochs=1, seed=11)
    blobs = []
    for _ in range(2):
        res = train(cfg, corpus)
        blobs.append(to_bytes(res.model, corpus.vocab, corpus.quotes, res.best_metrics))
    model = trained_01[0].model
    loaded = from_bytes(to_bytes(model, corpus.vocab, corpus.quotes)).model
    b = make_batch(corpus.test)
    before = model.forward(b, model.quotation_matrix(corpus.quotes)).logits.data
    after = loaded.forward(b, loaded.quotation_matrix(corpus.quotes)).logits.data
    ok = blobs[0] == blobs[1] and before.tobytes() == after.tobytes()
    verdict(7, ok, f"same-seed checkpoints identical: {blobs[0] == blobs[1]} ({len(blobs[0])} bytes); "
                   f"round-trip logits identical: {before.tobytes() == after.tobytes()}")


def test_8_significance(verdict):
    rng = np.random.default_rng(8)
    baseline = rng.uniform(0.2, 0.4, size=100)
    better = baseline + 0.1 + rng.normal(scale=0.02, size=100)
    res = paired_ttest(better, baseline)
    verdict(8, res.p_value < 0.01, f"paired t = {res.statistic:.2f}, p = {res.p_value:.2e}")

