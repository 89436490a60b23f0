import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mosekit.evalkit import harness
from mosekit.evalkit.flops import flops_per_exit
from mosekit.evalkit.harness import ExitReport, Query, binary_metrics, rank_queries, retrieval_eval
from mosekit.evalkit.index import build_index, search
from mosekit.evalkit.metrics import RankedList, average_precision, map_multi, mrr, ndcg_binary, recall_at_k
from mosekit.evalkit.permtest import permutation_test
from mosekit.evalkit.report import CSV_COLUMNS, read_report_csv, self_distillation_deltas, tradeoff_report
from mosekit.model import EncoderConfig
from mosekit.training import embed_texts

from conftest import small_config


# --- metrics --------------------------------------------------------------------

def _oracle(cands, rel):
    """Textbook definitions, written out longhand."""
    first = min(cands.index(r) for r in rel) + 1
    dcg = sum(1 / math.log2(cands.index(r) + 2) for r in rel)
    idcg = sum(1 / math.log2(i + 2) for i in range(len(rel)))
    precisions = []
    for k in range(1, len(cands) + 1):
        if cands[k - 1] in rel:
            precisions.append(len(set(cands[:k]) & rel) / k)
    return {"mrr": 1 / first, "ndcg": dcg / idcg, "map": sum(precisions) / len(rel),
            "r1": len(set(cands[:1]) & rel) / len(rel), "r5": len(set(cands[:5]) & rel) / len(rel)}


def test_metric_hand_values():
    first = [RankedList("q", ["t", "a", "b"], {"t"})]
    assert mrr(first) == ndcg_binary(first) == map_multi(first) == recall_at_k(first, 1) == 1.0
    second = [RankedList("q", ["a", "t"], {"t"})]
    assert mrr(second) == 0.5 and average_precision(second[0]) == 0.5 and recall_at_k(second, 1) == 0.0
    third = [RankedList("q", ["a", "b", "t"], {"t"})]
    assert ndcg_binary(third) == 0.5
    assert recall_at_k(third, 3) == 1.0


def test_metrics_match_oracle_on_random_lists():
    rng = np.random.default_rng(0)
    lists, refs = [], []
    for q in range(100):
        n = int(rng.integers(1, 40))
        cands = [f"c{i}" for i in rng.permutation(n)]
        rel = set(rng.choice(cands, size=int(rng.integers(1, min(5, n) + 1)), replace=False).tolist())
        lists.append(RankedList(q, cands, rel))
        refs.append(_oracle(cands, rel))
    for name, fn in [("mrr", mrr), ("ndcg", ndcg_binary), ("map", map_multi),
                     ("r1", lambda l: recall_at_k(l, 1)), ("r5", lambda l: recall_at_k(l, 5))]:
        assert abs(fn(lists) - np.mean([r[name] for r in refs])) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.data())
def test_single_relevant_mrr_equals_ap(n, data):
    rank = data.draw(st.integers(0, n - 1))
    cands = [f"x{i}" for i in range(n)]
    lst = [RankedList(0, cands, {cands[rank]})]
    assert mrr(lst) == map_multi(lst)
    for v in (mrr(lst), ndcg_binary(lst), map_multi(lst), recall_at_k(lst, 1)):
        assert 0.0 <= v <= 1.0


def test_ranked_list_invariants():
    with pytest.raises(ValueError):
        RankedList(0, ["a", "a"], {"a"})
    with pytest.raises(ValueError):
        RankedList(0, ["a"], {"b"})
    with pytest.raises(ValueError):
        mrr([RankedList(0, ["a"], set())])


# --- index ----------------------------------------------------------------------

def _unit_rows(n, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_search_matches_linear_scan():
    m = _unit_rows(1000, 16, 0)
    idx = build_index({f"v{i:04d}": m[i] for i in range(1000)})
    for q in _unit_rows(20, 16, 1):
        ref = sorted(range(1000), key=lambda i: (-float(m[i] @ q), i))[:10]
        assert search(idx, q, 10) == [f"v{i:04d}" for i in ref]


def test_search_self_first_ties_and_overflow():
    e = np.eye(4)
    idx = build_index({"d": e[0], "b": e[0], "c": e[1], "a": e[2]})
    assert search(idx, e[0], 2) == ["b", "d"]
    assert search(idx, e[1], 99) == ["c", "a", "b", "d"]
    assert search(build_index({}), e[0], 3) == []


def test_index_requires_unit_vectors():
    with pytest.raises(ValueError):
        build_index({"a": np.array([2.0, 0.0])})


# --- FLOPs ----------------------------------------------------------------------

def _hand_layer(h, heads, kv, hd, inter, s):
    return (2 * s * h * heads * hd + 2 * 2 * s * h * kv * hd + 2 * heads * s * s * hd * 2
            + 2 * s * heads * hd * h + 2 * 2 * s * h * inter)


def test_flops_hand_formula_desk():
    cfg = EncoderConfig(vocab_size=100)
    f = flops_per_exit(cfg, 128)
    layer = _hand_layer(64, 4, 2, 16, 256, 128)
    head = 2 * 64 * 32
    for e in cfg.exits:
        assert f[e] * 1e9 == pytest.approx(e * layer + head, rel=1e-12)
    assert f[1] / f[8] == pytest.approx(1 / 8, abs=0.01)


def test_flops_full_scale_ratio_and_monotone():
    f = flops_per_exit(EncoderConfig.full_scale(), 2048)
    assert 0.09 <= f[4] / f[36] <= 0.13
    vals = [f[e] for e in (4, 9, 18, 27, 36)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    # linear in layer count
    assert f[18] - f[9] == pytest.approx((f[9] - f[4]) * 9 / 5, rel=1e-9)


def test_flops_equal_layer_counts_equal():
    a = flops_per_exit(EncoderConfig(vocab_size=50, depth=4, exits=(2, 4)), 64)
    b = flops_per_exit(EncoderConfig(vocab_size=50, depth=6, exits=(2, 6)), 64)
    assert a[2] == b[2]


# --- permutation test --------------------------------------------------------------

def test_permtest_identical_lists():
    x = np.random.default_rng(0).normal(size=40)
    p, reject = permutation_test(x, x.copy(), 2000, seed=1)
    assert p > 0.9 and not reject


def test_permtest_separated_constants_minimum_p():
    p, reject = permutation_test([1.0] * 20, [0.0] * 20, 999, seed=0)
    # C(40,20) relabellings, only two reach the observed gap; 999 draws almost surely miss both
    assert p == 1 / 1000 and reject


def test_permtest_exact_enumeration_small():
    a, b = [0.1, 0.9, 0.4], [0.35, 0.2]
    pooled = a + b
    obs = abs(np.mean(a) - np.mean(b))
    stats = []
    for idx in itertools.combinations(range(5), 3):
        g1 = [pooled[i] for i in idx]
        g2 = [pooled[i] for i in range(5) if i not in idx]
        stats.append(abs(np.mean(g1) - np.mean(g2)))
    exact = np.mean([s >= obs - 1e-12 for s in stats])
    p, _ = permutation_test(a, b, 20_000, seed=3)
    assert abs(p - exact) < 0.01


def test_permtest_swap_invariant_and_seeded():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=25), rng.normal(0.3, 1, size=31)
    assert permutation_test(a, b, 3000, seed=2) == permutation_test(b, a, 3000, seed=2)
    assert permutation_test(a, b, 3000, seed=2) == permutation_test(a, b, 3000, seed=2)
    with pytest.raises(ValueError):
        permutation_test([], [1.0])


# --- harness --------------------------------------------------------------------

def test_rank_queries_orthogonal_pool_is_perfect():
    e = np.eye(8)
    pool = {f"p{i}": e[i] for i in range(8)}
    qs = [Query(f"q{i}", "", f"p{i}") for i in range(8)]
    lists = rank_queries({q.id: e[i] for i, q in enumerate(qs)}, pool, qs, 7, seed=0)
    assert all(v == 1.0 for v in harness.ranking_metrics(lists).values())
    with pytest.raises(ValueError):
        rank_queries({q.id: e[i] for i, q in enumerate(qs)}, pool, qs, 8, seed=0)


def test_retrieval_eval_equals_composed_oracle(small_ckpt, triplets):
    queries, pool = harness.triplet_queries(triplets, "t2c")
    reports = retrieval_eval(small_ckpt, queries, pool, n_distractors=10, seed=4, max_len=64)
    exits = list(small_ckpt.config.exits)
    q_emb = embed_texts(small_ckpt, [q.text for q in queries], exits, 64)
    ids = sorted(pool)
    p_emb = embed_texts(small_ckpt, [pool[i] for i in ids], exits, 64)
    for r in reports:
        rng = np.random.default_rng(4)
        rr = []
        for qi, q in enumerate(queries):
            others = [i for i in ids if i != q.target]
            picks = sorted(rng.choice(len(others), size=10, replace=False))
            cand = [q.target] + [others[i] for i in picks]
            qv = q_emb[r.exit][qi].numpy()
            score = {c: float(p_emb[r.exit][ids.index(c)].numpy() @ qv) for c in cand}
            order = sorted(cand, key=lambda c: (-score[c], c))
            rr.append(1 / (order.index(q.target) + 1))
        assert abs(r.metrics["mrr"] - np.mean(rr)) < 1e-9
        assert all(0.0 <= v <= 1.0 for v in r.metrics.values())
    gf = [r.gflops for r in reports]
    assert all(b > a for a, b in zip(gf, gf[1:]))


def test_retrieval_eval_pool_too_small(small_ckpt, triplets):
    queries, pool = harness.triplet_queries(triplets, "c2c")
    with pytest.raises(ValueError):
        retrieval_eval(small_ckpt, queries, pool, n_distractors=len(pool))


def test_binary_metrics_hand_values():
    assert binary_metrics([1, 1, 1, 1], [1, 1, 0, 0])["precision"] == 0.5
    m = binary_metrics([1, 1, 1, 1], [1, 1, 0, 0])
    assert m["recall"] == 1.0 and m["f1"] == pytest.approx(2 / 3)
    assert binary_metrics([1, 0, 1, 0], [1, 0, 1, 0])["f1"] == 1.0


def test_binary_metrics_confusion_oracle():
    rng = np.random.default_rng(0)
    pred, truth = rng.integers(0, 2, 500), rng.integers(0, 2, 500)
    tp = sum(p and t for p, t in zip(pred, truth))
    fp = sum(p and not t for p, t in zip(pred, truth))
    fn = sum(t and not p for p, t in zip(pred, truth))
    m = binary_metrics(pred, truth)
    assert m["precision"] == tp / (tp + fp) and m["recall"] == tp / (tp + fn)
    assert abs(m["f1"] - 2 * tp / (2 * tp + fp + fn)) < 1e-12


# --- report ---------------------------------------------------------------------

def _reports():
    f = flops_per_exit(EncoderConfig(vocab_size=50), 128)
    return [ExitReport(e, "t2c", {"mrr": 0.1 * e / 8 + 0.5, "recall_at_1": 0.05 * e}, f[e]) for e in (8, 1, 4, 2, 6)]


def test_report_rows_sorted_monotone(tmp_path):
    out = tradeoff_report(_reports(), tmp_path / "r")
    rows = read_report_csv(out["csv"])
    assert list(rows[0]) == CSV_COLUMNS
    assert CSV_COLUMNS[:8] == ["exit", "task", "gflops", "mrr", "ndcg", "map", "recall_at_1", "recall_at_5"]
    assert [int(r["exit"]) for r in rows] == [1, 2, 4, 6, 8]
    g = [float(r["gflops"]) for r in rows]
    assert all(b > a for a, b in zip(g, g[1:]))
    assert rows[0]["ndcg"] == ""
    pts = json.loads(out["plot_data"].read_text())
    assert {"exit", "gflops", "metric", "value"} <= set(pts[0])
    assert out["figure"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_report_empty_is_header_only(tmp_path):
    out = tradeoff_report([], tmp_path / "e", figure=False)
    assert out["csv"].read_text().strip() == ",".join(CSV_COLUMNS)


def test_report_figure_deterministic(tmp_path):
    a = tradeoff_report(_reports(), tmp_path / "a")["figure"].read_bytes()
    b = tradeoff_report(_reports(), tmp_path / "b")["figure"].read_bytes()
    assert a == b


def test_self_distillation_deltas():
    multi = [ExitReport(4, "t2c", {"recall_at_1": 0.8}, 1.0), ExitReport(8, "t2c", {"recall_at_1": 0.9}, 2.0)]
    single = [ExitReport(4, "t2c", {"recall_at_1": 0.7}, 1.0)]
    d = self_distillation_deltas(multi, single)
    assert len(d) == 1 and d[0].exit == 4 and d[0].metrics["recall_at_1"] == pytest.approx(0.1)
