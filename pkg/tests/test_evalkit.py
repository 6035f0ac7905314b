import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgcdr.dataset import InteractionSet, SplitPair, eval_negatives, leave_one_out_split
from fedgcdr.evalkit import EvalError, MetricsReport, evaluate, hr_at_k, ndcg_at_k, rank_candidates


def test_rank_examples():
    cand = np.array([5, 1, 9, 3])
    assert rank_candidates(np.array([9.0, 1, 2, 3]), cand, 5) == 1
    # all tied: order falls back to item index, so item 5 sits behind 1 and 3
    assert rank_candidates(np.zeros(4), cand, 5) == 3
    with pytest.raises(EvalError, match="missing"):
        rank_candidates(np.zeros(4), cand, 7)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=2, max_size=30), st.data())
def test_rank_matches_sort_oracle(values, data):
    n = len(values)
    cand = np.array(data.draw(st.permutations(range(100, 100 + n))))
    scores = np.array(values, dtype=float)
    pos = int(cand[data.draw(st.integers(0, n - 1))])
    order = sorted(range(n), key=lambda j: (-scores[j], cand[j]))
    assert rank_candidates(scores, cand, pos) == [int(cand[j]) for j in order].index(pos) + 1


def test_hr_examples(rng):
    assert hr_at_k([1, 1, 1], 5) == 1.0
    assert hr_at_k([4, 6], 5) == 0.5
    ranks = rng.integers(1, 101, 1000)
    for k in (1, 5, 10, 50):
        assert hr_at_k(ranks, k) == sum(1 for r in ranks if r <= k) / 1000


def test_ndcg_examples(rng):
    assert ndcg_at_k([1], 5) == 1.0
    assert ndcg_at_k([3], 10) == 0.5
    assert ndcg_at_k([11], 10) == 0.0
    ranks = rng.integers(1, 101, 1000)
    oracle = sum((Fraction(1 / math.log2(r + 1)) for r in ranks if r <= 10), Fraction(0)) / 1000
    assert ndcg_at_k(ranks, 10) == float(oracle)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 100), min_size=1, max_size=200))
def test_metric_ordering(ranks):
    for k in (1, 5, 10, 20):
        assert 0 <= ndcg_at_k(ranks, k) <= hr_at_k(ranks, k) <= 1
        assert hr_at_k(ranks, k) <= hr_at_k(ranks, k + 5)
        assert ndcg_at_k(ranks, k) <= ndcg_at_k(ranks, k + 5)


def loo_fixture(n_users=1200, n_items=300, seed=0):
    rng = np.random.default_rng(seed)
    triples = [(u, int(i), t) for u in range(n_users) for t, i in enumerate(rng.choice(n_items, 3, replace=False))]
    sp = leave_one_out_split(InteractionSet.from_triples(0, triples, n_users, n_items))
    return sp, eval_negatives(sp, 99, seed)


def test_perfect_model_scores_one():
    sp, negs = loo_fixture(n_users=50)
    users = np.zeros((50, 300))
    users[sp.test_users, sp.test_items] = 1.0
    rep = evaluate(users, np.eye(300), sp, negs)
    assert rep.hr[5] == rep.ndcg[5] == 1.0 and rep.n_users == 50


def test_random_model_hits_ten_percent():
    sp, negs = loo_fixture()
    rng = np.random.default_rng(7)
    rep = evaluate(rng.normal(size=(1200, 16)), rng.normal(size=(300, 16)), sp, negs)
    assert 0.07 <= rep.hr[10] <= 0.13
    assert rep.hr[10] >= rep.hr[5]


def test_evaluate_is_pure_and_skips_missing():
    sp, negs = loo_fixture(n_users=40)
    rng = np.random.default_rng(1)
    u, v = rng.normal(size=(40, 8)), rng.normal(size=(300, 8))
    partial = {k: negs[k] for k in list(negs)[:30]}
    a, b = evaluate(u, v, sp, partial, seed=3), evaluate(u, v, sp, partial, seed=3)
    assert a.to_json() == b.to_json() and a.n_skipped == 10 and a.n_users == 30


def test_report_files(tmp_path):
    rep = MetricsReport({5: 0.5}, {5: 0.25}, 2, 0, 1, {3: 1, 0: 9})
    rep.write_json(tmp_path / "m.json")
    rep.write_ranks(tmp_path / "r.csv")
    assert '"5": 0.5' in (tmp_path / "m.json").read_text()
    assert (tmp_path / "r.csv").read_text().splitlines() == ["user_idx,rank", "0,9", "3,1"]


def test_empty_split_reports_zero():
    sp = SplitPair(InteractionSet.from_triples(0, [(0, 0, 1)], 1, 2), np.zeros(0, np.int64), np.zeros(0, np.int64),
                   np.zeros(0, np.int64))
    rep = evaluate(np.zeros((1, 2)), np.zeros((2, 2)), sp, {})
    assert rep.n_users == 0 and rep.hr[5] == 0.0
