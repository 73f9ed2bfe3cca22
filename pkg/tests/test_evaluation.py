import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xdrec.evaluation import (
    EvalCandidates,
    build_candidates,
    evaluate,
    metrics_at_k,
    missed_hit_distribution,
    rank_position,
    report_from_positions,
)


def oracle_position(scores, t):
    """Sort so that ties put the test candidate last among equals."""
    order = sorted(range(len(scores)), key=lambda k: (-scores[k], k == t))
    return order.index(t) + 1


def oracle_metrics(positions, K):
    hr = sum(p <= K for p in positions) / len(positions)
    ndcg = sum(1 / math.log2(p + 1) for p in positions if p <= K) / len(positions)
    mrr = sum(1 / p for p in positions if p <= K) / len(positions)
    return hr, ndcg, mrr


class TestRanking:
    def test_rank_oracle(self):
        assert rank_position([0.5, 0.9, 0.5, 0.1], 0) == 3
        assert rank_position([0.5, 0.9, 0.5, 0.1], 1) == 1
        assert rank_position([0.2] * 100, 42) == 100

    def test_metrics_oracle(self):
        hr, ndcg, mrr = metrics_at_k([1, 3, 11], 10)
        assert hr == pytest.approx(2 / 3)
        assert ndcg == pytest.approx((1 + 0.5) / 3)
        assert mrr == pytest.approx((1 + 1 / 3) / 3)

    def test_metrics_errors(self):
        with pytest.raises(ValueError):
            metrics_at_k([], 10)
        with pytest.raises(ValueError):
            metrics_at_k([0], 10)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 5), min_size=1, max_size=100), st.data())
    def test_matches_sort_oracle(self, scores, data):
        t = data.draw(st.integers(0, len(scores) - 1))
        assert rank_position(np.array(scores, dtype=float), t) == oracle_position(scores, t)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(1, 100), min_size=1, max_size=50), st.integers(1, 100))
    def test_metric_oracle_and_ordering(self, positions, K):
        got = metrics_at_k(positions, K)
        assert got == pytest.approx(oracle_metrics(positions, K), rel=1e-12)
        assert got[2] <= got[1] + 1e-15 <= got[0] + 2e-15


class TestEvaluate:
    def test_perfect_and_constant_scorers(self, tiny_dataset):
        cands = build_candidates(tiny_dataset, np.random.default_rng(0))
        test_items = dict(tiny_dataset.test.tolist())

        def perfect(users, items):
            return (items == np.array([test_items[u] for u in users.tolist()])).astype(float)

        rep = evaluate(None, None, tiny_dataset, (10,), candidates=cands, scorer=perfect)
        assert rep.to_csv() == "K,hr,ndcg,mrr\n10,1.0,1.0,1.0\n"
        flat = evaluate(None, None, tiny_dataset, (1,), candidates=cands,
                        scorer=lambda u, i: np.zeros(len(u)))
        # ties are pessimistic: the test item sits below every free negative
        assert flat.positions.tolist() == [len(c) for c in cands.items]
        assert cands.degraded == 2

    def test_workers_do_not_change_results(self, tiny_dataset):
        cands = build_candidates(tiny_dataset, np.random.default_rng(1))
        scorer = lambda u, i: np.sin(3.0 * u + 7.0 * i)
        a = evaluate(None, None, tiny_dataset, candidates=cands, scorer=scorer, chunk=3)
        b = evaluate(None, None, tiny_dataset, candidates=cands, scorer=scorer, chunk=3, workers=4)
        assert a == b

    def test_per_user_tsv(self):
        rep = report_from_positions([4, 9], [1, 20], [3, 12], cutoffs=(10,))
        assert rep.per_user_tsv() == "user_id\tp_u\tn_train\n4\t1\t3\n9\t20\t12\n"

    def test_missed_hit_distribution(self):
        rep = report_from_positions([0, 1, 2, 3, 4], [1, 15, 30, 2, 11], [4, 4, 9, 4, 12], cutoffs=(10,))
        assert missed_hit_distribution(rep, K=10) == {4: 1, 9: 1, 12: 1}

    def test_candidates_exclude_all_known_items(self):
        from xdrec.synthgen import SynthConfig, generate

        ds = generate(SynthConfig(m=40, n_target=150, n_source=20, vocab_size=250, interactions=8,
                                  source_per_user=3))
        cands = build_candidates(ds, np.random.default_rng(0))
        assert isinstance(cands, EvalCandidates)
        for u, items, k in zip(cands.users.tolist(), cands.items, cands.test_index.tolist()):
            known = ds.interacted(u)
            assert len(items) == 100 and len(set(items.tolist())) == 100
            assert [j for j in items.tolist() if j in known] == [items[k]]
