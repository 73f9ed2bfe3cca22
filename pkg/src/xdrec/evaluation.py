"""Leave-one-out ranking evaluation against 99 sampled negatives.

NDCG and MRR use the cut-off convention: a test item ranked below K adds 0.
Ties are broken pessimistically (every tied negative ranks above the test item).
"""

from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from xdrec.data import Dataset, sample_eval_candidates
from xdrec.model import ModelParams, Variant, predict

DEFAULT_CUTOFFS = (5, 10, 20)


def rank_position(scores, test_index: int) -> int:
    """1-based rank of the test candidate; ties count against it."""
    s = np.asarray(scores)
    t = s[test_index]
    return 1 + int((s > t).sum()) + int((s == t).sum()) - 1


def metrics_at_k(positions, K: int) -> tuple[float, float, float]:
    """(HR, NDCG, MRR) at cutoff ``K`` averaged over users."""
    p = np.asarray(positions, dtype=np.float64)
    if p.size == 0:
        raise ValueError("no users to average over")
    if (p < 1).any():
        raise ValueError("hit positions are 1-based")
    hit = p <= K
    hr = float(hit.mean())
    ndcg = float(np.where(hit, math.log(2) / np.log(p + 1), 0.0).mean())
    mrr = float(np.where(hit, 1.0 / p, 0.0).mean())
    return hr, ndcg, mrr


@dataclass
class EvalCandidates:
    """Candidate lists shared by every model evaluated on one split."""

    users: np.ndarray
    items: list                 # per user, array of candidate ids (test item included)
    test_index: np.ndarray
    degraded: int = 0

    def __len__(self):
        return len(self.users)


def build_candidates(dataset: Dataset, rng: np.random.Generator, split: str = "test",
                     n_neg: int = 99) -> EvalCandidates:
    pairs = getattr(dataset, split)
    items, tidx, degraded = [], [], 0
    for u, t in pairs.tolist():
        cand, k, deg = sample_eval_candidates(u, t, dataset.interacted(u), dataset.n_target, rng, n_neg)
        items.append(cand)
        tidx.append(k)
        degraded += int(deg)
    return EvalCandidates(pairs[:, 0].copy(), items, np.asarray(tidx, dtype=np.int64), degraded)


@dataclass
class MetricsReport:
    cutoffs: tuple
    hr: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)
    mrr: dict = field(default_factory=dict)
    users: np.ndarray = None
    positions: np.ndarray = None
    n_train: np.ndarray = None
    degraded: int = 0

    @property
    def n_evaluated(self) -> int:
        return 0 if self.users is None else len(self.users)

    def rows(self):
        return [(k, self.hr[k], self.ndcg[k], self.mrr[k]) for k in self.cutoffs]

    def to_csv(self) -> str:
        return "K,hr,ndcg,mrr\n" + "".join(f"{k},{h!r},{n!r},{m!r}\n" for k, h, n, m in self.rows())

    def per_user_tsv(self) -> str:
        lines = ["user_id\tp_u\tn_train\n"]
        lines += [f"{u}\t{p}\t{n}\n" for u, p, n in zip(self.users.tolist(), self.positions.tolist(),
                                                        self.n_train.tolist())]
        return "".join(lines)

    def __eq__(self, other):
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return (self.to_csv() == other.to_csv() and self.per_user_tsv() == other.per_user_tsv()
                and self.degraded == other.degraded)


def report_from_positions(users, positions, n_train, cutoffs=DEFAULT_CUTOFFS, degraded=0) -> MetricsReport:
    rep = MetricsReport(tuple(cutoffs), users=np.asarray(users), positions=np.asarray(positions, dtype=np.int64),
                        n_train=np.asarray(n_train, dtype=np.int64), degraded=degraded)
    for k in rep.cutoffs:
        rep.hr[k], rep.ndcg[k], rep.mrr[k] = metrics_at_k(rep.positions, k)
    return rep


Scorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


def model_scorer(params: ModelParams, variant: Variant, dataset: Dataset,
                 beta: float | None = None, tnet_beta: float = 1.0) -> Scorer:
    """Scores are logits: monotone in the predicted probability, but free of
    the float32 saturation that would create artificial ties near 1."""

    def score(users, items):
        return predict(dataset.make_batch(users, items), params, variant, beta, tnet_beta)

    return score


def evaluate(params: ModelParams | None, variant: Variant | None, dataset: Dataset,
             cutoffs=DEFAULT_CUTOFFS, rng: np.random.Generator | None = None,
             candidates: EvalCandidates | None = None, scorer: Scorer | None = None,
             beta: float | None = None, tnet_beta: float = 1.0, workers: int = 1,
             chunk: int = 8192) -> MetricsReport:
    """Rank each evaluable user's held-out item among its candidates.

    Pass ``candidates`` to reuse a cached candidate set (so models are
    compared on identical lists); otherwise they are drawn from ``rng``.
    ``scorer`` overrides the model forward pass.
    """
    if candidates is None:
        candidates = build_candidates(dataset, rng if rng is not None else np.random.default_rng(0))
    if scorer is None:
        scorer = model_scorer(params, variant, dataset, beta, tnet_beta)

    lengths = np.asarray([len(c) for c in candidates.items], dtype=np.int64)
    flat_u = np.repeat(candidates.users, lengths)
    flat_i = np.concatenate(candidates.items) if len(candidates) else np.zeros(0, dtype=np.int64)
    bounds = list(range(0, flat_u.size, chunk))

    def run(start):
        return np.asarray(scorer(flat_u[start:start + chunk], flat_i[start:start + chunk]), dtype=np.float64)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, bounds))
    else:
        parts = [run(s) for s in bounds]
    scores = np.concatenate(parts) if parts else np.zeros(0)

    offsets = np.concatenate([[0], np.cumsum(lengths)])
    positions = np.asarray([rank_position(scores[offsets[k]:offsets[k + 1]], candidates.test_index[k])
                            for k in range(len(candidates))], dtype=np.int64)
    n_train = dataset.train_counts()[candidates.users]
    return report_from_positions(candidates.users, positions, n_train, cutoffs, candidates.degraded)


def missed_hit_distribution(report: MetricsReport, dataset: Dataset | None = None, K: int = 10) -> dict[int, int]:
    """Histogram over training-interaction counts of users whose test item
    ranked below ``K``."""
    n_train = report.n_train if dataset is None else dataset.train_counts()[report.users]
    missed = np.asarray(report.positions) > K
    return dict(sorted(Counter(np.asarray(n_train)[missed].tolist()).items()))
