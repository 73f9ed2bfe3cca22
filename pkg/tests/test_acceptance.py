"""Acceptance criteria 1-9.

Each test records a one-line verdict (printed immediately and repeated in the
terminal summary) before asserting, so a failing criterion still reports
its measured values. The planted-signal runs are trained once per session
and shared by criteria 3, 5 and 6.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from xdrec.data import build_vocabulary, loo_split, prepare, sample_negatives
from xdrec.evaluation import build_candidates, evaluate, metrics_at_k, missed_hit_distribution, rank_position
from xdrec.model import Variant, check_gradients, forward, forward_batch, predict, random_fixture
from xdrec.numerics import Hyperparams, load_checkpoint, save_checkpoint
from xdrec.synthgen import SynthConfig, generate
from xdrec.training import TrainConfig, init_params, train

SEEDS = (0, 1, 2, 3, 4)
# the planted fixture: m=300, n_T=400, n_S=300, k=8, w_x=0.4, w_t=0.3, 12 interactions per user
FIXTURE = dict(m=300, n_target=400, n_source=300, k=8, w_x=0.4, w_t=0.3, interactions=12)
# generator knobs outside the fixed list above
FIXTURE_EXTRA = dict(n_clusters=20, clusters_per_user=3, source_per_user=12, n_topics=20, topic_words=10)
HYPER = dict(epochs=30, lr=0.003)
LOOP = dict(patience=5, min_epochs=15)


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def fixture_config(seed: int, **over) -> SynthConfig:
    return SynthConfig(**{**FIXTURE, **FIXTURE_EXTRA, **over, "seed": seed})


class Runs:
    """Lazily trained (variant, seed) results on one generator setting."""

    def __init__(self, **over):
        self.over = over
        self.data, self.cands, self.results = {}, {}, {}

    def dataset(self, seed):
        if seed not in self.data:
            self.data[seed] = generate(fixture_config(seed, **self.over))
            self.cands[seed] = build_candidates(self.data[seed], np.random.default_rng([seed, 99]))
        return self.data[seed]

    def get(self, variant: Variant, seed: int):
        key = (variant, seed)
        if key not in self.results:
            ds = self.dataset(seed)
            hyper = Hyperparams(seed=seed, **HYPER)
            t0 = time.perf_counter()
            params, log = train(ds, TrainConfig(hyper, **LOOP), variant, np.random.default_rng(seed))
            seconds = time.perf_counter() - t0
            rep = evaluate(params, variant, ds, candidates=self.cands[seed], beta=hyper.beta,
                           tnet_beta=hyper.tnet_beta)
            self.results[key] = (rep, log, seconds)
        return self.results[key]

    def median(self, variant, metric="ndcg", K=10):
        return float(np.median([getattr(self.get(variant, s)[0], metric)[K] for s in SEEDS]))


@pytest.fixture(scope="session")
def planted():
    return Runs()


@pytest.fixture(scope="session")
def null_signal():
    return Runs(w_x=0.0, w_t=0.0)


@pytest.fixture(scope="session")
def cold():
    return Runs(interactions=4, interactions_max=20)


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst, min_coords, n_fix = 0.0, 10**9, 10
    for variant in Variant:
        for k in range(n_fix):
            rep = check_gradients(variant, np.random.default_rng([1, int(variant), k]), eps=1e-5, n_coords=20)
            worst = max(worst, rep.worst)
            min_coords = min(min_coords, min(rep.n_coords.values()))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-4 and min_coords >= 20 and secs <= 60
    record(1, ok, f"max rel err {worst:.2e} over {n_fix} fixtures x 4 variants, "
                  f">= {min_coords} coords/group, {secs:.1f}s")


def test_criterion_2_attention():
    rng = np.random.default_rng(2)
    worst_sum = 0.0
    for t in range(1000):
        params, batch = random_fixture(Variant.FULL, rng, dims=(6, 7, 8, 8, 30), scale=float(rng.uniform(0.05, 3)))
        cache = forward_batch(batch, params.astype(np.float32), Variant.FULL)
        sp = cache.p.sum(axis=1)[batch.doc_mask.any(axis=1)]
        sa = cache.alpha.sum(axis=1)[batch.src_mask.any(axis=1)]
        worst_sum = max(worst_sum, np.abs(sp - 1).max(), np.abs(sa - 1).max())
    worst_perm = 0.0
    for t in range(100):
        params, _ = random_fixture(Variant.FULL, rng, dims=(6, 7, 8, 8, 30), scale=1.0)
        doc = rng.integers(0, 30, size=rng.integers(1, 12)).tolist()
        src = rng.choice(8, size=rng.integers(1, 8), replace=False).tolist()
        pw, ps = rng.permutation(len(doc)), rng.permutation(len(src))
        _, a = forward(1, 2, doc, src, params, Variant.FULL)
        _, b = forward(1, 2, [doc[k] for k in pw], [src[k] for k in ps], params, Variant.FULL)
        worst_perm = max(worst_perm,
                         np.abs(b.word_weights() - a.word_weights()[pw]).max(),
                         np.abs(b.source_weights() - a.source_weights()[ps]).max(),
                         np.abs(b.o - a.o).max(), np.abs(b.c - a.c).max())
    ok = worst_sum <= 1e-6 and worst_perm <= 1e-12
    record(2, ok, f"max |sum-1| {worst_sum:.1e} (1000 float32 passes), max permutation gap {worst_perm:.1e}")


def _oracle_position(scores, t):
    order = sorted(range(len(scores)), key=lambda k: (-scores[k], k == t))
    return order.index(t) + 1


def _ordered(positions, K):
    p = np.asarray(positions, dtype=float)
    hit = p <= K
    mrr, ndcg = np.where(hit, 1 / p, 0), np.where(hit, 1 / np.log2(p + 1), 0)
    return bool((mrr <= ndcg + 1e-15).all() and (ndcg <= hit + 1e-15).all())


def test_criterion_3_metric_oracle(planted):
    rng = np.random.default_rng(3)
    mismatches = 0
    for t in range(1000):
        n = int(rng.integers(1, 101))
        kind = t % 3
        if kind == 0:
            scores = np.full(n, rng.normal())            # all ties
        elif kind == 1:
            scores = rng.integers(0, 4, size=n).astype(float)
        else:
            scores = rng.normal(size=n)
        ti = int(rng.integers(0, n))
        pos = rank_position(scores, ti)
        mismatches += pos != _oracle_position(scores.tolist(), ti)
        positions = rng.integers(1, 101, size=int(rng.integers(1, 30)))
        K = int(rng.integers(1, 30))
        hr = np.mean(positions <= K)
        nd = np.mean([1 / math.log2(p + 1) if p <= K else 0 for p in positions])
        mr = np.mean([1 / p if p <= K else 0 for p in positions])
        got = metrics_at_k(positions, K)
        mismatches += not (got[0] == hr and abs(got[1] - nd) < 1e-12 and abs(got[2] - mr) < 1e-12)
    reports = [planted.get(Variant.FULL, s)[0] for s in SEEDS] + [planted.get(Variant.CF_ONLY, s)[0] for s in SEEDS]
    ordered = all(_ordered(r.positions, K) for r in reports for K in r.cutoffs)
    record(3, mismatches == 0 and ordered,
           f"{mismatches} oracle mismatches in 1000 vectors; MRR<=NDCG<=HR on {len(reports)} reports: {ordered}")


def test_criterion_4_null_model():
    ds = generate(SynthConfig(m=600, n_target=400, n_source=300, seed=4))
    hyper = Hyperparams()
    params = init_params(hyper, (ds.n_users, ds.n_target, ds.n_source, ds.L), Variant.FULL,
                         np.random.default_rng(4))
    rep = evaluate(params, Variant.FULL, ds, (10,), rng=np.random.default_rng(5), beta=hyper.beta)
    hr = rep.hr[10]
    record(4, 0.06 <= hr <= 0.14 and rep.n_evaluated >= 500,
           f"untrained HR@10 {hr:.3f} on {rep.n_evaluated} users")


def test_criterion_5_planted_recovery(planted):
    hrs = [planted.get(Variant.FULL, s)[0].hr[10] for s in SEEDS]
    secs = sum(planted.get(Variant.FULL, s)[2] for s in SEEDS)
    epochs = max(len(planted.get(Variant.FULL, s)[1].records) for s in SEEDS)
    med = float(np.median(hrs))
    record(5, med >= 0.60 and secs <= 300 and epochs <= 30,
           f"FULL median HR@10 {med:.3f} (seeds {', '.join(f'{h:.3f}' for h in hrs)}), "
           f"{secs:.0f}s for 5 runs, <= {epochs} epochs")


def test_criterion_6_ablation(planted, null_signal):
    med = {v: planted.median(v) for v in Variant}
    F, M, T, C = (med[v] for v in (Variant.FULL, Variant.NO_M, Variant.NO_T, Variant.CF_ONLY))
    margins = {"FULL-NO_M": F - M, "FULL-NO_T": F - T, "NO_M-CF": M - C, "NO_T-CF": T - C}
    null_gap = null_signal.median(Variant.FULL, "hr") - null_signal.median(Variant.CF_ONLY, "hr")
    ok = min(margins.values()) >= 0.02 and abs(null_gap) < 0.03
    record(6, ok, "NDCG@10 medians " + " ".join(f"{v.name} {med[v]:.3f}" for v in Variant) + "; margins "
           + " ".join(f"{k} {x:+.3f}" for k, x in margins.items()) + f"; null |FULL-CF| HR@10 {abs(null_gap):.3f}")


def test_criterion_7_cold_users(cold):
    def missed(v, s):
        rep = cold.get(v, s)[0]
        return sum(c for n, c in missed_hit_distribution(rep, K=10).items() if n <= 7)

    full = float(np.median([missed(Variant.FULL, s) for s in SEEDS]))
    cf = float(np.median([missed(Variant.CF_ONLY, s) for s in SEEDS]))
    record(7, full <= cf, f"median missed hits among users with <= 7 training interactions: FULL {full:.0f}, "
                          f"CF_ONLY {cf:.0f}")


def test_criterion_8_data_integrity():
    checks = {}
    rng = np.random.default_rng(8)
    pairs = [(int(u), int(i)) for u, i in zip(rng.integers(0, 50, 2000), rng.integers(0, 300, 2000))]
    train_, val, test = loo_split(pairs, rng)
    parts = [{tuple(p) for p in a.tolist()} for a in (train_, val, test)]
    checks["split"] = (not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
                       and set().union(*parts) == set(pairs))
    negs, _ = sample_negatives(train_, np.concatenate([train_, val, test]), 300, 4, rng)
    checks["negatives"] = not ({tuple(p) for p in negs.tolist()} & set(pairs)) and len(negs) == 4 * len(train_)
    corpus = ["apple banana apple", "banana cherry", "cherry date", "apple date egg", "egg egg fig"]
    v = build_vocabulary(corpus, L=10)
    checks["tfidf"] = (v.tokens == ["apple", "egg", "banana", "cherry", "date", "fig"]
                       and abs(v.scores["apple"] - 3 * math.log(2.5)) < 1e-12
                       and abs(v.scores["fig"] - math.log(5)) < 1e-12)
    target = [(f"u{u}", f"i{i}", 0.0) for u in range(30) for i in rng.choice(40, 6, replace=False).tolist()]
    texts = {(u, i): f"shared sentinel{u}{i}" for u, i, _ in target}
    ds, maps = prepare(target, [], texts, {}, rng, L=100_000)
    inv_u = {k: r for r, k in maps.users.items()}
    inv_i = {k: r for r, k in maps.items.items()}
    held = {f"sentinel{inv_u[u]}{inv_i[i]}" for u, i in np.concatenate([ds.val, ds.test]).tolist()}
    ids_in_item_docs = set(np.concatenate(list(ds.item_docs.values())).tolist())
    checks["no leakage"] = (not any(t in ds.vocab for t in held)
                            and ids_in_item_docs <= set(range(len(ds.vocab))) and len(held) == 60)
    record(8, all(checks.values()), ", ".join(f"{k}: {'ok' if x else 'FAIL'}" for k, x in checks.items()))


def test_criterion_9_reproducibility(tmp_path):
    ds = generate(fixture_config(9, m=120, n_target=160, n_source=100))
    hyper = Hyperparams(d=16, lr=0.01, epochs=4, seed=9)
    outs = []
    for _ in range(2):
        params, log = train(ds, TrainConfig(hyper), Variant.FULL, np.random.default_rng(9))
        rep = evaluate(params, Variant.FULL, ds, rng=np.random.default_rng(10), beta=hyper.beta)
        outs.append((params, log, rep))
    same_log = outs[0][1].to_csv() == outs[1][1].to_csv()
    same_rep = outs[0][2] == outs[1][2]
    save_checkpoint(tmp_path / "c.bin", outs[0][0], Variant.FULL)
    loaded, tag = load_checkpoint(tmp_path / "c.bin")
    rng = np.random.default_rng(11)
    u, i = rng.integers(0, ds.n_users, 100), rng.integers(0, ds.n_target, 100)
    batch = ds.make_batch(u, i)
    same_pred = np.array_equal(predict(batch, outs[0][0], Variant.FULL), predict(batch, loaded, Variant(tag)))
    record(9, same_log and same_rep and same_pred,
           f"TrainLog identical: {same_log}, MetricsReport identical: {same_rep}, "
           f"checkpoint predictions identical on 100 pairs: {same_pred}")
