"""Two-domain implicit-feedback data: ingestion, vocabulary, LOO splits, sampling.

Prepared datasets live in a directory of small TSV files so they can be diffed
and read from any language.
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from xdrec.model import Batch, pad

log = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[^0-9a-z]+")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


# --------------------------------------------------------------------------
# Vocabulary
# --------------------------------------------------------------------------


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]
    scores: dict[str, float]
    stopwords: frozenset = frozenset()

    def __len__(self):
        return len(self.token_to_id)

    def __contains__(self, token):
        return token in self.token_to_id

    @property
    def tokens(self) -> list[str]:
        return sorted(self.token_to_id, key=self.token_to_id.get)


def build_vocabulary(documents, L: int, stopwords=()) -> Vocabulary:
    """Keep the ``L`` best tokens by corpus tf-idf, ``tf(w) * log(N / df(w))``.

    ``tf`` is the total count over the corpus, ``df`` the number of documents
    containing the token. Ties break lexicographically; ids follow the rank.
    Documents may be raw strings or token lists.
    """
    docs = [tokenize(d) if isinstance(d, str) else list(d) for d in documents]
    if not docs:
        raise DataError("cannot build a vocabulary from an empty corpus")
    stop = frozenset(stopwords)
    tf: Counter = Counter()
    df: Counter = Counter()
    for toks in docs:
        toks = [t for t in toks if t not in stop]
        tf.update(toks)
        df.update(set(toks))
    n = len(docs)
    scores = {w: tf[w] * math.log(n / df[w]) for w in tf}
    ranked = sorted(scores, key=lambda w: (-scores[w], w))[:L]
    return Vocabulary({w: k for k, w in enumerate(ranked)}, {w: scores[w] for w in ranked}, stop)


def encode_document(text, vocab: Vocabulary, max_doc_len: int) -> np.ndarray:
    """Token ids of the in-vocabulary tokens, in order, capped at ``max_doc_len``."""
    toks = tokenize(text) if isinstance(text, str) else text
    ids = [vocab.token_to_id[t] for t in toks if t in vocab.token_to_id]
    return np.asarray(ids[:max_doc_len], dtype=np.int64)


# --------------------------------------------------------------------------
# Splits and sampling
# --------------------------------------------------------------------------


def loo_split(pairs, rng: np.random.Generator, min_interactions: int = 3):
    """Leave-one-out split of (user, item) pairs.

    Users with at least ``min_interactions`` distinct items get one uniformly
    chosen test pair and one validation pair; everyone else stays in train.
    Returns ``(train, val, test)`` as (N, 2) int arrays. Duplicate pairs are
    dropped (first occurrence wins).
    """
    by_user: dict[int, list[int]] = defaultdict(list)
    seen = set()
    for u, i in np.asarray(pairs, dtype=np.int64).reshape(-1, 2).tolist():
        if (u, i) not in seen:
            seen.add((u, i))
            by_user[u].append(i)
    train, val, test = [], [], []
    for u in sorted(by_user):
        items = by_user[u]
        if len(items) >= max(min_interactions, 3):
            t, v = rng.choice(len(items), size=2, replace=False)
            test.append((u, items[t]))
            val.append((u, items[v]))
            train.extend((u, it) for k, it in enumerate(items) if k != t and k != v)
        else:
            train.extend((u, it) for it in items)
    as_arr = lambda x: np.asarray(x, dtype=np.int64).reshape(-1, 2)
    return as_arr(train), as_arr(val), as_arr(test)


def _pair_keys(users, items, n_items):
    return np.asarray(users, dtype=np.int64) * n_items + np.asarray(items, dtype=np.int64)


def _member(keys, sorted_keys):
    if sorted_keys.size == 0:
        return np.zeros(keys.shape, dtype=bool)
    pos = np.clip(np.searchsorted(sorted_keys, keys), 0, sorted_keys.size - 1)
    return sorted_keys[pos] == keys


def sample_negatives(positives, exclude, n_items: int, neg_ratio: int,
                     rng: np.random.Generator, max_rounds: int = 100):
    """Draw ``neg_ratio`` uniform non-interacted items per positive pair.

    ``exclude`` holds every known (user, item) pair of the user (train, val
    and test) as an (N, 2) array. Returns ``(negatives, skipped)`` where
    negatives is an (M, 2) array aligned with the repeated positives and
    ``skipped`` counts draws dropped because the user has no free item.
    """
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    exclude = np.asarray(exclude, dtype=np.int64).reshape(-1, 2)
    ex_keys = np.unique(_pair_keys(exclude[:, 0], exclude[:, 1], n_items))
    users = np.repeat(positives[:, 0], neg_ratio)

    n_seen = np.bincount(exclude[:, 0], minlength=int(users.max(initial=-1)) + 1)
    full = n_seen[users] >= n_items
    skipped = int(full.sum())
    users = users[~full]

    items = rng.integers(0, n_items, size=users.size)
    bad = _member(_pair_keys(users, items, n_items), ex_keys)
    rounds = 0
    while bad.any():
        rounds += 1
        if rounds > max_rounds:
            # dense users: pick from the explicit complement
            for k in np.flatnonzero(bad):
                free = np.setdiff1d(np.arange(n_items), exclude[exclude[:, 0] == users[k], 1])
                items[k] = rng.choice(free)
            break
        idx = np.flatnonzero(bad)
        items[idx] = rng.integers(0, n_items, size=idx.size)
        bad[idx] = _member(_pair_keys(users[idx], items[idx], n_items), ex_keys)
    if skipped:
        log.warning("skipped %d negative draws for users with no free items", skipped)
    return np.stack([users, items], axis=1), skipped


def sample_eval_candidates(u: int, test_item: int, interacted, n_items: int,
                           rng: np.random.Generator, n_neg: int = 99):
    """Test item plus ``n_neg`` distinct non-interacted items in random order.

    Returns ``(items, test_index, degraded)``; ``degraded`` is True when fewer
    than ``n_neg`` free items existed.
    """
    interacted = set(int(x) for x in interacted) | {int(test_item)}
    n_free = n_items - len(interacted)
    degraded = n_free < n_neg
    if degraded:
        negs = np.asarray([j for j in range(n_items) if j not in interacted], dtype=np.int64)
    elif n_free < 4 * n_neg:
        free = np.asarray([j for j in range(n_items) if j not in interacted], dtype=np.int64)
        negs = rng.choice(free, size=n_neg, replace=False)
    else:
        chosen: list[int] = []
        taken = set(interacted)
        while len(chosen) < n_neg:
            for j in rng.integers(0, n_items, size=2 * (n_neg - len(chosen))).tolist():
                if j not in taken:
                    taken.add(j)
                    chosen.append(j)
                    if len(chosen) == n_neg:
                        break
        negs = np.asarray(chosen, dtype=np.int64)
    items = np.concatenate([[test_item], negs]).astype(np.int64)
    order = rng.permutation(items.size)
    items = items[order]
    return items, int(np.flatnonzero(order == 0)[0]), degraded


# --------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------


@dataclass
class Dataset:
    n_users: int
    n_target: int
    n_source: int
    train: np.ndarray                       # (N, 2)
    val: np.ndarray                         # (m_eval, 2)
    test: np.ndarray                        # (m_eval, 2)
    source: list                            # per-user list of source item ids
    doc_store: dict = field(default_factory=dict)   # (u, i) -> ids, training pairs only
    item_docs: dict = field(default_factory=dict)   # i -> ids
    max_doc_len: int = 300
    vocab: Vocabulary | None = None
    L: int = 0

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.int64).reshape(-1, 2)
        self.val = np.asarray(self.val, dtype=np.int64).reshape(-1, 2)
        self.test = np.asarray(self.test, dtype=np.int64).reshape(-1, 2)
        if not self.L:
            self.L = len(self.vocab) if self.vocab is not None else 1 + max(
                [int(v.max(initial=-1)) for v in list(self.doc_store.values()) + list(self.item_docs.values())] + [0])
        self._src_arrays = [np.asarray(s, dtype=np.int64) for s in self.source]
        self._empty = np.zeros(0, dtype=np.int64)

    # -- views --------------------------------------------------------------

    @property
    def all_pairs(self) -> np.ndarray:
        return np.concatenate([self.train, self.val, self.test])

    @property
    def eval_users(self) -> np.ndarray:
        return self.test[:, 0]

    def interacted(self, u: int) -> set:
        if not hasattr(self, "_interacted"):
            d = defaultdict(set)
            for a, b in self.all_pairs.tolist():
                d[a].add(b)
            self._interacted = d
        return self._interacted[u]

    def train_counts(self) -> np.ndarray:
        return np.bincount(self.train[:, 0], minlength=self.n_users)

    def sources_of(self, u: int) -> np.ndarray:
        return self._src_arrays[u] if u < len(self._src_arrays) else self._empty

    def lookup_document(self, u: int, i: int) -> np.ndarray:
        """Pair document, else the item's aggregate training text, else empty."""
        if not (0 <= u < self.n_users and 0 <= i < self.n_target):
            raise IndexError(f"unknown pair ({u}, {i})")
        doc = self.doc_store.get((u, i))
        if doc is not None:
            return doc
        doc = self.item_docs.get(i)
        if doc is not None:
            return doc[: self.max_doc_len]
        return self._empty

    def make_batch(self, users, items, labels=None) -> Batch:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        docs = [self.lookup_document(u, i) for u, i in zip(users.tolist(), items.tolist())]
        srcs = [self.sources_of(u) for u in users.tolist()]
        doc_ids, doc_mask = pad(docs)
        src_ids, src_mask = pad(srcs)
        return Batch(users, items, doc_ids, doc_mask, src_ids, src_mask,
                     None if labels is None else np.asarray(labels, dtype=np.float64))

    def validate(self) -> None:
        """Raise DataError if any structural invariant is broken."""
        for name, arr in (("train", self.train), ("val", self.val), ("test", self.test)):
            if arr.size and (arr[:, 0].min() < 0 or arr[:, 0].max() >= self.n_users
                             or arr[:, 1].min() < 0 or arr[:, 1].max() >= self.n_target):
                raise DataError(f"{name}: id out of range")
            if len({tuple(p) for p in arr.tolist()}) != len(arr):
                raise DataError(f"{name}: duplicate pairs")
        tr = {tuple(p) for p in self.train.tolist()}
        for name, arr in (("val", self.val), ("test", self.test)):
            if len(set(arr[:, 0].tolist())) != len(arr):
                raise DataError(f"{name}: more than one pair per user")
            if tr & {tuple(p) for p in arr.tolist()}:
                raise DataError(f"{name} overlaps train")
        if set(self.val[:, 0].tolist()) != set(self.test[:, 0].tolist()):
            raise DataError("val and test cover different users")
        if {tuple(p) for p in self.val.tolist()} & {tuple(p) for p in self.test.tolist()}:
            raise DataError("val overlaps test")
        for u, js in enumerate(self.source):
            if len(js) and (min(js) < 0 or max(js) >= self.n_source):
                raise DataError(f"source item out of range for user {u}")
        for key in self.doc_store:
            if key not in tr:
                raise DataError(f"pair document for non-training pair {key}")
        for doc in list(self.doc_store.values()) + list(self.item_docs.values()):
            if doc.size and doc.max() >= self.L:
                raise DataError("token id out of vocabulary range")


# --------------------------------------------------------------------------
# Raw files
# --------------------------------------------------------------------------


def read_interactions(path, min_rating: float | None = None) -> list[tuple]:
    """Rows ``user<TAB>item[<TAB>timestamp]``; with ``min_rating`` the third
    column is a rating and only rows with rating >= min_rating are kept.
    Returns (user, item, sort_key) with raw string ids."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) < 2:
                raise DataError(f"{path}:{lineno}: expected user<TAB>item")
            third = cols[2] if len(cols) > 2 and cols[2] != "" else None
            if min_rating is not None:
                if third is None:
                    raise DataError(f"{path}:{lineno}: missing rating column")
                if float(third) < min_rating:
                    continue
                key = float(lineno)
            else:
                key = float(third) if third is not None else float(lineno)
            out.append((cols[0], cols[1], key))
    return out


def read_documents(path):
    """Returns (pair_docs, item_docs) keyed by raw ids."""
    pair_docs, item_docs = {}, {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) >= 3:
                pair_docs[(cols[0], cols[1])] = "\t".join(cols[2:])
            elif len(cols) == 2:
                item_docs[cols[0]] = cols[1]
            else:
                raise DataError(f"{path}:{lineno}: expected 2 or 3 tab-separated columns")
    return pair_docs, item_docs


def read_stopwords(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [w.strip().lower() for w in fh if w.strip()]


@dataclass
class IdMaps:
    users: dict[str, int]
    items: dict[str, int]
    source_items: dict[str, int]


def prepare(target_rows, source_rows, pair_texts, item_texts, rng: np.random.Generator,
            L: int = 8000, stopwords=(), max_doc_len: int = 300,
            min_user_interactions: int = 0) -> tuple[Dataset, IdMaps]:
    """Build a split, encoded :class:`Dataset` from raw-id rows and texts.

    Rows are (user, item, sort_key). Users are those of the target domain
    (ids assigned in sorted raw-id order); source rows of other users are
    dropped. The vocabulary is built only from text that training may see:
    pair documents of training pairs and item-level texts.
    """
    counts = Counter(u for u, _ in {(r[0], r[1]) for r in target_rows})
    keep = {u for u, c in counts.items() if c >= min_user_interactions}
    target_rows = [r for r in target_rows if r[0] in keep]
    if not target_rows:
        raise DataError("no target interactions left")
    umap = {u: k for k, u in enumerate(sorted({r[0] for r in target_rows}))}
    imap = {i: k for k, i in enumerate(sorted({r[1] for r in target_rows}))}
    source_rows = [r for r in source_rows if r[0] in umap]
    smap = {j: k for k, j in enumerate(sorted({r[1] for r in source_rows}))}

    ordered = sorted(enumerate(target_rows), key=lambda t: (umap[t[1][0]], t[1][2], t[0]))
    pairs = np.asarray([(umap[u], imap[i]) for _, (u, i, _) in ordered], dtype=np.int64).reshape(-1, 2)
    train, val, test = loo_split(pairs, rng)

    source = [[] for _ in umap]
    for _, (u, j, _) in sorted(enumerate(source_rows), key=lambda t: (t[1][2], t[0])):
        jj = smap[j]
        if jj not in source[umap[u]]:
            source[umap[u]].append(jj)

    inv_u = {v: k for k, v in umap.items()}
    inv_i = {v: k for k, v in imap.items()}
    train_pair_texts = {}
    for u, i in train.tolist():
        t = pair_texts.get((inv_u[u], inv_i[i]))
        if t is not None:
            train_pair_texts[(u, i)] = t
    own_item_texts = {imap[i]: t for i, t in item_texts.items() if i in imap}
    corpus = list(train_pair_texts.values()) + list(own_item_texts.values())
    if not corpus:
        raise DataError("no documents available for training pairs or items")
    vocab = build_vocabulary(corpus, L, stopwords)

    doc_store = {k: encode_document(t, vocab, max_doc_len) for k, t in train_pair_texts.items()}
    item_docs = build_item_docs(train, doc_store, {i: encode_document(t, vocab, max_doc_len)
                                                   for i, t in own_item_texts.items()})
    ds = Dataset(len(umap), len(imap), len(smap), train, val, test, source,
                 doc_store, item_docs, max_doc_len, vocab)
    return ds, IdMaps(umap, imap, smap)


def build_item_docs(train, doc_store, item_texts=None) -> dict:
    """Item text followed by the item's training pair documents, in training order."""
    parts: dict[int, list] = defaultdict(list)
    for i, ids in (item_texts or {}).items():
        parts[i].append(ids)
    for u, i in np.asarray(train).tolist():
        d = doc_store.get((u, i))
        if d is not None:
            parts[i].append(d)
    return {i: np.concatenate(p).astype(np.int64) for i, p in sorted(parts.items())}


# --------------------------------------------------------------------------
# Prepared dataset directories
# --------------------------------------------------------------------------


def _ids(arr) -> str:
    return " ".join(map(str, np.asarray(arr).tolist()))


def _parse_ids(s: str) -> np.ndarray:
    return np.asarray([int(x) for x in s.split()], dtype=np.int64)


def save_dataset(ds: Dataset, root, maps: IdMaps | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "meta.txt").write_text(
        f"n_users={ds.n_users}\nn_target={ds.n_target}\nn_source={ds.n_source}\n"
        f"L={ds.L}\nmax_doc_len={ds.max_doc_len}\n")
    for name in ("train", "val", "test"):
        arr = getattr(ds, name)
        (root / f"{name}.tsv").write_text("".join(f"{u}\t{i}\n" for u, i in arr.tolist()))
    (root / "source.tsv").write_text("".join(f"{u}\t{j}\n" for u, js in enumerate(ds.source) for j in js))
    (root / "pair_docs.tsv").write_text(
        "".join(f"{u}\t{i}\t{_ids(v)}\n" for (u, i), v in sorted(ds.doc_store.items())))
    (root / "item_docs.tsv").write_text("".join(f"{i}\t{_ids(v)}\n" for i, v in sorted(ds.item_docs.items())))
    if ds.vocab is not None:
        (root / "vocab.tsv").write_text(
            "".join(f"{w}\t{ds.vocab.token_to_id[w]}\t{ds.vocab.scores[w]!r}\n" for w in ds.vocab.tokens))
    if maps is not None:
        for fname, mp in (("user_map.tsv", maps.users), ("item_map.tsv", maps.items),
                          ("source_item_map.tsv", maps.source_items)):
            (root / fname).write_text("".join(f"{raw}\t{k}\n" for raw, k in sorted(mp.items(), key=lambda t: t[1])))


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "meta.txt").exists():
        raise DataError(f"{root}: not a prepared dataset (meta.txt missing)")
    meta = dict(line.split("=", 1) for line in (root / "meta.txt").read_text().split())
    meta = {k: int(v) for k, v in meta.items()}

    def pairs(name):
        rows = [line.split("\t") for line in (root / f"{name}.tsv").read_text().splitlines() if line]
        return np.asarray([(int(a), int(b)) for a, b in rows], dtype=np.int64).reshape(-1, 2)

    source = [[] for _ in range(meta["n_users"])]
    for u, j in pairs("source").tolist():
        source[u].append(j)
    doc_store = {}
    for line in (root / "pair_docs.tsv").read_text().splitlines():
        u, i, ids = (line.split("\t") + [""])[:3]
        doc_store[(int(u), int(i))] = _parse_ids(ids)
    item_docs = {}
    for line in (root / "item_docs.tsv").read_text().splitlines():
        i, ids = (line.split("\t") + [""])[:2]
        item_docs[int(i)] = _parse_ids(ids)
    vocab = None
    if (root / "vocab.tsv").exists():
        tid, sc = {}, {}
        for line in (root / "vocab.tsv").read_text().splitlines():
            w, k, s = line.split("\t")
            tid[w] = int(k)
            sc[w] = float(s)
        vocab = Vocabulary(tid, sc)
    return Dataset(meta["n_users"], meta["n_target"], meta["n_source"], pairs("train"), pairs("val"),
                   pairs("test"), source, doc_store, item_docs, meta["max_doc_len"], vocab, meta["L"])
