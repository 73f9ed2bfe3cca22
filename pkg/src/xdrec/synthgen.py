"""Planted-signal two-domain datasets.

Users, target items and source items get unit latent vectors. A user's target
affinity mixes three parts: a plain collaborative part, a cross-domain part
computed from the source items the user consumed, and a text part that fires
when the item's topic is the user's preferred topic. Each target item has a
short document drawn mostly from its topic's private words, so the text and
source branches only help if they pick up the part of the signal they carry.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from xdrec.data import Dataset, IdMaps, prepare, save_dataset


@dataclass
class SynthConfig:
    m: int = 300
    n_target: int = 400
    n_source: int = 300
    k: int = 8
    vocab_size: int = 600
    n_topics: int = 10
    topic_words: int = 20          # private words per topic; the rest of the vocabulary is background
    words_per_doc: int = 12
    noise: float = 0.2             # share of document tokens drawn uniformly from the whole vocabulary
    w_x: float = 0.4
    w_t: float = 0.3
    interactions: int = 12         # per user; see interactions_max
    interactions_max: int = 0      # > interactions: per-user count drawn uniformly from [interactions, max]
    source_per_user: int = 10
    source_taste_corr: float = 0.0
    # > 0: source items and the cross-domain part of target items live in
    # n_clusters one-hot clusters; each user's source taste covers
    # clusters_per_user of them
    n_clusters: int = 0
    clusters_per_user: int = 3
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.w_x <= 1 and 0 <= self.w_t <= 1 and self.w_x + self.w_t <= 1 + 1e-12):
            raise ValueError("need w_x, w_t in [0, 1] with w_x + w_t <= 1")
        counts = (self.m, self.n_target, self.n_source, self.k, self.vocab_size, self.n_topics,
                  self.topic_words, self.words_per_doc, self.interactions, self.source_per_user)
        if min(counts) <= 0:
            raise ValueError("all counts must be positive")
        if self.n_topics * self.topic_words > self.vocab_size:
            raise ValueError("topic vocabularies do not fit in vocab_size")
        if max(self.interactions, self.interactions_max) > self.n_target:
            raise ValueError("more positives per user than target items")
        if self.source_per_user > self.n_source:
            raise ValueError("more source items per user than source items")
        if not 0 <= self.noise <= 1 or not -1 <= self.source_taste_corr <= 1:
            raise ValueError("noise must be in [0, 1] and source_taste_corr in [-1, 1]")

    def manifest(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_manifest(cls, text: str) -> "SynthConfig":
        fields = cls.__dataclass_fields__
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ValueError(f"unknown synth option {key!r}")
            kw[key] = json.loads(val) if fields[key].type in ("float", "int") else val
        return cls(**kw)


@dataclass
class RawSynth:
    target_rows: list
    source_rows: list
    item_texts: dict
    user_topic: np.ndarray
    item_topic: np.ndarray
    # cluster mode only
    item_cluster: np.ndarray | None = None
    source_cluster: np.ndarray | None = None


def _sphere(rng, n, k):
    x = rng.normal(size=(n, k))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _word(t: int, w: int) -> str:
    return f"t{t:02d}w{w:03d}"


def generate_raw(cfg: SynthConfig, rng: np.random.Generator) -> RawSynth:
    theta = _sphere(rng, cfg.m, cfg.k)
    phi = _sphere(rng, cfg.n_target, cfg.k)
    psi = _sphere(rng, cfg.n_source, cfg.k)
    src_cluster = tgt_cluster = None
    if cfg.n_clusters:
        src_cluster = rng.integers(0, cfg.n_clusters, size=cfg.n_source)
        tgt_cluster = rng.integers(0, cfg.n_clusters, size=cfg.n_target)
        psi = np.eye(cfg.n_clusters)[src_cluster]
        tgt_cross = np.eye(cfg.n_clusters)[tgt_cluster]
        taste = np.zeros((cfg.m, cfg.n_clusters))
        for u in range(cfg.m):
            taste[u, rng.choice(cfg.n_clusters, size=cfg.clusters_per_user, replace=False)] = 1.0
        # jitter breaks ties uniformly inside the preferred clusters
        src_score = taste @ psi.T + 0.5 * rng.random((cfg.m, cfg.n_source))
    else:
        tgt_cross = phi
        rho = cfg.source_taste_corr
        taste = rho * theta + np.sqrt(1 - rho * rho) * _sphere(rng, cfg.m, cfg.k)
        src_score = taste @ psi.T
    sources = np.argsort(-src_score, axis=1, kind="stable")[:, : cfg.source_per_user]

    item_topic = rng.integers(0, cfg.n_topics, size=cfg.n_target)
    user_topic = rng.integers(0, cfg.n_topics, size=cfg.m)
    cross = psi[sources].mean(axis=1) @ tgt_cross.T
    match = (user_topic[:, None] == item_topic[None, :]).astype(np.float64)
    affinity = (1 - cfg.w_x - cfg.w_t) * (theta @ phi.T) + cfg.w_x * cross + cfg.w_t * match

    if cfg.interactions_max > cfg.interactions:
        n_pos = rng.integers(cfg.interactions, cfg.interactions_max + 1, size=cfg.m)
    else:
        n_pos = np.full(cfg.m, cfg.interactions)
    ranked = np.argsort(-affinity, axis=1, kind="stable")

    target_rows = [(f"u{u:05d}", f"i{i:05d}", float(r)) for u in range(cfg.m)
                   for r, i in enumerate(ranked[u, : n_pos[u]].tolist())]
    source_rows = [(f"u{u:05d}", f"s{j:05d}", float(r)) for u in range(cfg.m)
                   for r, j in enumerate(sources[u].tolist())]

    vocab = [_word(t, w) for t in range(cfg.n_topics) for w in range(cfg.topic_words)]
    vocab += [f"bg{w:04d}" for w in range(cfg.vocab_size - len(vocab))]
    item_texts = {}
    for i in range(cfg.n_target):
        t = item_topic[i]
        noisy = rng.random(cfg.words_per_doc) < cfg.noise
        topical = rng.integers(0, cfg.topic_words, size=cfg.words_per_doc)
        uniform = rng.integers(0, cfg.vocab_size, size=cfg.words_per_doc)
        toks = [vocab[u] if nz else _word(t, w) for nz, w, u in zip(noisy, topical, uniform)]
        item_texts[f"i{i:05d}"] = " ".join(toks)
    return RawSynth(target_rows, source_rows, item_texts, user_topic, item_topic, tgt_cluster, src_cluster)


def generate(cfg: SynthConfig, rng: np.random.Generator | None = None,
             max_doc_len: int = 300) -> Dataset:
    """Draw a dataset and push it through the regular preparation path."""
    return generate_with_maps(cfg, rng, max_doc_len)[0]


def generate_with_maps(cfg: SynthConfig, rng=None, max_doc_len: int = 300) -> tuple[Dataset, IdMaps]:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    raw = generate_raw(cfg, rng)
    return prepare(raw.target_rows, raw.source_rows, {}, raw.item_texts, rng,
                   L=cfg.vocab_size, max_doc_len=max_doc_len)


def write_raw(cfg: SynthConfig, root, rng: np.random.Generator | None = None) -> Path:
    """Emit raw files in the ingestion formats plus a key=value manifest."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    raw = generate_raw(cfg, rng)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "target.tsv").write_text("".join(f"{u}\t{i}\t{int(t)}\n" for u, i, t in raw.target_rows))
    (root / "source.tsv").write_text("".join(f"{u}\t{j}\t{int(t)}\n" for u, j, t in raw.source_rows))
    (root / "docs.tsv").write_text("".join(f"{i}\t{txt}\n" for i, txt in raw.item_texts.items()))
    (root / "stopwords.txt").write_text("")
    (root / "synth.cfg").write_text(cfg.manifest())
    return root


def write_dataset(cfg: SynthConfig, root, max_doc_len: int = 300) -> Path:
    """Raw files under ``root/raw`` and the prepared dataset under ``root``."""
    root = Path(root)
    write_raw(cfg, root / "raw")
    ds, maps = generate_with_maps(cfg, max_doc_len=max_doc_len)
    save_dataset(ds, root, maps)
    return root
