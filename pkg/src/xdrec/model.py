"""TMH forward and backward passes.

The graph has three branches over shared user/item embeddings:

* memory branch: user/item-conditioned attention over the words of a document,
  reading out a weighted sum of external word memories (``o``),
* transfer branch: target-item-conditioned attention over the user's source
  domain items, followed by a ReLU (``c``),
* CF branch: one ReLU hidden layer over the concatenated embeddings (``z``).

The active branch outputs are linearly mapped, concatenated and scored by a
logistic unit. Everything is batched: documents and source lists are padded
and carried with boolean masks. Empty documents / source lists yield a zero
branch output and no attention weights.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from xdrec.numerics import (
    PARAM_ORDER,
    GradCheckReport,
    ModelParams,
    ShapeError,
    SparseRows,
    grad_check,
    masked_softmax,
    scatter_rows,
    sigmoid,
    softplus,
)


class Variant(enum.IntEnum):
    FULL = 0
    NO_M = 1      # transfer + CF
    NO_T = 2      # memory + CF
    CF_ONLY = 3

    @property
    def uses_memory(self) -> bool:
        return self in (Variant.FULL, Variant.NO_T)

    @property
    def uses_transfer(self) -> bool:
        return self in (Variant.FULL, Variant.NO_M)

    @classmethod
    def parse(cls, name: str) -> "Variant":
        key = name.strip().upper().replace("-", "_").replace("\\", "_")
        aliases = {"TMH": "FULL", "TMH_M": "NO_M", "TMH_T": "NO_T", "TMH_M_T": "CF_ONLY", "CF": "CF_ONLY"}
        return cls[aliases.get(key, key)]


def fusion_width(variant: Variant, d: int) -> int:
    return d * (1 + int(variant.uses_memory) + int(variant.uses_transfer))


@dataclass
class Batch:
    users: np.ndarray      # (B,)
    items: np.ndarray      # (B,)
    docs: np.ndarray       # (B, l) token ids, padded
    doc_mask: np.ndarray   # (B, l) bool
    srcs: np.ndarray       # (B, s) source item ids, padded
    src_mask: np.ndarray   # (B, s) bool
    labels: np.ndarray | None = None

    def __len__(self):
        return self.users.shape[0]


def pad(seqs, min_width: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad integer sequences with 0 and return (ids, mask)."""
    width = max([len(s) for s in seqs] + [min_width])
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
        mask[r, : len(s)] = True
    return ids, mask


def make_batch(users, items, docs, srcs, labels=None) -> Batch:
    doc_ids, doc_mask = pad(docs)
    src_ids, src_mask = pad(srcs)
    return Batch(
        np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64),
        doc_ids, doc_mask, src_ids, src_mask,
        None if labels is None else np.asarray(labels, dtype=np.float64),
    )


@dataclass
class ForwardCache:
    variant: Variant
    batch: Batch
    dims: tuple
    x_u: np.ndarray
    x_i: np.ndarray
    x_ui: np.ndarray
    # memory branch
    m_k: np.ndarray | None = None       # (B, l, 2d)
    c_k: np.ndarray | None = None       # (B, l, d)
    q: np.ndarray | None = None         # (B, l)
    p: np.ndarray | None = None         # (B, l)
    o: np.ndarray | None = None         # (B, d)
    # transfer branch
    x_j: np.ndarray | None = None       # (B, s, d)
    a: np.ndarray | None = None         # (B, s)
    alpha: np.ndarray | None = None     # (B, s)
    c_pre: np.ndarray | None = None     # (B, d)
    c: np.ndarray | None = None         # (B, d)
    # CF branch and fusion
    z_pre: np.ndarray | None = None
    z: np.ndarray | None = None
    y: np.ndarray | None = None
    logit: np.ndarray | None = None
    r_hat: np.ndarray | None = None
    beta: float = 1.0
    tnet_beta: float = 1.0

    def word_weights(self, row: int = 0) -> np.ndarray:
        return self.p[row][self.batch.doc_mask[row]] if self.p is not None else np.zeros(0)

    def source_weights(self, row: int = 0) -> np.ndarray:
        return self.alpha[row][self.batch.src_mask[row]] if self.alpha is not None else np.zeros(0)


# --------------------------------------------------------------------------
# Branches
# --------------------------------------------------------------------------


def _check_ids(name, ids, mask, bound):
    valid = ids[mask] if mask is not None else ids
    if valid.size and (valid.min() < 0 or valid.max() >= bound):
        raise IndexError(f"{name} id out of range [0, {bound})")


def mnet_forward(x_u, x_i, docs, doc_mask, params: ModelParams, beta: float):
    """Memory branch. Returns (o, p, q, m_k, c_k), batched."""
    _check_ids("token", docs, doc_mask, params.A.shape[0])
    x_ui = np.concatenate([x_u, x_i], axis=-1)
    m_k = params.A[docs]
    c_k = params.C[docs]
    q = np.einsum("bld,bd->bl", m_k, x_ui)
    p = masked_softmax(q, doc_mask, beta)
    o = np.einsum("bl,bld->bd", p, c_k)
    return o, p, q, m_k, c_k


def tnet_forward(x_i, srcs, src_mask, params: ModelParams, temperature: float = 1.0):
    """Transfer branch. Returns (c, alpha, a, c_pre, x_j), batched."""
    _check_ids("source item", srcs, src_mask, params.H.shape[0])
    x_j = params.H[srcs]
    a = np.einsum("bsd,bd->bs", x_j, x_i)
    alpha = masked_softmax(a, src_mask, temperature)
    c_pre = np.einsum("bs,bsd->bd", alpha, x_j)
    return np.maximum(c_pre, 0), alpha, a, c_pre, x_j


def cfnet_forward(x_ui, params: ModelParams):
    """CF branch. Returns (z, z_pre)."""
    z_pre = x_ui @ params.W + params.b
    return np.maximum(z_pre, 0), z_pre


def fuse_predict(o, z, c, params: ModelParams, variant: Variant):
    """Shared output layer. Returns (r_hat, logit, y)."""
    d = params.W_z.shape[0]
    if params.h.shape[0] != fusion_width(variant, d):
        raise ShapeError(f"h has width {params.h.shape[0]}, variant {variant.name} needs {fusion_width(variant, d)}")
    parts = []
    if variant.uses_memory:
        parts.append(o @ params.W_o.T)
    parts.append(z @ params.W_z.T)
    if variant.uses_transfer:
        parts.append(c @ params.W_c.T)
    y = np.concatenate(parts, axis=-1)
    logit = y @ params.h
    return sigmoid(logit), logit, y


# --------------------------------------------------------------------------
# Full graph
# --------------------------------------------------------------------------


def forward_batch(batch: Batch, params: ModelParams, variant: Variant,
                  beta: float | None = None, tnet_beta: float = 1.0) -> ForwardCache:
    m, n_t, _, d, _ = params.dims
    beta = d ** -0.5 if beta is None else beta
    _check_ids("user", batch.users, None, m)
    _check_ids("item", batch.items, None, n_t)
    x_u = params.P[batch.users]
    x_i = params.Q[batch.items]
    x_ui = np.concatenate([x_u, x_i], axis=-1)
    cache = ForwardCache(variant, batch, params.dims, x_u, x_i, x_ui, beta=beta, tnet_beta=tnet_beta)
    o = c = None
    if variant.uses_memory:
        o, cache.p, cache.q, cache.m_k, cache.c_k = mnet_forward(x_u, x_i, batch.docs, batch.doc_mask, params, beta)
        cache.o = o
    if variant.uses_transfer:
        c, cache.alpha, cache.a, cache.c_pre, cache.x_j = tnet_forward(x_i, batch.srcs, batch.src_mask, params, tnet_beta)
        cache.c = c
    cache.z, cache.z_pre = cfnet_forward(x_ui, params)
    cache.r_hat, cache.logit, cache.y = fuse_predict(o, cache.z, c, params, variant)
    return cache


def forward(u, i, doc, sources, params: ModelParams, variant: Variant,
            beta: float | None = None, tnet_beta: float = 1.0) -> tuple[float, ForwardCache]:
    """Single-example forward pass; returns the predicted probability and cache."""
    cache = forward_batch(make_batch([u], [i], [list(doc)], [list(sources)]), params, variant, beta, tnet_beta)
    return float(cache.r_hat[0]), cache


def predict(batch: Batch, params: ModelParams, variant: Variant, beta=None, tnet_beta=1.0) -> np.ndarray:
    return forward_batch(batch, params, variant, beta, tnet_beta).logit


def bce_loss(r_hat=None, r=None, logit=None):
    """Binary cross-entropy. Pass ``logit`` for the stable form."""
    if logit is not None:
        logit = np.asarray(logit)
        r = np.asarray(r, dtype=logit.dtype)
        # -[r log s(x) + (1-r) log(1-s(x))] = softplus(x) - r x
        return softplus(logit) - r * logit
    r_hat = np.asarray(r_hat, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -(np.where(r > 0, r * np.log(r_hat), 0.0) + np.where(r < 1, (1 - r) * np.log1p(-r_hat), 0.0))


def batch_loss(batch: Batch, params: ModelParams, variant: Variant, beta=None, tnet_beta=1.0) -> float:
    cache = forward_batch(batch, params, variant, beta, tnet_beta)
    return float(np.mean(bce_loss(logit=cache.logit, r=batch.labels)))


def backward(cache: ForwardCache, labels, params: ModelParams, variant: Variant | None = None,
             reduction: str = "mean") -> dict:
    """Gradients of the batch BCE loss (mean or sum over examples).

    Embedding and memory tables come back as :class:`SparseRows` holding only
    the rows this batch touched; groups of inactive branches are omitted.
    """
    variant = cache.variant if variant is None else variant
    if variant != cache.variant:
        raise ValueError(f"cache built for {cache.variant.name}, backward asked for {variant.name}")
    if cache.dims != params.dims or cache.y.shape[1] != params.h.shape[0]:
        raise ShapeError("stale cache: parameter shapes changed since forward")
    b = cache.batch
    d = params.dims[3]
    labels = np.asarray(labels, dtype=cache.logit.dtype).reshape(-1)
    scale = 1.0 / labels.shape[0] if reduction == "mean" else 1.0
    g = (cache.r_hat - labels) * scale          # dL/dlogit per example

    grads: dict = {"h": cache.y.T @ g}
    dy = g[:, None] * params.h[None, :]
    col = 0
    dx_ui = np.zeros_like(cache.x_ui)
    dx_i_extra = None

    if variant.uses_memory:
        dyo = dy[:, col:col + d]
        col += d
        grads["W_o"] = dyo.T @ cache.o
        do = dyo @ params.W_o
        dc_k = cache.p[:, :, None] * do[:, None, :]
        dp = np.einsum("bld,bd->bl", cache.c_k, do)
        dq = cache.beta * cache.p * (dp - (cache.p * dp).sum(axis=1, keepdims=True))
        dx_ui += np.einsum("bl,bld->bd", dq, cache.m_k)
        dm_k = dq[:, :, None] * cache.x_ui[:, None, :]
        mask = b.doc_mask
        grads["A"] = scatter_rows(b.docs[mask], dm_k[mask])
        grads["C"] = scatter_rows(b.docs[mask], dc_k[mask])

    dyz = dy[:, col:col + d]
    col += d
    grads["W_z"] = dyz.T @ cache.z
    dz_pre = (dyz @ params.W_z) * (cache.z_pre > 0)
    grads["W"] = cache.x_ui.T @ dz_pre
    grads["b"] = dz_pre.sum(axis=0)
    dx_ui += dz_pre @ params.W.T

    if variant.uses_transfer:
        dyc = dy[:, col:col + d]
        grads["W_c"] = dyc.T @ cache.c
        dc_pre = (dyc @ params.W_c) * (cache.c_pre > 0)
        dx_j = cache.alpha[:, :, None] * dc_pre[:, None, :]
        dalpha = np.einsum("bsd,bd->bs", cache.x_j, dc_pre)
        da = cache.tnet_beta * cache.alpha * (dalpha - (cache.alpha * dalpha).sum(axis=1, keepdims=True))
        dx_i_extra = np.einsum("bs,bsd->bd", da, cache.x_j)
        dx_j += da[:, :, None] * cache.x_i[:, None, :]
        mask = b.src_mask
        grads["H"] = scatter_rows(b.srcs[mask], dx_j[mask])

    grads["P"] = scatter_rows(b.users, dx_ui[:, :d])
    dx_i = dx_ui[:, d:]
    if dx_i_extra is not None:
        dx_i = dx_i + dx_i_extra
    grads["Q"] = scatter_rows(b.items, dx_i)
    return grads


# --------------------------------------------------------------------------
# Gradient-check fixtures
# --------------------------------------------------------------------------


def active_groups(variant: Variant) -> tuple[str, ...]:
    skip = set()
    if not variant.uses_memory:
        skip |= {"A", "C", "W_o"}
    if not variant.uses_transfer:
        skip |= {"H", "W_c"}
    return tuple(k for k in PARAM_ORDER if k not in skip)


def random_fixture(variant: Variant, rng: np.random.Generator, dims=(6, 7, 8, 20, 30),
                   batch_size: int = 6, max_len: int = 6, scale: float = 0.25) -> tuple[ModelParams, Batch]:
    """Small float64 parameters and a labelled batch. ``dims`` is
    (m, n_T, n_S, d, L); with d = 20 every group has at least 20 entries.
    Row 0 has an empty document and row 1 an empty source list, so masking is
    exercised."""
    m, n_t, n_s, d, L = dims
    shapes = {
        "P": (m, d), "Q": (n_t, d), "H": (n_s, d), "A": (L, 2 * d), "C": (L, d),
        "W": (2 * d, d), "b": (d,), "W_o": (d, d), "W_z": (d, d), "W_c": (d, d),
        "h": (fusion_width(variant, d),),
    }
    params = ModelParams(**{k: rng.normal(0.0, scale, size=shapes[k]) for k in PARAM_ORDER})
    docs = [rng.integers(0, L, size=rng.integers(1, max_len + 1)).tolist() for _ in range(batch_size)]
    srcs = [rng.integers(0, n_s, size=rng.integers(1, max_len + 1)).tolist() for _ in range(batch_size)]
    docs[0], srcs[min(1, batch_size - 1)] = [], []
    batch = make_batch(rng.integers(0, m, size=batch_size), rng.integers(0, n_t, size=batch_size),
                       docs, srcs, rng.integers(0, 2, size=batch_size))
    return params, batch


def check_gradients(variant: Variant, rng: np.random.Generator, eps: float = 1e-5,
                    n_coords: int = 20, **fixture) -> GradCheckReport:
    """Central-difference check of :func:`backward` on one random fixture."""
    params, batch = random_fixture(variant, rng, **fixture)
    grads = backward(forward_batch(batch, params, variant), batch.labels, params, variant)
    return grad_check(lambda p: batch_loss(batch, p, variant), grads, params, eps=eps,
                      n_coords=n_coords, rng=rng, groups=active_groups(variant))
