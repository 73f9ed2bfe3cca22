"""Dense kernels, parameter containers, lazy Adam and finite-difference checks.

Everything here works on plain numpy arrays. The model code is dtype-generic:
float64 parameters are used for gradient checking, float32 for training and
for checkpoints.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class NumericalError(ArithmeticError):
    """A NaN/Inf showed up where a finite value is required."""


# --------------------------------------------------------------------------
# Hyperparameters
# --------------------------------------------------------------------------


@dataclass
class Hyperparams:
    d: int = 75
    L: int = 8000
    beta: float | None = None
    lr: float = 0.001
    batch_size: int = 128
    neg_ratio: int = 1
    max_doc_len: int = 300
    epochs: int = 30
    seed: int = 0
    # softmax temperature of the transfer branch
    tnet_beta: float = 1.0

    def __post_init__(self):
        if self.d <= 0 or self.L <= 0 or self.batch_size <= 0:
            raise ValueError("d, L and batch_size must be positive")
        if self.beta is None:
            self.beta = self.d ** -0.5
        if self.neg_ratio < 1 or self.max_doc_len < 1:
            raise ValueError("neg_ratio and max_doc_len must be >= 1")
        if not self.beta > 0 or not self.tnet_beta > 0:
            raise ValueError("attention temperatures must be > 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")

    def replace(self, **changes) -> "Hyperparams":
        # beta follows d unless explicitly overridden
        if "d" in changes and "beta" not in changes and math.isclose(self.beta, self.d ** -0.5):
            changes["beta"] = None
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# Kernels
# --------------------------------------------------------------------------


def scaled_softmax(scores, beta: float = 1.0) -> np.ndarray:
    """Softmax of ``beta * scores`` along the last axis, max-subtracted."""
    s = np.asarray(scores)
    if s.size == 0 or s.shape[-1] == 0:
        raise ValueError("empty attention target")
    if not beta > 0:
        raise ValueError("beta must be > 0")
    z = beta * (s - s.max(axis=-1, keepdims=True))
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax(scores: np.ndarray, mask: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """Row-wise scaled softmax over the entries where ``mask`` is True.

    Rows with no valid entry come back as all zeros; padded entries are zero.
    """
    neg = np.where(mask, scores, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(beta * (scores - m)), 0.0)
    tot = e.sum(axis=-1, keepdims=True)
    return e / np.where(tot > 0, tot, 1.0)


def relu(v):
    return np.maximum(v, 0)


def sigmoid(x):
    """Logistic function, evaluated without overflow for large |x|."""
    x = np.asarray(x)
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def softplus(x):
    """log(1 + exp(x)), stable in both tails."""
    x = np.asarray(x)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def _check_dims(name_a, a, name_b, b, axis_a=-1, axis_b=0):
    if a.shape[axis_a] != b.shape[axis_b]:
        raise ShapeError(f"dimension mismatch: {name_a}{a.shape} vs {name_b}{b.shape}")


def affine(Wt, x, bias) -> np.ndarray:
    """``Wt @ x + bias`` with explicit shape errors."""
    Wt, x, bias = np.asarray(Wt), np.asarray(x), np.asarray(bias)
    _check_dims("Wt", Wt, "x", x)
    if bias.shape[-1] != Wt.shape[0]:
        raise ShapeError(f"dimension mismatch: Wt{Wt.shape} vs bias{bias.shape}")
    return Wt @ x + bias


def dot(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: a{a.shape} vs b{b.shape}")
    return float(np.dot(a, b))


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------

PARAM_ORDER = ("P", "Q", "H", "A", "C", "W", "b", "W_o", "W_z", "W_c", "h")
# groups whose gradients arrive as touched rows only
SPARSE_GROUPS = ("P", "Q", "H", "A", "C")


@dataclass
class ModelParams:
    P: np.ndarray    # users, m x d
    Q: np.ndarray    # target items, n_T x d
    H: np.ndarray    # source items, n_S x d
    A: np.ndarray    # internal (key) word memory, L x 2d
    C: np.ndarray    # external (value) word memory, L x d
    W: np.ndarray    # 2d x d, z = relu(x_ui @ W + b)
    b: np.ndarray    # d
    W_o: np.ndarray  # d x d
    W_z: np.ndarray  # d x d
    W_c: np.ndarray  # d x d
    h: np.ndarray    # fusion width (3d, 2d or d)

    @property
    def dims(self) -> tuple[int, int, int, int, int]:
        """(m, n_T, n_S, d, L)."""
        return (self.P.shape[0], self.Q.shape[0], self.H.shape[0], self.P.shape[1], self.A.shape[0])

    @property
    def dtype(self):
        return self.P.dtype

    def items(self):
        return ((k, getattr(self, k)) for k in PARAM_ORDER)

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(**{k: v.astype(dtype) for k, v in self.items()})

    def validate(self) -> None:
        m, n_t, n_s, d, L = self.dims
        expected = {
            "P": (m, d), "Q": (n_t, d), "H": (n_s, d), "A": (L, 2 * d), "C": (L, d),
            "W": (2 * d, d), "b": (d,), "W_o": (d, d), "W_z": (d, d), "W_c": (d, d),
        }
        for k, shape in expected.items():
            if getattr(self, k).shape != shape:
                raise ShapeError(f"{k} has shape {getattr(self, k).shape}, expected {shape}")
        if self.h.ndim != 1 or self.h.shape[0] not in (d, 2 * d, 3 * d):
            raise ShapeError(f"h has shape {self.h.shape}, expected a multiple of d={d}")

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for _, v in self.items())


class SparseRows(NamedTuple):
    """Gradient restricted to a set of unique row indices."""

    rows: np.ndarray
    values: np.ndarray

    def to_dense(self, shape, dtype=np.float64) -> np.ndarray:
        out = np.zeros(shape, dtype=dtype)
        out[self.rows] = self.values
        return out


def scatter_rows(index: np.ndarray, values: np.ndarray) -> SparseRows:
    """Sum ``values`` rows sharing the same ``index`` into unique rows."""
    index = np.asarray(index).reshape(-1)
    values = values.reshape(index.shape[0], -1)
    rows, inv = np.unique(index, return_inverse=True)
    acc = np.zeros((rows.shape[0], values.shape[1]), dtype=values.dtype)
    np.add.at(acc, inv, values)
    return SparseRows(rows, acc)


def densify(grads: dict, params: ModelParams) -> dict[str, np.ndarray]:
    out = {}
    for k, v in params.items():
        g = grads.get(k)
        if g is None:
            out[k] = np.zeros_like(v)
        elif isinstance(g, SparseRows):
            out[k] = g.to_dense(v.shape, v.dtype)
        else:
            out[k] = g
    return out


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
        )

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> tuple[ModelParams, AdamState]:
    """One Adam update, in place on ``params`` and ``state``.

    ``grads`` maps group name to either a dense array or :class:`SparseRows`.
    Sparse groups only move their touched rows (lazy moments); the bias
    correction always uses the global step counter. Missing groups count as
    zero gradient.
    """
    for k, g in grads.items():
        vals = g.values if isinstance(g, SparseRows) else g
        if not np.isfinite(vals).all():
            raise NumericalError(f"non-finite gradient in parameter group {k!r}")

    state.t += 1
    t = state.t
    step = lr * math.sqrt(1.0 - beta2 ** t) / (1.0 - beta1 ** t)

    for k, g in grads.items():
        p, m, v = getattr(params, k), state.m[k], state.v[k]
        if isinstance(g, SparseRows):
            if g.rows.size == 0:
                continue
            r = g.rows
            gv = g.values.astype(p.dtype, copy=False)
            m[r] = beta1 * m[r] + (1 - beta1) * gv
            v[r] = beta2 * v[r] + (1 - beta2) * gv * gv
            # eps is applied to the bias-corrected second moment
            p[r] -= step * m[r] / (np.sqrt(v[r]) + eps * math.sqrt(1.0 - beta2 ** t))
        else:
            g = np.asarray(g, dtype=p.dtype)
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            p -= step * m / (np.sqrt(v) + eps * math.sqrt(1.0 - beta2 ** t))
    return params, state


# --------------------------------------------------------------------------
# Gradient check
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    eps: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    n_coords: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst <= tol


# central differences of an O(1) double-precision loss carry ~1e-11 of
# round-off, so gradients below this floor are compared in absolute terms
GRAD_FLOOR = 1e-6


def relative_error(analytic: float, numeric: float, floor: float = GRAD_FLOOR) -> float:
    """|a - n| / max(|a|, |n|, floor); exactly 0 when both agree exactly."""
    diff = abs(analytic - numeric)
    if diff == 0.0:
        return 0.0
    return diff / max(abs(analytic), abs(numeric), floor)


def grad_check(loss_fn: Callable[[ModelParams], float], grads: dict, params: ModelParams,
               eps: float = 1e-5, n_coords: int = 20,
               rng: np.random.Generator | None = None,
               groups=PARAM_ORDER) -> GradCheckReport:
    """Compare analytic ``grads`` against central differences of ``loss_fn``.

    For each group, ``n_coords`` coordinates are sampled (all of them if the
    group is smaller). For embedding-like groups, coordinates are drawn from
    the rows the analytic gradient touches when there are any, because the
    rest are structurally zero; a handful of untouched coordinates is checked
    as well.
    """
    if params.dtype != np.float64:
        raise TypeError("gradient checking needs float64 parameters")
    rng = rng if rng is not None else np.random.default_rng(0)
    dense = densify(grads, params)
    report = GradCheckReport(eps=eps)
    for k in groups:
        arr = getattr(params, k)
        g = dense[k]
        flat = arr.reshape(-1)
        coords = _pick_coords(k, arr, grads.get(k), n_coords, rng)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = loss_fn(params)
            flat[c] = orig - eps
            fm = loss_fn(params)
            flat[c] = orig
            num = (fp - fm) / (2 * eps)
            worst = max(worst, relative_error(float(g.reshape(-1)[c]), num))
        report.max_rel_err[k] = worst
        report.n_coords[k] = len(coords)
    return report


def _pick_coords(name, arr, g, n, rng) -> np.ndarray:
    size = arr.size
    if size <= n:
        return np.arange(size)
    if isinstance(g, SparseRows) and g.rows.size:
        ncol = arr.shape[1]
        touched = (g.rows[:, None] * ncol + np.arange(ncol)[None, :]).reshape(-1)
        picked = rng.choice(touched, size=min(n, touched.size), replace=False)
        extra = rng.choice(size, size=max(2, n // 5), replace=False)
        coords = np.unique(np.concatenate([picked, extra]))
        if coords.size < n:
            rest = np.setdiff1d(np.arange(size), coords)
            coords = np.union1d(coords, rng.choice(rest, size=n - coords.size, replace=False))
        return coords
    return rng.choice(size, size=n, replace=False)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

MAGIC = b"XDRC1"


def save_checkpoint(path, params: ModelParams, variant_tag: int) -> None:
    """Header of six little-endian u64 (m, n_T, n_S, d, L, variant) after the
    magic, then every tensor in PARAM_ORDER as row-major little-endian f32."""
    params.validate()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<6Q", *params.dims, int(variant_tag)))
        for _, v in params.items():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, int]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    m, n_t, n_s, d, L, tag = struct.unpack_from("<6Q", data, off)
    off += 48
    from xdrec.model import fusion_width, Variant  # local: model imports numerics

    shapes = {
        "P": (m, d), "Q": (n_t, d), "H": (n_s, d), "A": (L, 2 * d), "C": (L, d),
        "W": (2 * d, d), "b": (d,), "W_o": (d, d), "W_z": (d, d), "W_c": (d, d),
        "h": (fusion_width(Variant(tag), d),),
    }
    arrays = {}
    for k in PARAM_ORDER:
        n = int(np.prod(shapes[k]))
        if off + 4 * n > len(data):
            raise ValueError(f"{path}: truncated checkpoint at tensor {k}")
        arrays[k] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shapes[k]).astype(np.float32)
        off += 4 * n
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return ModelParams(**arrays), tag
