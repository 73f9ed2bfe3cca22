"""Mini-batch training with per-epoch negative resampling and early stopping."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from xdrec.data import Dataset, sample_negatives
from xdrec.evaluation import EvalCandidates, build_candidates, evaluate
from xdrec.model import Variant, backward, bce_loss, forward_batch, fusion_width
from xdrec.numerics import (
    PARAM_ORDER,
    AdamState,
    Hyperparams,
    ModelParams,
    NumericalError,
    adam_step,
    save_checkpoint,
)

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "TrainLog", "EpochRecord", "init_params", "bce_loss", "train"]

INIT_STD = 0.01


def init_params(hyper: Hyperparams, dims, variant: Variant, rng: np.random.Generator,
                dtype=np.float32) -> ModelParams:
    """Every tensor i.i.d. N(0, 0.01^2). ``dims`` is (m, n_T, n_S, L)."""
    m, n_t, n_s, L = dims
    d = hyper.d
    shapes = {
        "P": (m, d), "Q": (n_t, d), "H": (n_s, d), "A": (L, 2 * d), "C": (L, d),
        "W": (2 * d, d), "b": (d,), "W_o": (d, d), "W_z": (d, d), "W_c": (d, d),
        "h": (fusion_width(variant, d),),
    }
    return ModelParams(**{k: rng.normal(0.0, INIT_STD, size=shapes[k]).astype(dtype) for k in PARAM_ORDER})


@dataclass
class TrainConfig:
    hyper: Hyperparams = field(default_factory=Hyperparams)
    patience: int = 5
    checkpoint_path: str | Path | None = None
    eval_every: int = 1
    # early stopping cannot trigger before this epoch
    min_epochs: int = 0
    dtype: type = np.float32

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    hr10: float
    ndcg10: float
    mrr10: float
    seconds: float
    n_negatives: int
    skipped: int = 0


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self) -> str:
        """Deterministic part of the log (wall-clock time lives in ``timing_csv``)."""
        out = ["epoch,loss,hr10,ndcg10,mrr10,n_negatives\n"]
        out += [f"{r.epoch},{r.loss!r},{r.hr10!r},{r.ndcg10!r},{r.mrr10!r},{r.n_negatives}\n" for r in self.records]
        return "".join(out)

    def timing_csv(self) -> str:
        return "epoch,seconds\n" + "".join(f"{r.epoch},{r.seconds:.3f}\n" for r in self.records)

    def __eq__(self, other):
        if not isinstance(other, TrainLog):
            return NotImplemented
        return self.to_csv() == other.to_csv() and self.best_epoch == other.best_epoch


def run_epoch(dataset: Dataset, params: ModelParams, state: AdamState, variant: Variant,
              hyper: Hyperparams, rng: np.random.Generator):
    """One pass over positives plus freshly drawn negatives.

    Returns (mean loss, number of negatives, skipped draws).
    """
    pos = dataset.train
    negs, skipped = sample_negatives(pos, dataset.all_pairs, dataset.n_target, hyper.neg_ratio, rng)
    pairs = np.concatenate([pos, negs])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(negs))])
    order = rng.permutation(len(pairs))
    pairs, labels = pairs[order], labels[order]

    total = 0.0
    for nb, start in enumerate(range(0, len(pairs), hyper.batch_size)):
        sl = slice(start, start + hyper.batch_size)
        batch = dataset.make_batch(pairs[sl, 0], pairs[sl, 1], labels[sl])
        cache = forward_batch(batch, params, variant, hyper.beta, hyper.tnet_beta)
        losses = bce_loss(logit=cache.logit, r=labels[sl])
        if not np.isfinite(losses).all():
            raise NumericalError(f"non-finite loss in batch {nb} (rows {start}..{start + len(losses) - 1})")
        total += float(losses.astype(np.float64).sum())
        grads = backward(cache, labels[sl], params, variant)
        adam_step(params, grads, state, hyper.lr)
    return total / max(len(pairs), 1), len(negs), skipped


def train(dataset: Dataset, config: TrainConfig, variant: Variant, rng: np.random.Generator,
          params: ModelParams | None = None,
          val_candidates: EvalCandidates | None = None) -> tuple[ModelParams, TrainLog]:
    """Train ``variant`` and return the parameters of the best validation epoch.

    Validation HR@10 (on a candidate set drawn once up front) drives early
    stopping. Without validation users the final parameters are returned.
    """
    hyper = config.hyper
    if params is None:
        params = init_params(hyper, (dataset.n_users, dataset.n_target, dataset.n_source, dataset.L),
                             variant, rng, config.dtype)
    params.validate()
    state = AdamState.zeros_like(params)
    has_val = len(dataset.val) > 0
    if has_val and val_candidates is None:
        val_candidates = build_candidates(dataset, rng, split="val")

    tlog = TrainLog()
    best, best_hr, bad_epochs = params.copy(), -1.0, 0
    for epoch in range(1, hyper.epochs + 1):
        t0 = time.perf_counter()
        loss, n_neg, skipped = run_epoch(dataset, params, state, variant, hyper, rng)
        hr = ndcg = mrr = float("nan")
        evaluated = has_val and (epoch % config.eval_every == 0 or epoch == hyper.epochs)
        if evaluated:
            rep = evaluate(params, variant, dataset, (10,), candidates=val_candidates,
                           beta=hyper.beta, tnet_beta=hyper.tnet_beta)
            hr, ndcg, mrr = rep.hr[10], rep.ndcg[10], rep.mrr[10]
        tlog.records.append(EpochRecord(epoch, loss, hr, ndcg, mrr, time.perf_counter() - t0, n_neg, skipped))
        log.info("epoch %d loss %.4f val HR@10 %.4f NDCG@10 %.4f", epoch, loss, hr, ndcg)

        if not has_val:
            best, tlog.best_epoch = params.copy(), epoch
            continue
        if not evaluated:
            continue
        if hr > best_hr:
            best, best_hr, bad_epochs, tlog.best_epoch = params.copy(), hr, 0, epoch
            if config.checkpoint_path is not None:
                save_checkpoint(config.checkpoint_path, best, variant)
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience and epoch >= config.min_epochs:
                break
    return best, tlog
