"""Command-line entry point.

Every command writes its outputs and a ``manifest.txt`` into a fresh run
directory ``<runs>/<timestamp>-s<seed>``. Configuration comes from flat
``key=value`` files (``--config``) with ``--set key=value`` overrides on top.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from xdrec.data import DataError, load_dataset, prepare, read_documents, read_interactions, read_stopwords, save_dataset
from xdrec.evaluation import DEFAULT_CUTOFFS, build_candidates, evaluate, missed_hit_distribution
from xdrec.model import Variant, active_groups, check_gradients, forward_batch
from xdrec.numerics import PARAM_ORDER, Hyperparams, NumericalError, ShapeError, load_checkpoint, save_checkpoint
from xdrec.synthgen import SynthConfig, write_dataset
from xdrec.training import TrainConfig, train

log = logging.getLogger("xdrec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
TRAIN_KEYS = ("patience", "min_epochs", "eval_every")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(val)
    return out


def resolve_config(args) -> dict:
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        cfg[key.strip()] = parse_value(val.strip())
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def hyper_from(cfg: dict) -> tuple[Hyperparams, dict]:
    """Split a resolved config into Hyperparams and training-loop options."""
    names = {f.name for f in dataclasses.fields(Hyperparams)}
    unknown = set(cfg) - names - set(TRAIN_KEYS)
    if unknown:
        raise UsageError(f"unknown option(s): {', '.join(sorted(unknown))}")
    try:
        hyper = Hyperparams(**{k: v for k, v in cfg.items() if k in names})
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e
    return hyper, {k: cfg[k] for k in TRAIN_KEYS if k in cfg}


# --------------------------------------------------------------------------
# Run directories and manifests
# --------------------------------------------------------------------------


def blob_hash(data: bytes) -> str:
    """Git's blob object id."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(paths) -> str:
    """One hash over the (name, blob id) list of every input file."""
    h = hashlib.sha1()
    files = []
    for p in paths:
        p = Path(p)
        files += sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for f in files:
        h.update(f"{f.name}\t{blob_hash(f.read_bytes())}\n".encode())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list
    inputs: list = field(default_factory=list)
    input_hash: str = ""
    started: str = ""
    finished: str = ""

    def to_text(self) -> str:
        lines = [f"command={self.command}", f"seeds={json.dumps(self.seeds)}",
                 f"inputs={json.dumps([str(p) for p in self.inputs])}", f"input_hash={self.input_hash}",
                 f"started={self.started}", f"finished={self.finished}"]
        lines += [f"config.{k}={json.dumps(v)}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S")


def make_run_dir(root, seed) -> Path:
    base = Path(root) / f"{time.strftime('%Y%m%d-%H%M%S')}-s{seed}"
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{n}")
        n += 1
    path.mkdir(parents=True)
    return path


class Run:
    """Context manager owning a run directory and its manifest."""

    def __init__(self, args, config: dict, seeds, inputs=()):
        self.args = args
        self.manifest = RunManifest(args.command, config, list(seeds), list(inputs))
        self.dir: Path | None = None

    def __enter__(self):
        for p in self.manifest.inputs:
            if not Path(p).exists():
                raise DataError(f"missing input: {p}")
        self.manifest.input_hash = content_hash(self.manifest.inputs)
        self.manifest.started = _now()
        self.dir = make_run_dir(self.args.runs, self.manifest.seeds[0] if self.manifest.seeds else 0)
        return self

    def __exit__(self, *exc):
        self.manifest.finished = _now()
        (self.dir / "manifest.txt").write_text(self.manifest.to_text())
        return False

    def write(self, name: str, text: str) -> Path:
        path = self.dir / name
        path.write_text(text)
        log.info("wrote %s", path)
        return path


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    try:
        synth = SynthConfig(**cfg)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e
    inputs = [args.config] if args.config else []
    with Run(args, dataclasses.asdict(synth), [synth.seed], inputs) as run:
        out = Path(args.out) if args.out else run.dir / "dataset"
        write_dataset(synth, out, max_doc_len=args.max_doc_len)
        run.write("dataset_path.txt", f"{out}\n")
    print(out)
    return EXIT_OK


def cmd_prepare(args) -> int:
    config = {"vocab_size": args.vocab_size, "max_doc_len": args.max_doc_len, "seed": args.seed,
              "min_rating": args.min_rating, "min_user_interactions": args.min_user_interactions}
    inputs = [p for p in (args.target, args.source, args.docs, args.stopwords) if p]
    with Run(args, config, [args.seed], inputs) as run:
        target = read_interactions(args.target, args.min_rating)
        source = read_interactions(args.source) if args.source else []
        pair_docs, item_docs = read_documents(args.docs) if args.docs else ({}, {})
        stop = read_stopwords(args.stopwords) if args.stopwords else ()
        ds, maps = prepare(target, source, pair_docs, item_docs, np.random.default_rng(args.seed),
                           L=args.vocab_size, stopwords=stop, max_doc_len=args.max_doc_len,
                           min_user_interactions=args.min_user_interactions)
        out = Path(args.out) if args.out else run.dir / "dataset"
        save_dataset(ds, out, maps)
        run.write("dataset_path.txt", f"{out}\n")
    print(f"{out}\tusers={ds.n_users}\ttarget_items={ds.n_target}\tsource_items={ds.n_source}\tL={ds.L}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    hyper, loop = hyper_from(cfg)
    variant = _variant(args.variant)
    with Run(args, {**cfg, "variant": variant.name}, [hyper.seed], [args.data]) as run:
        ds = load_dataset(args.data)
        ds.validate()
        ckpt = run.dir / "checkpoint.bin"
        params, tlog = train(ds, TrainConfig(hyper, checkpoint_path=ckpt, **loop), variant,
                             np.random.default_rng(hyper.seed))
        if not ckpt.exists():
            save_checkpoint(ckpt, params, variant)
        run.write("trainlog.csv", tlog.to_csv())
        run.write("timing.csv", tlog.timing_csv())
    print(f"{ckpt}\tbest_epoch={tlog.best_epoch}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    cutoffs = _cutoffs(args.cutoffs)
    seed = cfg.get("seed", 0)
    with Run(args, {**cfg, "cutoffs": list(cutoffs), "split": args.split}, [seed],
             [args.checkpoint, args.data]) as run:
        params, tag = load_checkpoint(args.checkpoint)
        ds = load_dataset(args.data)
        _check_compatible(params, ds)
        cands = build_candidates(ds, np.random.default_rng(seed), split=args.split)
        rep = evaluate(params, Variant(tag), ds, cutoffs, candidates=cands, beta=cfg.get("beta"),
                       tnet_beta=cfg.get("tnet_beta", 1.0), workers=args.workers)
        run.write("metrics.csv", rep.to_csv())
        run.write("per_user.tsv", rep.per_user_tsv())
        k = 10 if 10 in cutoffs else cutoffs[0]
        run.write("missed_hits.tsv", "n_train\tmissed\n" + "".join(
            f"{n}\t{c}\n" for n, c in missed_hit_distribution(rep, K=k).items()))
    sys.stdout.write(rep.to_csv())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    cfg.pop("seed", None)
    hyper, loop = hyper_from(cfg)
    cutoffs = _cutoffs(args.cutoffs)
    with Run(args, cfg, seeds, [args.data]) as run:
        ds = load_dataset(args.data)
        ds.validate()
        # one candidate set for every variant and seed
        cands = build_candidates(ds, np.random.default_rng(args.eval_seed))
        rows, per_seed = {}, []
        for v in Variant:
            reps = []
            for s in seeds:
                h = hyper.replace(seed=s)
                params, _ = train(ds, TrainConfig(h, **loop), v, np.random.default_rng(s))
                rep = evaluate(params, v, ds, cutoffs, candidates=cands, beta=h.beta,
                               tnet_beta=h.tnet_beta, workers=args.workers)
                reps.append(rep)
                per_seed.append(f"{v.name},{s}," + ",".join(_cells(rep, cutoffs)) + "\n")
                log.info("%s seed %d NDCG@10 %s", v.name, s, rep.ndcg.get(10))
            rows[v] = [float(np.median([float(c) for c in col]))
                       for col in zip(*[_cells(r, cutoffs) for r in reps])]
        header = "variant," + ",".join(f"{m}@{k}" for k in cutoffs for m in ("hr", "ndcg", "mrr"))
        table = header + "\n" + "".join(f"{v.name}," + ",".join(f"{x:.6f}" for x in vals) + "\n"
                                        for v, vals in rows.items())
        run.write("ablation.csv", table)
        run.write("ablation_per_seed.csv", "variant,seed," + header.split(",", 1)[1] + "\n" + "".join(per_seed))
    sys.stdout.write(table)
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = resolve_config(args)
    with Run(args, {**cfg, "user": args.user, "item": args.item}, [0], [args.checkpoint, args.data]) as run:
        params, tag = load_checkpoint(args.checkpoint)
        ds = load_dataset(args.data)
        _check_compatible(params, ds)
        if not (0 <= args.user < ds.n_users and 0 <= args.item < ds.n_target):
            raise DataError(f"user/item out of range (users {ds.n_users}, items {ds.n_target})")
        variant = Variant(tag)
        batch = ds.make_batch([args.user], [args.item])
        cache = forward_batch(batch, params, variant, cfg.get("beta"), cfg.get("tnet_beta", 1.0))
        words = ds.vocab.tokens if ds.vocab is not None else None
        lines = [f"user {args.user} item {args.item} variant {variant.name} "
                 f"score {float(cache.r_hat[0]):.6f}\n"]
        if variant.uses_memory:
            ids = batch.docs[0][batch.doc_mask[0]]
            lines.append("\nword\tp\n")
            for k in np.argsort(-cache.word_weights(), kind="stable"):
                name = words[ids[k]] if words is not None else str(ids[k])
                lines.append(f"{name}\t{cache.word_weights()[k]:.6f}\n")
        if variant.uses_transfer:
            ids = batch.srcs[0][batch.src_mask[0]]
            lines.append("\nsource_item\talpha\n")
            for k in np.argsort(-cache.source_weights(), kind="stable"):
                lines.append(f"{ids[k]}\t{cache.source_weights()[k]:.6f}\n")
        text = "".join(lines)
        run.write("inspect.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    config = {"fixtures": args.fixtures, "coords": args.coords, "eps": args.eps, "tol": args.tol}
    rng = np.random.default_rng(seed)
    with Run(args, config, [seed]) as run:
        rows, ok = ["variant,group,max_rel_err,coords,status\n"], True
        for v in Variant:
            worst = {k: 0.0 for k in active_groups(v)}
            coords = {k: 0 for k in worst}
            for _ in range(args.fixtures):
                rep = check_gradients(v, rng, eps=args.eps, n_coords=args.coords)
                for k, e in rep.max_rel_err.items():
                    worst[k] = max(worst[k], e)
                    coords[k] += rep.n_coords[k]
            for k in PARAM_ORDER:
                if k not in worst:
                    rows.append(f"{v.name},{k},,0,n/a\n")
                    continue
                passed = worst[k] <= args.tol
                ok &= passed
                rows.append(f"{v.name},{k},{worst[k]:.3e},{coords[k]},{'PASS' if passed else 'FAIL'}\n")
        table = "".join(rows)
        run.write("gradcheck.csv", table)
    sys.stdout.write(table)
    return EXIT_OK if ok else EXIT_NUMERIC


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def _variant(name: str) -> Variant:
    try:
        return Variant.parse(name)
    except KeyError as e:
        raise UsageError(f"unknown variant {name!r}; use one of {', '.join(v.name for v in Variant)}") from e


def _cutoffs(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in text.split(","))
    except ValueError as e:
        raise UsageError(f"bad cutoff list {text!r}") from e
    if not ks or min(ks) < 1:
        raise UsageError("cutoffs must be positive integers")
    return ks


def _cells(rep, cutoffs) -> list[str]:
    return [repr(x) for k in cutoffs for x in (rep.hr[k], rep.ndcg[k], rep.mrr[k])]


def _check_compatible(params, ds) -> None:
    m, n_t, n_s, _, L = params.dims
    if (m, n_t, n_s, L) != (ds.n_users, ds.n_target, ds.n_source, ds.L):
        raise ShapeError(f"checkpoint dims (m={m}, n_T={n_t}, n_S={n_s}, L={L}) do not match the dataset "
                         f"(m={ds.n_users}, n_T={ds.n_target}, n_S={ds.n_source}, L={ds.L})")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xdrec", description="Cross-domain hybrid recommender: data, training, evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--runs", default="runs", help="root directory for run outputs (default: runs)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_flags(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int, help="random seed (overrides the config)")

    sp = sub.add_parser("synth", help="generate a planted-signal synthetic dataset")
    config_flags(sp)
    sp.add_argument("--out", help="dataset directory (default: <run>/dataset)")
    sp.add_argument("--max-doc-len", type=int, default=300)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("prepare", help="split, build the vocabulary and encode raw files")
    sp.add_argument("--target", required=True, help="target-domain interactions TSV")
    sp.add_argument("--source", help="source-domain interactions TSV")
    sp.add_argument("--docs", help="documents TSV (user, item, text) or (item, text)")
    sp.add_argument("--stopwords", help="one stopword per line")
    sp.add_argument("--vocab-size", type=int, default=8000)
    sp.add_argument("--max-doc-len", type=int, default=300)
    sp.add_argument("--min-rating", type=float, help="treat column 3 as a rating and keep rows >= this")
    sp.add_argument("--min-user-interactions", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="dataset directory (default: <run>/dataset)")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train one variant")
    config_flags(sp)
    sp.add_argument("--data", required=True, help="prepared dataset directory")
    sp.add_argument("--variant", default="FULL", help="FULL, NO_M, NO_T or CF_ONLY")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="leave-one-out ranking metrics of a checkpoint")
    config_flags(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--cutoffs", default=",".join(map(str, DEFAULT_CUTOFFS)))
    sp.add_argument("--split", choices=("test", "val"), default="test")
    sp.add_argument("--workers", type=int, default=1, help="threads for scoring")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and evaluate all variants over several seeds")
    config_flags(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    sp.add_argument("--eval-seed", type=int, default=0, help="seed of the shared candidate set")
    sp.add_argument("--cutoffs", default=",".join(map(str, DEFAULT_CUTOFFS)))
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("inspect", help="print attention weights for one user-item pair")
    config_flags(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--user", type=int, required=True)
    sp.add_argument("--item", type=int, required=True)
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every variant and parameter group")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--fixtures", type=int, default=10)
    sp.add_argument("--coords", type=int, default=20)
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"xdrec: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, FileNotFoundError, OSError) as e:
        print(f"xdrec: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as e:
        print(f"xdrec: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        # malformed files (bad checkpoints, unparsable TSV rows)
        print(f"xdrec: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
