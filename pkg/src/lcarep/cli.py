"""``lcarep`` command line: one subcommand per pipeline stage.

Results go to stdout as a single JSON document; diagnostics go to stderr.
Exit codes: 0 ok, 1 usage/config, 2 dataset/format, 3 training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .backbone import Checkpoint
from .classifier import LogRegModel, evaluate, fit_logreg
from .config import RunConfig, load_run_config, load_synthetic_spec, parse_value
from .dataio import gen_synthetic, load_images, read_manifest
from .errors import ConfigError, DatasetError, FormatError, LcaRepError
from .lca import LcaConfig, lca_forward, lca_forward_bruteforce
from .pipeline import (
    PairSet,
    PseudolabelStore,
    embed_images,
    generate_pseudolabels,
    manifest_labels,
    train_student,
    train_teacher,
)
from .tensor import load_tensor, save_tensor

log = logging.getLogger("lcarep")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _split_overrides(extra: list[str]) -> dict[str, object]:
    """``--dotted.key value`` pairs left over by argparse."""
    out: dict[str, object] = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--") or len(tok) <= 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise ConfigError(f"override --{key} needs a value") from None
        out[key] = parse_value(value)
    return out


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _write_resolved(directory: Path, text: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.resolved").write_text(text, encoding="utf-8")


def _run_config(args, extra) -> RunConfig:
    return load_run_config(args.config, _split_overrides(extra))


def _labels_from(path) -> np.ndarray:
    try:
        text = Path(path).read_text(encoding="utf-8").split()
        return np.array([int(t) for t in text], dtype=np.int64)
    except OSError as exc:
        raise DatasetError(f"cannot read labels {path}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise FormatError(f"{path}: labels must be integers ({exc})") from None


def _embeddings_from(path) -> np.ndarray:
    try:
        emb = load_tensor(path)
    except OSError as exc:
        raise DatasetError(f"cannot read embeddings {path}: {exc.strerror or exc}") from None
    if emb.ndim != 2:
        raise FormatError(f"{path}: embeddings must be a rank-2 tensor, got {emb.ndim} axes")
    return emb


def _load_ckpt(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except OSError as exc:
        raise DatasetError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from None


# -- subcommands --------------------------------------------------------------------


def cmd_gen_data(args, extra):
    spec = load_synthetic_spec(args.spec, _split_overrides(extra))
    out = Path(args.out)
    paths = gen_synthetic(spec, out)
    counts = {name: len(read_manifest(p)) for name, p in paths.items()}
    _emit({"out": str(out), "manifests": {k: str(v) for k, v in paths.items()}, "records": counts})


def cmd_train_teacher(args, extra):
    cfg = _run_config(args, extra)
    out = Path(args.out)
    _write_resolved(out.parent, cfg.resolved())
    pairs = PairSet.from_manifest(args.pairs)
    ckpt, history = train_teacher(pairs, cfg.train, cfg.backbone, cfg.lca, out.parent / "metrics.jsonl")
    ckpt.save(out)
    _emit({"checkpoint": str(out), "epochs": len(history),
           "final_loss": history[-1].mean_loss if history else None})


def cmd_pseudolabel(args, extra):
    _split_overrides(extra)
    ckpt = _load_ckpt(args.ckpt)
    store = generate_pseudolabels(ckpt, args.images, threads=args.threads)
    store.save(args.out)
    _emit({"store": args.out, "count": len(store), "dim": int(store.vectors.shape[1]) if len(store) else 0})


def cmd_train_student(args, extra):
    cfg = _run_config(args, extra)
    out = Path(args.out)
    _write_resolved(out.parent, cfg.resolved())
    pairs = PairSet.from_manifest(args.pairs)
    store = PseudolabelStore.load(args.pseudo)
    records = read_manifest(args.images)
    missing = [r.id for r in records if r.id not in store]
    if missing:
        raise DatasetError(f"{len(missing)} unlabeled image(s) have no pseudolabel, e.g. {missing[0]!r}")
    unlabeled = load_images(args.images, records)
    ckpt, history = train_student(pairs, unlabeled, store, [r.id for r in records], cfg.train,
                                  cfg.backbone, cfg.lca, out.parent / "metrics.jsonl")
    ckpt.save(out)
    _emit({"checkpoint": str(out), "epochs": len(history),
           "final_loss": history[-1].mean_loss if history else None})


def cmd_embed(args, extra):
    _split_overrides(extra)
    records = read_manifest(args.images)
    images = load_images(args.images, records)
    if args.ckpt == "raw":
        emb = images.reshape(len(images), -1).astype(np.float32)
    else:
        emb = embed_images(_load_ckpt(args.ckpt), images, threads=args.threads)
    if len(emb) == 0:
        raise DatasetError(f"{args.images}: no images to embed")
    save_tensor(args.out, emb)
    if args.labels_out:
        labels = manifest_labels(records)
        Path(args.labels_out).write_text("".join(f"{v}\n" for v in labels), encoding="utf-8")
    _emit({"embeddings": args.out, "n": int(emb.shape[0]), "dim": int(emb.shape[1])})


def cmd_fit_lr(args, extra):
    _split_overrides(extra)
    emb = _embeddings_from(args.embeddings)
    labels = _labels_from(args.labels)
    model = fit_logreg(emb, labels, l2=args.l2, max_iters=args.max_iters, tol=args.tol)
    model.save(args.out)
    _emit({"model": args.out, "n": int(emb.shape[0]), "k": model.n_classes, "iterations": model.n_iters})


def cmd_eval(args, extra):
    _split_overrides(extra)
    try:
        model = LogRegModel.load(args.model)
    except OSError as exc:
        raise DatasetError(f"cannot read model {args.model}: {exc.strerror or exc}") from None
    emb = _embeddings_from(args.embeddings)
    labels = _labels_from(args.labels)
    acc = evaluate(model, emb, labels)
    _emit({"accuracy": acc, "n": int(emb.shape[0]), "k": model.n_classes})


def lca_bench(h: int, w: int, c: int, iters: int, seed: int = 0) -> dict[str, float]:
    """Per-call time of the summed-area-table path vs direct per-window summation."""
    fmap = np.random.default_rng(seed).standard_normal((h, w, c)).astype(np.float32)
    cfg = LcaConfig()
    lca_forward(fmap, cfg)  # warm the window-table cache

    def timed(fn):
        best = float("inf")
        for _ in range(iters):
            t0 = time.perf_counter_ns()
            fn(fmap, cfg)
            best = min(best, time.perf_counter_ns() - t0)
        return best

    fast = timed(lca_forward)
    naive = timed(lca_forward_bruteforce)
    return {"fast_ns_per_call": fast, "naive_ns_per_call": naive, "speedup": naive / fast,
            "h": h, "w": w, "c": c, "iters": iters}


def cmd_lca_bench(args, extra):
    _split_overrides(extra)
    if min(args.h, args.w, args.c, args.iters) < 1:
        raise ConfigError("--h, --w, --c and --iters must be positive")
    _emit(lca_bench(args.h, args.w, args.c, args.iters))


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lcarep", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=1, help="worker cap for parallel stages; 1 is bitwise deterministic")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="write the synthetic corpus")
    s.add_argument("--spec")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-teacher", help="contrastive teacher training")
    s.add_argument("--pairs", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("pseudolabel", help="embed unlabeled images into a pseudolabel store")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pseudolabel)

    s = sub.add_parser("train-student", help="noisy-student multitask training")
    s.add_argument("--pairs", required=True)
    s.add_argument("--pseudo", required=True)
    s.add_argument("--images", required=True, help="manifest of the unlabeled images behind the store")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_student)

    s = sub.add_parser("embed", help="embed a manifest with a checkpoint ('raw' = flattened pixels)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--labels-out")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("fit-lr", help="fit the logistic-regression probe")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--l2", type=float, default=1e-3)
    s.add_argument("--max-iters", type=int, default=500)
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_lr)

    s = sub.add_parser("eval", help="probe accuracy")
    s.add_argument("--model", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--labels", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("lca-bench", help="time SAT pooling against direct window sums")
    s.add_argument("--h", type=int, default=14)
    s.add_argument("--w", type=int, default=14)
    s.add_argument("--c", type=int, default=256)
    s.add_argument("--iters", type=int, default=5)
    s.set_defaults(func=cmd_lca_bench)
    return p


def main(argv=None) -> int:
    try:
        args, extra = build_parser().parse_known_args(argv)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        level = logging.WARNING - 10 * min(args.verbose, 2)
        logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        with threadpool_limits(limits=args.threads):
            args.func(args, extra)
    except LcaRepError as exc:
        print(f"lcarep: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"lcarep: error: {exc}", file=sys.stderr)
        return DatasetError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
