"""Two-step representation learning: contrastive teacher, pseudolabels, noisy student."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, Checkpoint, embed, embed_backward, embed_forward
from .dataio import NO_AUGMENT, AugmentConfig, ImageRecord, augment, load_images, read_manifest
from .errors import DatasetError, FormatError, InvalidArgumentError, TrainingError
from .lca import LcaConfig
from .losses import LossConfig, contrastive_batch, mine_hard_negatives, multitask_loss, random_negatives, smooth_l1
from .tensor import load_tensor, save_tensor

log = logging.getLogger(__name__)

HARD = "hard"
RANDOM = "random"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    pseudo_fraction: float = 0.5
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    mining: str = HARD

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidArgumentError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 4 or self.batch_size % 2:
            raise InvalidArgumentError(f"batch_size must be an even number >= 4, got {self.batch_size}")
        if not self.learning_rate > 0 or not 0 <= self.momentum < 1:
            raise InvalidArgumentError("learning_rate must be > 0 and momentum in [0, 1)")
        if self.mining not in (HARD, RANDOM):
            raise InvalidArgumentError(f"mining must be {HARD!r} or {RANDOM!r}, got {self.mining!r}")

    def student_slots(self) -> tuple[int, int]:
        """``(pairs, pseudo couples)`` per student batch."""
        rho = self.pseudo_fraction
        if not 0 < rho < 1:
            raise InvalidArgumentError(f"pseudo_fraction must lie in (0, 1) for student training, got {rho}")
        pseudo = self.batch_size * rho
        if abs(pseudo - round(pseudo)) > 1e-9:
            raise InvalidArgumentError(f"batch_size * pseudo_fraction = {pseudo} is not an integer")
        pseudo = int(round(pseudo))
        supervised = self.batch_size - pseudo
        if supervised % 2 or supervised < 4:
            raise InvalidArgumentError(f"supervised slots ({supervised}) must be even and hold at least two pairs")
        return supervised // 2, pseudo


@dataclass
class PairSet:
    """Images of a pairs manifest, ``index[p]`` holding the two image rows of pair ``p``."""

    images: np.ndarray
    index: np.ndarray
    pair_ids: np.ndarray

    @classmethod
    def from_manifest(cls, path) -> "PairSet":
        records = read_manifest(path)
        if any(r.pair_id is None for r in records):
            raise DatasetError(f"{path}: every record of a pairs manifest needs a pair_id")
        images = load_images(path, records)
        rows: dict[int, list[int]] = {}
        for i, r in enumerate(records):
            rows.setdefault(r.pair_id, []).append(i)
        pair_ids = np.array(list(rows), dtype=np.int64)
        return cls(images, np.array(list(rows.values()), dtype=np.int64), pair_ids)

    def __len__(self) -> int:
        return len(self.index)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    mean_pos_dist: float
    mean_neg_dist: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


class SGD:
    """Momentum SGD: ``v = mu * v + g; p -= lr * v``."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, momentum: float):
        self.params = params
        self.lr = np.float32(lr)
        self.momentum = np.float32(momentum)
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v += grads[name].astype(np.float32)
            p -= self.lr * v


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        chunk = order[start:start + size]
        if len(chunk) >= 2:
            yield chunk


def _augmented(images: np.ndarray, aug: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if not aug.active:
        return images
    return np.stack([augment(im, aug, rng) for im in images])


def _pair_terms(emb: np.ndarray, pair_ids: np.ndarray, cfg: TrainConfig, rng):
    n = len(pair_ids)
    positives = [(i, i + 1) for i in range(0, n, 2)]
    if cfg.mining == HARD:
        negatives = mine_hard_negatives(emb, pair_ids)
    else:
        negatives = random_negatives(pair_ids, rng)
    return contrastive_batch(emb, positives, negatives, cfg.loss.margin)


def _check_finite(loss: float, epoch: int, step: int) -> None:
    if not np.isfinite(loss):
        raise TrainingError(f"loss diverged to {loss} at epoch {epoch}, step {step}")


def _append_metrics(path, stats: EpochStats) -> None:
    if path is not None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(stats.to_json() + "\n")


def train_teacher(
    pairs: PairSet,
    cfg: TrainConfig,
    backbone: BackboneConfig = BackboneConfig(),
    lca: LcaConfig = LcaConfig(),
    metrics_path=None,
) -> tuple[Checkpoint, list[EpochStats]]:
    """Contrastive training on image pairs with in-batch negatives."""
    if len(pairs) < 2:
        raise DatasetError(f"teacher training needs at least 2 pairs, got {len(pairs)}")
    ckpt = Checkpoint.initial(cfg.seed, backbone, lca)
    opt = SGD(ckpt.params, cfg.learning_rate, cfg.momentum)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses, pos, neg = [], [], []
        order = rng.permutation(len(pairs))
        for step, chunk in enumerate(_batches(order, cfg.batch_size // 2)):
            rows = pairs.index[chunk].ravel()
            ids = np.repeat(pairs.pair_ids[chunk], 2)
            x = _augmented(pairs.images[rows], cfg.augment, rng)
            emb, state = embed_forward(x, ckpt)
            loss, grad, pd, nd = _pair_terms(emb, ids, cfg, rng)
            _check_finite(loss, epoch, step)
            opt.step(embed_backward(ckpt, state, grad))
            losses.append(loss)
            pos += pd
            neg += nd
        stats = EpochStats(epoch, float(np.mean(losses)), float(np.mean(pos)), float(np.mean(neg)),
                           (time.perf_counter() - t0) * 1e3)
        log.info("teacher epoch %d loss %.4f pos %.3f neg %.3f", epoch, stats.mean_loss,
                 stats.mean_pos_dist, stats.mean_neg_dist)
        _append_metrics(metrics_path, stats)
        history.append(stats)
    return ckpt, history


# -- pseudolabels -----------------------------------------------------------------


class PseudolabelStore:
    """Unlabeled image id -> unit-norm teacher embedding."""

    def __init__(self, ids: list[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or len(ids) != vectors.shape[0]:
            raise InvalidArgumentError(f"{len(ids)} ids for vectors of shape {vectors.shape}")
        if len(set(ids)) != len(ids):
            raise DatasetError("pseudolabel ids must be unique")
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        if vectors.shape[0] and np.max(np.abs(norms - 1)) > 1e-5:
            raise DatasetError(f"pseudolabel norms deviate from 1 by {np.max(np.abs(norms - 1)):.3g}")
        self.ids = list(ids)
        self.vectors = vectors
        self._row = {k: i for i, k in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._row

    def __getitem__(self, image_id: str) -> np.ndarray:
        try:
            return self.vectors[self._row[image_id]]
        except KeyError:
            raise KeyError(f"no pseudolabel for image id {image_id!r}") from None

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        lines = []
        for image_id, vec in zip(self.ids, self.vectors):
            if "/" in image_id or "\t" in image_id or "\n" in image_id or image_id in (".", ".."):
                raise DatasetError(f"image id {image_id!r} cannot be used as a file name")
            rel = f"{image_id}.tnsr"
            save_tensor(d / rel, vec)
            lines.append(f"{image_id}\t{rel}\n")
        (d / "index.tsv").write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "PseudolabelStore":
        d = Path(directory)
        try:
            text = (d / "index.tsv").read_text(encoding="utf-8")
        except OSError as exc:
            raise DatasetError(f"cannot read pseudolabel index in {d}: {exc.strerror or exc}") from None
        ids, vecs = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            parts = line.split("\t")
            if len(parts) != 2:
                raise DatasetError(f"{d / 'index.tsv'}: line {lineno}: expected '<id>\\t<path>'")
            try:
                vec = load_tensor(d / parts[1])
            except OSError as exc:
                raise DatasetError(f"cannot read pseudolabel {parts[1]}: {exc.strerror or exc}") from None
            if vec.ndim != 1 or vec.dtype != np.float32:
                raise FormatError(f"pseudolabel {parts[1]} is not a 1-axis f32 vector")
            ids.append(parts[0])
            vecs.append(vec)
        if vecs and len({v.shape for v in vecs}) > 1:
            raise DatasetError("pseudolabels have differing dimensions")
        return cls(ids, np.stack(vecs) if vecs else np.zeros((0, 0), np.float32))


def embed_images(ckpt: Checkpoint, images: np.ndarray, chunk: int = 64, threads: int = 1) -> np.ndarray:
    """Embeddings of many clean images, in input order regardless of ``threads``."""
    pieces = [images[i:i + chunk] for i in range(0, len(images), chunk)]
    if not pieces:
        return np.zeros((0, ckpt.backbone.embedding_dim), dtype=np.float32)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            out = list(pool.map(lambda p: embed(p, ckpt), pieces))
    else:
        out = [embed(p, ckpt) for p in pieces]
    return np.concatenate(out)


def generate_pseudolabels(ckpt: Checkpoint, manifest_path, threads: int = 1) -> PseudolabelStore:
    records = read_manifest(manifest_path)
    images = load_images(manifest_path, records)
    return PseudolabelStore([r.id for r in records], embed_images(ckpt, images, threads=threads))


# -- student -------------------------------------------------------------------------


def plan_student_epoch(n_pairs: int, n_pseudo: int, cfg: TrainConfig, rng: np.random.Generator,
                       pseudo_order: list[int]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Index plan for one epoch: ``(pair indices, pseudo rows)`` per batch.

    ``pseudo_order`` carries the remaining without-replacement stream of
    pseudo rows across epochs; it is refilled with a fresh permutation when
    it runs dry.
    """
    n_pair_slots, n_pseudo_slots = cfg.student_slots()
    if n_pseudo < n_pseudo_slots:
        raise DatasetError(
            f"pseudolabel store has {n_pseudo} entries, fewer than the {n_pseudo_slots} pseudo slots per batch"
        )
    plan = []
    for chunk in _batches(rng.permutation(n_pairs), n_pair_slots):
        if len(pseudo_order) < n_pseudo_slots:
            pseudo_order.extend(int(i) for i in rng.permutation(n_pseudo))
        rows = np.array(pseudo_order[:n_pseudo_slots], dtype=np.int64)
        del pseudo_order[:n_pseudo_slots]
        plan.append((chunk, rows))
    return plan


def compose_student_batch(pairs: PairSet, unlabeled: np.ndarray, targets: np.ndarray,
                          pair_idx: np.ndarray, pseudo_rows: np.ndarray, cfg: TrainConfig,
                          rng: np.random.Generator):
    """Materialize one student batch.

    Returns ``(images, pair_ids, pseudo_targets)``: the first ``2 * len(pair_idx)``
    images are the supervised pairs, the rest are augmented unlabeled images
    whose targets are their clean-image pseudolabels.
    """
    rows = pairs.index[pair_idx].ravel()
    sup = _augmented(pairs.images[rows], cfg.augment, rng)
    noisy = _augmented(unlabeled[pseudo_rows], cfg.augment, rng)
    return np.concatenate([sup, noisy]), np.repeat(pairs.pair_ids[pair_idx], 2), targets[pseudo_rows]


def train_student(
    pairs: PairSet,
    unlabeled: np.ndarray,
    store: PseudolabelStore,
    store_ids: list[str],
    cfg: TrainConfig,
    backbone: BackboneConfig = BackboneConfig(),
    lca: LcaConfig = LcaConfig(),
    metrics_path=None,
) -> tuple[Checkpoint, list[EpochStats]]:
    """Multitask training from a fresh seeded initialization.

    ``unlabeled[i]`` is the image whose pseudolabel is ``store[store_ids[i]]``.
    """
    if len(pairs) < 2:
        raise DatasetError(f"student training needs at least 2 pairs, got {len(pairs)}")
    if len(unlabeled) != len(store_ids):
        raise InvalidArgumentError(f"{len(unlabeled)} unlabeled images for {len(store_ids)} ids")
    targets = np.stack([store[i] for i in store_ids]) if store_ids else np.zeros((0, 0), np.float32)
    cfg.student_slots()
    weight = cfg.loss.multitask_weight
    ckpt = Checkpoint.initial(cfg.seed, backbone, lca)
    opt = SGD(ckpt.params, cfg.learning_rate, cfg.momentum)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 2])))
    pseudo_order: list[int] = []
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses, pos, neg = [], [], []
        plan = plan_student_epoch(len(pairs), len(unlabeled), cfg, rng, pseudo_order)
        for step, (pair_idx, pseudo_rows) in enumerate(plan):
            x, ids, tgt = compose_student_batch(pairs, unlabeled, targets, pair_idx, pseudo_rows, cfg, rng)
            emb, state = embed_forward(x, ckpt)
            n_sup = len(ids)
            c_loss, c_grad, pd, nd = _pair_terms(emb[:n_sup], ids, cfg, rng)
            s_loss, s_grad = smooth_l1(emb[n_sup:], tgt, cfg.loss.smooth_l1_beta)
            loss = multitask_loss(c_loss, s_loss, weight)
            _check_finite(loss, epoch, step)
            grad = np.concatenate([weight * c_grad, (1.0 - weight) * s_grad])
            opt.step(embed_backward(ckpt, state, grad))
            losses.append(loss)
            pos += pd
            neg += nd
        stats = EpochStats(epoch, float(np.mean(losses)), float(np.mean(pos)), float(np.mean(neg)),
                           (time.perf_counter() - t0) * 1e3)
        log.info("student epoch %d loss %.4f pos %.3f neg %.3f", epoch, stats.mean_loss,
                 stats.mean_pos_dist, stats.mean_neg_dist)
        _append_metrics(metrics_path, stats)
        history.append(stats)
    return ckpt, history


# -- evaluation helpers ----------------------------------------------------------------


def separation(ckpt: Checkpoint, pairs: PairSet) -> tuple[float, float]:
    """Mean positive-pair distance and mean hard-negative distance over a pair set."""
    emb = embed_images(ckpt, pairs.images)
    order = pairs.index.ravel()
    emb = emb[order]
    ids = np.repeat(pairs.pair_ids, 2)
    pos = np.linalg.norm(emb[0::2].astype(np.float64) - emb[1::2], axis=1)
    neg = [np.linalg.norm(emb[i].astype(np.float64) - emb[j]) for i, j in mine_hard_negatives(emb, ids)]
    return float(np.mean(pos)), float(np.mean(neg))


def pseudo_gap(ckpt: Checkpoint, images: np.ndarray, targets: np.ndarray, beta: float = 1.0) -> float:
    """Mean Smooth L1 between a model's clean embeddings and given pseudolabels."""
    return smooth_l1(embed_images(ckpt, images), targets, beta)[0]


def manifest_labels(records: list[ImageRecord]) -> np.ndarray:
    if any(r.class_id is None for r in records):
        raise DatasetError("every record needs a class_id here")
    return np.array([r.class_id for r in records], dtype=np.int64)
