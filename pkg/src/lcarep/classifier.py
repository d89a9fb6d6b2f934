"""Multinomial logistic regression probe on frozen embeddings."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, FormatError, InvalidArgumentError, TrainingError
from .tensor import decode_entries, encode_entries, entry_text, text_entry

log = logging.getLogger(__name__)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class LogRegModel:
    weights: np.ndarray  # (K, D)
    biases: np.ndarray  # (K,)
    labels: list[int] = field(default_factory=list)
    l2: float = 1e-3
    trained: bool = False
    n_iters: int = 0

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def save(self, path) -> None:
        meta = {"labels": self.labels, "l2": self.l2, "trained": self.trained, "n_iters": self.n_iters}
        entries = {
            "W": self.weights.astype(np.float32),
            "b": self.biases.astype(np.float32),
            "labels.json": text_entry(json.dumps(meta, sort_keys=True)),
        }
        Path(path).write_bytes(encode_entries(entries))

    @classmethod
    def load(cls, path) -> "LogRegModel":
        entries = decode_entries(Path(path).read_bytes())
        try:
            meta = json.loads(entry_text(entries["labels.json"]))
            w, b = entries["W"], entries["b"]
        except (KeyError, ValueError) as exc:
            raise FormatError(f"not a logistic-regression model: {exc}") from None
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise FormatError(f"inconsistent model shapes W{w.shape} b{b.shape}")
        return cls(w.astype(np.float64), b.astype(np.float64), meta["labels"], meta["l2"], meta["trained"], meta["n_iters"])


def objective(w: np.ndarray, b: np.ndarray, x: np.ndarray, y: np.ndarray, l2: float):
    """Mean cross-entropy + (l2/2)||W||^2 and its gradients ``(loss, dW, db)``."""
    n = x.shape[0]
    p = softmax(x @ w.T + b)
    loss = -np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-300))) + 0.5 * l2 * np.sum(w * w)
    p[np.arange(n), y] -= 1.0
    p /= n
    return loss, p.T @ x + l2 * w, p.sum(axis=0)


def fit_logreg(
    embeddings: np.ndarray,
    labels,
    l2: float = 1e-3,
    max_iters: int = 500,
    tol: float = 1e-5,
    n_classes: int | None = None,
) -> LogRegModel:
    """Full-batch gradient descent with Armijo backtracking from zero weights."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise InvalidArgumentError(f"need (N, D) embeddings and N labels, got {x.shape} and {y.shape}")
    if not np.all(np.isfinite(x)):
        raise DatasetError("embeddings contain non-finite values")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        raise InvalidArgumentError("labels must be integers")
    k = int(n_classes if n_classes is not None else (y.max() + 1 if y.size else 0))
    if k < 2 or x.shape[0] < k:
        raise InvalidArgumentError(f"need N >= K >= 2, got N={x.shape[0]}, K={k}")
    if y.min() < 0 or y.max() >= k:
        raise InvalidArgumentError(f"labels must lie in [0, {k})")
    y = y.astype(np.int64)

    w = np.zeros((k, x.shape[1]))
    b = np.zeros(k)
    loss, gw, gb = objective(w, b, x, y, l2)
    step = 1.0
    it = 0
    for it in range(1, max_iters + 1):
        gnorm = max(np.abs(gw).max(), np.abs(gb).max())
        if gnorm < tol:
            it -= 1
            break
        sq = np.sum(gw * gw) + np.sum(gb * gb)
        step *= 2.0
        while True:
            w_new, b_new = w - step * gw, b - step * gb
            new_loss, new_gw, new_gb = objective(w_new, b_new, x, y, l2)
            if new_loss <= loss - 0.5 * step * sq:
                break
            step *= 0.5
            if step < 1e-20:
                log.debug("line search stalled at iteration %d", it)
                break
        if step < 1e-20:
            break
        if new_loss > loss:
            raise TrainingError(f"line search accepted an increasing step at iteration {it}")
        w, b, loss, gw, gb = w_new, b_new, new_loss, new_gw, new_gb
    return LogRegModel(w, b, list(range(k)), l2, True, it)


def predict_proba(model: LogRegModel, embeddings: np.ndarray) -> np.ndarray:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise InvalidArgumentError(f"embedding dimension {x.shape[-1]} does not match model dimension {model.dim}")
    return softmax(x @ model.weights.T + model.biases)


def predict(model: LogRegModel, embedding: np.ndarray) -> tuple[int, np.ndarray]:
    """Class index (lowest index on ties) and the probability vector."""
    p = predict_proba(model, embedding)
    return int(np.argmax(p)), p


def evaluate(model: LogRegModel, embeddings: np.ndarray, labels) -> float:
    x = np.asarray(embeddings)
    y = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidArgumentError("evaluation set is empty")
    if y.shape != (x.shape[0],):
        raise InvalidArgumentError(f"{x.shape[0]} embeddings but {y.size} labels")
    pred = np.argmax(predict_proba(model, x), axis=-1)
    return float(np.mean(pred == y))
