"""Loss computation, plain SGD, and the training loop.

The loss is cross-entropy on the aggregated head output minus a weighted
L1 discrepancy between the two head distributions: the discrepancy term is
*maximized* during training (hence the subtraction), pushing the columns
apart for robustness in low-data regimes.

Runs are fully deterministic given the seed: fixed Kaiming-uniform init,
fixed shuffle order, no momentum.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import graph as G

log = logging.getLogger(__name__)

CLAMP = 1e-12


class NumericsLog:
    """Counts probability clamps so silent saturation is visible in runs."""

    def __init__(self):
        self.clamps = 0

    def record(self, count: int):
        if count:
            self.clamps += count
            log.warning("clamped %d zero probabilities before log", count)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 5
    learning_rate: float = 1e-3
    lambda_disc: float = 0.1
    lambda_warmup_epochs: int = 10
    seed: int = 0
    dtype: type = np.float64
    calibrate_init: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lambda_disc < 0:
            raise ValueError(f"lambda_disc must be >= 0, got {self.lambda_disc}")


def discrepancy(p1: np.ndarray, p2: np.ndarray) -> float:
    """Batch mean of (1/C) * sum_c |p1_c - p2_c|; per-sample value in [0, 2/C]."""
    if p1.shape != p2.shape:
        raise ValueError(f"discrepancy shape mismatch: {p1.shape} vs {p2.shape}")
    c = p1.shape[-1]
    return float(np.abs(p1 - p2).sum(axis=-1).mean() / c)


def cross_entropy(p_agg: np.ndarray, labels: np.ndarray,
                  numerics: NumericsLog | None = None) -> float:
    picked = p_agg[np.arange(len(labels)), labels]
    n_clamped = int((picked < CLAMP).sum())
    if numerics is not None:
        numerics.record(n_clamped)
    return float(-np.log(np.maximum(picked, CLAMP)).mean())


def total_loss(p1: np.ndarray, p2: np.ndarray, p_agg: np.ndarray,
               labels: np.ndarray, lambda_disc: float,
               numerics: NumericsLog | None = None) -> float:
    """CE(p_agg, label) - lambda * discrepancy(p1, p2)."""
    return cross_entropy(p_agg, labels, numerics) - lambda_disc * discrepancy(p1, p2)


def loss_gradients(p1: np.ndarray, p2: np.ndarray, labels: np.ndarray,
                   lambda_disc: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of total_loss wrt the two head distributions.

    The aggregate path contributes -1/(2N p_agg[label]) to each head; the
    discrepancy path contributes -/+ lambda * sign(p1-p2)/(C N).
    """
    n, c = p1.shape
    p_agg = 0.5 * (p1 + p2)
    g_agg = np.zeros_like(p_agg)
    idx = np.arange(n)
    g_agg[idx, labels] = -1.0 / (np.maximum(p_agg[idx, labels], CLAMP) * n)
    g_disc = np.sign(p1 - p2) / (c * n)
    g1 = 0.5 * g_agg - lambda_disc * g_disc
    g2 = 0.5 * g_agg + lambda_disc * g_disc
    return g1, g2


def sgd_step(params: G.ModelParams, lr: float) -> G.ModelParams:
    """w <- w - lr * grad for every tensor; gradients cleared afterwards."""
    for key, w in params.values.items():
        w -= lr * params.grads[key]
    params.zero_grads()
    return params


def effective_lambda(cfg: TrainConfig, epoch: int) -> float:
    """Linear warm-up over the first ``lambda_warmup_epochs`` epochs."""
    if cfg.lambda_warmup_epochs <= 0:
        return cfg.lambda_disc
    return cfg.lambda_disc * min(1.0, (epoch + 1) / cfg.lambda_warmup_epochs)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    test_accuracy: float


def predict(graph: G.ArchGraph, params: G.ModelParams, images: np.ndarray,
            batch_size: int = 32) -> np.ndarray:
    """Argmax of the aggregated distribution, batched for memory."""
    preds = []
    for i in range(0, len(images), batch_size):
        _, _, pa = G.forward(graph, params, images[i : i + batch_size])
        preds.append(pa.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def accuracy(graph: G.ArchGraph, params: G.ModelParams, images: np.ndarray,
             labels: np.ndarray) -> float:
    if len(images) == 0:
        return 0.0
    return float((predict(graph, params, images) == labels).mean())


def train(graph: G.ArchGraph, dataset, cfg: TrainConfig | None = None,
          numerics: NumericsLog | None = None):
    """Train on the dataset's train split; returns (params, history).

    ``dataset`` needs ``train_arrays()`` and ``test_arrays()`` returning
    (images NCHW, labels) pairs, as SampleSet provides.  History carries one
    EpochStats per epoch.
    """
    cfg = cfg or TrainConfig()
    x_train, y_train = dataset.train_arrays()
    x_test, y_test = dataset.test_arrays()
    if len(x_train) == 0:
        raise ValueError("training split is empty")
    x_train = np.ascontiguousarray(x_train, dtype=cfg.dtype)
    x_test = np.ascontiguousarray(x_test, dtype=cfg.dtype)

    params = G.init_params(graph, seed=cfg.seed, dtype=cfg.dtype)
    if cfg.calibrate_init:
        G.calibrate_params(graph, params, seed=cfg.seed)
    shuffle_rng = np.random.default_rng(cfg.seed + 1)
    numerics = numerics or NumericsLog()
    history: list[EpochStats] = []

    for epoch in range(cfg.epochs):
        lam = effective_lambda(cfg, epoch)
        order = shuffle_rng.permutation(len(x_train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            (p1, p2, pa), caches = G.forward(graph, params, xb, want_cache=True)
            losses.append(total_loss(p1, p2, pa, yb, lam, numerics))
            g1, g2 = loss_gradients(p1, p2, yb, lam)
            params.zero_grads()
            G.backward(graph, params, caches, g1.astype(cfg.dtype), g2.astype(cfg.dtype))
            sgd_step(params, cfg.learning_rate)
        stats = EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            test_accuracy=accuracy(graph, params, x_test, y_test),
        )
        history.append(stats)
        log.info("epoch %d: loss %.4f, test acc %.4f", epoch, stats.train_loss, stats.test_accuracy)
    return params, history


def write_history_csv(path: str, history: list[EpochStats]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "test_acc"])
        for s in history:
            writer.writerow([s.epoch, f"{s.train_loss:.6f}", f"{s.test_accuracy:.6f}"])
