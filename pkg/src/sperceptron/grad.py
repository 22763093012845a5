"""Softmax cross-entropy, analytic gradients, a finite-difference oracle and
the mini-batch gradient-descent trainer."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    BadLabelError,
    DivergenceDetected,
    EmptyDatasetError,
    NonFiniteGradientError,
    ShapeMismatchError,
)
from .metrics import MetricsRecord
from .mnist_io import LabeledDataset, batches
from .model import (
    ForwardTrace,
    ModelConfig,
    ModelParams,
    check_shapes,
    forward,
    init_params,
    log_softmax,
    symmetrize,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradConfig:
    learning_rate: float = 10.0
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    eval_every: int = 0  # 0: one metrics row per epoch

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")


@dataclass
class Gradients:
    dW: np.ndarray
    dV_raw: np.ndarray
    dbias: Optional[np.ndarray] = None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"W": self.dW, "V_raw": self.dV_raw}
        if self.dbias is not None:
            out["bias"] = self.dbias
        return out


def _check_labels(labels, class_count: int) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise BadLabelError(f"labels must be integers, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise BadLabelError(f"label outside [0, {class_count})")
    return labels.astype(np.int64)


def cross_entropy_loss(probs, label) -> float:
    """``-log(probs[label])`` for one probability vector."""
    probs = np.asarray(probs, dtype=np.float64)
    label = int(_check_labels(label, probs.shape[-1]))
    with np.errstate(divide="ignore"):
        return float(-np.log(probs[label]))


def cross_entropy_from_logits(logits, labels) -> np.ndarray:
    """Per-item loss computed through log-sum-exp; finite for finite logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[-1])
    logp = log_softmax(logits)
    if logp.ndim == 1:
        return -logp[labels]
    return -logp[np.arange(logp.shape[0]), labels]


def batch_loss(trace: ForwardTrace, labels) -> float:
    return float(np.mean(cross_entropy_from_logits(trace.pooled, labels)))


def backward(trace: ForwardTrace, labels, params: ModelParams, config: ModelConfig) -> Gradients:
    """Gradients of the mean cross-entropy over the traced items.

    Works for a single traced input or a traced batch. ReLU and the bias clamp
    pass no gradient at exactly 0.
    """
    x = np.atleast_2d(trace.x)
    batch = x.shape[0]
    labels = _check_labels(labels, config.class_count).reshape(-1)
    if labels.shape[0] != batch:
        raise ShapeMismatchError(f"{labels.shape[0]} labels for {batch} traced inputs")
    if x.shape[1] != config.n or params.W.shape != (config.n, config.n):
        raise ShapeMismatchError("trace, params and config disagree on n")

    C, g = config.class_count, config.group_size
    dlogits = np.atleast_2d(trace.probs).copy()
    dlogits[np.arange(batch), labels] -= 1.0
    dlogits /= batch

    dy = np.zeros((batch, config.n))
    dy[:, : C * g] = np.repeat(dlogits / g, g, axis=1)

    dbias = None
    if params.bias is not None:
        dy *= np.atleast_2d(trace.pre_clamp) > 0
        dbias = dy.sum(axis=0)

    dav = dy * (np.atleast_2d(trace.a_v) > 0)
    daw = dy * (np.atleast_2d(trace.a_w) > 0)
    dW = x.T @ daw
    dV = np.atleast_2d(trace.x_d).T @ dav
    return Gradients(dW, symmetrize(dV), dbias)


def loss_and_grad(x, labels, params: ModelParams, config: ModelConfig, *, check: bool = True):
    trace = forward(x, params, config, check=check)
    return batch_loss(trace, labels), backward(trace, labels, params, config)


def _loss_at(x, labels, params, config) -> float:
    return batch_loss(forward(x, params, config, check=False), labels)


def finite_difference_check(x, label, params: ModelParams, config: ModelConfig,
                            step: float = 1e-5, *, seed: int = 0,
                            max_coords: int = 1024, sample_size: int = 256) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    All W/V_raw coordinates are checked when there are at most ``max_coords``
    of them, otherwise a seeded sample of ``sample_size`` (at least 200).
    Every bias coordinate is always checked. Pairs where both values are
    below 1e-10 in magnitude are skipped.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    check_shapes(np.asarray(x, dtype=np.float64), params, config)
    grads = loss_and_grad(x, label, params, config)[1].arrays()
    n = config.n

    total = 2 * n * n
    if total <= max_coords:
        flat = np.arange(total)
    else:
        flat = np.sort(np.random.default_rng(seed).choice(total, max(200, sample_size), replace=False))
    coords = [("W" if f < n * n else "V_raw", divmod(f % (n * n), n)) for f in flat]
    if params.bias is not None:
        coords += [("bias", (j,)) for j in range(n)]

    probe = params.copy()
    worst = 0.0
    for name, idx in coords:
        arr = probe.arrays()[name]
        orig = arr[idx]
        arr[idx] = orig + step
        up = _loss_at(x, label, probe, config)
        arr[idx] = orig - step
        down = _loss_at(x, label, probe, config)
        arr[idx] = orig
        numeric = (up - down) / (2 * step)
        analytic = grads[name][idx]
        scale = max(abs(analytic), abs(numeric))
        if scale < 1e-10:
            continue
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def random_instance(n: int, seed: int, class_count: Optional[int] = None, bias: bool = True):
    """A random (x, label, params, config) problem for gradient checks.

    Weights come from the regular seeded init, biases are small Gaussians so the
    clamp stays mostly inactive while still being exercised.
    """
    if class_count is None:
        class_count = max(2, min(10, n // 2))
    config = ModelConfig(n=n, class_count=class_count, bias_enabled=bias, seed=seed)
    params = init_params(config)
    rng = np.random.default_rng([seed, 1])
    if bias:
        params.bias = rng.normal(0.0, 0.1, size=n)
    x = rng.uniform(0.0, 1.0, size=n)
    label = int(rng.integers(class_count))
    return x, label, params, config


def sgd_step(params: ModelParams, grads: Gradients, learning_rate: float,
             *, inplace: bool = False) -> ModelParams:
    garrays = grads.arrays()
    parrays = params.arrays()
    if garrays.keys() != parrays.keys():
        raise ShapeMismatchError("gradient and parameter sets differ")
    for name, g in garrays.items():
        if g.shape != parrays[name].shape:
            raise ShapeMismatchError(f"{name}: gradient {g.shape} vs param {parrays[name].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite entries in d{name}")
    out = params if inplace else params.copy()
    for name, arr in out.arrays().items():
        arr -= learning_rate * garrays[name]
    return out


def evaluate(params: ModelParams, dataset: LabeledDataset, model_config: ModelConfig,
             chunk: int = 2048) -> float:
    if len(dataset) == 0:
        return 0.0
    check_shapes(dataset.images[:1], params, model_config)
    correct = 0
    for start in range(0, len(dataset), chunk):
        sl = slice(start, start + chunk)
        probs = forward(dataset.images[sl], params, model_config, check=False).probs
        correct += int(np.sum(np.argmax(probs, axis=1) == dataset.labels[sl]))
    return correct / len(dataset)


def mean_loss(params: ModelParams, dataset: LabeledDataset, model_config: ModelConfig,
              chunk: int = 2048) -> float:
    total = 0.0
    for start in range(0, len(dataset), chunk):
        sl = slice(start, start + chunk)
        trace = forward(dataset.images[sl], params, model_config, check=False)
        total += float(cross_entropy_from_logits(trace.pooled, dataset.labels[sl]).sum())
    return total / len(dataset)


def train(dataset_train: LabeledDataset, dataset_test: Optional[LabeledDataset],
          config: GradConfig, model_config: ModelConfig,
          params: Optional[ModelParams] = None, on_record=None):
    """Mini-batch SGD on mean softmax cross-entropy.

    Returns ``(params, records)``. A record is emitted every ``eval_every``
    iterations (or at the end of each epoch when it is 0) and once more after
    the last iteration if that was not already an evaluation point.
    ``train_accuracy`` is measured on the whole training set.
    """
    if len(dataset_train) == 0:
        raise EmptyDatasetError("training set is empty")
    if params is None:
        params = init_params(model_config)
    else:
        params = params.copy()
    check_shapes(dataset_train.images[:1], params, model_config)

    records: list[MetricsRecord] = []
    iteration = 0
    pending_losses: list[float] = []

    def record(epoch):
        row = MetricsRecord(
            iteration=iteration,
            epoch=epoch,
            mean_batch_loss=float(np.mean(pending_losses)),
            train_accuracy=evaluate(params, dataset_train, model_config),
            test_accuracy=(evaluate(params, dataset_test, model_config)
                           if dataset_test is not None else None),
        )
        pending_losses.clear()
        records.append(row)
        log.info("iter %d epoch %d loss %.4f train_acc %.4f", row.iteration,
                 row.epoch, row.mean_batch_loss, row.train_accuracy)
        if on_record is not None:
            on_record(row)

    images, labels = dataset_train.images, dataset_train.labels
    for epoch in range(config.epochs):
        for idx in batches(len(dataset_train), config.batch_size, config.seed, epoch):
            loss, grads = loss_and_grad(images[idx], labels[idx], params, model_config, check=False)
            if not np.isfinite(loss):
                raise DivergenceDetected(f"loss became {loss} at iteration {iteration}")
            sgd_step(params, grads, config.learning_rate, inplace=True)
            iteration += 1
            pending_losses.append(loss)
            if config.eval_every and iteration % config.eval_every == 0:
                record(epoch)
        if not config.eval_every:
            record(epoch)
    if pending_losses:
        record(config.epochs - 1)
    return params, records
