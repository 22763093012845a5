"""Derivative-free trainers.

Graph-wise subgraph search: pick a random set of paraneurons, perturb every
weight incident to that subgraph, and keep the perturbed network only if the
error of the whole network drops. Subgraphs start large and shrink phase by
phase.

Opposition search: flip a random subset of weights to their reflection
through the centre of a per-weight search interval, keep whichever of the two
networks has lower error, then narrow every interval around the kept value.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import EmptyDatasetError, SizeOutOfRangeError
from .grad import evaluate, mean_loss
from .metrics import MetricsRecord
from .mnist_io import LabeledDataset
from .model import ModelConfig, ModelParams, check_shapes, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SubgraphSchedule:
    initial_fraction: float = 1.0
    decay: float = 0.5
    min_nodes: int = 1
    iterations_per_phase: int = 200
    max_iterations: int = 2000

    def __post_init__(self):
        if not 0 < self.initial_fraction <= 1:
            raise ValueError("initial_fraction must be in (0, 1]")
        if not 0 < self.decay < 1:
            raise ValueError("decay must be in (0, 1)")
        if self.min_nodes < 1:
            raise ValueError("min_nodes must be >= 1")
        if self.iterations_per_phase < 1 or self.max_iterations < 0:
            raise ValueError("iteration counts must be positive")


@dataclass(frozen=True)
class PerturbationConfig:
    sigma: float = 0.05
    sigma_decay: float = 1.0
    eval_batch: int = 256  # 0 or >= dataset size: use the whole (fixed) dataset

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.sigma_decay <= 1:
            raise ValueError("sigma_decay must be in (0, 1]")
        if self.eval_batch < 0:
            raise ValueError("eval_batch must be >= 0")


@dataclass(frozen=True)
class OppositionConfig:
    lo: Optional[float] = None  # None: -1/sqrt(n), the init range
    hi: Optional[float] = None
    shrink: float = 0.95
    max_iterations: int = 500
    eval_batch: int = 256
    coordinate_fraction: float = 0.01

    def __post_init__(self):
        if (self.lo is None) != (self.hi is None):
            raise ValueError("give both lo and hi or neither")
        if self.lo is not None and not self.lo < self.hi:
            raise ValueError("lo must be below hi")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must be in (0, 1)")
        if not 0 < self.coordinate_fraction <= 1:
            raise ValueError("coordinate_fraction must be in (0, 1]")
        if self.max_iterations < 0 or self.eval_batch < 0:
            raise ValueError("counts must be non-negative")

    def bounds(self, n: int) -> tuple[float, float]:
        if self.lo is None:
            limit = math.sqrt(1.0 / n)
            return -limit, limit
        return self.lo, self.hi


# -- graph-wise subgraph search -----------------------------------------------

def sample_subgraph(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    if not 1 <= size <= n:
        raise SizeOutOfRangeError(f"subgraph size {size} outside [1, {n}]")
    return np.sort(rng.choice(n, size=size, replace=False))


def phase_sizes(schedule: SubgraphSchedule, n: int) -> Iterator[int]:
    """Subgraph size per phase, forever.

    Starts at ceil(initial_fraction * n), then ceil(size * decay) but always at
    least one node smaller, never below min_nodes (or above n).
    """
    floor = min(schedule.min_nodes, n)
    size = max(floor, min(n, math.ceil(schedule.initial_fraction * n)))
    while True:
        yield size
        size = max(floor, min(size - 1, math.ceil(size * schedule.decay)))


def touched_masks(n: int, nodes) -> dict[str, np.ndarray]:
    """Which entries a perturbation of ``nodes`` may change.

    W: any row or column belonging to the subgraph. V_raw: edges with both
    ends inside the subgraph. bias: the subgraph's own entries.
    """
    inside = np.zeros(n, dtype=bool)
    inside[np.asarray(nodes, dtype=np.int64)] = True
    return {
        "W": inside[:, None] | inside[None, :],
        "V_raw": inside[:, None] & inside[None, :],
        "bias": inside,
    }


def propose_modification(params: ModelParams, nodes, pconfig: PerturbationConfig,
                         rng: np.random.Generator, sigma: Optional[float] = None) -> ModelParams:
    """Copy of ``params`` with Gaussian noise on the weights incident to ``nodes``."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise SizeOutOfRangeError("cannot perturb an empty subgraph")
    sigma = pconfig.sigma if sigma is None else sigma
    masks = touched_masks(params.n, nodes)
    candidate = params.copy()
    for name, arr in candidate.arrays().items():
        mask = masks[name]
        arr[mask] += sigma * rng.standard_normal(int(mask.sum()))
    return candidate


def graph_wise_step(params: ModelParams, candidate: ModelParams, eval_items: LabeledDataset,
                    model_config: ModelConfig):
    """Keep ``candidate`` only if it strictly lowers the full-model error.

    Returns ``(kept_params, error_before, error_after)``.
    """
    if len(eval_items) == 0:
        raise EmptyDatasetError("no items to measure the error on")
    before = mean_loss(params, eval_items, model_config)
    trial = mean_loss(candidate, eval_items, model_config)
    if trial < before:
        return candidate, before, trial
    return params, before, before


def _eval_indices(rng, count: int, eval_batch: int) -> Optional[np.ndarray]:
    if eval_batch == 0 or eval_batch >= count:
        return None
    return np.sort(rng.choice(count, size=eval_batch, replace=False))


def train_subgraph_search(dataset: LabeledDataset, schedule: SubgraphSchedule,
                          pconfig: PerturbationConfig, model_config: ModelConfig,
                          seed: int, params: Optional[ModelParams] = None,
                          eval_every: int = 100, dataset_test: Optional[LabeledDataset] = None,
                          on_record=None):
    """Progressive random-subgraph accept/reject search.

    Each metrics row reports the incumbent error on the most recent
    evaluation batch as ``mean_batch_loss``, the accuracy on the whole
    ``dataset``, and the extra columns ``phase``, ``subgraph_size`` and
    ``accepted`` (proposals accepted so far). With ``eval_batch`` covering
    the dataset the reported errors never increase.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("training set is empty")
    params = init_params(model_config) if params is None else params.copy()
    check_shapes(dataset.images[:1], params, model_config)
    rng = np.random.default_rng(seed)
    n = model_config.n

    records: list[MetricsRecord] = []
    accepted = 0
    sigma = pconfig.sigma
    iteration = 0
    error = float("nan")
    phase, size = 0, n
    sizes = phase_sizes(schedule, n)

    while iteration < schedule.max_iterations:
        size = next(sizes)
        for _ in range(schedule.iterations_per_phase):
            if iteration >= schedule.max_iterations:
                break
            nodes = sample_subgraph(rng, n, size)
            idx = _eval_indices(rng, len(dataset), pconfig.eval_batch)
            items = dataset if idx is None else dataset.take(idx)
            candidate = propose_modification(params, nodes, pconfig, rng, sigma)
            kept, _, error = graph_wise_step(params, candidate, items, model_config)
            if kept is candidate:
                accepted += 1
            params = kept
            iteration += 1
            if iteration % eval_every == 0 or iteration == schedule.max_iterations:
                row = MetricsRecord(
                    iteration=iteration,
                    epoch=phase,
                    mean_batch_loss=error,
                    train_accuracy=evaluate(params, dataset, model_config),
                    test_accuracy=(evaluate(params, dataset_test, model_config)
                                   if dataset_test is not None else None),
                    extra={"phase": phase, "subgraph_size": size, "accepted": accepted},
                )
                records.append(row)
                log.debug("iter %d phase %d size %d err %.4f", iteration, phase, size, error)
                if on_record is not None:
                    on_record(row)
        phase += 1
        sigma *= pconfig.sigma_decay
    return params, records


# -- opposition search ----------------------------------------------------------

def opposite(w, lo, hi):
    """Reflection of ``w`` through the midpoint of [lo, hi]."""
    if np.any(np.asarray(lo) >= np.asarray(hi)):
        raise ValueError("lo must be below hi")
    return lo + hi - w


def train_opposition(dataset: LabeledDataset, oconfig: OppositionConfig,
                     model_config: ModelConfig, seed: int,
                     params: Optional[ModelParams] = None, eval_every: int = 50,
                     dataset_test: Optional[LabeledDataset] = None, on_record=None):
    """Opposition-based weight search with geometrically shrinking intervals.

    Each iteration draws a random coordinate subset (each weight independently
    with probability ``coordinate_fraction``), compares the network against a
    copy whose subset is replaced by opposite values, keeps the strictly better
    one (ties keep the current network), then shrinks every interval toward
    its weight's current value by ``shrink``. Rows carry ``interval_width``,
    the mean width over all weights.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("training set is empty")
    params = init_params(model_config) if params is None else params.copy()
    check_shapes(dataset.images[:1], params, model_config)
    rng = np.random.default_rng(seed)
    lo0, hi0 = oconfig.bounds(model_config.n)
    lo = {k: np.full_like(a, lo0) for k, a in params.arrays().items()}
    hi = {k: np.full_like(a, hi0) for k, a in params.arrays().items()}
    # start inside the search box
    for k, a in params.arrays().items():
        np.clip(a, lo[k], hi[k], out=a)

    records: list[MetricsRecord] = []
    error = float("nan")
    for iteration in range(1, oconfig.max_iterations + 1):
        idx = _eval_indices(rng, len(dataset), oconfig.eval_batch)
        items = dataset if idx is None else dataset.take(idx)
        candidate = params.copy()
        for k, a in candidate.arrays().items():
            mask = rng.random(a.shape) < oconfig.coordinate_fraction
            a[mask] = opposite(a[mask], lo[k][mask], hi[k][mask])
        params, _, error = graph_wise_step(params, candidate, items, model_config)
        for k, a in params.arrays().items():
            lo[k] = a + oconfig.shrink * (lo[k] - a)
            hi[k] = a + oconfig.shrink * (hi[k] - a)
        if iteration % eval_every == 0 or iteration == oconfig.max_iterations:
            width = float(np.mean(np.concatenate([(hi[k] - lo[k]).ravel() for k in lo])))
            row = MetricsRecord(
                iteration=iteration,
                epoch=0,
                mean_batch_loss=error,
                train_accuracy=evaluate(params, dataset, model_config),
                test_accuracy=(evaluate(params, dataset_test, model_config)
                               if dataset_test is not None else None),
                extra={"interval_width": width},
            )
            records.append(row)
            if on_record is not None:
                on_record(row)
    return params, records
