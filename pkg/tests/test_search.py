import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sperceptron.errors import EmptyDatasetError, SizeOutOfRangeError
from sperceptron.grad import mean_loss
from sperceptron.metrics import metrics_csv
from sperceptron.mnist_io import LabeledDataset
from sperceptron.model import ModelConfig, init_params
from sperceptron.search import (
    OppositionConfig,
    PerturbationConfig,
    SubgraphSchedule,
    graph_wise_step,
    opposite,
    phase_sizes,
    propose_modification,
    sample_subgraph,
    touched_masks,
    train_opposition,
    train_subgraph_search,
)

from conftest import separable_task

TINY = ModelConfig(n=8, class_count=2, seed=0)


class TestSampleSubgraph:
    def test_full(self):
        rng = np.random.default_rng(0)
        assert sample_subgraph(rng, 9, 9).tolist() == list(range(9))

    def test_no_duplicates(self):
        rng = np.random.default_rng(1)
        for size in range(1, 30):
            nodes = sample_subgraph(rng, 30, size)
            assert len(set(nodes.tolist())) == size

    def test_single_node_uniform(self):
        # chi-square goodness of fit over 10,000 draws, 19 dof; 43.8 is the 0.999 quantile
        rng = np.random.default_rng(12345)
        n, draws = 20, 10_000
        counts = np.bincount([sample_subgraph(rng, n, 1)[0] for _ in range(draws)], minlength=n)
        expected = draws / n
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 43.8

    @pytest.mark.parametrize("size", [0, -1, 11])
    def test_out_of_range(self, size):
        with pytest.raises(SizeOutOfRangeError):
            sample_subgraph(np.random.default_rng(0), 10, size)


class TestPhaseSizes:
    def test_halving(self):
        sched = SubgraphSchedule(initial_fraction=1.0, decay=0.5, min_nodes=2)
        assert list(itertools.islice(phase_sizes(sched, 20), 8)) == [20, 10, 5, 3, 2, 2, 2, 2]

    @given(st.integers(1, 500), st.floats(0.01, 1.0), st.floats(0.01, 0.99), st.integers(1, 50))
    def test_monotone_and_reaches_floor(self, n, frac, decay, min_nodes):
        sched = SubgraphSchedule(frac, decay, min_nodes)
        sizes = list(itertools.islice(phase_sizes(sched, n), n + 2))
        floor = min(min_nodes, n)
        assert sizes[-1] == floor
        assert all(1 <= s <= n for s in sizes)
        for a, b in zip(sizes, sizes[1:]):
            assert b < a or a == b == floor


class TestProposeModification:
    def test_locality(self):
        config = ModelConfig(n=10, class_count=2, bias_enabled=True, seed=1)
        params = init_params(config)
        params.bias = np.random.default_rng(0).normal(size=10)
        nodes = np.array([2, 5, 7])
        cand = propose_modification(params, nodes, PerturbationConfig(sigma=0.3), np.random.default_rng(4))
        masks = touched_masks(10, nodes)
        for name, arr in cand.arrays().items():
            orig = params.arrays()[name]
            outside = ~masks[name]
            assert orig[outside].tobytes() == arr[outside].tobytes()
            assert np.all(arr[masks[name]] != orig[masks[name]])

    def test_index_pattern(self):
        masks = touched_masks(4, [1])
        assert masks["W"].sum() == 4 + 4 - 1
        assert masks["V_raw"].sum() == 1 and masks["V_raw"][1, 1]
        assert masks["bias"].tolist() == [False, True, False, False]

    def test_all_nodes_touch_everything(self):
        params = init_params(TINY)
        cand = propose_modification(params, np.arange(8), PerturbationConfig(sigma=1.0), np.random.default_rng(0))
        assert np.all(cand.W != params.W) and np.all(cand.V_raw != params.V_raw)

    def test_vanishing_sigma(self):
        params = init_params(TINY)
        cand = propose_modification(params, [0, 3], PerturbationConfig(sigma=1e-300), np.random.default_rng(0))
        np.testing.assert_array_equal(cand.W, params.W)
        np.testing.assert_array_equal(cand.V_raw, params.V_raw)

    def test_original_untouched(self):
        params = init_params(TINY)
        before = params.W.copy()
        propose_modification(params, [1, 2], PerturbationConfig(), np.random.default_rng(0))
        assert np.array_equal(params.W, before)

    def test_empty(self):
        with pytest.raises(SizeOutOfRangeError):
            propose_modification(init_params(TINY), [], PerturbationConfig(), np.random.default_rng(0))


class TestGraphWiseStep:
    def test_identical_candidate_rejected(self):
        ds = separable_task()
        params = init_params(TINY)
        kept, before, after = graph_wise_step(params, params.copy(), ds, TINY)
        assert kept is params and before == after

    def test_better_candidate_accepted(self):
        ds = separable_task()
        params = init_params(TINY)
        rng = np.random.default_rng(0)
        while True:
            cand = propose_modification(params, np.arange(8), PerturbationConfig(sigma=0.05), rng)
            if mean_loss(cand, ds, TINY) < mean_loss(params, ds, TINY):
                break
        kept, before, after = graph_wise_step(params, cand, ds, TINY)
        assert kept is cand and after < before

    def test_worse_candidate_rejected(self):
        ds = separable_task()
        params = init_params(TINY)
        rng = np.random.default_rng(1)
        while True:
            cand = propose_modification(params, np.arange(8), PerturbationConfig(sigma=0.05), rng)
            if mean_loss(cand, ds, TINY) > mean_loss(params, ds, TINY):
                break
        assert graph_wise_step(params, cand, ds, TINY)[0] is params

    def test_empty(self):
        empty = LabeledDataset(np.zeros((0, 8)), [])
        with pytest.raises(EmptyDatasetError):
            graph_wise_step(init_params(TINY), init_params(TINY), empty, TINY)


class TestSubgraphSearch:
    def test_accepted_error_non_increasing(self):
        ds = separable_task()
        _, records = train_subgraph_search(
            ds, SubgraphSchedule(1.0, 0.5, 1, 100, 600), PerturbationConfig(0.05, 0.9, eval_batch=0),
            TINY, seed=3, eval_every=1)
        errors = [r.mean_batch_loss for r in records]
        assert len(errors) == 600
        assert all(b <= a for a, b in zip(errors, errors[1:]))
        assert errors[-1] < errors[0]

    def test_phase_columns(self):
        ds = separable_task()
        _, records = train_subgraph_search(
            ds, SubgraphSchedule(1.0, 0.5, 2, 10, 50), PerturbationConfig(eval_batch=0), TINY,
            seed=0, eval_every=10)
        assert [r.extra["subgraph_size"] for r in records] == [8, 4, 2, 2, 2]
        assert [r.extra["phase"] for r in records] == [0, 1, 2, 3, 4]
        accepted = [r.extra["accepted"] for r in records]
        assert accepted == sorted(accepted)

    def test_sampled_eval_batches(self):
        ds = separable_task(count=80)
        _, records = train_subgraph_search(
            ds, SubgraphSchedule(max_iterations=40, iterations_per_phase=10), PerturbationConfig(eval_batch=16),
            TINY, seed=2, eval_every=10)
        assert len(records) == 4

    def test_nothing_accepted_leaves_params(self):
        # a saturated model: noise this small cannot change the rounded loss
        ds = separable_task()
        params = init_params(TINY)
        out, records = train_subgraph_search(
            ds, SubgraphSchedule(max_iterations=20), PerturbationConfig(sigma=1e-300, eval_batch=0),
            TINY, seed=0, params=params, eval_every=20)
        assert records[-1].extra["accepted"] == 0
        assert out.W.tobytes() == params.W.tobytes()

    def test_deterministic(self):
        ds = separable_task(count=60)
        args = (ds, SubgraphSchedule(0.8, 0.6, 1, 25, 100), PerturbationConfig(0.1, 0.9, 20), TINY)
        p1, r1 = train_subgraph_search(*args, seed=7, eval_every=10)
        p2, r2 = train_subgraph_search(*args, seed=7, eval_every=10)
        assert metrics_csv(r1) == metrics_csv(r2)
        assert p1.W.tobytes() == p2.W.tobytes()
        _, r3 = train_subgraph_search(*args, seed=8, eval_every=10)
        assert metrics_csv(r1) != metrics_csv(r3)

    def test_config_validation(self):
        for bad in (dict(initial_fraction=0.0), dict(initial_fraction=1.5), dict(decay=1.0), dict(min_nodes=0)):
            with pytest.raises(ValueError):
                SubgraphSchedule(**bad)
        with pytest.raises(ValueError):
            PerturbationConfig(sigma=0.0)


class TestOpposite:
    def test_midpoint_fixed(self):
        assert opposite(0.5, -1.0, 2.0) == 0.5

    def test_endpoint(self):
        assert opposite(-1.0, -1.0, 2.0) == 2.0

    @given(st.floats(-10, 10), st.floats(-10, 0), st.floats(0.01, 10))
    def test_involution(self, w, lo, width):
        hi = lo + width
        assert opposite(opposite(w, lo, hi), lo, hi) == pytest.approx(w, abs=1e-12)

    def test_bad_interval(self):
        with pytest.raises(ValueError):
            opposite(0.0, 1.0, 1.0)


class TestOppositionSearch:
    def test_geometric_shrink(self):
        ds = separable_task()
        oc = OppositionConfig(lo=-0.5, hi=0.5, shrink=0.9, max_iterations=10, eval_batch=0,
                              coordinate_fraction=0.2)
        _, records = train_opposition(ds, oc, TINY, seed=0, eval_every=1)
        widths = [r.extra["interval_width"] for r in records]
        for t, w in enumerate(widths, 1):
            assert w == pytest.approx(0.9 ** t * 1.0, rel=1e-12)
        assert all(b <= a for a, b in zip(widths, widths[1:]))

    def test_keeps_better_and_non_increasing_on_fixed_batch(self):
        ds = separable_task()
        oc = OppositionConfig(shrink=0.97, max_iterations=200, eval_batch=0, coordinate_fraction=0.3)
        _, records = train_opposition(ds, oc, TINY, seed=1, eval_every=1)
        errors = [r.mean_batch_loss for r in records]
        assert all(b <= a for a, b in zip(errors, errors[1:]))

    def test_tie_keeps_current(self):
        # zero inputs make every network equally good, so nothing may change
        ds = LabeledDataset(np.zeros((5, 8)), [0, 1, 0, 1, 0])
        params = init_params(TINY)
        out, _ = train_opposition(ds, OppositionConfig(max_iterations=5, eval_batch=0, coordinate_fraction=1.0),
                                  TINY, seed=0, params=params, eval_every=5)
        assert out.W.tobytes() == params.W.tobytes()

    def test_deterministic(self):
        ds = separable_task(count=50)
        oc = OppositionConfig(max_iterations=30, eval_batch=10, coordinate_fraction=0.25)
        p1, r1 = train_opposition(ds, oc, TINY, seed=4, eval_every=5)
        p2, r2 = train_opposition(ds, oc, TINY, seed=4, eval_every=5)
        assert metrics_csv(r1) == metrics_csv(r2)
        assert p1.V_raw.tobytes() == p2.V_raw.tobytes()

    def test_weights_stay_in_initial_box(self):
        ds = separable_task()
        oc = OppositionConfig(lo=-0.2, hi=0.2, max_iterations=50, eval_batch=0, coordinate_fraction=0.5)
        out, _ = train_opposition(ds, oc, TINY, seed=0, eval_every=50)
        assert np.abs(out.W).max() <= 0.2 + 1e-15

    def test_config_validation(self):
        for bad in (dict(lo=1.0, hi=0.0), dict(lo=0.0), dict(shrink=1.0), dict(coordinate_fraction=0.0)):
            with pytest.raises(ValueError):
                OppositionConfig(**bad)
