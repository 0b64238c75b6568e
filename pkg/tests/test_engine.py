"""Engine tests: local steps, aggregation, uploads, full-simulation invariants,
and equivalence with the straight-line reference implementation."""

from __future__ import annotations

import random

import numpy as np
import pytest

from dshfl import (
    FixedSchedule,
    GroupSpec,
    HyperParams,
    InitSpec,
    MinibatchSpec,
    Objective,
    RngStreams,
    ShiftedExponential,
    SimulationError,
    SmoothnessConstants,
    Topology,
    generate_synthetic,
    global_aggregate,
    global_gradient,
    local_aggregate,
    local_sgd_step,
    make_upload,
    measure_deviation,
    run_group_round,
    run_simulation,
)
from dshfl.engine import IterationEvent, RoundEvent
from dshfl.delays import STREAM_DATA
from conftest import deterministic_delay, quadratic_client, random_tiny_setup


def _two_group_setup(seed=5, dim=2, sizes=(2, 3), samples=12):
    topo = Topology(
        groups=tuple(GroupSpec(n, ShiftedExponential(1.0, 10.0)) for n in sizes),
        global_delay=ShiftedExponential(2.0, 10.0),
    )
    data = generate_synthetic(
        "quadratic", dim, list(sizes), samples, RngStreams(seed).stream(STREAM_DATA)
    )
    return topo, Objective("quadratic"), data


class TestLocalSgdStep:
    def test_zero_learning_rate_is_identity(self, objective_quadratic, identity_quadratic):
        x = np.array([0.4, -0.7])
        out = local_sgd_step(
            objective_quadratic, identity_quadratic, x, 0.0, MinibatchSpec(1),
            np.random.default_rng(0),
        )
        np.testing.assert_array_equal(out, x)

    def test_deterministic_arithmetic(self):
        # client loss (x - 0)^2 on one 1-d sample: gradient at x=1 is 2
        data = quadratic_client(np.array([[2.0]]))
        out = local_sgd_step(
            Objective("quadratic"), data, np.array([1.0]), 0.1, MinibatchSpec(None),
            np.random.default_rng(0),
        )
        np.testing.assert_allclose(out, [0.8], atol=1e-15)

    def test_full_batch_unit_rate_reaches_minimum(self, objective_quadratic, identity_quadratic):
        # identity Hessian: one step with learning rate 1/L = 1 lands on the minimizer
        for x0 in ([3.0, -2.0], [0.1, 0.9]):
            out = local_sgd_step(
                objective_quadratic, identity_quadratic, np.array(x0), 1.0,
                MinibatchSpec(None), np.random.default_rng(0),
            )
            np.testing.assert_allclose(out, [0.0, 0.0], atol=1e-12)


class TestLocalAggregate:
    def test_singleton(self):
        np.testing.assert_array_equal(local_aggregate([np.array([1.0, 1.0])]), [1.0, 1.0])

    def test_mean(self):
        out = local_aggregate([np.array([0.0, 2.0]), np.array([2.0, 0.0])])
        np.testing.assert_array_equal(out, [1.0, 1.0])

    def test_permutation_invariant(self):
        rng = np.random.default_rng(3)
        models = [rng.standard_normal(4) for _ in range(5)]
        a = local_aggregate(models)
        b = local_aggregate(models[::-1])
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            local_aggregate([np.zeros(2), np.zeros(3)])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            local_aggregate([])


class TestMakeUpload:
    def test_arithmetic(self):
        out = make_upload(np.array([0.0, 0.0]), np.array([-0.3, 0.6]), 3)
        np.testing.assert_allclose(out, [-0.1, 0.2], atol=1e-15)

    def test_single_iteration_plain_difference(self):
        out = make_upload(np.array([1.0]), np.array([4.0]), 1)
        np.testing.assert_array_equal(out, [3.0])

    def test_upload_unbiased_along_paths(self):
        # paired Monte-Carlo check of the conditional-mean identity for uploads
        obj = Objective("quadratic")
        data = [quadratic_client(np.eye(2), minimizer=[1.0, 0.0], owner=(0, k))
                for k in range(2)]
        x0 = np.array([0.5, -0.5])
        alpha, t = 0.1, 3
        n = 2000
        diffs = np.zeros((n, 2))
        for trial in range(n):
            rngs = [np.random.default_rng((trial, k)) for k in range(2)]
            gr = run_group_round(
                obj, data, x0, float(t), alpha, MinibatchSpec(1),
                deterministic_delay(1.0).sampler(np.random.default_rng(0)), rngs,
            )
            assert gr.t == t
            upload = make_upload(x0, gr.final_model, gr.t)
            path_mean = -(alpha / t) * sum(
                np.mean([obj.full_gradient(d, m) for d in data], axis=0)
                for m in gr.lps_models[:-1]
            )
            diffs[trial] = upload - path_mean
        stderr = diffs.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(diffs.mean(axis=0)) <= 3.0 * stderr + 1e-12)

    def test_zero_iterations_rejected(self):
        with pytest.raises(ValueError):
            make_upload(np.zeros(1), np.zeros(1), 0)


class TestGlobalAggregate:
    def test_equal_groups(self):
        out = global_aggregate(
            np.array([1.0, 1.0]), [np.array([0.2, 0.0]), np.array([0.0, 0.4])], [4, 4]
        )
        np.testing.assert_allclose(out, [1.1, 1.2], atol=1e-15)

    def test_single_group(self):
        out = global_aggregate(np.zeros(2), [np.array([0.5, -0.5])], [7])
        np.testing.assert_array_equal(out, [0.5, -0.5])

    def test_weighted_example(self):
        out = global_aggregate(
            np.zeros(2), [np.array([3.0, 0.0]), np.array([0.0, 3.0])], [10, 20]
        )
        np.testing.assert_allclose(out, [1.0, 2.0], atol=1e-15)

    def test_missing_upload_rejected(self):
        with pytest.raises(ValueError):
            global_aggregate(np.zeros(2), [np.zeros(2)], [4, 4])


class TestRunGroupRound:
    def test_zero_sync_time_single_iteration(self, objective_quadratic, identity_quadratic):
        gr = run_group_round(
            objective_quadratic, [identity_quadratic], np.array([1.0, 1.0]), 0.0, 0.1,
            MinibatchSpec(None),
            ShiftedExponential(1.0, 5.0).sampler(np.random.default_rng(0)),
            [np.random.default_rng(1)],
        )
        assert gr.t == 1

    def test_zero_learning_rate_keeps_model(self, objective_quadratic, identity_quadratic):
        x0 = np.array([0.3, 0.4])
        gr = run_group_round(
            objective_quadratic, [identity_quadratic], x0, 3.0, 0.0, MinibatchSpec(1),
            deterministic_delay(1.0).sampler(np.random.default_rng(0)),
            [np.random.default_rng(1)],
        )
        np.testing.assert_array_equal(gr.final_model, x0)
        assert gr.t == 3

    def test_matches_hand_transcription(self):
        # deterministic gradients (full batch), 2 clients, 3 iterations
        obj = Objective("quadratic")
        data = [
            quadratic_client(np.eye(2), minimizer=[1.0, 0.0], owner=(0, 0)),
            quadratic_client(np.eye(2), minimizer=[0.0, -1.0], owner=(0, 1)),
        ]
        x0 = np.array([0.2, 0.2])
        alpha = 0.1
        gr = run_group_round(
            obj, data, x0, 3.0, alpha, MinibatchSpec(None),
            deterministic_delay(1.0).sampler(np.random.default_rng(0)),
            [np.random.default_rng(k) for k in range(2)],
        )
        x = x0.copy()
        for _ in range(3):
            models = [x - alpha * obj.full_gradient(d, x) for d in data]
            x = (models[0] + models[1]) / 2.0
        np.testing.assert_allclose(gr.final_model, x, atol=1e-12)

    def test_telescoped_form(self):
        # final model equals start minus (alpha/|N_i|) times the gradient sum
        topo, obj, data = _two_group_setup()
        x0 = np.array([0.5, -0.5])
        gr = run_group_round(
            obj, data[1], x0, 4.0, 0.05, MinibatchSpec(2),
            topo.groups[1].delay.sampler(np.random.default_rng(0)),
            [np.random.default_rng(k) for k in range(3)],
        )
        expected = x0 - (0.05 / 3) * gr.grad_sum
        np.testing.assert_allclose(gr.final_model, expected, atol=1e-10)


class TestRunSimulation:
    def test_round_count_arithmetic(self):
        # unit local delays, S=5 -> local phase 5; global delay 5 -> rounds of 10
        topo = Topology(
            groups=(GroupSpec(2, deterministic_delay(1.0)),
                    GroupSpec(2, deterministic_delay(1.0))),
            global_delay=deterministic_delay(5.0),
        )
        data = generate_synthetic("quadratic", 2, [2, 2], 8,
                                  RngStreams(0).stream(STREAM_DATA))
        hp = HyperParams(0.05, FixedSchedule(5.0), 100.0, MinibatchSpec(2))
        result = run_simulation(topo, Objective("quadratic"), data, hp, seed=1)
        assert result.num_rounds == 10
        assert result.total_clock == pytest.approx(100.0, abs=1e-12)

    def test_budget_smaller_than_one_round(self):
        topo, obj, data = _two_group_setup()
        hp = HyperParams(0.05, FixedSchedule(5.0), 1e-3, MinibatchSpec(2))
        result = run_simulation(topo, obj, data, hp, seed=1)
        assert result.num_rounds == 1

    def test_same_seed_bit_identical(self):
        topo, obj, data = _two_group_setup()
        hp = HyperParams(0.05, FixedSchedule(3.0), 40.0, MinibatchSpec(2))
        a = run_simulation(topo, obj, data, hp, seed=9)
        b = run_simulation(topo, obj, data, hp, seed=9)
        assert a.num_rounds == b.num_rounds
        for ra, rb in zip(a.rounds, b.rounds):
            assert ra.global_model.tobytes() == rb.global_model.tobytes()
            assert ra.t_per_group == rb.t_per_group
            assert ra.clock == rb.clock
            assert ra.delay_samples == rb.delay_samples

    def test_clock_invariant(self):
        topo, obj, data = _two_group_setup()
        hp = HyperParams(0.05, FixedSchedule(3.0), 60.0, MinibatchSpec(2))
        result = run_simulation(topo, obj, data, hp, seed=2)
        acc = 0.0
        for rec in result.rounds:
            assert rec.sync_period == max(rec.elapsed_per_group)
            acc += rec.sync_period + rec.global_delay
            assert rec.clock == pytest.approx(acc, abs=1e-12)
        assert result.rounds[-1].clock >= 60.0
        if result.num_rounds > 1:
            assert result.rounds[-2].clock < 60.0

    def test_telescoping_against_gradient_log(self):
        py_rng = random.Random(77)
        for _ in range(10):
            topo, obj, data, hp, seed = random_tiny_setup(py_rng)
            result = run_simulation(topo, obj, data, hp, seed=seed)
            assert result.num_rounds >= 1

    def test_deviation_matches_recomputation(self):
        topo, obj, data = _two_group_setup()
        hp = HyperParams(0.05, FixedSchedule(3.0), 30.0, MinibatchSpec(2))
        result = run_simulation(topo, obj, data, hp, seed=3)
        for rec in result.rounds:
            recomputed = measure_deviation(rec.global_model, rec.local_models)
            assert rec.deviations == recomputed

    def test_single_group_single_step_is_centralized_gd(self):
        # one group, t=1, full batch: the global update is one exact GD step
        topo = Topology(
            groups=(GroupSpec(3, deterministic_delay(1.0)),),
            global_delay=deterministic_delay(1.0),
        )
        data = generate_synthetic("quadratic", 2, [3], 6,
                                  RngStreams(4).stream(STREAM_DATA))
        obj = Objective("quadratic")
        hp = HyperParams(
            0.1, FixedSchedule(0.0), 10.0, MinibatchSpec(None),
            init=InitSpec("gaussian", 0.5),
        )
        result = run_simulation(topo, obj, data, hp, seed=6)
        x = result.initial_model
        for rec in result.rounds:
            expected = x - 0.1 * global_gradient(obj, data, x)
            np.testing.assert_allclose(rec.global_model, expected, atol=1e-12)
            x = rec.global_model

    def test_synchrony_of_event_log(self):
        topo, obj, data = _two_group_setup()
        hp = HyperParams(0.05, FixedSchedule(3.0), 30.0, MinibatchSpec(2))
        result = run_simulation(topo, obj, data, hp, seed=3)
        current_round = 1
        for event in result.events:
            if isinstance(event, IterationEvent):
                # no local work for round u+1 before round u is aggregated
                assert event.u == current_round
            else:
                assert isinstance(event, RoundEvent)
                assert event.u == current_round
                current_round += 1
        assert current_round - 1 == result.num_rounds

    def test_learning_rate_warning(self):
        topo, obj, data = _two_group_setup()
        hp = HyperParams(2.5, FixedSchedule(1.0), 5.0, MinibatchSpec(2))
        constants = SmoothnessConstants(2.0, 1.0, 0.5)
        with pytest.warns(RuntimeWarning, match="1/L"):
            run_simulation(topo, obj, data, hp, seed=0, constants=constants)

    def test_divergence_aborts_with_round_context(self):
        topo, obj, data = _two_group_setup()
        hp = HyperParams(1e4, FixedSchedule(2.0), 1e6, MinibatchSpec(None))
        with pytest.raises(SimulationError, match="round"):
            run_simulation(topo, obj, data, hp, seed=0, max_rounds=10_000)

    def test_dataset_topology_mismatch_rejected(self):
        topo, obj, data = _two_group_setup()
        hp = HyperParams(0.05, FixedSchedule(1.0), 5.0)
        with pytest.raises(ValueError):
            run_simulation(topo, obj, data[:1], hp, seed=0)


class TestOracleEquivalence:
    def test_matches_reference_on_random_tiny_configs(self):
        from oracle_reference import reference_simulation

        py_rng = random.Random(2024)
        for trial in range(12):
            topo, obj, data, hp, seed = random_tiny_setup(py_rng)
            result = run_simulation(topo, obj, data, hp, seed=seed)
            reference = reference_simulation(topo, obj, data, hp, seed)
            assert result.num_rounds == len(reference)
            for rec, ref in zip(result.rounds, reference):
                assert rec.t_per_group == tuple(ref["t"])
                np.testing.assert_allclose(rec.global_model, ref["x_next"], atol=1e-12)
                np.testing.assert_allclose(
                    rec.elapsed_per_group, ref["elapsed"], atol=1e-12
                )
                assert rec.clock == pytest.approx(ref["clock"], abs=1e-12)
                for mine, theirs in zip(rec.local_models, ref["local_models"]):
                    np.testing.assert_allclose(mine, theirs, atol=1e-12)
