"""Calibration: metrics, discrepancy collection, exit distributions, and
filtered-quantile thresholds (literal and renormalized modes)."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitflow.calibrate import (
    CollectionError,
    DiscrepancyMatrix,
    ExitSchedule,
    calibrate_thresholds,
    calibration_partition,
    collect_discrepancies,
    discrepancy,
    discrepancy_batch,
    episode_stream,
    exit_distribution,
    exit_fractions,
    nearest_rank_quantile,
)
from exitflow.nn import draw_uniform, rng_stream
from exitflow.policies import HeadConfig, OracleLayeredPolicy, tap_chain
from exitflow.task import SyntheticTaskSpec, gen_dataset

SPEC = SyntheticTaskSpec()
MLP = HeadConfig(kind="mlp")


def make_matrix(values, layers=None, baseline=2):
    values = np.asarray(values, dtype=np.float64)
    layers = layers or tuple(range(4, 4 + 2 * values.shape[0], 2))
    return DiscrepancyMatrix(values=values, exit_layers=tuple(layers),
                             baseline_layer=baseline, metric="l2")


class TestMetrics:
    def test_l2_hand_value(self):
        assert discrepancy(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]),
                           "l2") == 5.0

    def test_mad_hand_value(self):
        assert discrepancy(np.array([[1.0, 2.0]]), np.array([[2.0, 4.0]]),
                           "mean_abs_dev") == 1.5

    def test_cosine_scale_invariant(self):
        a = np.array([[1.0, 2.0], [3.0, -1.0]])
        assert discrepancy(a, 2 * a, "cosine_distance") == pytest.approx(
            0.0, abs=1e-14)

    def test_cosine_zero_norm_convention(self):
        z = np.zeros((2, 2))
        a = np.ones((2, 2))
        assert discrepancy(z, a, "cosine_distance") == 0.0
        assert discrepancy(z, z, "cosine_distance") == 0.0

    def test_cosine_opposite(self):
        a = np.array([[1.0, 0.0]])
        assert discrepancy(a, -a, "cosine_distance") == pytest.approx(2.0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_metric_axioms(self, seed):
        s = rng_stream(seed)
        a = draw_uniform(s, 8).reshape(4, 2) - 0.5
        b = draw_uniform(s, 8).reshape(4, 2) - 0.5
        for m in ("l2", "mean_abs_dev", "cosine_distance"):
            # identical inputs: exactly zero except cosine (1 - dot/norms
            # rounds at the last ulp)
            tol = 1e-14 if m == "cosine_distance" else 0.0
            assert abs(discrepancy(a, a, m)) <= tol
            d = discrepancy(a, b, m)
            assert d >= 0.0
            assert d == discrepancy(b, a, m)

    def test_batch_matches_single_bitwise(self):
        s = rng_stream(3)
        a = draw_uniform(s, 24).reshape(3, 4, 2)
        b = draw_uniform(s, 24).reshape(3, 4, 2)
        for m in ("l2", "mean_abs_dev", "cosine_distance"):
            batch = discrepancy_batch(a, b, m)
            for i in range(3):
                assert batch[i] == discrepancy(a[i], b[i], m)

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            discrepancy(np.zeros((1, 2)), np.zeros((1, 2)), "hamming")


class TestCollect:
    def test_zeta_zero_all_zero(self):
        oracle = OracleLayeredPolicy(spec=SPEC, zeta=0.0)
        eps = gen_dataset(SPEC, 1, 12)
        v = collect_discrepancies(oracle, eps, "l2", MLP, base_seed=5)
        assert v.values.shape == (3, 12)  # taps (2,4,6,8): baseline + 3
        assert np.all(v.values == 0.0)
        assert v.baseline_layer == 2
        assert v.exit_layers == (4, 6, 8)

    def test_single_sample_shape(self):
        oracle = OracleLayeredPolicy(spec=SPEC, zeta=0.1)
        eps = gen_dataset(SPEC, 2, 1)
        v = collect_discrepancies(oracle, eps, "l2", MLP, base_seed=5,
                                  taps=(2, 4, 6))
        assert v.values.shape == (2, 1)

    def test_row_means_decay_like_gamma(self):
        spec = SyntheticTaskSpec(arc_mode_p=0.75)
        oracle = OracleLayeredPolicy(spec=spec, gamma=0.5, zeta=0.3,
                                     tap_stride=1, seed=12)
        eps = gen_dataset(spec, 13, 64)
        v = collect_discrepancies(oracle, eps, "l2", MLP, base_seed=9)
        means = v.values.mean(axis=1)
        ratios = means[1:] / means[:-1]
        assert np.all(np.abs(ratios - 0.5) < 0.15)

    def test_batched_rows_equal_single_replay(self):
        oracle = OracleLayeredPolicy(spec=SPEC, gamma=0.6, zeta=0.2, seed=7)
        eps = gen_dataset(SPEC, 3, 6)
        cfg = HeadConfig(kind="fm", n_steps=3, warm_start=True)
        v = collect_discrepancies(oracle, eps, "l2", cfg, base_seed=21)
        for i, ep in enumerate(eps):
            prev = None
            row = 0
            for _, chunk in tap_chain(oracle, ep.obs, cfg,
                                      episode_stream(21, i)):
                if prev is not None:
                    assert v.values[row, i] == discrepancy(chunk, prev, "l2")
                    row += 1
                prev = chunk

    def test_failure_reports_location(self):
        class Exploding:
            n_layers = 4
            eligible_taps = (2, 4)
            chunk_shape = (2, 2)

            def supports(self, kind):
                return kind == "mlp"

            def predict_at_layer(self, obs, layer, head_cfg, init=None):
                if layer == 4:
                    raise RuntimeError("boom")
                return np.zeros((2, 2))

        eps = gen_dataset(SPEC, 4, 3)
        with pytest.raises(CollectionError, match="sample 0"):
            collect_discrepancies(Exploding(), eps, "l2", MLP, base_seed=0)

    def test_empty_dataset(self):
        oracle = OracleLayeredPolicy(spec=SPEC)
        with pytest.raises(ValueError):
            collect_discrepancies(oracle, [], "l2", MLP, base_seed=0)

    def test_needs_two_taps(self):
        oracle = OracleLayeredPolicy(spec=SPEC)
        with pytest.raises(ValueError):
            collect_discrepancies(oracle, gen_dataset(SPEC, 5, 2), "l2", MLP,
                                  base_seed=0, taps=(4,))


class TestExitDistribution:
    def test_uniform_when_c_one(self):
        p = exit_distribution("exponential", 1.0, 4)
        assert p.probs == (0.25, 0.25, 0.25, 0.25)

    def test_exponential_half(self):
        p = exit_distribution("exponential", 0.5, 3)
        np.testing.assert_allclose(p.probs, (4 / 7, 2 / 7, 1 / 7), rtol=1e-15)

    def test_exponential_index_base_invariance(self):
        # p_k ~ c^k equals p_k ~ c^(k-1) after normalization
        c, k = 0.7, 5
        p = np.asarray(exit_distribution("exponential", c, k).probs)
        raw0 = c ** np.arange(0, k)
        np.testing.assert_allclose(p, raw0 / raw0.sum(), rtol=1e-12)

    def test_gaussian_centered(self):
        p = exit_distribution("gaussian", 2.0, 3, sigma=1.0)
        e = math.exp(-0.5)
        expect = np.array([e, 1.0, e]) / (1.0 + 2.0 * e)
        np.testing.assert_allclose(p.probs, expect, rtol=1e-12)
        np.testing.assert_allclose(p.probs, (0.2741, 0.4519, 0.2741),
                                   atol=5e-5)

    def test_gamma_shape_one_is_exponential(self):
        p = exit_distribution("gamma", 1.0, 3, scale=1.0)
        raw = np.exp(-np.arange(1, 4, dtype=float))
        np.testing.assert_allclose(p.probs, raw / raw.sum(), rtol=1e-12)

    def test_normalized(self):
        for kind, extra in (("exponential", {}), ("gaussian", {"sigma": 2.0}),
                            ("gamma", {"scale": 1.5})):
            p = exit_distribution(kind, 1.7, 6, **extra)
            assert sum(p.probs) == pytest.approx(1.0, abs=1e-12)
            assert all(q > 0 for q in p.probs)

    def test_validation(self):
        with pytest.raises(ValueError):
            exit_distribution("exponential", 0.0, 3)
        with pytest.raises(ValueError):
            exit_distribution("gaussian", 1.0, 3, sigma=0.0)
        with pytest.raises(ValueError):
            exit_distribution("gamma", 1.0, 3, scale=-1.0)
        with pytest.raises(ValueError):
            exit_distribution("poisson", 1.0, 3)
        with pytest.raises(ValueError):
            exit_distribution("exponential", 1.0, 0)


class TestNearestRank:
    def test_hand_values(self):
        vals = np.array([0.1, 0.4, 0.2, 0.3])
        assert nearest_rank_quantile(vals, 0.5) == 0.2
        assert nearest_rank_quantile(vals, 0.25) == 0.1
        assert nearest_rank_quantile(vals, 0.26) == 0.2
        assert nearest_rank_quantile(vals, 1.0) == 0.4

    def test_level_zero_sentinel(self):
        assert nearest_rank_quantile(np.array([1.0]), 0.0) == -math.inf

    def test_errors(self):
        with pytest.raises(ValueError):
            nearest_rank_quantile(np.array([]), 0.5)
        with pytest.raises(ValueError):
            nearest_rank_quantile(np.array([1.0]), 1.5)

    @given(st.integers(1, 50), st.floats(0.01, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_matches_counting_definition(self, n, q):
        # nearest-rank quantile = smallest value eta in the set with
        # #{x <= eta} >= ceil(q * n)
        vals = draw_uniform(rng_stream(n), n)
        eta = nearest_rank_quantile(vals, q)
        need = math.ceil(q * n)
        assert np.sum(vals <= eta) >= need
        below = vals[vals < eta]
        assert np.sum(vals <= below.max()) < need if below.size else True


class TestCalibrate:
    def test_worked_example(self):
        v = make_matrix([[0.1, 0.4, 0.2, 0.3], [0.5, 0.5, 0.5, 0.5]],
                        layers=(4, 6))
        p = exit_distribution("exponential", 1.0, 2)  # (0.5, 0.5)
        sched = calibrate_thresholds(v, p, mode="renormalized")
        assert sched.thresholds[0] == 0.2
        assert sched.thresholds[1] == math.inf
        part = calibration_partition(v, sched)
        np.testing.assert_array_equal(part, [0, 1, 0, 1])
        np.testing.assert_allclose(exit_fractions(part, 2), [0.5, 0.5])

    def test_single_exit_all_exit_there(self):
        v = make_matrix([[0.3, 0.1, 0.9]], layers=(4,))
        p = exit_distribution("exponential", 1.0, 1)  # (1.0,)
        sched = calibrate_thresholds(v, p)
        assert sched.thresholds == (math.inf,)
        assert np.all(calibration_partition(v, sched) == 0)

    def test_all_zero_discrepancies(self):
        v = make_matrix(np.zeros((3, 5)))
        p = exit_distribution("exponential", 0.5, 3)
        sched = calibrate_thresholds(v, p)
        assert sched.thresholds[0] == 0.0
        assert sched.thresholds[-1] == math.inf
        assert sched.exhausted  # nothing survives the first filter
        part = calibration_partition(v, sched)
        assert np.all(part == 0)

    def test_renormalized_fractions_track_target(self):
        n = 2000
        vals = draw_uniform(rng_stream(8), 4 * n).reshape(4, n)
        v = make_matrix(vals, layers=(4, 6, 8, 10))
        p = exit_distribution("exponential", 0.5, 4)
        sched = calibrate_thresholds(v, p, mode="renormalized")
        frac = exit_fractions(calibration_partition(v, sched), 4)
        np.testing.assert_allclose(frac, p.probs, atol=0.01)

    def test_literal_fraction_among_remaining(self):
        n = 1000
        vals = draw_uniform(rng_stream(9), 3 * n).reshape(3, n)
        v = make_matrix(vals, layers=(4, 6, 8))
        p = exit_distribution("exponential", 0.5, 3)
        sched = calibrate_thresholds(v, p, mode="literal")
        part = calibration_partition(v, sched)
        remaining = n
        for k in range(2):
            exited = int(np.sum(part == k))
            assert abs(exited / remaining - p.probs[k]) <= 1.0 / remaining
            remaining -= exited

    def test_literal_exhausts_late_taps_when_p_large(self):
        # high literal levels keep assigning most samples early
        n = 50
        vals = draw_uniform(rng_stream(10), 3 * n).reshape(3, n)
        v = make_matrix(vals, layers=(4, 6, 8))
        p = exit_distribution("exponential", 0.1, 3)  # ~ (0.90, 0.09, 0.009)
        sched_lit = calibrate_thresholds(v, p, mode="literal")
        sched_ren = calibrate_thresholds(v, p, mode="renormalized")
        # renormalized levels are higher at later taps
        assert sched_ren.thresholds[1] >= sched_lit.thresholds[1]

    def test_partition_is_total_and_disjoint(self):
        vals = draw_uniform(rng_stream(11), 4 * 100).reshape(4, 100)
        v = make_matrix(vals, layers=(4, 6, 8, 10))
        p = exit_distribution("gaussian", 2.0, 4, sigma=1.0)
        for mode in ("literal", "renormalized"):
            part = calibration_partition(v, calibrate_thresholds(v, p, mode))
            assert part.shape == (100,)
            assert np.all((0 <= part) & (part < 4))
            assert exit_fractions(part, 4).sum() == pytest.approx(1.0)

    def test_column_permutation_invariance(self):
        vals = draw_uniform(rng_stream(12), 3 * 64).reshape(3, 64)
        v = make_matrix(vals, layers=(4, 6, 8))
        p = exit_distribution("exponential", 0.6, 3)
        sched = calibrate_thresholds(v, p)
        perm = np.argsort(draw_uniform(rng_stream(13), 64))
        v2 = make_matrix(vals[:, perm], layers=(4, 6, 8))
        sched2 = calibrate_thresholds(v2, p)
        assert sched.thresholds == sched2.thresholds
        part = calibration_partition(v, sched)
        part2 = calibration_partition(v2, sched2)
        np.testing.assert_array_equal(part[perm], part2)

    @given(st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_expected_layer_monotone_in_c(self, seed):
        n = 512
        vals = draw_uniform(rng_stream(seed), 3 * n).reshape(3, n)
        v = make_matrix(vals, layers=(4, 6, 8))
        layers = np.array([4, 6, 8])
        means = []
        for c in (0.1, 0.4, 0.7, 1.0, 1.5):
            p = exit_distribution("exponential", c, 3)
            part = calibration_partition(
                v, calibrate_thresholds(v, p, "renormalized"))
            means.append(float(layers[part].mean()))
        slack = 2 * 8 / n  # nearest-rank rounding wiggle
        assert all(b >= a - slack for a, b in zip(means, means[1:]))

    def test_k_mismatch(self):
        v = make_matrix(np.zeros((2, 4)), layers=(4, 6))
        with pytest.raises(ValueError):
            calibrate_thresholds(v, exit_distribution("exponential", 1.0, 3))

    def test_unknown_mode(self):
        v = make_matrix(np.zeros((2, 4)), layers=(4, 6))
        with pytest.raises(ValueError):
            calibrate_thresholds(v, exit_distribution("exponential", 1.0, 2),
                                 mode="percentile")

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            ExitSchedule(baseline_layer=2, exit_layers=(4, 6),
                         thresholds=(0.1, 0.2), metric="l2",
                         mode="literal")  # final not +inf
        with pytest.raises(ValueError):
            ExitSchedule(baseline_layer=2, exit_layers=(4,),
                         thresholds=(math.inf, math.inf), metric="l2",
                         mode="literal")

    def test_matrix_validation(self):
        with pytest.raises(ValueError):
            make_matrix(np.full((1, 3), np.nan), layers=(4,))
        with pytest.raises(ValueError):
            make_matrix(-np.ones((1, 3)), layers=(4,))
        with pytest.raises(ValueError):
            make_matrix(np.zeros((2, 3)), layers=(6, 4))
        with pytest.raises(ValueError):
            DiscrepancyMatrix(values=np.zeros((1, 3)), exit_layers=(2,),
                              baseline_layer=2, metric="l2")


class TestEnumerationOracle:
    """Brute-force check of the literal-mode semantics for tiny cases."""

    @staticmethod
    def _oracle_eta(row, level):
        # smallest candidate value eta (from the data) such that at least
        # ceil(level * n) samples satisfy V <= eta; -inf when level == 0
        if level == 0.0:
            return -math.inf
        need = math.ceil(level * len(row))
        for eta in sorted(row):
            if sum(1 for x in row if x <= eta) >= need:
                return eta
        raise AssertionError("unreachable")

    @given(st.integers(1, 8), st.integers(0, 5000))
    @settings(max_examples=60, deadline=None)
    def test_k2_matches_enumeration(self, n, seed):
        s = rng_stream(seed)
        row1 = np.round(draw_uniform(s, n), 3)
        row2 = np.round(draw_uniform(s, n), 3)
        v = make_matrix(np.stack([row1, row2]), layers=(4, 6))
        p1 = float(draw_uniform(s, 1)[0])
        p = exit_distribution("exponential", 1.0, 2)
        p = type(p)(kind=p.kind, criterion=p.criterion, extra=p.extra,
                    probs=(p1, 1.0 - p1))
        sched = calibrate_thresholds(v, p, mode="literal")
        assert sched.thresholds[0] == self._oracle_eta(list(row1), p1)
        # exits at tap 1 = all samples at or below the threshold
        part = calibration_partition(v, sched)
        expect0 = {i for i in range(n) if row1[i] <= sched.thresholds[0]}
        assert set(np.flatnonzero(part == 0)) == expect0
