import math

import numpy as np
import pytest

import uapforge as uf
from uapforge.attacks import FULL, MINI, Uap
from uapforge.errors import ShapeError
from uapforge.metrics import (
    PlacementPolicy,
    evaluate,
    noise_baseline,
    rca_bca,
    spr_db,
)


def constant_model(k=2, c=2, t=4, winner=0):
    params = uf.init_params(uf.ModelSpec.affine(c, t, k), 0)
    params.arrays["weight"][:] = 0.0
    params.arrays["bias"][:] = 0.0
    params.arrays["bias"][winner] = 5.0
    return params


def trial_set(values, labels, k=2):
    n = len(labels)
    return uf.TrialSet(values, labels, [0] * n, [f"c{i}" for i in range(k)])


class TestRcaBca:
    def test_hand_case(self):
        # class A: 81/90 correct, class B: 5/10 correct
        labels = np.array([0] * 90 + [1] * 10)
        preds = np.array([0] * 81 + [1] * 9 + [1] * 5 + [0] * 5)
        rca, bca, per_class = rca_bca(preds, labels)
        assert rca == pytest.approx(0.86)
        assert bca == pytest.approx(0.70)
        assert per_class == pytest.approx([0.9, 0.5])

    def test_all_correct(self):
        labels = np.array([0, 1, 2, 0])
        rca, bca, _ = rca_bca(labels, labels)
        assert rca == 1.0 and bca == 1.0

    def test_half_per_class_gives_half(self):
        labels = np.array([0, 0, 1, 1])
        preds = np.array([0, 1, 1, 0])
        rca, bca, _ = rca_bca(preds, labels)
        assert rca == 0.5 and bca == 0.5

    def test_balanced_labels_bca_equals_rca(self):
        labels = np.array([0, 0, 1, 1])
        preds = np.array([0, 0, 0, 1])  # per-class 1.0 and 0.5
        rca, bca, _ = rca_bca(preds, labels)
        assert bca == pytest.approx(rca, abs=1e-15)

    def test_absent_class_excluded(self):
        labels = np.array([0, 0, 0])
        preds = np.array([0, 0, 1])
        rca, bca, per_class = rca_bca(preds, labels, num_classes=2)
        assert math.isnan(per_class[1])
        assert bca == pytest.approx(2 / 3)

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            rca_bca([], [])


class TestAsr:
    def test_zero_uap_gives_zero(self):
        rng = np.random.default_rng(0)
        ts = trial_set(rng.normal(0, 1, (8, 2, 4)), [0, 1] * 4)
        params = uf.init_params(uf.ModelSpec.affine(2, 4, 2), 1)
        uap = Uap(FULL, np.zeros((2, 4)), xi=0.1)
        assert uf.asr(params, ts, uap) == 0.0

    def test_counts_changed_predictions(self):
        # flip predictions on exactly 3 of 4 trials via a bias-dominant model
        params = uf.init_params(uf.ModelSpec.affine(1, 1, 2), 0)
        params.arrays["weight"][:] = [[1.0], [0.0]]
        values = np.array([0.5, 0.5, 0.5, -0.5]).reshape(4, 1, 1)
        ts = trial_set(values, [0, 0, 0, 1])
        uap = Uap(FULL, np.array([[-1.0]]), xi=1.0)
        assert uf.asr(params, ts, uap) == pytest.approx(0.75)

    def test_ignores_true_labels(self):
        rng = np.random.default_rng(1)
        values = rng.normal(0, 1, (10, 2, 4))
        params = uf.init_params(uf.ModelSpec.affine(2, 4, 2), 2)
        uap = Uap(FULL, rng.normal(0, 0.05, (2, 4)), xi=1.0)
        a = uf.asr(params, trial_set(values, [0] * 10), uap)
        b = uf.asr(params, trial_set(values, [1] * 10), uap)
        assert a == b


class TestTargetRate:
    def test_constant_model_always_target(self):
        params = constant_model(winner=1)
        rng = np.random.default_rng(2)
        ts = trial_set(rng.normal(0, 1, (6, 2, 4)), [0, 1] * 3)
        uap = Uap(FULL, rng.normal(0, 0.01, (2, 4)), xi=1.0)
        assert uf.target_rate(params, ts, uap, 1) == 1.0
        assert uf.target_rate(params, ts, uap, 0) == 0.0

    def test_zero_uap_equals_clean_fraction(self):
        rng = np.random.default_rng(3)
        values = rng.normal(0, 1, (20, 2, 4))
        ts = trial_set(values, [0, 1] * 10)
        params = uf.init_params(uf.ModelSpec.affine(2, 4, 2), 3)
        uap = Uap(FULL, np.zeros((2, 4)), xi=0.1)
        from uapforge.models import predict_batch

        clean_fraction = float(np.mean(predict_batch(params, values) == 1))
        assert uf.target_rate(params, ts, uap, 1) == clean_fraction


class TestSprDb:
    def test_power_ratio_100_is_20db(self):
        # every trial has ||x||^2 = 100 * ||v||^2
        v = np.full((1, 4), 0.5)
        x = np.zeros((3, 1, 4))
        x[:, 0, 0] = 10.0  # ||x||^2 = 100, ||v||^2 = 1
        ts = trial_set(x, [0, 1, 0])
        assert spr_db(ts, Uap(FULL, v, xi=1.0)) == pytest.approx(20.0, abs=1e-9)

    def test_equal_power_is_0db(self):
        v = np.ones((2, 2))
        x = np.zeros((2, 2, 2))
        x[:, 0, 0] = 2.0  # ||x||^2 = 4 = ||v||^2
        ts = trial_set(x, [0, 1])
        assert spr_db(ts, Uap(FULL, v, xi=1.0)) == pytest.approx(0.0, abs=1e-9)

    def test_halving_v_adds_6db(self):
        rng = np.random.default_rng(4)
        x = rng.normal(0, 1, (5, 2, 8))
        ts = trial_set(x, [0, 1, 0, 1, 0])
        v = rng.normal(0, 0.3, (2, 8))
        a = spr_db(ts, Uap(FULL, v, xi=10.0))
        b = spr_db(ts, Uap(FULL, v / 2.0, xi=10.0))
        assert b - a == pytest.approx(20.0 * math.log10(2.0), abs=1e-6)

    def test_zero_uap_infinite(self):
        ts = trial_set(np.ones((2, 2, 2)), [0, 1])
        assert spr_db(ts, Uap(FULL, np.zeros((2, 2)), xi=1.0)) == math.inf

    def test_scaling_clean_shifts_by_20log10(self):
        rng = np.random.default_rng(5)
        x = rng.normal(0, 1, (4, 2, 8))
        v = rng.normal(0, 0.2, (2, 8))
        a = spr_db(trial_set(x, [0, 1, 0, 1]), Uap(FULL, v, xi=10.0))
        b = spr_db(trial_set(3.0 * x, [0, 1, 0, 1]), Uap(FULL, v, xi=10.0))
        assert b - a == pytest.approx(20.0 * math.log10(3.0), abs=1e-9)

    def test_mini_mode_pads_with_zeros(self):
        x = np.ones((2, 2, 8))
        ts = trial_set(x, [0, 1])
        uap = Uap(MINI, np.ones((1, 2)), xi=1.0)
        # ||x||^2 = 16, padded ||v||^2 = 2 regardless of placement
        expected = 10.0 * math.log10(16.0 / 2.0)
        got = spr_db(ts, uap, PlacementPolicy(count=5, seed=1))
        assert got == pytest.approx(expected, abs=1e-9)


class TestNoiseBaseline:
    def test_amplitude_bound_and_clipping(self):
        ts = trial_set(np.zeros((50, 4, 16)), [0, 1] * 25)
        noisy = noise_baseline(ts, 0.2, seed=3)
        delta = noisy.trials - ts.trials
        assert np.abs(delta).max() <= 0.2 + 1e-15
        # with 3200 standard normal draws some exceed 1, so clipping binds
        assert np.isclose(np.abs(delta).max(), 0.2)

    def test_deterministic(self):
        ts = trial_set(np.zeros((4, 2, 8)), [0, 1, 0, 1])
        a = noise_baseline(ts, 0.5, seed=9)
        b = noise_baseline(ts, 0.5, seed=9)
        assert np.array_equal(a.trials, b.trials)

    def test_xi_validated(self):
        ts = trial_set(np.zeros((2, 2, 2)), [0, 1])
        with pytest.raises(ValueError):
            noise_baseline(ts, 0.0, seed=0)


class TestEvaluate:
    def test_clean_report(self):
        rng = np.random.default_rng(6)
        ts = trial_set(rng.normal(0, 1, (10, 2, 4)), [0, 1] * 5)
        params = uf.init_params(uf.ModelSpec.affine(2, 4, 2), 4)
        rep = evaluate(params, ts)
        assert rep.asr == 0.0
        assert rep.spr_db == math.inf
        assert rep.n == 10
        assert rep.target_rate is None
        assert rep.bca == pytest.approx(np.nanmean(rep.per_class_rca))

    def test_perturbed_overrides(self):
        rng = np.random.default_rng(7)
        values = rng.normal(0, 1, (6, 2, 4))
        ts = trial_set(values, [0, 1] * 3)
        params = uf.init_params(uf.ModelSpec.affine(2, 4, 2), 5)
        rep = evaluate(params, ts, perturbed=values.copy())
        assert rep.asr == 0.0 and rep.spr_db == math.inf
