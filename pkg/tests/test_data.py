import json

import numpy as np
import pytest

import uapforge as uf
from uapforge.data import (
    EMA_STANDARDIZE,
    MEAN_SHIFT_CLIP,
    Z_SCORE,
    block_sizes,
    within_subject_blocks,
)
from uapforge.errors import FormatError, ShapeError


class TestGenSynthetic:
    def test_noise_free_single_subject_trials_identical(self):
        cfg = uf.SynthConfig(seed=1, noise_sigma=1e-12, subject_shift_sigma=0.0,
                             num_subjects=1, trials_per_class=10)
        ts = uf.gen_synthetic(cfg)
        for k in range(cfg.num_classes):
            trials = ts.trials[ts.labels == k]
            for other in trials[1:]:
                assert np.array_equal(trials[0], other)

    def test_deterministic(self):
        cfg = uf.SynthConfig(seed=9, trials_per_class=20)
        a, b = uf.gen_synthetic(cfg), uf.gen_synthetic(cfg)
        assert np.array_equal(a.trials, b.trials)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.subjects, b.subjects)

    def test_templates_shared_across_subjects(self):
        cfg = uf.SynthConfig(seed=2, noise_sigma=1e-12, subject_shift_sigma=0.0,
                             num_subjects=3, trials_per_class=9)
        ts = uf.gen_synthetic(cfg)
        # without noise and offsets, trials of one class match across subjects
        for k in range(cfg.num_classes):
            trials = ts.trials[ts.labels == k]
            subs = ts.subjects[ts.labels == k]
            assert len(set(subs.tolist())) == 3
            for other in trials[1:]:
                np.testing.assert_allclose(trials[0], other, atol=1e-6)

    def test_counts_and_shapes(self):
        cfg = uf.SynthConfig(seed=0, num_classes=3, trials_per_class=50, num_subjects=4)
        ts = uf.gen_synthetic(cfg)
        assert ts.n == 150
        assert ts.trials.shape == (150, cfg.channels, cfg.samples)
        assert np.bincount(ts.labels).tolist() == [50, 50, 50]
        assert ts.num_classes == 3


class TestNormalize:
    def test_zscore_constant_trial_is_zero(self):
        ts = uf.TrialSet(np.full((1, 2, 4), 7.0), [0], [0], ["a", "b"])
        out = uf.normalize(ts, Z_SCORE)
        assert np.array_equal(out.trials, np.zeros((1, 2, 4)))

    def test_mean_shift_clip_bounds(self):
        values = np.zeros((1, 1, 2))
        values[0, 0] = [-100.0, 100.0]
        ts = uf.TrialSet(values, [0], [0], ["a", "b"])
        out = uf.normalize(ts, MEAN_SHIFT_CLIP)
        assert np.array_equal(out.trials[0, 0], [-5.0, 5.0])
        rng = np.random.default_rng(0)
        big = uf.TrialSet(rng.normal(0, 100, (5, 3, 8)), [0] * 5, [0] * 5, ["a", "b"])
        clipped = uf.normalize(big, MEAN_SHIFT_CLIP)
        assert clipped.trials.min() >= -5.0 and clipped.trials.max() <= 5.0

    def test_ema_first_sample_exactly_zero(self):
        rng = np.random.default_rng(1)
        ts = uf.TrialSet(rng.normal(0, 3, (4, 2, 16)), [0] * 4, [0] * 4, ["a", "b"])
        out = uf.normalize(ts, EMA_STANDARDIZE)
        assert np.array_equal(out.trials[:, :, 0], np.zeros((4, 2)))

    def test_ema_matches_scalar_recurrence(self):
        x = np.array([[[2.0, 4.0, 1.0]]])
        ts = uf.TrialSet(x, [0], [0], ["a", "b"])
        out = uf.normalize(ts, EMA_STANDARDIZE, ema_decay=0.5)
        m, s2 = 2.0, 1.0
        expected = [0.0]
        for v in [4.0, 1.0]:
            m = 0.5 * m + 0.5 * v
            s2 = 0.5 * s2 + 0.5 * (v - m) ** 2
            expected.append((v - m) / max(np.sqrt(s2), 1e-8))
        np.testing.assert_allclose(out.trials[0, 0], expected, rtol=1e-12)

    @pytest.mark.parametrize("mode", [MEAN_SHIFT_CLIP, Z_SCORE, EMA_STANDARDIZE])
    def test_always_finite(self, mode):
        rng = np.random.default_rng(3)
        values = rng.normal(0, 50, (6, 4, 12))
        values[0] = 5.0  # constant trial
        ts = uf.TrialSet(values, [0] * 6, [0] * 6, ["a", "b"])
        out = uf.normalize(ts, mode)
        assert np.isfinite(out.trials).all()


class TestSplits:
    def test_block_sizes(self):
        assert block_sizes(10) == [2, 2, 2, 2, 2]
        assert block_sizes(12) == [3, 3, 2, 2, 2]

    def test_within_subject_partition(self):
        cfg = uf.SynthConfig(seed=4, trials_per_class=30, num_subjects=3)
        ts = uf.gen_synthetic(cfg)
        plan = within_subject_blocks(ts)
        covered = np.concatenate([plan.fold_indices(f) for f in range(5)])
        assert sorted(covered.tolist()) == list(range(ts.n))
        for f in range(5):
            for g in range(f + 1, 5):
                assert not set(plan.fold_indices(f)) & set(plan.fold_indices(g))

    def test_within_subject_split_uses_one_subject(self):
        cfg = uf.SynthConfig(seed=4, trials_per_class=30, num_subjects=3)
        ts = uf.gen_synthetic(cfg)
        train, val, test = uf.within_subject_split(ts, 1, 0)
        for part in (train, val, test):
            assert (part.subjects == 1).all()
        total = ts.subset(np.flatnonzero(ts.subjects == 1)).n
        assert train.n + val.n + test.n == total

    def test_too_few_trials_rejected(self):
        ts = uf.TrialSet(np.zeros((4, 2, 3)), [0, 1, 0, 1], [0, 0, 0, 0], ["a", "b"])
        with pytest.raises(ShapeError):
            within_subject_blocks(ts)

    def test_loso_counts(self):
        # 2 subjects with 100 trials each: 75 train, 25 val, 100 test
        cfg = uf.SynthConfig(seed=5, trials_per_class=100, num_subjects=2)
        ts = uf.gen_synthetic(cfg)
        train, val, test = uf.loso_split(ts, 1, seed=0)
        assert (train.n, val.n, test.n) == (75, 25, 100)
        assert (test.subjects == 1).all()
        assert not (train.subjects == 1).any() and not (val.subjects == 1).any()

    def test_loso_partition(self):
        cfg = uf.SynthConfig(seed=6, trials_per_class=40, num_subjects=3)
        ts = uf.gen_synthetic(cfg)
        train, val, test = uf.loso_split(ts, 2, seed=1)
        assert train.n + val.n + test.n == ts.n
        merged = np.concatenate([train.trials, val.trials, test.trials])
        assert sorted(map(tuple, merged.reshape(ts.n, -1)[:, :2].tolist())) == \
            sorted(map(tuple, ts.trials.reshape(ts.n, -1)[:, :2].tolist()))

    def test_loso_unknown_subject(self):
        cfg = uf.SynthConfig(seed=6, trials_per_class=10, num_subjects=2)
        ts = uf.gen_synthetic(cfg)
        with pytest.raises(ValueError):
            uf.loso_split(ts, 99)


class TestTrialFileIO:
    def test_round_trip_identity(self, tmp_path):
        ts = uf.gen_synthetic(uf.SynthConfig(seed=7, trials_per_class=15, num_subjects=2))
        path = tmp_path / "trials.eegb"
        uf.write_trials(ts, path)
        back = uf.read_trials(path)
        assert np.array_equal(back.trials, ts.trials)
        assert np.array_equal(back.labels, ts.labels)
        assert np.array_equal(back.subjects, ts.subjects)
        assert back.class_names == ts.class_names

    def test_label_count_mismatch_detected(self, tmp_path):
        ts = uf.gen_synthetic(uf.SynthConfig(seed=7, trials_per_class=5, num_subjects=2))
        path = tmp_path / "trials.eegb"
        uf.write_trials(ts, path)
        meta = json.loads((tmp_path / "trials.eegb.meta.json").read_text())
        meta["labels"] = meta["labels"][:-1]
        (tmp_path / "trials.eegb.meta.json").write_text(json.dumps(meta))
        with pytest.raises(FormatError):
            uf.read_trials(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.eegb"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError):
            uf.read_trials(path)

    def test_truncated_payload(self, tmp_path):
        ts = uf.gen_synthetic(uf.SynthConfig(seed=8, trials_per_class=5, num_subjects=2))
        path = tmp_path / "trials.eegb"
        uf.write_trials(ts, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(FormatError):
            uf.read_trials(path)

    def test_empty_set_round_trip(self, tmp_path):
        empty = uf.TrialSet(np.zeros((0, 3, 4)), np.zeros(0, dtype=int),
                            np.zeros(0, dtype=int), ["a", "b"])
        path = tmp_path / "empty.eegb"
        uf.write_trials(empty, path)
        back = uf.read_trials(path)
        assert back.n == 0
        assert back.trials.shape == (0, 3, 4)
        assert back.class_names == ["a", "b"]
