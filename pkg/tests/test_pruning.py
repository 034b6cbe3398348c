"""Gradual magnitude pruning schedule and the compute-matched dense baseline."""

import numpy as np
import pytest

from dynsparse.layers import PrunedLinear
from dynsparse.pruning import (AgpPruner, PruneSchedule, agp_target_sparsity,
                               lstm_madds_per_step, magnitude_prune,
                               small_dense_config)


def sched(initial=0.0, final=0.5, start=10, end=20, freq=1):
    return PruneSchedule(initial, final, start, end, freq)


class TestSchedule:
    def test_boundaries(self):
        s = sched()
        assert agp_target_sparsity(10, s) == pytest.approx(0.0)
        assert agp_target_sparsity(20, s) == pytest.approx(0.5)
        assert agp_target_sparsity(25, s) == pytest.approx(0.5)
        assert agp_target_sparsity(5, s) == pytest.approx(0.0)

    def test_midpoint_value(self):
        # 0.5 * (1 - 0.5^3) at the halfway epoch
        assert agp_target_sparsity(15, sched()) == pytest.approx(0.4375)

    def test_monotone_non_decreasing(self):
        s = sched(initial=0.1, final=0.8)
        levels = [agp_target_sparsity(e, s) for e in np.linspace(0, 30, 200)]
        assert np.all(np.diff(levels) >= 0.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            PruneSchedule(0.6, 0.5, 0, 10)
        with pytest.raises(ValueError):
            PruneSchedule(0.0, 1.0, 0, 10)
        with pytest.raises(ValueError):
            PruneSchedule(0.0, 0.5, 10, 10)
        with pytest.raises(ValueError):
            PruneSchedule(0.0, 0.5, 0, 10, 0)


class TestMagnitudePrune:
    def test_zero_target_keeps_everything(self, rng):
        w = rng.standard_normal((3, 4))
        assert magnitude_prune(w, 0.0).all()

    def test_drops_smallest_magnitudes(self):
        mask = magnitude_prune(np.array([1.0, -3.0, 2.0, 0.5]), 0.5)
        np.testing.assert_array_equal(mask, [False, True, True, False])

    def test_achieved_matches_target_within_one_count(self, rng):
        w = rng.standard_normal(97)
        for target in (0.1, 0.33, 0.5, 0.9):
            mask = magnitude_prune(w, target)
            achieved = 1.0 - mask.mean()
            assert abs(achieved - target) <= 1.0 / w.size

    def test_ties_break_toward_lower_index(self):
        mask = magnitude_prune(np.array([1.0, 1.0, 1.0, 1.0]), 0.5)
        np.testing.assert_array_equal(mask, [False, False, True, True])

    def test_shape_preserved(self, rng):
        w = rng.standard_normal((4, 6))
        assert magnitude_prune(w, 0.25).shape == (4, 6)

    def test_validation(self):
        with pytest.raises(ValueError):
            magnitude_prune(np.ones(4), 1.0)


class TestAgpPruner:
    def make(self, rng, n=6, **kw):
        layers = [PrunedLinear.create(n, n, rng) for _ in range(2)]
        return layers, AgpPruner(layers, sched(**kw))

    def test_idle_before_start(self, rng):
        layers, pruner = self.make(rng)
        assert pruner.on_epoch(5) is None
        assert all(layer.mask.all() for layer in layers)
        assert pruner.current_sparsity() == 0.0

    def test_ramps_and_freezes(self, rng):
        layers, pruner = self.make(rng)
        mid = pruner.on_epoch(15)
        assert mid == pytest.approx(0.4375)
        for layer in layers:
            assert abs(layer.sparsity() - 0.4375) <= 1.0 / layer.weight.size
        assert pruner.on_epoch(20) == pytest.approx(0.5)
        frozen = [layer.mask.copy() for layer in layers]
        layers[0].weight.data[:] = 100.0  # would unprune everything if live
        assert pruner.on_epoch(21) is None
        for layer, before in zip(layers, frozen):
            np.testing.assert_array_equal(layer.mask, before)
        assert pruner.current_sparsity() == pytest.approx(0.5)

    def test_masks_rederived_during_ramp(self, rng):
        layers, pruner = self.make(rng, freq=1)
        pruner.on_epoch(12)
        victim = np.flatnonzero(~layers[0].mask.ravel())[0]
        layers[0].weight.data.ravel()[victim] = 50.0  # magnitude returns
        pruner.on_epoch(13)
        assert layers[0].mask.ravel()[victim]

    def test_prune_frequency_spacing(self, rng):
        layers, pruner = self.make(rng, freq=3)
        assert pruner.on_epoch(10) is not None
        assert pruner.on_epoch(11) is None
        assert pruner.on_epoch(12) is None
        assert pruner.on_epoch(13) is not None
        # the final level always lands even off-cadence
        assert pruner.on_epoch(20) == pytest.approx(0.5)


def test_lstm_madds_formula():
    # first layer: 4h*e + 4h*h; each later layer: 8h^2
    assert lstm_madds_per_step(10, embed=6, layers=2) == 4 * 10 * 6 + 4 * 100 + 8 * 100
    assert lstm_madds_per_step(10) == 8 * 100 + 8 * 100


class TestSmallDense:
    def test_full_fraction_is_identity(self):
        assert small_dense_config(1536, 1.0) == 1536

    def test_matched_size_hits_target_fraction(self):
        base = lstm_madds_per_step(1536)
        for frac in (0.1, 0.5):
            h = small_dense_config(1536, frac)
            assert abs(lstm_madds_per_step(h) / base - frac) <= 0.005 * frac + 0.005

    def test_custom_count_formula(self):
        # quadratic cost: matching 0.25 of the base should halve the size
        assert small_dense_config(100, 0.25, lambda h: h * h) == 50

    def test_validation(self):
        with pytest.raises(ValueError):
            small_dense_config(100, 0.0)
        with pytest.raises(ValueError):
            small_dense_config(100, 1.5)
