"""Dense, dynamically gated, and statically pruned linear layers."""

import numpy as np
import pytest

from dynsparse import autodiff as ad
from dynsparse.autodiff import Tape, Tensor
from dynsparse.layers import DenseLinear, DynamicLinear, PrunedLinear

from helpers import fd_check


class TestDenseLinear:
    def test_forward_values(self, rng):
        layer = DenseLinear.create(3, 5, rng)
        h = rng.standard_normal(5)
        np.testing.assert_allclose(layer.forward(Tensor(h)).data,
                                   layer.weight.data @ h + layer.bias.data)
        hb = rng.standard_normal((5, 4))
        np.testing.assert_allclose(layer.forward_batch(Tensor(hb)).data,
                                   layer.weight.data @ hb + layer.bias.data[:, None])

    def test_init_variants(self, rng):
        lm = DenseLinear.create(4, 4, rng, init="lm")
        assert np.all(np.abs(lm.weight.data) <= 0.05)
        with pytest.raises(ValueError):
            DenseLinear.create(4, 4, rng, init="xavier")

    def test_no_bias(self, rng):
        layer = DenseLinear.create(3, 5, rng, bias=False)
        assert layer.bias is None
        assert len(layer.parameters()) == 1
        assert layer.named_parameters("p.") == [("p.weight", layer.weight)]

    def test_madds(self, rng):
        assert DenseLinear.create(3, 5, rng).madds_per_input() == 15


def equal_score_layer(out_dim, in_dim, rows, cols, rng):
    """Dynamic layer whose gate scores are all equal, so the mask is flat."""
    layer = DynamicLinear.create(out_dim, in_dim, rows, cols, 0.0, rng)
    layer.gate_net.weight.data[:] = 0.0
    layer.gate_net.bias.data[:] = 0.5
    return layer


class TestDynamicLinear:
    def test_key_size_defaults_to_quarter_input(self, rng):
        layer = DynamicLinear.create(8, 8, 2, 2, 0.5, rng)
        assert layer.cfg.key_size == 2
        assert DynamicLinear.create(4, 2, 2, 2, 0.5, rng).cfg.key_size == 1

    def test_all_open_equals_dense(self, rng):
        layer = equal_score_layer(6, 8, 3, 2, rng)
        dense = DenseLinear(Tensor(layer.weight.assemble()), layer.bias)
        h = Tensor(rng.standard_normal(8))
        np.testing.assert_allclose(layer.forward(h).data, dense.forward(h).data,
                                   atol=1e-10)
        hb = Tensor(rng.standard_normal((8, 5)))
        np.testing.assert_allclose(layer.forward_batch(hb).data,
                                   dense.forward_batch(hb).data, atol=1e-10)

    def test_forward_matches_mask_oracle(self, rng):
        layer = DynamicLinear.create(8, 8, 2, 2, 0.5, rng)
        h = Tensor(rng.standard_normal(8))
        mask = layer.compute_mask(h)
        by_hand = (np.kron(mask.values.data.reshape(2, 2), np.ones((4, 4)))
                   * layer.weight.assemble()) @ h.data + layer.bias.data
        np.testing.assert_allclose(layer.forward(h).data, by_hand, atol=1e-12)

    def test_batch_matches_single(self, rng):
        layer = DynamicLinear.create(6, 6, 3, 3, 0.5, rng, key_size=6)
        xb = rng.standard_normal((6, 7))
        out = layer.forward_batch(Tensor(xb))
        for j in range(7):
            single = layer.forward(Tensor(xb[:, j]))
            np.testing.assert_allclose(out.data[:, j], single.data, atol=1e-12)

    def test_ledger_tracks_gating_overhead(self, rng):
        layer = DynamicLinear.create(8, 8, 2, 2, 0.5, rng, key_size=4)
        layer.forward(Tensor(rng.standard_normal(8)))
        led = layer.ledger
        assert led.dense_madds == 64
        k = layer.cfg.k if not layer.last_mask.fallback else 4
        assert led.actual_madds == k * 16 + layer.gating_madds_per_call()
        assert led.gating_madds == 4 * 4
        layer.reset_ledger()
        assert led.dense_madds == 0 and layer.fallback_count == 0

    def test_fallback_counted_and_dense(self, rng):
        layer = DynamicLinear.create(8, 8, 2, 2, 0.5, rng)
        layer.gate_net.weight.data[:] = 0.0
        layer.gate_net.bias.data[:] = -1.0  # every score dies in the relu
        h = Tensor(rng.standard_normal(8))
        out = layer.forward(h)
        assert layer.fallback_count == 1
        assert layer.last_mask.fallback
        dense = DenseLinear(Tensor(layer.weight.assemble()), layer.bias)
        np.testing.assert_allclose(out.data, dense.forward(h).data, atol=1e-10)

    def test_set_sparseness_changes_open_count(self, rng):
        layer = DynamicLinear.create(8, 8, 4, 2, 0.0, rng, key_size=8)
        assert layer.cfg.k == 8
        layer.set_sparseness(0.75)
        assert layer.cfg.k == 2
        layer.forward(Tensor(rng.standard_normal(8)))
        if not layer.last_mask.fallback:
            assert np.count_nonzero(layer.last_mask.values.data) == 2

    def test_mask_observer_sees_every_mask(self, rng):
        layer = DynamicLinear.create(8, 8, 2, 2, 0.5, rng)
        seen = []
        layer.mask_observer = seen.append
        layer.forward(Tensor(rng.standard_normal(8)))
        layer.forward_batch(Tensor(rng.standard_normal((8, 3))))
        assert len(seen) == 2
        assert seen[1].values.shape == (4, 3)

    def test_key_source_overrides_gate_input(self, rng):
        layer = DynamicLinear.create(8, 8, 2, 2, 0.5, rng, key_size=8)
        h = Tensor(rng.standard_normal(8))
        key = Tensor(rng.standard_normal(8))
        with_key = layer.compute_mask(h, key_source=key)
        direct = layer.compute_mask(key)
        np.testing.assert_array_equal(with_key.values.data, direct.values.data)

    def test_full_layer_gradients(self, rng):
        layer = DynamicLinear.create(8, 8, 2, 2, 0.5, rng, key_size=4)
        h = Tensor(rng.standard_normal(8))
        scores = layer.gate_net.scores(ad.narrow(h, 0, 4)).data
        top = np.sort(scores)[::-1]
        assert top[layer.cfg.k - 1] - top[layer.cfg.k] > 1e-3  # stable support
        probe = Tensor(rng.standard_normal(8))

        def loss():
            return ad.tsum(ad.mul(ad.tanh(layer.forward(h)), probe))

        worst = fd_check(loss, layer.parameters(), rng)
        assert worst <= 1e-4

    def test_gradients_reach_all_parameter_groups(self, rng):
        layer = DynamicLinear.create(8, 8, 2, 2, 0.5, rng, key_size=4)
        probe = Tensor(rng.standard_normal(8))
        with Tape() as tape:
            out = layer.forward(Tensor(rng.standard_normal(8)))
            tape.backward(ad.tsum(ad.mul(ad.tanh(out), probe)))
        assert layer.weight.param.grad is not None
        assert layer.gate_net.weight.grad is not None
        assert layer.gate_net.bias.grad is not None
        assert layer.bias.grad is not None

    def test_geometry_validation(self, rng):
        with pytest.raises(ValueError):
            DynamicLinear.create(8, 8, 2, 2, 0.5, rng, key_size=9)
        with pytest.raises(ValueError):
            DynamicLinear.create(8, 8, 2, 2, 0.5, rng, init="bad")


class TestPrunedLinear:
    def test_masked_forward_matches_zeroed_dense(self, rng):
        layer = PrunedLinear.create(5, 6, rng)
        mask = rng.random((5, 6)) > 0.5
        layer.set_mask(mask)
        zeroed = np.where(mask, layer.weight.data, 0.0)
        h = rng.standard_normal(6)
        np.testing.assert_allclose(layer.forward(Tensor(h)).data,
                                   zeroed @ h + layer.bias.data, atol=1e-12)
        hb = rng.standard_normal((6, 3))
        np.testing.assert_allclose(layer.forward_batch(Tensor(hb)).data,
                                   zeroed @ hb + layer.bias.data[:, None],
                                   atol=1e-12)

    def test_masked_weights_get_no_gradient(self, rng):
        layer = PrunedLinear.create(4, 4, rng)
        mask = np.ones((4, 4), dtype=bool)
        mask[0, :] = False
        layer.set_mask(mask)
        with Tape() as tape:
            out = layer.forward(Tensor(rng.standard_normal(4)))
            tape.backward(ad.tsum(out))
        np.testing.assert_array_equal(layer.weight.grad[0], 0.0)
        assert np.all(layer.weight.grad[1:] != 0.0)

    def test_sparsity_and_validation(self, rng):
        layer = PrunedLinear.create(4, 4, rng)
        assert layer.sparsity() == 0.0
        mask = np.ones((4, 4), dtype=bool)
        mask[:2] = False
        layer.set_mask(mask)
        assert layer.sparsity() == pytest.approx(0.5)
        with pytest.raises(ad.ShapeError):
            layer.set_mask(np.ones((3, 4), dtype=bool))
