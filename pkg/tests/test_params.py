"""
Unit tests for lib/params.py.

Covers the parameter store, Adam updates and the per-latent networks.
"""

import numpy as np
import pytest

from lib.errors import ShapeError
from lib.params import MLP, Linear, ParamStore, PerLatentMLP, adam_step
from lib.rng import RngStream
from lib.tensor import Tensor, backward, mean, sum_


class TestParamStore:
    """Tests for ParamStore."""

    def test_add_and_lookup(self):
        """Parameters are tracked leaves addressed by path."""
        store = ParamStore()
        store.add("a.weight", np.zeros((2, 3)))
        assert "a.weight" in store
        assert store["a.weight"].requires_grad
        assert len(store) == 1
        assert store.num_values() == 6

    def test_duplicate_path_rejected(self):
        """Paths are unique."""
        store = ParamStore()
        store.add("w", np.zeros(2))
        with pytest.raises(ValueError, match="Duplicate"):
            store.add("w", np.zeros(2))

    def test_flat_state_round_trip(self):
        """flat_state and load_flat_state restore values and Adam moments."""
        store = ParamStore()
        store.add("w", np.arange(4.0))
        store["w"].grad = np.ones(4)
        adam_step(store, 0.1)
        layout, flat = store.layout(), store.flat_state()

        other = ParamStore()
        other.add("w", np.zeros(4))
        other.load_flat_state(layout, flat)
        np.testing.assert_array_equal(other["w"].data, store["w"].data)
        np.testing.assert_array_equal(other.adam_state("w").m, store.adam_state("w").m)
        assert other.adam_state("w").step == 1

    def test_load_rejects_wrong_layout(self):
        """A mismatching layout leaves the store untouched."""
        store = ParamStore()
        store.add("w", np.ones(3))
        with pytest.raises(ValueError):
            store.load_flat_state([{"path": "w", "shape": [4], "step": 0}], np.zeros(12))
        np.testing.assert_array_equal(store["w"].data, np.ones(3))

    def test_set_trainable(self):
        """Frozen parameters stop recording gradients."""
        store = ParamStore()
        w = store.add("w", np.ones(2))
        store.set_trainable(False)
        assert not (w * 2.0).requires_grad


class TestAdam:
    """Tests for adam_step."""

    def test_first_step_is_signed_learning_rate(self):
        """With bias correction the first update is ~ -lr * sign(g)."""
        store = ParamStore()
        store.add("w", np.array([1.0, -1.0]))
        store["w"].grad = np.array([2.0, -0.5])
        adam_step(store, 0.1)
        np.testing.assert_allclose(store["w"].data, [0.9, -0.9], atol=1e-6)

    def test_zero_gradient_keeps_value(self):
        """A zero gradient leaves the parameter unchanged."""
        store = ParamStore()
        store.add("w", np.array([0.5]))
        store["w"].grad = np.zeros(1)
        adam_step(store, 0.1)
        assert store["w"].data[0] == 0.5

    def test_missing_gradient_names_path(self):
        """Parameters without gradient are reported by path."""
        store = ParamStore()
        store.add("encoder.0.weight", np.ones(2))
        with pytest.raises(ValueError, match="encoder.0.weight"):
            adam_step(store, 0.1)

    def test_gradients_cleared_after_step(self):
        """The step consumes gradients."""
        store = ParamStore()
        store.add("w", np.ones(2))
        store["w"].grad = np.ones(2)
        adam_step(store, 0.1)
        assert store["w"].grad is None

    def _train(self, seed):
        store = ParamStore()
        net = MLP(store, "net", [3, 8, 1], RngStream(seed))
        gen = np.random.default_rng(0)
        x = gen.normal(size=(32, 3))
        y = (x[:, :1] * 2.0) - x[:, 1:2]
        for _ in range(100):
            residual = net(Tensor(x)) - y
            backward(mean(residual * residual))
            adam_step(store, 1e-2)
        return store

    def test_identical_runs_are_bit_identical(self):
        """Same seed and data give identical parameters after 100 steps."""
        np.testing.assert_array_equal(self._train(4).flat_state(), self._train(4).flat_state())

    def test_training_reduces_loss(self):
        """Adam decreases a simple regression loss."""
        store = ParamStore()
        net = MLP(store, "net", [2, 16, 1], RngStream(1))
        x = np.random.default_rng(1).normal(size=(64, 2))
        y = x.sum(axis=1, keepdims=True)
        losses = []
        for _ in range(300):
            residual = net(Tensor(x)) - y
            loss = mean(residual * residual)
            losses.append(loss.item())
            backward(loss)
            adam_step(store, 1e-2)
        assert losses[-1] < 0.1 * losses[0]


class TestLayers:
    """Tests for Linear, MLP and PerLatentMLP."""

    def test_linear_rejects_wrong_width(self):
        """Input width must match the layer."""
        layer = Linear(ParamStore(), "lin", 3, 2, RngStream(0))
        with pytest.raises(ShapeError):
            layer(Tensor(np.ones((4, 2))))

    def test_zero_last_layer_outputs_bias(self):
        """A zero-initialised output layer starts at zero."""
        net = MLP(ParamStore(), "net", [3, 5, 2], RngStream(0), zero_last=True)
        np.testing.assert_array_equal(net(Tensor(np.ones((4, 3)))).numpy(), np.zeros((4, 2)))

    def test_per_latent_output_shape(self):
        """One output vector per latent."""
        net = PerLatentMLP(ParamStore(), "p", 4, 6, 8, 2, RngStream(0), extra_dim=1)
        out = net(Tensor(np.ones((5, 6))), Tensor(np.zeros((5, 4))))
        assert out.shape == (5, 4, 2)

    def test_per_latent_networks_are_independent(self):
        """Changing latent 0's weights leaves latent 1's output unchanged."""
        store = ParamStore()
        net = PerLatentMLP(store, "p", 3, 4, 8, 1, RngStream(0))
        x = Tensor(np.random.default_rng(0).normal(size=(6, 4)))
        before = net(x).numpy()
        store["p.1.weight"].data[0] += 1.0
        after = net(x).numpy()
        np.testing.assert_array_equal(before[:, 1:], after[:, 1:])
        assert not np.array_equal(before[:, 0], after[:, 0])

    def test_per_latent_extra_feeds_only_its_latent(self):
        """extra[:, i] only influences network i."""
        net = PerLatentMLP(ParamStore(), "p", 3, 2, 8, 1, RngStream(0), extra_dim=1)
        x = Tensor(np.ones((2, 2)))
        base = net(x, Tensor(np.zeros((2, 3)))).numpy()
        bumped = net(x, Tensor(np.array([[0.0, 1.0, 0.0]] * 2))).numpy()
        np.testing.assert_array_equal(base[:, [0, 2]], bumped[:, [0, 2]])
        assert not np.array_equal(base[:, 1], bumped[:, 1])

    def test_per_latent_missing_extra(self):
        """Networks built with an extra input require it."""
        net = PerLatentMLP(ParamStore(), "p", 3, 2, 8, 1, RngStream(0), extra_dim=1)
        with pytest.raises(ShapeError):
            net(Tensor(np.ones((2, 2))))

    def test_per_latent_gradients_reach_every_parameter(self):
        """All stacked weights receive gradients."""
        store = ParamStore()
        net = PerLatentMLP(store, "p", 3, 2, 4, 2, RngStream(0), extra_dim=1)
        backward(sum_(net(Tensor(np.ones((5, 2))), Tensor(np.ones((5, 3))))))
        assert all(t.grad is not None for _, t in store.items())
