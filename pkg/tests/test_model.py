"""
Unit tests for lib/model.py.

Tests the interaction temperature, the structured prior, the BISCUIT
variational objective and the autoencoder + flow variant.
"""

import math

import numpy as np
import pytest

from lib.errors import ConfigError, StageError
from lib.model import (
    REGIME_DIM,
    BiscuitModel,
    BiscuitNF,
    ModelConfig,
    TemperatureSchedule,
    build_model,
    logit_regularizer,
    model_from_config,
    soft_interaction_values,
)
from lib.params import ParamStore, PerLatentMLP, adam_step
from lib.rng import RngStream
from lib.tensor import LOG_2PI, Tensor, backward, no_grad, reparam_sample

OBS_DIM = 3
LATENTS = 4


@pytest.fixture
def model():
    return BiscuitModel(OBS_DIM, LATENTS, RngStream(0), hidden=8, prior_hidden=4)


@pytest.fixture
def nf_model():
    return BiscuitNF(OBS_DIM, LATENTS, RngStream(0), hidden=8, prior_hidden=4, flow_layers=2, flow_hidden=8)


def set_constant_logits(model, logits):
    """Zero the interaction networks so latent i always outputs logits[i]."""
    store = model.prior.interaction_net
    for tensor in (store.w_in, store.b_in, store.w_out):
        tensor.data[...] = 0.0
    store.b_out.data[:, 0] = logits


def triplet_batch(batch=6, seed=0):
    gen = np.random.default_rng(seed)
    return (
        gen.normal(size=(batch, OBS_DIM)),
        gen.normal(size=(batch, OBS_DIM)),
        gen.uniform(-1.5, 1.5, (batch, 2)),
    )


class TestTemperature:
    """Tests for soft interaction values and the annealing schedule."""

    def test_soft_value(self):
        """tanh(0.3 * 5) = 0.9051."""
        assert soft_interaction_values(Tensor(0.3), 5.0).item() == pytest.approx(0.9051, abs=1e-4)

    def test_zero_logit(self):
        """A zero logit is 0 at every temperature."""
        for tau in (1.0, 2.5, 5.0):
            assert soft_interaction_values(Tensor(0.0), tau).item() == 0.0

    def test_saturation(self):
        """Large |logit * tau| saturates at -1."""
        assert soft_interaction_values(Tensor(-2.0), 5.0).item() == pytest.approx(-1.0, abs=1e-8)

    def test_temperature_below_one_rejected(self):
        """tau must be at least 1."""
        with pytest.raises(ValueError):
            soft_interaction_values(Tensor(0.1), 0.5)

    def test_schedule(self):
        """Linear from tau_start to tau_end, clamped outside the run."""
        schedule = TemperatureSchedule(1.0, 5.0, 100)
        assert schedule(0) == 1.0
        assert schedule(50) == pytest.approx(3.0)
        assert schedule(100) == 5.0
        assert schedule(250) == 5.0

    def test_schedule_validation(self):
        """Temperatures below 1 or decreasing schedules are rejected."""
        with pytest.raises(ValueError):
            TemperatureSchedule(0.5, 5.0, 10)
        with pytest.raises(ValueError):
            TemperatureSchedule(3.0, 2.0, 10)


class TestLogitRegularizer:
    """Tests for the penalty on logits above -1."""

    @pytest.mark.parametrize("logit, expected", [(-1.0, 0.0), (-3.0, 0.0), (0.0, 1.0), (1.0, 4.0)])
    def test_values(self, logit, expected):
        """max(x + 1, 0)^2 before weighting."""
        assert logit_regularizer(Tensor([[logit]])).item() == pytest.approx(expected)

    def test_mean_over_entries(self):
        """The penalty is averaged over batch and latents."""
        assert logit_regularizer(Tensor([[0.0, -3.0]])).item() == pytest.approx(0.5)

    def test_drives_logits_below_default(self):
        """Minimising the penalty alone pushes the interaction logits to about -1 or lower."""
        store = ParamStore()
        net = PerLatentMLP(store, "interaction", LATENTS, REGIME_DIM + LATENTS, 8, 1, RngStream(0))
        gen = np.random.default_rng(0)
        inputs = Tensor(np.hstack([gen.uniform(-1.5, 1.5, (64, REGIME_DIM)), gen.normal(size=(64, LATENTS))]))
        for _ in range(400):
            backward(logit_regularizer(net(inputs).reshape(64, LATENTS)))
            adam_step(store, 1e-2)
        with no_grad():
            logits = net(inputs).numpy()
        assert np.median(logits) < -0.9


class TestInteractionLogits:
    """Tests for the per-latent interaction outputs."""

    def test_hard_interaction_sign_rule(self, model):
        """Positive logits interact; zero and negative ones do not."""
        set_constant_logits(model, [0.3, -0.3, 0.0, 1.0])
        r, z = np.array([0.1, 0.2]), np.zeros(LATENTS)
        assert [model.hard_interaction(i, r, z) for i in range(LATENTS)] == [1, 0, 0, 1]
        assert model.interaction_logit(0, r, z) == pytest.approx(0.3)
        assert model.soft_interaction(0, r, z, 5.0) == pytest.approx(0.9051, abs=1e-4)

    def test_batch_hard_interactions(self, model):
        """hard_interactions returns an (N, M) binary array."""
        set_constant_logits(model, [0.3, -0.3, 0.0, 1.0])
        out = model.hard_interactions(np.zeros((5, 2)), np.zeros((5, LATENTS)))
        assert out.shape == (5, LATENTS)
        np.testing.assert_array_equal(out[0], [1, 0, 0, 1])

    def test_index_out_of_range(self, model):
        """Unknown latent indices are rejected."""
        with pytest.raises(IndexError):
            model.interaction_logit(LATENTS, np.zeros(2), np.zeros(LATENTS))

    def test_soft_interaction_temperature(self, model):
        """tau < 1 is rejected."""
        with pytest.raises(ValueError):
            model.soft_interaction(0, np.zeros(2), np.zeros(LATENTS), 0.9)


class TestStructuredPrior:
    """Tests for prior factorization."""

    def test_regime_enters_only_through_soft_values(self, model):
        """Regimes with equal soft interaction values give equal prior parameters."""
        set_constant_logits(model, [0.3, -0.3, 0.0, 1.0])
        z = np.random.default_rng(0).normal(size=LATENTS)
        mean_a, std_a = model.prior_params(z, np.array([-1.2, 0.4]), 3.0)
        mean_b, std_b = model.prior_params(z, np.array([0.9, 1.4]), 3.0)
        np.testing.assert_array_equal(mean_a.numpy(), mean_b.numpy())
        np.testing.assert_array_equal(std_a.numpy(), std_b.numpy())

    def test_soft_value_changes_only_its_latent(self, model):
        """Latent i's prior ignores the soft values of other latents."""
        z = np.random.default_rng(1).normal(size=LATENTS)
        set_constant_logits(model, [0.3, -0.3, 0.0, 1.0])
        before = model.prior_params(z, np.zeros(2), 2.0)[0].numpy()
        set_constant_logits(model, [0.3, -0.3, 0.0, -1.0])
        after = model.prior_params(z, np.zeros(2), 2.0)[0].numpy()
        np.testing.assert_array_equal(before[0, :3], after[0, :3])
        assert before[0, 3] != after[0, 3]

    def test_prior_std_positive(self, model):
        """Prior standard deviations are strictly positive."""
        _, std = model.prior_params(np.zeros((3, LATENTS)), np.zeros((3, 2)), 1.0)
        assert std.shape == (3, LATENTS)
        assert (std.numpy() > 0).all()


class TestBiscuitModel:
    """Tests for encoding and the negative ELBO."""

    def test_constant_encoder(self, model):
        """A zero output layer returns its bias for every input."""
        model.store["encoder.2.weight"].data[...] = 0.0
        bias = np.linspace(-1.0, 1.0, 2 * LATENTS)
        model.store["encoder.2.bias"].data[...] = bias
        mean_, std = model.encode(np.random.default_rng(0).normal(size=(5, OBS_DIM)))
        np.testing.assert_allclose(mean_.numpy(), np.tile(bias[:LATENTS], (5, 1)))
        expected_std = np.log1p(np.exp(bias[LATENTS:])) + 1e-6
        np.testing.assert_allclose(std.numpy(), np.tile(expected_std, (5, 1)))

    def test_single_observation(self, model):
        """A (D,) input gives (M,) posterior parameters."""
        mean_, std = model.encode(np.zeros(OBS_DIM))
        assert mean_.shape == (LATENTS,)
        assert std.shape == (LATENTS,)

    def test_encode_mean_and_decode_shapes(self, model):
        """Numpy helpers return (N, M) codes and (N, D) reconstructions."""
        z = model.encode_mean(np.zeros((7, OBS_DIM)))
        assert z.shape == (7, LATENTS)
        assert model.decode(z).shape == (7, OBS_DIM)

    def test_loss_terms(self, model):
        """The total is recon + KL + weighted regularizer."""
        x_prev, x_t, r = triplet_batch()
        terms = model.elbo_loss(x_prev, x_t, r, 2.0, RngStream(1), reg_weight=1e-2)
        assert terms.value == pytest.approx(terms.recon + terms.kl + terms.reg)
        assert terms.kl >= 0.0
        assert terms.recon >= OBS_DIM * (math.log(model.decoder_std) + 0.5 * LOG_2PI)
        assert terms.reg >= 0.0

    def test_loss_is_deterministic(self, model):
        """The same noise stream gives the same loss."""
        x_prev, x_t, r = triplet_batch()
        a = model.elbo_loss(x_prev, x_t, r, 2.0, RngStream(1)).value
        b = model.elbo_loss(x_prev, x_t, r, 2.0, RngStream(1)).value
        assert a == b

    def test_gradients_reach_every_parameter(self, model):
        """Encoder, decoder and both prior networks receive a nonzero gradient at initialisation."""
        x_prev, x_t, r = triplet_batch()
        backward(model.elbo_loss(x_prev, x_t, r, 1.0, RngStream(2)).total)
        missing = [path for path, tensor in model.store.items() if tensor.grad is None]
        assert missing == []
        flat = [path for path, tensor in model.store.items() if not np.any(tensor.grad != 0.0)]
        assert flat == []

    @pytest.mark.parametrize("decoder_std", [1.0, 0.1])
    def test_perfect_reconstruction(self, decoder_std):
        """Zero residual leaves only the normaliser D * (log sigma + 0.5 ln 2 pi)."""
        model = BiscuitModel(OBS_DIM, LATENTS, RngStream(0), hidden=8, prior_hidden=4, decoder_std=decoder_std)
        target = np.array([0.4, -1.2, 2.0])
        model.store["decoder.2.weight"].data[...] = 0.0
        model.store["decoder.2.bias"].data[...] = target
        x_prev, _, r = triplet_batch()
        terms = model.elbo_loss(x_prev, np.tile(target, (len(x_prev), 1)), r, 1.0, RngStream(4))
        assert terms.recon == pytest.approx(OBS_DIM * (math.log(decoder_std) + 0.5 * LOG_2PI))

    def test_smaller_decoder_std_weights_residuals_more(self):
        """The squared residual is divided by the decoder variance."""
        x_prev, x_t, r = triplet_batch()
        unit = BiscuitModel(OBS_DIM, LATENTS, RngStream(0), hidden=8, prior_hidden=4, decoder_std=1.0)
        narrow = BiscuitModel(OBS_DIM, LATENTS, RngStream(0), hidden=8, prior_hidden=4, decoder_std=0.5)
        unit_recon = unit.elbo_loss(x_prev, x_t, r, 1.0, RngStream(4)).recon
        narrow_recon = narrow.elbo_loss(x_prev, x_t, r, 1.0, RngStream(4)).recon
        unit_residual = unit_recon - 0.5 * OBS_DIM * LOG_2PI
        narrow_residual = narrow_recon - OBS_DIM * (math.log(0.5) + 0.5 * LOG_2PI)
        assert narrow_residual == pytest.approx(4.0 * unit_residual)

    def test_invalid_decoder_std(self):
        """The observation noise scale must be positive."""
        with pytest.raises(ValueError):
            BiscuitModel(OBS_DIM, LATENTS, RngStream(0), decoder_std=0.0)

    def test_kl_weight_scales_only_the_kl_term(self, model):
        """During warm-up the total uses the weighted KL; the reported KL stays unweighted."""
        x_prev, x_t, r = triplet_batch()
        full = model.elbo_loss(x_prev, x_t, r, 2.0, RngStream(1))
        warm = model.elbo_loss(x_prev, x_t, r, 2.0, RngStream(1), kl_weight=0.25)
        assert warm.kl == full.kl
        assert warm.value == pytest.approx(warm.recon + 0.25 * warm.kl + warm.reg)

    def test_kl_matches_monte_carlo(self, model):
        """The analytic KL term agrees with a sampled estimate of E_q[log q - log p]."""
        x_prev, x_t, r = triplet_batch()
        rng = RngStream(1)
        terms = model.elbo_loss(x_prev, x_t, r, 2.0, rng)
        with no_grad():
            mean_prev, std_prev = model.encode(x_prev)
            z_prev = reparam_sample(mean_prev, std_prev, rng.split("z_prev"))
            mean_q, std_q = (t.numpy() for t in model.encode(x_t))
            mean_p, std_p = (t.numpy() for t in model.prior_params(z_prev.numpy(), r, 2.0))
        eps = np.random.default_rng(0).standard_normal((100_000, *mean_q.shape))
        z = mean_q + std_q * eps
        log_q = -0.5 * eps**2 - np.log(std_q)
        log_p = -0.5 * ((z - mean_p) / std_p) ** 2 - np.log(std_p)
        estimate = (log_q - log_p).sum(axis=-1).mean()
        assert estimate == pytest.approx(terms.kl, abs=0.02)

    def test_loss_finite_across_temperatures(self, model):
        """The objective stays finite over the whole annealing range, also for large inputs."""
        x_prev, x_t, r = triplet_batch()
        for tau in np.linspace(1.0, 5.0, 17):
            for scale in (1.0, 10.0):
                terms = model.elbo_loss(x_prev * scale, x_t * scale, r, float(tau), RngStream(5))
                assert math.isfinite(terms.value), (tau, scale)

    def test_loss_gradcheck_on_decoder_bias(self, model):
        """Analytic gradients of the ELBO match finite differences."""
        x_prev, x_t, r = triplet_batch(batch=3)
        bias = model.store["decoder.2.bias"]
        bias.zero_grad()
        backward(model.elbo_loss(x_prev, x_t, r, 1.0, RngStream(3)).total)
        analytic = bias.grad.copy()
        h = 1e-5
        numeric = np.zeros_like(analytic)
        for k in range(bias.data.size):
            bias.data[k] += h
            upper = model.elbo_loss(x_prev, x_t, r, 1.0, RngStream(3)).value
            bias.data[k] -= 2 * h
            lower = model.elbo_loss(x_prev, x_t, r, 1.0, RngStream(3)).value
            bias.data[k] += h
            numeric[k] = (upper - lower) / (2 * h)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7)


class TestBiscuitNF:
    """Tests for the two-stage variant."""

    def test_identity_flow_at_init(self, nf_model):
        """Zero-initialised couplings map codes to themselves with log_det 0."""
        y = np.random.default_rng(0).normal(size=(5, LATENTS))
        z, log_det = nf_model.flow_forward(y)
        np.testing.assert_array_equal(z.numpy(), y)
        np.testing.assert_array_equal(log_det.numpy(), np.zeros(5))

    def test_flow_inverse(self, nf_model):
        """inverse undoes forward for non-trivial couplings."""
        gen = np.random.default_rng(1)
        for path, tensor in nf_model.flow_store.items():
            if path.startswith("flow."):
                tensor.data[...] = gen.normal(scale=0.5, size=tensor.shape)
        y = gen.normal(size=(6, LATENTS))
        z, _ = nf_model.flow_forward(y)
        np.testing.assert_allclose(nf_model.flow.inverse(z).numpy(), y, atol=1e-10)

    def test_flow_before_autoencoder_rejected(self, nf_model):
        """Flow training needs a finished autoencoder stage."""
        y_prev, y_t, r = np.zeros((2, LATENTS)), np.zeros((2, LATENTS)), np.zeros((2, 2))
        with pytest.raises(StageError):
            nf_model.flow_train_loss(y_prev, y_t, r, 1.0)

    def test_autoencoder_frozen_after_stage(self, nf_model):
        """The autoencoder cannot be trained again once frozen."""
        nf_model.finish_ae_stage()
        with pytest.raises(StageError):
            nf_model.ae_loss(np.zeros((2, OBS_DIM)), RngStream(0))

    def test_ae_loss_gradients(self, nf_model):
        """The autoencoder loss trains every autoencoder parameter."""
        terms = nf_model.ae_loss(np.random.default_rng(0).normal(size=(4, OBS_DIM)), RngStream(0))
        backward(terms.total)
        assert all(t.grad is not None for _, t in nf_model.ae_store.items())

    def test_flow_loss_trains_flow_only(self, nf_model):
        """After the switch only flow and prior parameters receive gradients."""
        nf_model.finish_ae_stage()
        gen = np.random.default_rng(2)
        codes = nf_model.ae_codes(gen.normal(size=(5, OBS_DIM)))
        terms = nf_model.flow_train_loss(codes[:-1], codes[1:], gen.uniform(-1, 1, (4, 2)), 2.0)
        assert math.isfinite(terms.value)
        backward(terms.total)
        assert all(t.grad is not None for _, t in nf_model.flow_store.items())
        assert all(t.grad is None for _, t in nf_model.ae_store.items())

    def test_encode_decode_shapes(self, nf_model):
        """Latents come from flow(encoder(x)); decoding inverts the flow first."""
        z = nf_model.encode_mean(np.zeros((3, OBS_DIM)))
        assert z.shape == (3, LATENTS)
        assert nf_model.decode(z).shape == (3, OBS_DIM)


class TestModelConstruction:
    """Tests for configuration and rebuilding from architecture dicts."""

    def test_default_latent_count(self):
        """None means twice the number of causal variables."""
        assert ModelConfig().latents_for(6) == 12

    def test_too_few_latents(self):
        """Fewer latents than causal variables is a configuration error."""
        with pytest.raises(ConfigError) as exc_info:
            ModelConfig(num_latents=3).validate(6)
        assert exc_info.value.field == "model.num_latents"

    @pytest.mark.parametrize("nf_variant, cls", [(False, BiscuitModel), (True, BiscuitNF)])
    def test_model_from_config(self, nf_variant, cls):
        """The nf_variant flag selects the learner."""
        config = ModelConfig(hidden=8, prior_hidden=4, nf_variant=nf_variant, flow_layers=2, flow_hidden=8)
        learner = model_from_config(config, OBS_DIM, 2, RngStream(0))
        assert isinstance(learner, cls)
        assert learner.num_latents == 4

    def test_build_model_round_trip(self, nf_model):
        """The architecture dict rebuilds a model with the same parameter layout."""
        rebuilt = build_model(nf_model.architecture(), RngStream(5))
        assert isinstance(rebuilt, BiscuitNF)
        for name, store in nf_model.stores().items():
            assert rebuilt.stores()[name].layout() == store.layout()

    def test_unknown_kind(self):
        """Unknown model kinds are rejected."""
        with pytest.raises(ValueError):
            build_model({"kind": "ivae"}, RngStream(0))
