"""
The BISCUIT learner and its two-stage autoencoder + flow variant.

Both models share the structured transition prior: for every latent i an
interaction network maps (R^t, z^{t-1}) to a logit whose tanh(logit * tau)
value is the soft interaction variable, and a transition network maps
(z^{t-1}, soft interaction) to the Gaussian parameters of z_i^t. R only
enters latent i's prior through its soft interaction value.
"""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from lib.errors import ConfigError, ShapeError, StageError
from lib.params import MLP, ParamStore, PerLatentMLP
from lib.rng import RngStream
from lib.tensor import (
    LOG_2PI,
    Tensor,
    as_tensor,
    concat,
    exp,
    gaussian_log_prob,
    kl_diag_gaussians,
    mean,
    no_grad,
    positive,
    relu,
    reparam_sample,
    sum_,
    tanh,
)

logger = logging.getLogger(__name__)

REGIME_DIM = 2
EVAL_CHUNK = 4096
DEFAULT_REGULARIZER_WEIGHT = 5e-4
DEFAULT_DECODER_STD = 0.1


@dataclass
class ModelConfig:
    """Architecture settings; `num_latents` None means 2K."""

    num_latents: int | None = None
    hidden: int = 128
    prior_hidden: int = 32
    decoder_std: float = DEFAULT_DECODER_STD
    nf_variant: bool = False
    flow_layers: int = 6
    flow_hidden: int = 64
    ae_noise: float = 0.05
    ae_l2: float = 1e-5

    def latents_for(self, num_vars: int) -> int:
        return 2 * num_vars if self.num_latents is None else self.num_latents

    def validate(self, num_vars: int, prefix: str = "model") -> None:
        if self.num_latents is not None and self.num_latents < num_vars:
            raise ConfigError(f"{prefix}.num_latents", f"must be at least num_vars ({num_vars})")
        for name in ("hidden", "prior_hidden", "flow_layers", "flow_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{prefix}.{name}", "must be positive")
        if self.decoder_std <= 0.0:
            raise ConfigError(f"{prefix}.decoder_std", "must be positive")
        if self.ae_noise < 0.0 or self.ae_l2 < 0.0:
            raise ConfigError(f"{prefix}.ae_noise" if self.ae_noise < 0.0 else f"{prefix}.ae_l2",
                              "must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TemperatureSchedule:
    """Linear annealing of the interaction temperature from tau_start to tau_end."""

    tau_start: float = 1.0
    tau_end: float = 5.0
    total_epochs: int = 100

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be at least 1")
        if self.tau_start < 1.0 or self.tau_end < self.tau_start:
            raise ValueError("temperatures must satisfy 1 <= tau_start <= tau_end")

    def __call__(self, epoch: int) -> float:
        e = min(max(epoch, 0), self.total_epochs)
        return self.tau_start + (self.tau_end - self.tau_start) * e / self.total_epochs


@dataclass
class LossTerms:
    """A training objective and its parts; `total` is the tensor to differentiate."""

    total: Tensor
    recon: float
    kl: float
    reg: float

    @property
    def value(self) -> float:
        return self.total.item()


def soft_interaction_values(logits: Tensor, tau: float) -> Tensor:
    """tanh(logit * tau)."""
    if tau < 1.0:
        raise ValueError(f"Temperature must be at least 1, got {tau}")
    return tanh(logits * tau)


def logit_regularizer(logits: Tensor) -> Tensor:
    """Mean over batch and latents of max(logit + 1, 0)^2, before weighting."""
    shifted = relu(as_tensor(logits) + 1.0)
    return mean(shifted * shifted)


def _batch(values, width: int, name: str) -> tuple[Tensor, bool]:
    tensor = as_tensor(values)
    single = tensor.ndim == 1
    if single:
        tensor = tensor.reshape(1, tensor.shape[0])
    if tensor.ndim != 2 or tensor.shape[1] != width:
        raise ShapeError(name, tensor.shape, (width,))
    return tensor, single


class StructuredPrior:
    """
    Per-latent interaction and transition networks.

    The interaction network of latent i reads R ⊕ z^{t-1} and emits one logit;
    the transition network of latent i reads z^{t-1} plus its own soft
    interaction value and emits (mean, pre-std).
    """

    def __init__(self, store: ParamStore, num_latents: int, hidden: int, rng: RngStream):
        self.num_latents = num_latents
        self.interaction_net = PerLatentMLP(
            store, "prior.interaction", num_latents, REGIME_DIM + num_latents, hidden, 1,
            rng.split("interaction"),
        )
        self.transition_net = PerLatentMLP(
            store, "prior.transition", num_latents, num_latents, hidden, 2,
            rng.split("transition"), extra_dim=1,
        )

    def logits(self, regimes: Tensor, z_prev: Tensor) -> Tensor:
        """(B, M) interaction logits."""
        inputs = concat([regimes, z_prev], axis=1)
        out = self.interaction_net(inputs)
        return out.reshape(out.shape[0], self.num_latents)

    def params(self, z_prev: Tensor, regimes: Tensor, tau: float) -> tuple[Tensor, Tensor, Tensor]:
        """Prior mean (B, M), std (B, M) and the logits they were conditioned on."""
        logits = self.logits(regimes, z_prev)
        soft = soft_interaction_values(logits, tau)
        out = self.transition_net(z_prev, soft)
        return out[:, :, 0], positive(out[:, :, 1]), logits


class LatentModel:
    """
    Operations shared by both learners on plain numpy inputs.

    Subclasses provide `_encode_mean`, `_decode` and a `prior`.
    """

    prior: StructuredPrior
    num_latents: int

    def _encode_mean(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def _decode(self, z: Tensor) -> Tensor:
        raise NotImplementedError

    def _chunked(self, fn, *arrays: np.ndarray) -> np.ndarray:
        results = []
        with no_grad():
            for start in range(0, len(arrays[0]), EVAL_CHUNK):
                chunk = [Tensor(a[start : start + EVAL_CHUNK]) for a in arrays]
                results.append(fn(*chunk).data)
        return np.concatenate(results, axis=0)

    def encode_mean(self, x: np.ndarray) -> np.ndarray:
        """Posterior means (N, M) of observations (N, D)."""
        return self._chunked(self._encode_mean, np.atleast_2d(x))

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Decoded observation means (N, D) of latents (N, M)."""
        return self._chunked(self._decode, np.atleast_2d(z))

    def interaction_logits(self, regimes: np.ndarray, z_prev: np.ndarray) -> np.ndarray:
        return self._chunked(self.prior.logits, np.atleast_2d(regimes), np.atleast_2d(z_prev))

    def hard_interactions(self, regimes: np.ndarray, z_prev: np.ndarray) -> np.ndarray:
        """Binarised interaction variables (N, M): 1 iff the logit is strictly positive."""
        return (self.interaction_logits(regimes, z_prev) > 0.0).astype(np.int8)

    def interaction_logit(self, i: int, regime: np.ndarray, z_prev: np.ndarray) -> float:
        if not 0 <= i < self.num_latents:
            raise IndexError(f"Latent index {i} out of range for {self.num_latents} latents")
        return float(self.interaction_logits(regime, z_prev)[0, i])

    def soft_interaction(self, i: int, regime: np.ndarray, z_prev: np.ndarray, tau: float) -> float:
        if tau < 1.0:
            raise ValueError(f"Temperature must be at least 1, got {tau}")
        return float(np.tanh(self.interaction_logit(i, regime, z_prev) * tau))

    def hard_interaction(self, i: int, regime: np.ndarray, z_prev: np.ndarray) -> int:
        return int(self.interaction_logit(i, regime, z_prev) > 0.0)

    def prior_params(self, z_prev, regimes, tau: float) -> tuple[Tensor, Tensor]:
        """Prior (mean, std) of z^t given z^{t-1} and R^t; single vectors give (1, M) outputs."""
        z, _ = _batch(z_prev, self.num_latents, "prior_params")
        r, _ = _batch(regimes, REGIME_DIM, "prior_params")
        mean_, std, _ = self.prior.params(z, r, tau)
        return mean_, std


class BiscuitModel(LatentModel):
    """
    Variational autoencoder with the structured interaction prior.

    Args:
        obs_dim: Observation dimension D
        num_latents: Latent count M
        rng: Stream the parameter initialisation is drawn from
        hidden: Width of encoder and decoder hidden layers
        prior_hidden: Width of the per-latent prior networks
        decoder_std: Standard deviation of the Gaussian observation model
    """

    kind = "biscuit"

    def __init__(
        self,
        obs_dim: int,
        num_latents: int,
        rng: RngStream,
        hidden: int = 128,
        prior_hidden: int = 32,
        decoder_std: float = DEFAULT_DECODER_STD,
    ):
        if decoder_std <= 0.0:
            raise ValueError(f"Decoder standard deviation must be positive, got {decoder_std}")
        self.logger = logging.getLogger(__name__)
        self.obs_dim = obs_dim
        self.num_latents = num_latents
        self.hidden = hidden
        self.prior_hidden = prior_hidden
        self.decoder_std = decoder_std
        self.store = ParamStore()
        self.encoder = MLP(self.store, "encoder", [obs_dim, hidden, hidden, 2 * num_latents], rng.split("encoder"))
        self.decoder = MLP(self.store, "decoder", [num_latents, hidden, hidden, obs_dim], rng.split("decoder"))
        self.prior = StructuredPrior(self.store, num_latents, prior_hidden, rng.split("prior"))
        self.logger.debug(f"BiscuitModel with {self.store.num_values()} parameters")

    def architecture(self) -> dict:
        return {
            "kind": self.kind,
            "obs_dim": self.obs_dim,
            "num_latents": self.num_latents,
            "hidden": self.hidden,
            "prior_hidden": self.prior_hidden,
            "decoder_std": self.decoder_std,
        }

    def stores(self) -> dict[str, ParamStore]:
        return {"model": self.store}

    def encode(self, x) -> tuple[Tensor, Tensor]:
        """
        Posterior parameters of q(z | x).

        Args:
            x: (D,) or (B, D) observations

        Returns:
            (mean, std) with shape (M,) or (B, M); std = softplus + 1e-6
        """
        batch, single = _batch(x, self.obs_dim, "encode")
        out = self.encoder(batch)
        m = self.num_latents
        mean_, std = out[:, :m], positive(out[:, m:])
        if single:
            return mean_.reshape(m), std.reshape(m)
        return mean_, std

    def _encode_mean(self, x: Tensor) -> Tensor:
        return self.encode(x)[0]

    def _decode(self, z: Tensor) -> Tensor:
        return self.decoder(z)

    def elbo_loss(
        self,
        x_prev,
        x_t,
        regimes,
        tau: float,
        rng: RngStream,
        reg_weight: float = DEFAULT_REGULARIZER_WEIGHT,
        kl_weight: float = 1.0,
    ) -> LossTerms:
        """
        Negative ELBO of a batch of triplets (x^{t-1}, x^t, R^t), averaged over the batch.

        One reparameterised draw of z^{t-1} conditions the prior; the KL
        between q(z^t | x^t) and the prior is analytic. The decoder is a
        Gaussian with fixed standard deviation `decoder_std`. `kl_weight`
        scales the KL term during warm-up; `LossTerms.kl` is the unweighted KL.
        """
        xp, _ = _batch(x_prev, self.obs_dim, "elbo_loss")
        xt, _ = _batch(x_t, self.obs_dim, "elbo_loss")
        r, _ = _batch(regimes, REGIME_DIM, "elbo_loss")
        if not xp.shape[0] == xt.shape[0] == r.shape[0]:
            raise ShapeError("elbo_loss", xp.shape, r.shape)

        mean_prev, std_prev = self.encode(xp)
        z_prev = reparam_sample(mean_prev, std_prev, rng.split("z_prev"))
        mean_t, std_t = self.encode(xt)
        z_t = reparam_sample(mean_t, std_t, rng.split("z_t"))

        residual = xt - self.decoder(z_t)
        variance = self.decoder_std * self.decoder_std
        log_norm = self.obs_dim * (math.log(self.decoder_std) + 0.5 * LOG_2PI)
        recon = mean(sum_(residual * residual, axis=1)) * (0.5 / variance) + log_norm
        prior_mean, prior_std, logits = self.prior.params(z_prev, r, tau)
        kl = mean(kl_diag_gaussians(mean_t, std_t, prior_mean, prior_std))
        reg = logit_regularizer(logits) * reg_weight
        total = recon + kl * kl_weight + reg
        return LossTerms(total, recon.item(), kl.item(), reg.item())


class AutoEncoder:
    """Deterministic autoencoder trained with latent noise and an L2 latent penalty."""

    def __init__(self, store: ParamStore, obs_dim: int, latent_dim: int, hidden: int, rng: RngStream):
        self.obs_dim = obs_dim
        self.latent_dim = latent_dim
        self.encoder = MLP(store, "ae.encoder", [obs_dim, hidden, hidden, latent_dim], rng.split("encoder"))
        self.decoder = MLP(store, "ae.decoder", [latent_dim, hidden, hidden, obs_dim], rng.split("decoder"))

    def loss(self, x: Tensor, rng: RngStream, noise: float = 0.05, l2: float = 1e-5) -> LossTerms:
        y = self.encoder(x)
        noisy = y + rng.normal(y.shape) * noise
        residual = x - self.decoder(noisy)
        mse = mean(residual * residual)
        penalty = mean(sum_(y * y, axis=1)) * l2
        return LossTerms(mse + penalty, mse.item(), 0.0, penalty.item())


class CouplingFlow:
    """
    Stack of affine coupling layers on vector latents.

    Layer k keeps one half of the coordinates fixed (alternating halves) and
    rescales and shifts the other half with tanh-bounded log-scales computed
    from the fixed half. Output layers start at zero, so an untrained flow is
    the identity.
    """

    def __init__(self, store: ParamStore, dim: int, num_layers: int, hidden: int, rng: RngStream):
        self.dim = dim
        self.masks = []
        self.nets = []
        for k in range(num_layers):
            mask = np.zeros(dim)
            if k % 2 == 0:
                mask[: dim // 2] = 1.0
            else:
                mask[dim // 2 :] = 1.0
            self.masks.append(mask)
            self.nets.append(MLP(store, f"flow.{k}", [dim, hidden, 2 * dim], rng.split("coupling", k), zero_last=True))

    def _scale_shift(self, k: int, fixed: Tensor) -> tuple[Tensor, Tensor]:
        out = self.nets[k](fixed)
        free = 1.0 - self.masks[k]
        return tanh(out[:, : self.dim]) * free, out[:, self.dim :] * free

    def forward(self, y: Tensor) -> tuple[Tensor, Tensor]:
        """Latents z (B, M) and log|det dz/dy| (B,)."""
        log_det: Tensor | None = None
        for k, mask in enumerate(self.masks):
            fixed = y * mask
            s, t = self._scale_shift(k, fixed)
            y = fixed + (y * exp(s) + t) * (1.0 - mask)
            layer_det = sum_(s, axis=1)
            log_det = layer_det if log_det is None else log_det + layer_det
        if log_det is None:
            log_det = Tensor(np.zeros(y.shape[0]))
        return y, log_det

    def inverse(self, z: Tensor) -> Tensor:
        for k in reversed(range(len(self.masks))):
            mask = self.masks[k]
            fixed = z * mask
            s, t = self._scale_shift(k, fixed)
            z = fixed + (z - t) * exp(s * -1.0) * (1.0 - mask)
        return z


class BiscuitNF(LatentModel):
    """
    Two-stage variant: an autoencoder compresses observations, then a
    normalizing flow maps the frozen autoencoder codes onto latents that
    follow the structured prior.
    """

    kind = "biscuit-nf"

    def __init__(
        self,
        obs_dim: int,
        num_latents: int,
        rng: RngStream,
        hidden: int = 128,
        prior_hidden: int = 32,
        flow_layers: int = 6,
        flow_hidden: int = 64,
        ae_noise: float = 0.05,
        ae_l2: float = 1e-5,
    ):
        self.logger = logging.getLogger(__name__)
        self.ae_noise = ae_noise
        self.ae_l2 = ae_l2
        self.obs_dim = obs_dim
        self.num_latents = num_latents
        self.hidden = hidden
        self.prior_hidden = prior_hidden
        self.flow_layers = flow_layers
        self.flow_hidden = flow_hidden
        self.ae_store = ParamStore()
        self.flow_store = ParamStore()
        self.autoencoder = AutoEncoder(self.ae_store, obs_dim, num_latents, hidden, rng.split("autoencoder"))
        self.flow = CouplingFlow(self.flow_store, num_latents, flow_layers, flow_hidden, rng.split("flow"))
        self.prior = StructuredPrior(self.flow_store, num_latents, prior_hidden, rng.split("prior"))
        self.ae_trained = False

    def architecture(self) -> dict:
        return {
            "kind": self.kind,
            "obs_dim": self.obs_dim,
            "num_latents": self.num_latents,
            "hidden": self.hidden,
            "prior_hidden": self.prior_hidden,
            "flow_layers": self.flow_layers,
            "flow_hidden": self.flow_hidden,
            "ae_noise": self.ae_noise,
            "ae_l2": self.ae_l2,
        }

    def stores(self) -> dict[str, ParamStore]:
        return {"ae": self.ae_store, "flow": self.flow_store}

    def ae_loss(self, x, rng: RngStream) -> LossTerms:
        """Mean squared reconstruction error under latent noise plus the L2 code penalty."""
        if self.ae_trained:
            raise StageError("Autoencoder is frozen; its stage has already finished")
        batch, _ = _batch(x, self.obs_dim, "ae_loss")
        return self.autoencoder.loss(batch, rng, self.ae_noise, self.ae_l2)

    def finish_ae_stage(self) -> None:
        """Freeze the autoencoder; the flow stage may start afterwards."""
        self.ae_store.set_trainable(False)
        self.ae_trained = True
        self.logger.info("Autoencoder frozen, flow stage unlocked")

    def ae_codes(self, x: np.ndarray) -> np.ndarray:
        return self._chunked(self.autoencoder.encoder, np.atleast_2d(x))

    def flow_forward(self, y) -> tuple[Tensor, Tensor]:
        batch, _ = _batch(y, self.num_latents, "flow_forward")
        return self.flow.forward(batch)

    def flow_train_loss(
        self,
        y_prev,
        y_t,
        regimes,
        tau: float,
        reg_weight: float = DEFAULT_REGULARIZER_WEIGHT,
    ) -> LossTerms:
        """
        Negative log-likelihood of the autoencoder codes y^t under the flow
        and the structured prior conditioned on the flowed y^{t-1}.

        Raises:
            StageError: If the autoencoder stage has not finished
        """
        if not self.ae_trained:
            raise StageError("Flow training requires a finished autoencoder stage")
        z_prev, _ = self.flow_forward(y_prev)
        z_t, log_det = self.flow_forward(y_t)
        r, _ = _batch(regimes, REGIME_DIM, "flow_train_loss")
        prior_mean, prior_std, logits = self.prior.params(z_prev, r, tau)
        nll = mean(sum_(gaussian_log_prob(z_t, prior_mean, prior_std), axis=1) * -1.0 - log_det)
        reg = logit_regularizer(logits) * reg_weight
        return LossTerms(nll + reg, nll.item(), 0.0, reg.item())

    def _encode_mean(self, x: Tensor) -> Tensor:
        return self.flow.forward(self.autoencoder.encoder(x))[0]

    def _decode(self, z: Tensor) -> Tensor:
        return self.autoencoder.decoder(self.flow.inverse(z))


Learner = BiscuitModel | BiscuitNF


def build_model(architecture: dict, rng: RngStream) -> Learner:
    """Construct a model from the architecture dict stored in checkpoints."""
    params = dict(architecture)
    kind = params.pop("kind")
    if kind == BiscuitModel.kind:
        return BiscuitModel(rng=rng, **params)
    if kind == BiscuitNF.kind:
        return BiscuitNF(rng=rng, **params)
    raise ValueError(f"Unknown model kind: {kind}")


def model_from_config(config: ModelConfig, obs_dim: int, num_vars: int, rng: RngStream) -> Learner:
    m = config.latents_for(num_vars)
    if config.nf_variant:
        return BiscuitNF(
            obs_dim, m, rng, config.hidden, config.prior_hidden, config.flow_layers, config.flow_hidden,
            config.ae_noise, config.ae_l2,
        )
    return BiscuitModel(obs_dim, m, rng, config.hidden, config.prior_hidden, config.decoder_std)
