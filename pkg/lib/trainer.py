"""
Deterministic training loops, checkpoints and loss logs.

Batch order of epoch e is a permutation drawn from the (seed, "shuffle", e)
stream and the reparameterisation noise of batch b from (seed, "batch", e, b),
so a run resumed from a checkpoint continues exactly like an uninterrupted one.
"""

import json
import logging
import math
import struct
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from lib.errors import CheckpointError, ConfigError, DatasetError, NumericError
from lib.model import BiscuitModel, BiscuitNF, Learner, LossTerms, TemperatureSchedule, build_model
from lib.params import ParamStore, adam_step
from lib.rng import RngStream
from lib.scm import Dataset
from lib.tensor import backward
from lib.utils import write_table

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_COLUMNS = ["epoch", "loss", "kl_term", "recon_term", "reg_term"]
FINAL_CHECKPOINT = "model.ckpt"
LATEST_CHECKPOINT = "latest.ckpt"


@dataclass
class TrainConfig:
    """
    Optimisation settings.

    The temperature schedule spans `epochs`: epoch e (1-based) trains at
    schedule(e), so the last epoch runs at tau_end.
    """

    learning_rate: float = 4e-4
    batch_size: int = 256
    epochs: int = 100
    seed: int = 42
    regularizer_weight: float = 5e-4
    tau_start: float = 1.0
    tau_end: float = 5.0
    checkpoint_every: int = 10
    ae_epochs: int = 50
    kl_warmup: int = 10

    @property
    def schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.tau_start, self.tau_end, self.epochs)

    def kl_weight(self, epoch: int) -> float:
        """Weight of the KL term in 0-based epoch `epoch`: a linear ramp to 1 over `kl_warmup` epochs."""
        if self.kl_warmup == 0:
            return 1.0
        return min(1.0, (epoch + 1) / self.kl_warmup)

    def validate(self, prefix: str = "train") -> None:
        for name in ("learning_rate", "batch_size", "epochs", "checkpoint_every", "ae_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{prefix}.{name}", "must be positive")
        if self.regularizer_weight < 0:
            raise ConfigError(f"{prefix}.regularizer_weight", "must be non-negative")
        if self.kl_warmup < 0:
            raise ConfigError(f"{prefix}.kl_warmup", "must be non-negative")
        if self.tau_start < 1.0:
            raise ConfigError(f"{prefix}.tau_start", "must be at least 1")
        if self.tau_end < self.tau_start:
            raise ConfigError(f"{prefix}.tau_end", "must not be below tau_start")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochLoss:
    epoch: int
    loss: float
    kl_term: float
    recon_term: float
    reg_term: float


@dataclass
class TrainResult:
    model: Learner
    history: list[EpochLoss] = field(default_factory=list)
    ae_history: list[EpochLoss] = field(default_factory=list)


# Checkpoints


def checkpoint_save(
    path: Path,
    model: Learner,
    epoch: int,
    tau: float,
    stage: str = "train",
) -> None:
    """
    Write an 8-byte little-endian header length, the JSON header and the
    float64 parameter/Adam blob of every store in header order.
    """
    stores = model.stores()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": model.architecture(),
        "epoch": int(epoch),
        "tau": float(tau),
        "stage": stage,
        "ae_trained": bool(getattr(model, "ae_trained", False)),
        "stores": {name: store.layout() for name, store in stores.items()},
        "store_order": list(stores),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(store.flat_state().astype("<f8").tobytes() for store in stores.values())
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(struct.pack("<Q", len(header_bytes)))
            f.write(header_bytes)
            f.write(blob)
    except OSError as e:
        raise CheckpointError(f"Error writing checkpoint {path}: {e}") from e
    logger.debug(f"Checkpoint saved: {path} (epoch {epoch})")


def _store_size(layout: list[dict]) -> int:
    return sum(3 * int(np.prod(entry["shape"], dtype=np.int64)) for entry in layout)


def checkpoint_load(path: Path, model: Learner | None = None) -> tuple[Learner, dict]:
    """
    Read a checkpoint into `model` (or into a model rebuilt from its header).

    Everything is validated before any parameter is written, so a failed
    load leaves the model untouched.

    Raises:
        CheckpointError: On truncation, version or layout mismatch
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Error reading checkpoint {path}: {e}") from e
    if len(raw) < 8:
        raise CheckpointError(f"Truncated checkpoint {path}: missing header length")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + header_len:
        raise CheckpointError(f"Truncated checkpoint {path}: incomplete header")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint header in {path}: {e}") from e
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Checkpoint version {header.get('format_version')} is not supported (expected {CHECKPOINT_VERSION})"
        )

    if model is None:
        try:
            model = build_model(header["architecture"], RngStream(0))
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"Cannot rebuild model from {path}: {e}") from e
    elif model.architecture() != header["architecture"]:
        raise CheckpointError(f"Checkpoint {path} was written for a different architecture")

    stores: dict[str, ParamStore] = model.stores()
    if header["store_order"] != list(stores):
        raise CheckpointError(f"Checkpoint {path} stores {header['store_order']} do not match the model")
    payload = raw[8 + header_len :]
    if len(payload) % 8:
        raise CheckpointError(f"Truncated checkpoint {path}: partial value at the end")
    values = np.frombuffer(payload, dtype="<f8")
    sizes = []
    for name, store in stores.items():
        layout = header["stores"][name]
        ours = [(e["path"], list(e["shape"])) for e in store.layout()]
        theirs = [(e["path"], list(e["shape"])) for e in layout]
        if ours != theirs:
            raise CheckpointError(f"Checkpoint {path} parameter layout of '{name}' does not match the model")
        sizes.append(_store_size(layout))
    if values.size != sum(sizes):
        raise CheckpointError(f"Truncated checkpoint {path}: expected {sum(sizes)} values, found {values.size}")

    offset = 0
    for (name, store), size in zip(stores.items(), sizes, strict=True):
        store.load_flat_state(header["stores"][name], values[offset : offset + size].astype(np.float64))
        offset += size
    if isinstance(model, BiscuitNF) and header.get("ae_trained"):
        model.finish_ae_stage()
    return model, header


# Training loops


def _check_finite(terms: LossTerms, epoch: int, batch_index: int) -> None:
    if not math.isfinite(terms.value):
        raise NumericError("Non-finite training loss", epoch=epoch, batch_index=batch_index)


def _run_epochs(
    store: ParamStore,
    num_samples: int,
    config: TrainConfig,
    rng: RngStream,
    start_epoch: int,
    epochs: int,
    loss_fn: Callable[[np.ndarray, int, RngStream], LossTerms],
    on_epoch_end: Callable[[int, list[EpochLoss]], None],
    history: list[EpochLoss],
    stage: str,
) -> list[EpochLoss]:
    for epoch in range(start_epoch, epochs):
        order = rng.split("shuffle", epoch).generator().permutation(num_samples)
        totals = np.zeros(4)
        for batch_index, start in enumerate(range(0, num_samples, config.batch_size)):
            idx = order[start : start + config.batch_size]
            terms = loss_fn(idx, epoch, rng.split("batch", epoch).split("noise", batch_index))
            _check_finite(terms, epoch, batch_index)
            backward(terms.total)
            adam_step(store, config.learning_rate)
            totals += len(idx) * np.array([terms.value, terms.kl, terms.recon, terms.reg])
        means = totals / num_samples
        history.append(EpochLoss(epoch + 1, *(float(v) for v in means)))
        logger.info(f"[{stage}] epoch {epoch + 1}/{epochs}: loss {means[0]:.4f} (kl {means[1]:.4f}, recon {means[2]:.4f})")
        on_epoch_end(epoch + 1, history)
    return history


def write_loss_csv(history: list[EpochLoss], path: Path) -> None:
    write_table((asdict(h) for h in history), path, columns=LOSS_COLUMNS)


def read_loss_csv(path: Path) -> list[EpochLoss]:
    if not Path(path).exists():
        return []
    frame = pd.read_csv(path)
    return [
        EpochLoss(int(row.epoch), float(row.loss), float(row.kl_term), float(row.recon_term), float(row.reg_term))
        for row in frame.itertuples(index=False)
    ]


def _checkpoint_hook(
    model: Learner, config: TrainConfig, out_dir: Path | None, stage: str, total: int, loss_file: str
) -> Callable[[int, list[EpochLoss]], None]:
    def hook(epoch: int, history: list[EpochLoss]) -> None:
        if out_dir is None:
            return
        if epoch % config.checkpoint_every and epoch != total:
            return
        tau = config.schedule(epoch)
        checkpoint_save(out_dir / "checkpoints" / f"{stage}_epoch_{epoch:04d}.ckpt", model, epoch, tau, stage)
        checkpoint_save(out_dir / "checkpoints" / LATEST_CHECKPOINT, model, epoch, tau, stage)
        write_loss_csv(history, out_dir / loss_file)
        logger.info(f"Checkpoint written at {stage} epoch {epoch}")

    return hook


def _resume_point(model: Learner, out_dir: Path | None, resume: bool) -> dict | None:
    if not resume or out_dir is None:
        return None
    latest = out_dir / "checkpoints" / LATEST_CHECKPOINT
    if not latest.exists():
        logger.info(f"No checkpoint in {out_dir}, starting from scratch")
        return None
    _, header = checkpoint_load(latest, model)
    logger.info(f"Resuming from {header['stage']} epoch {header['epoch']}")
    return header


def train(
    model: BiscuitModel,
    dataset: Dataset,
    config: TrainConfig,
    out_dir: Path | None = None,
    resume: bool = False,
) -> TrainResult:
    """
    Fit a BiscuitModel on the triplets of a dataset.

    Args:
        model: Freshly initialised model
        dataset: Training sequence with at least 2 frames
        config: Optimisation settings
        out_dir: Run directory for checkpoints and `loss.csv` (optional)
        resume: Continue from `checkpoints/latest.ckpt` if present

    Returns:
        TrainResult with one EpochLoss per epoch
    """
    config.validate()
    if dataset.frames < 2:
        raise DatasetError("Training needs at least 2 frames")
    out_dir = Path(out_dir) if out_dir is not None else None
    x_prev, x_t, regimes = dataset.triplets()
    rng = RngStream(config.seed).split("train")
    schedule = config.schedule

    header = _resume_point(model, out_dir, resume)
    start = int(header["epoch"]) if header else 0
    history = read_loss_csv(out_dir / "loss.csv")[:start] if header and out_dir else []

    def loss_fn(idx: np.ndarray, epoch: int, noise: RngStream) -> LossTerms:
        return model.elbo_loss(
            x_prev[idx], x_t[idx], regimes[idx], schedule(epoch + 1), noise, config.regularizer_weight,
            config.kl_weight(epoch),
        )

    hook = _checkpoint_hook(model, config, out_dir, "train", config.epochs, "loss.csv")
    history = _run_epochs(
        model.store, len(x_prev), config, rng, start, config.epochs, loss_fn, hook, history, "train"
    )
    if out_dir is not None:
        checkpoint_save(out_dir / FINAL_CHECKPOINT, model, config.epochs, schedule(config.epochs), "train")
    return TrainResult(model, history)


def train_nf(
    model: BiscuitNF,
    dataset: Dataset,
    config: TrainConfig,
    out_dir: Path | None = None,
    resume: bool = False,
) -> TrainResult:
    """
    Two-stage fit: `ae_epochs` of autoencoder training on single frames,
    then `epochs` of flow training on the frozen autoencoder codes.
    """
    config.validate()
    if dataset.frames < 2:
        raise DatasetError("Training needs at least 2 frames")
    out_dir = Path(out_dir) if out_dir is not None else None
    rng = RngStream(config.seed).split("train-nf")
    schedule = config.schedule
    observations = dataset.X.astype(np.float64)

    header = _resume_point(model, out_dir, resume)
    ae_start, flow_start = 0, 0
    ae_history: list[EpochLoss] = []
    history: list[EpochLoss] = []
    if header and out_dir:
        if header["stage"] == "ae":
            ae_start = int(header["epoch"])
        else:
            ae_start, flow_start = config.ae_epochs, int(header["epoch"])
            history = read_loss_csv(out_dir / "loss.csv")[:flow_start]
        ae_history = read_loss_csv(out_dir / "ae_loss.csv")[:ae_start]

    if not model.ae_trained:

        def ae_loss_fn(idx: np.ndarray, epoch: int, noise: RngStream) -> LossTerms:
            return model.ae_loss(observations[idx], noise)

        hook = _checkpoint_hook(model, config, out_dir, "ae", config.ae_epochs, "ae_loss.csv")
        ae_history = _run_epochs(
            model.ae_store, len(observations), config, rng.split("ae"), ae_start, config.ae_epochs,
            ae_loss_fn, hook, ae_history, "ae",
        )
        model.finish_ae_stage()

    codes = model.ae_codes(observations)
    y_prev, y_t, regimes = codes[:-1], codes[1:], dataset.R[1:].astype(np.float64)

    def flow_loss_fn(idx: np.ndarray, epoch: int, noise: RngStream) -> LossTerms:
        del noise
        return model.flow_train_loss(y_prev[idx], y_t[idx], regimes[idx], schedule(epoch + 1), config.regularizer_weight)

    hook = _checkpoint_hook(model, config, out_dir, "flow", config.epochs, "loss.csv")
    history = _run_epochs(
        model.flow_store, len(y_prev), config, rng.split("flow"), flow_start, config.epochs,
        flow_loss_fn, hook, history, "flow",
    )
    if out_dir is not None:
        checkpoint_save(out_dir / FINAL_CHECKPOINT, model, config.epochs, schedule(config.epochs), "flow")
    return TrainResult(model, history, ae_history)
