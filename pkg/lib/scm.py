"""
Ground-truth interactive causal world.

A world consists of a temporal causal graph, one additive-Gaussian MLP
mechanism per causal variable, an interaction rule that turns the regime
variable R into binary interaction variables, and an invertible flow that
entangles the causal state into observations. Datasets are single rolled-out
sequences written as `manifest.json` plus a little-endian float32 blob.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import ortho_group

from lib.errors import ConfigError, DatasetError
from lib.rng import RngStream

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
ROBOTIC_ARM = "robotic-arm"
MINIMAL_CODE = "minimal-code"
RULE_VARIANTS = (ROBOTIC_ARM, MINIMAL_CODE)
REGIME_BOUND = 1.5
ACTIVE_BOUND = 1.0
DISC_POINTS = 64
AREA_GRID = 200
MAX_LAYOUT_ATTEMPTS = 1000


@dataclass
class ScmConfig:
    """Settings of the simulated world and of the generated sequences."""

    num_vars: int = 6
    edge_prob: float = 0.4
    noise_std: float = 0.4
    rule: str = ROBOTIC_ARM
    frames: int = 50_000
    test_frames: int = 25_000
    mechanism_hidden: int = 32
    warmup_samples: int = 1024
    touch_radius: float = 1.0 / 16.0
    flow_hidden: int = 16
    variable_cells: list[int] | None = None

    def validate(self, prefix: str = "scm") -> None:
        if self.num_vars < 2:
            raise ConfigError(f"{prefix}.num_vars", "must be at least 2")
        if not 0.0 < self.edge_prob < 1.0:
            raise ConfigError(f"{prefix}.edge_prob", "must lie strictly between 0 and 1")
        if self.noise_std < 0.0:
            raise ConfigError(f"{prefix}.noise_std", "must be non-negative")
        if self.rule not in RULE_VARIANTS:
            raise ConfigError(f"{prefix}.rule", f"must be one of {', '.join(RULE_VARIANTS)}")
        for name in ("frames", "test_frames", "mechanism_hidden", "warmup_samples", "flow_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{prefix}.{name}", "must be positive")
        if self.touch_radius <= 0.0:
            raise ConfigError(f"{prefix}.touch_radius", "must be positive")
        if self.variable_cells is not None:
            if self.rule != ROBOTIC_ARM:
                raise ConfigError(f"{prefix}.variable_cells", "only applies to the robotic-arm rule")
            if len(self.variable_cells) != self.num_vars:
                raise ConfigError(f"{prefix}.variable_cells", "needs one cell index per variable")
            if any(not 0 <= c < self.num_vars for c in self.variable_cells):
                raise ConfigError(f"{prefix}.variable_cells", "cell indices must be in [0, num_vars)")

    @property
    def clusters(self) -> int | None:
        return min_regimes(self.num_vars) if self.rule == MINIMAL_CODE else None

    def to_dict(self) -> dict:
        return asdict(self)


# Graph


@dataclass(frozen=True, eq=False)
class CausalGraph:
    """
    Time-lagged causal graph over K variables.

    mask[i, j] == 1 iff C_j^{t-1} -> C_i^t. Every variable has a parent.
    """

    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
            raise ValueError(f"Graph mask must be square, got shape {mask.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("Graph mask must be binary")
        if (mask.sum(axis=1) < 1).any():
            raise ValueError("Every variable needs at least one parent")
        object.__setattr__(self, "mask", mask.astype(np.int8))

    @property
    def num_vars(self) -> int:
        return int(self.mask.shape[0])

    def parents(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.mask[i])]

    def __eq__(self, other):
        return isinstance(other, CausalGraph) and np.array_equal(self.mask, other.mask)


def sample_graph(num_vars: int, edge_prob: float, rng: RngStream) -> CausalGraph:
    """
    Sample every lagged edge independently; parentless variables get one random parent.

    Args:
        num_vars: K, at least 2
        edge_prob: Bernoulli edge probability in (0, 1)
        rng: Random stream

    Returns:
        CausalGraph with at least one parent per variable
    """
    if num_vars < 2:
        raise ValueError("num_vars must be at least 2")
    if not 0.0 < edge_prob < 1.0:
        raise ValueError("edge_prob must lie strictly between 0 and 1")
    gen = rng.generator()
    mask = (gen.random((num_vars, num_vars)) < edge_prob).astype(np.int8)
    for i in range(num_vars):
        if not mask[i].any():
            mask[i, gen.integers(num_vars)] = 1
    return CausalGraph(mask)


# Mechanisms


@dataclass(frozen=True, eq=False)
class Mechanism:
    """
    Per-variable 3-layer tanh MLPs with frozen affine normalisation.

    Weights are stacked along a leading variable axis: w1 (K, K, H),
    w2 (K, H, H), w3 (K, H). Each layer output is normalised with constants
    measured once on warm-up inputs, which keeps the mechanism a fixed
    function of its inputs.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    norm_shift: tuple[np.ndarray, np.ndarray, np.ndarray]
    norm_scale: tuple[np.ndarray, np.ndarray, np.ndarray]
    noise_std: float

    @property
    def num_vars(self) -> int:
        return int(self.w1.shape[0])

    def _layers(self, masked: np.ndarray) -> list[np.ndarray]:
        outputs = []
        h = np.einsum("nik,ikh->nih", masked, self.w1) + self.b1
        h = (h - self.norm_shift[0]) / self.norm_scale[0]
        outputs.append(h)
        h = np.einsum("nih,ihg->nig", np.tanh(h), self.w2) + self.b2
        h = (h - self.norm_shift[1]) / self.norm_scale[1]
        outputs.append(h)
        out = np.einsum("nih,ih->ni", np.tanh(h), self.w3) + self.b3
        out = (out - self.norm_shift[2]) / self.norm_scale[2]
        outputs.append(out)
        return outputs

    def mean(self, c_prev: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """
        Observational means MLP_i(C^{t-1} * M_i) for every variable.

        Args:
            c_prev: (K,) or (N, K) previous states
            mask: (K, K) graph mask

        Returns:
            Means with the same leading shape as c_prev
        """
        c = np.atleast_2d(np.asarray(c_prev, dtype=np.float64))
        masked = c[:, None, :] * mask[None, :, :]
        out = self._layers(masked)[-1]
        return out[0] if np.ndim(c_prev) == 1 else out


def build_mechanism(
    graph: CausalGraph,
    rng: RngStream,
    hidden: int = 32,
    noise_std: float = 0.4,
    warmup_samples: int = 1024,
) -> Mechanism:
    """
    Randomly initialise the ground-truth mechanisms of a graph.

    Weights are drawn from N(0, 2/fan_in); normalisation constants are the
    per-unit mean and std of each layer on standard-normal warm-up inputs.
    """
    k = graph.num_vars
    gen = rng.generator()
    w1 = gen.normal(0.0, np.sqrt(2.0 / k), (k, k, hidden))
    b1 = gen.normal(0.0, 0.1, (k, hidden))
    w2 = gen.normal(0.0, np.sqrt(2.0 / hidden), (k, hidden, hidden))
    b2 = gen.normal(0.0, 0.1, (k, hidden))
    w3 = gen.normal(0.0, np.sqrt(2.0 / hidden), (k, hidden))
    b3 = gen.normal(0.0, 0.1, (k,))

    warmup = rng.split("warmup").normal((warmup_samples, k))
    masked = warmup[:, None, :] * graph.mask[None, :, :]

    shifts: list[np.ndarray] = []
    scales: list[np.ndarray] = []
    # Constants are measured layer by layer, each on already-normalised inputs.
    for layer in range(3):
        partial = Mechanism(
            w1, b1, w2, b2, w3, b3,
            tuple(shifts + [np.zeros(1)] * (3 - len(shifts))),  # type: ignore[arg-type]
            tuple(scales + [np.ones(1)] * (3 - len(scales))),  # type: ignore[arg-type]
            noise_std,
        )
        values = partial._layers(masked)[layer]
        shifts.append(values.mean(axis=0))
        scales.append(values.std(axis=0) + 1e-5)
    return Mechanism(w1, b1, w2, b2, w3, b3, tuple(shifts), tuple(scales), noise_std)  # type: ignore[arg-type]


def _transition(mean: np.ndarray, interactions: np.ndarray, noise: np.ndarray) -> np.ndarray:
    return np.where(interactions.astype(bool), 0.0, mean) + noise


def step(
    c_prev: np.ndarray,
    interactions: np.ndarray,
    mech: Mechanism,
    graph: CausalGraph,
    rng: RngStream,
) -> np.ndarray:
    """
    One transition C^{t-1} -> C^t.

    Interacted variables lose their mechanism (mean 0); every component gets
    N(0, noise_std^2) noise from its own substream of `rng`.
    """
    k = graph.num_vars
    if np.shape(c_prev) != (k,) or np.shape(interactions) != (k,):
        raise ValueError(f"step expects ({k},) vectors, got {np.shape(c_prev)} and {np.shape(interactions)}")
    noise = np.array([rng.split("noise", i).normal(()) for i in range(k)]) * mech.noise_std
    return _transition(mech.mean(c_prev, graph.mask), np.asarray(interactions), noise)


# Regimes and interaction rules


def sample_regime(rng: RngStream, size: int | None = None) -> np.ndarray:
    """Uniform regime value(s) in [-1.5, 1.5]^2; shape (2,) or (size, 2)."""
    shape: tuple[int, ...] = (2,) if size is None else (size, 2)
    return rng.uniform(-REGIME_BOUND, REGIME_BOUND, shape)


def min_regimes(num_vars: int) -> int:
    """floor(log2 K) + 2."""
    if num_vars < 1:
        raise ValueError("num_vars must be at least 1")
    return (num_vars.bit_length() - 1) + 2


def minimal_pattern(i: int, c: int) -> int:
    """1 iff floor((i + 1) / 2^(c-1)) mod 2 == 0, for 1-based variable i and cluster c."""
    if i < 1 or c < 1:
        raise ValueError("variable and cluster indices are 1-based")
    return int(((i + 1) >> (c - 1)) % 2 == 0)


def minimal_code_table(num_vars: int) -> np.ndarray:
    """(clusters, K) table: row c-1 lists which variables cluster c intervenes on."""
    clusters = min_regimes(num_vars)
    return np.array(
        [[minimal_pattern(i, c) for i in range(1, num_vars + 1)] for c in range(1, clusters + 1)],
        dtype=np.int8,
    )


def _disc_offsets(radius: float) -> np.ndarray:
    angles = np.linspace(0.0, 2.0 * np.pi, DISC_POINTS, endpoint=False)
    ring = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return np.vstack([np.zeros((1, 2)), ring])


def cell_area_fractions(seeds: np.ndarray, resolution: int = AREA_GRID) -> np.ndarray:
    """Fraction of [-1, 1]^2 owned by each seed, estimated on a regular grid."""
    axis = np.linspace(-1.0, 1.0, resolution)
    gx, gy = np.meshgrid(axis, axis)
    _, owner = cKDTree(seeds).query(np.stack([gx.ravel(), gy.ravel()], axis=1))
    return np.bincount(owner, minlength=len(seeds)) / owner.size


def sample_cell_seeds(num_cells: int, rng: RngStream) -> np.ndarray:
    """
    Voronoi seed points in [-1, 1]^2 whose cells each cover at least 1/(4K) of the square.
    """
    for attempt in range(MAX_LAYOUT_ATTEMPTS):
        seeds = rng.split("layout", attempt).uniform(-1.0, 1.0, (num_cells, 2))
        areas = cell_area_fractions(seeds)
        if areas.min() >= 1.0 / (4.0 * num_cells):
            if attempt:
                logger.debug(f"Accepted Voronoi layout after {attempt + 1} attempts")
            return seeds
    raise RuntimeError(f"No valid Voronoi layout for {num_cells} cells in {MAX_LAYOUT_ATTEMPTS} attempts")


@dataclass(frozen=True, eq=False)
class InteractionRule:
    """
    Maps regime values to binary interaction vectors.

    robotic-arm: variable i is interacted with when the disc of radius
    `touch_radius` around R touches Voronoi cell `variable_cells[i]`.
    minimal-code: [-1, 1]^2 is split into `clusters` vertical strips; the
    strip containing R selects a row of the minimal code table.
    Any |R_d| > 1 is observational for both variants.
    """

    variant: str
    num_vars: int
    seeds: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    variable_cells: tuple[int, ...] = ()
    touch_radius: float = 1.0 / 16.0
    clusters: int = 0

    def __post_init__(self):
        if self.variant not in RULE_VARIANTS:
            raise ValueError(f"Unknown interaction rule: {self.variant}")
        if self.variant == ROBOTIC_ARM:
            if len(self.variable_cells) != self.num_vars:
                raise ValueError("robotic-arm rule needs one cell per variable")
            if len(set(self.variable_cells)) < self.num_vars:
                logger.warning(f"Variables share Voronoi cells: {list(self.variable_cells)}")
            object.__setattr__(self, "_tree", cKDTree(np.asarray(self.seeds, dtype=np.float64)))
            object.__setattr__(self, "_offsets", _disc_offsets(self.touch_radius))
        else:
            object.__setattr__(self, "clusters", min_regimes(self.num_vars))
            object.__setattr__(self, "_table", minimal_code_table(self.num_vars))

    @classmethod
    def robotic_arm(
        cls, seeds: np.ndarray, variable_cells: list[int] | tuple[int, ...], touch_radius: float = 1.0 / 16.0
    ) -> "InteractionRule":
        return cls(ROBOTIC_ARM, len(variable_cells), np.asarray(seeds, dtype=np.float64),
                   tuple(int(c) for c in variable_cells), touch_radius)

    @classmethod
    def minimal_code(cls, num_vars: int) -> "InteractionRule":
        return cls(MINIMAL_CODE, num_vars)

    def touched_cells(self, regimes: np.ndarray) -> np.ndarray:
        """(N, cells) boolean matrix of cells touched by the disc around each regime value."""
        r = np.atleast_2d(regimes)
        n_cells = len(self.seeds)
        points = (r[:, None, :] + self._offsets[None, :, :]).reshape(-1, 2)  # type: ignore[attr-defined]
        _, owner = self._tree.query(points)  # type: ignore[attr-defined]
        owner = owner.reshape(len(r), -1)
        touched = np.zeros((len(r), n_cells), dtype=bool)
        np.put_along_axis(touched, owner, True, axis=1)
        return touched

    def strip_index(self, regimes: np.ndarray) -> np.ndarray:
        """0-based minimal-code cluster of each regime value."""
        r = np.atleast_2d(regimes)
        width = 2.0 / self.clusters
        return np.clip(np.floor((r[:, 0] + 1.0) / width).astype(int), 0, self.clusters - 1)

    def interactions(self, regimes: np.ndarray) -> np.ndarray:
        """
        Interaction vectors for one (2,) or many (N, 2) regime values.

        Returns:
            int8 array of shape (K,) or (N, K)
        """
        r = np.atleast_2d(np.asarray(regimes, dtype=np.float64))
        active = (np.abs(r) <= ACTIVE_BOUND).all(axis=1)
        if self.variant == ROBOTIC_ARM:
            touched = self.touched_cells(r)
            result = touched[:, list(self.variable_cells)]
        else:
            result = self._table[self.strip_index(r)].astype(bool)  # type: ignore[attr-defined]
        result = (result & active[:, None]).astype(np.int8)
        return result[0] if np.ndim(regimes) == 1 else result

    def pattern_table(self, resolution: int = 241) -> np.ndarray:
        """
        Distinct interaction vectors over a dense grid of regime values.

        Returns:
            (Q, K) int8 array of unique rows (the observational row included)
        """
        axis = np.linspace(-REGIME_BOUND, REGIME_BOUND, resolution)
        gx, gy = np.meshgrid(axis, axis)
        rows = self.interactions(np.stack([gx.ravel(), gy.ravel()], axis=1))
        return np.unique(rows, axis=0)


def interactions_from_regime(regime: np.ndarray, c_prev: np.ndarray | None, rule: InteractionRule) -> np.ndarray:
    """I^t = f(R^t, C^{t-1}); both built-in rules ignore C^{t-1}."""
    del c_prev
    return rule.interactions(regime)


# Entangler


@dataclass(frozen=True, eq=False)
class CouplingLayer:
    """
    Orthogonal mixing followed by an affine coupling.

    u = rotation @ x; the masked half of u conditions a tanh network that
    produces a bounded log-scale s and a shift t for the other half.
    """

    rotation: np.ndarray
    mask: np.ndarray
    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_scale: np.ndarray
    b_scale: np.ndarray
    w_shift: np.ndarray
    b_shift: np.ndarray

    def _scale_shift(self, conditioner: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = np.tanh(conditioner @ self.w_hidden + self.b_hidden)
        free = 1.0 - self.mask
        return np.tanh(h @ self.w_scale + self.b_scale) * free, (h @ self.w_shift + self.b_shift) * free

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u = x @ self.rotation.T
        fixed = u * self.mask
        s, t = self._scale_shift(fixed)
        y = fixed + (1.0 - self.mask) * (u * np.exp(s) + t)
        return y, s.sum(axis=-1)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        fixed = y * self.mask
        s, t = self._scale_shift(fixed)
        u = fixed + (1.0 - self.mask) * ((y - t) * np.exp(-s))
        return u @ self.rotation


@dataclass(frozen=True, eq=False)
class Entangler:
    """Invertible observation function g: a stack of coupling layers (two by default)."""

    layers: tuple[CouplingLayer, ...]

    @property
    def dim(self) -> int:
        return int(self.layers[0].rotation.shape[0])

    @classmethod
    def random(cls, dim: int, rng: RngStream, num_layers: int = 2, hidden: int = 16) -> "Entangler":
        layers = []
        for index in range(num_layers):
            gen = rng.split("coupling", index).generator()
            mask = np.zeros(dim)
            half = dim // 2
            if index % 2 == 0:
                mask[:half] = 1.0
            else:
                mask[half:] = 1.0
            layers.append(
                CouplingLayer(
                    rotation=ortho_group.rvs(dim, random_state=gen),
                    mask=mask,
                    w_hidden=gen.normal(0.0, 1.0 / np.sqrt(max(half, 1)), (dim, hidden)),
                    b_hidden=gen.normal(0.0, 0.1, hidden),
                    w_scale=gen.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, dim)),
                    b_scale=np.zeros(dim),
                    w_shift=gen.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, dim)),
                    b_shift=np.zeros(dim),
                )
            )
        return cls(tuple(layers))

    @classmethod
    def identity(cls, dim: int, num_layers: int = 2, hidden: int = 4) -> "Entangler":
        layers = []
        for index in range(num_layers):
            mask = np.zeros(dim)
            mask[: dim // 2] = 1.0
            if index % 2:
                mask = 1.0 - mask
            layers.append(
                CouplingLayer(np.eye(dim), mask, np.zeros((dim, hidden)), np.zeros(hidden),
                              np.zeros((hidden, dim)), np.zeros(dim),
                              np.zeros((hidden, dim)), np.zeros(dim))
            )
        return cls(tuple(layers))

    def forward(self, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Observations and log|det dX/dC| for (K,) or (N, K) inputs."""
        x = np.asarray(c, dtype=np.float64)
        log_det = np.zeros(x.shape[:-1])
        for layer in self.layers:
            x, ld = layer.forward(x)
            log_det = log_det + ld
        return x, log_det

    def inverse(self, x: np.ndarray) -> np.ndarray:
        c = np.asarray(x, dtype=np.float64)
        for layer in reversed(self.layers):
            c = layer.inverse(c)
        return c


def entangle(c: np.ndarray, ent: Entangler) -> np.ndarray:
    return ent.forward(c)[0]


def inverse_entangle(x: np.ndarray, ent: Entangler) -> np.ndarray:
    return ent.inverse(x)


# World and datasets


@dataclass(frozen=True, eq=False)
class World:
    """Everything needed to simulate and to score against the ground truth."""

    config: ScmConfig
    seed: int
    graph: CausalGraph
    mechanism: Mechanism
    rule: InteractionRule
    entangler: Entangler

    @property
    def num_vars(self) -> int:
        return self.graph.num_vars

    @classmethod
    def build(cls, config: ScmConfig, seed: int) -> "World":
        """Deterministically construct the world of an experiment seed."""
        config.validate()
        rng = RngStream(seed).split("world")
        k = config.num_vars
        graph = sample_graph(k, config.edge_prob, rng.split("graph"))
        mechanism = build_mechanism(
            graph, rng.split("mechanism"), config.mechanism_hidden, config.noise_std, config.warmup_samples
        )
        if config.rule == ROBOTIC_ARM:
            seeds = sample_cell_seeds(k, rng.split("cells"))
            if config.variable_cells is not None:
                cells = list(config.variable_cells)
            else:
                cells = [int(c) for c in rng.split("assignment").generator().permutation(k)]
            rule = InteractionRule.robotic_arm(seeds, cells, config.touch_radius)
        else:
            rule = InteractionRule.minimal_code(k)
        entangler = Entangler.random(k, rng.split("entangler"), hidden=config.flow_hidden)
        return cls(config, seed, graph, mechanism, rule, entangler)

    @classmethod
    def from_manifest(cls, manifest: dict) -> "World":
        """Rebuild the world that generated a dataset and check it against the manifest."""
        config = ScmConfig(**manifest["scm"])
        world = cls.build(config, int(manifest["seed"]))
        if not np.array_equal(world.graph.mask, np.asarray(manifest["graph"], dtype=np.int8)):
            raise DatasetError("Manifest graph does not match the world rebuilt from its seed")
        return world

    def step(self, c_prev: np.ndarray, interactions: np.ndarray, rng: RngStream) -> np.ndarray:
        return step(c_prev, interactions, self.mechanism, self.graph, rng)


@dataclass(eq=False)
class Dataset:
    """
    A rolled-out sequence.

    Arrays are float32: C (T, K), R (T, 2), I (T, K) with 0/1 entries, X (T, D).
    Row 0 of R and I is padding; interactions are defined from t = 1 on.
    """

    manifest: dict
    C: np.ndarray
    R: np.ndarray
    I: np.ndarray  # noqa: E741
    X: np.ndarray

    def __post_init__(self):
        frames = int(self.manifest["frames"])
        k = int(self.manifest["num_vars"])
        d = int(self.manifest["obs_dim"])
        expected = {"C": (frames, k), "R": (frames, 2), "I": (frames, k), "X": (frames, d)}
        for name, shape in expected.items():
            array = getattr(self, name)
            if array.shape != shape:
                raise DatasetError(f"Array {name} has shape {array.shape}, manifest implies {shape}")

    @property
    def frames(self) -> int:
        return int(self.manifest["frames"])

    @property
    def num_vars(self) -> int:
        return int(self.manifest["num_vars"])

    def independent_view(self, world: "World", rng: RngStream) -> "Dataset":
        return independent_view(self, world, rng)

    def triplets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(x^{t-1}, x^t, R^t) for t = 1..T-1 as float64 arrays."""
        x = self.X.astype(np.float64)
        return x[:-1], x[1:], self.R[1:].astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.manifest == other.manifest and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in ("C", "R", "I", "X")
        )


def _as_float32(values: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float32)


def generate_dataset(config: ScmConfig, rng: RngStream, split: str = "train", frames: int | None = None) -> Dataset:
    """
    Roll out one sequence of the world defined by (config, rng.seed).

    C^0 ~ N(0, I); for t >= 1 a regime R^t is drawn, its interactions are
    computed, C^t is stepped and X^t = g(C^t). The world only depends on the
    seed, so train and test splits share graph, mechanisms, rule and entangler.

    Args:
        config: World and sequence settings
        rng: Stream whose seed defines the world
        split: "train" or "test"; selects the rollout substream and default length
        frames: Overrides the configured frame count

    Returns:
        Dataset with float32 arrays
    """
    world = World.build(config, rng.seed)
    if frames is None:
        frames = config.frames if split == "train" else config.test_frames
    if frames < 1:
        raise ValueError("frames must be positive")
    k = config.num_vars
    roll = RngStream(rng.seed).split("rollout").split(split)

    regimes = _as_float32(sample_regime(roll.split("regime"), frames))
    regimes[0] = 0.0
    interactions = np.zeros((frames, k), dtype=np.int8)
    if frames > 1:
        interactions[1:] = world.rule.interactions(regimes[1:].astype(np.float64))
    noise = np.stack([roll.split("noise", i).normal(frames) for i in range(k)], axis=1) * config.noise_std

    states = np.zeros((frames, k), dtype=np.float32)
    states[0] = _as_float32(roll.split("initial").normal(k))
    mask = world.graph.mask
    for t in range(1, frames):
        mean = world.mechanism.mean(states[t - 1].astype(np.float64), mask)
        states[t] = _as_float32(_transition(mean, interactions[t], noise[t]))

    observations = _as_float32(entangle(states.astype(np.float64), world.entangler))
    manifest = {
        "format_version": FORMAT_VERSION,
        "num_vars": k,
        "obs_dim": world.entangler.dim,
        "frames": frames,
        "seed": int(rng.seed),
        "split": split,
        "rule": config.rule,
        "clusters": config.clusters,
        "graph": world.graph.mask.astype(int).tolist(),
        "cell_seeds": np.asarray(world.rule.seeds).tolist(),
        "variable_cells": list(world.rule.variable_cells),
        "scm": config.to_dict(),
    }
    logger.info(f"Generated {split} sequence: {frames} frames, K={k}, rule={config.rule}")
    return Dataset(manifest, states, regimes, interactions.astype(np.float32), observations)


def independent_view(dataset: Dataset, world: World, rng: RngStream) -> Dataset:
    """
    Held-out view with independently sampled causal variables.

    Each causal column is permuted on its own, which keeps the marginals of
    the rollout and removes all dependence between variables; observations
    are re-entangled from the permuted states.
    """
    states = dataset.C.copy()
    for i in range(states.shape[1]):
        order = rng.split("column", i).generator().permutation(len(states))
        states[:, i] = states[order, i]
    observations = _as_float32(entangle(states.astype(np.float64), world.entangler))
    manifest = dict(dataset.manifest, split=f"{dataset.manifest.get('split', 'test')}-independent")
    return Dataset(manifest, states, dataset.R.copy(), dataset.I.copy(), observations)


def _array_order(dataset: Dataset) -> list[np.ndarray]:
    return [dataset.C, dataset.R, dataset.I, dataset.X]


def write_dataset(dataset: Dataset, out_dir: Path) -> None:
    """
    Write `manifest.json` and `data.bin` (little-endian float32, arrays C, R, I, X).
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(dataset.manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        with open(out_dir / "data.bin", "wb") as f:
            for array in _array_order(dataset):
                f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    except OSError as e:
        raise DatasetError(f"Error writing dataset to {out_dir}: {e}") from e
    logger.info(f"Dataset written: {out_dir} ({dataset.frames} frames)")


def read_dataset(data_dir: Path) -> Dataset:
    """Read a dataset directory written by `write_dataset`."""
    data_dir = Path(data_dir)
    try:
        with open(data_dir / "manifest.json", encoding="utf-8") as f:
            manifest = json.load(f)
        blob = (data_dir / "data.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"Error reading dataset from {data_dir}: {e}") from e

    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"Unsupported dataset format in {data_dir}: {manifest.get('format_version')}")
    frames, k, d = int(manifest["frames"]), int(manifest["num_vars"]), int(manifest["obs_dim"])
    widths = [k, 2, k, d]
    values = np.frombuffer(blob, dtype="<f4")
    if values.size != frames * sum(widths):
        raise DatasetError(
            f"Corrupt data.bin in {data_dir}: expected {frames * sum(widths)} values, found {values.size}"
        )
    arrays = []
    offset = 0
    for width in widths:
        size = frames * width
        arrays.append(values[offset : offset + size].reshape(frames, width).astype(np.float32))
        offset += size
    return Dataset(manifest, *arrays)
