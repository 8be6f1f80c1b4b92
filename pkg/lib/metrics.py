"""
Identification metrics for learned latents against ground-truth causal variables.

R² scores come from 1-D k-nearest-neighbour regressions of every causal
variable on every latent, evaluated on a held-out half. Causal variables
are aligned to latents with an exact rectangular assignment; the same
alignment is reused for Spearman correlations, interaction-variable F1 and
graph discovery among the aligned latents.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment
from scipy.stats import spearmanr
from sklearn.metrics import f1_score, r2_score
from sklearn.neighbors import KNeighborsRegressor

from lib.errors import ConfigError, EvaluationError
from lib.params import MLP, ParamStore, adam_step
from lib.rng import RngStream
from lib.scm import Dataset, World, entangle, independent_view, inverse_entangle
from lib.tensor import Tensor, abs_, backward, mean, sum_
from lib.utils import read_json, write_json, write_table

logger = logging.getLogger(__name__)

MIN_EVAL_FRAMES = 200
TIE_TOLERANCE = 1e-9


@dataclass
class EvalConfig:
    """Settings of the evaluation pipeline."""

    knn_neighbors: int = 25
    dead_variance: float = 1e-4
    gate_threshold: float = 0.1
    graph_l1: float = 2e-3
    graph_weight_decay: float = 1e-3
    graph_hidden: int = 16
    graph_epochs: int = 30
    graph_batch_size: int = 512
    graph_learning_rate: float = 5e-3
    graph_max_frames: int = 20_000

    def validate(self, prefix: str = "eval") -> None:
        for name in ("knn_neighbors", "graph_hidden", "graph_epochs", "graph_batch_size", "graph_max_frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{prefix}.{name}", "must be positive")
        if not 0.0 < self.gate_threshold < 1.0:
            raise ConfigError(f"{prefix}.gate_threshold", "must lie strictly between 0 and 1")
        for name in ("dead_variance", "graph_l1", "graph_weight_decay"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{prefix}.{name}", "must be non-negative")
        if self.graph_learning_rate <= 0.0:
            raise ConfigError(f"{prefix}.graph_learning_rate", "must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class R2Matrix:
    """R² of causal variable i (rows, K) regressed on latent j (columns, M)."""

    values: np.ndarray
    dead_latents: tuple[int, ...] = ()

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.values.shape[0]), int(self.values.shape[1]))


@dataclass(frozen=True)
class Assignment:
    """Injective map from causal index i to latent index mapping[i]."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.mapping)) != len(self.mapping):
            raise ValueError(f"Assignment is not injective: {self.mapping}")

    def __getitem__(self, i: int) -> int:
        return self.mapping[i]

    def __len__(self) -> int:
        return len(self.mapping)


@dataclass
class F1Result:
    per_variable: list[float]
    mean: float
    complemented: list[bool]


@dataclass
class MetricsReport:
    r2_diag: float
    r2_sep: float
    spearman_diag: float
    spearman_sep: float
    interaction_f1: list[float]
    interaction_f1_mean: float
    alignment: list[int]
    dead_latents: list[int]
    discovered_graph: list[list[int]] = field(default_factory=list)
    true_graph: list[list[int]] = field(default_factory=list)
    shd: int | None = None
    r2_matrix: list[list[float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


# R² and alignment


def _as_2d(values: np.ndarray, name: str) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got shape {array.shape}")
    return array


def r2_matrix(
    latents: np.ndarray,
    causals: np.ndarray,
    neighbors: int = 25,
    rng: RngStream | None = None,
    dead_variance: float = 1e-4,
) -> R2Matrix:
    """
    Held-out R² of each causal variable predicted from each single latent.

    Args:
        latents: (T, M) latent values
        causals: (T, K) causal values, T >= 200
        neighbors: k of the nearest-neighbour regressor
        rng: Stream that shuffles the 50/50 split
        dead_variance: Latents with held-out variance below this score 0 and are reported dead

    Returns:
        R2Matrix with negative scores clamped to 0

    Raises:
        EvaluationError: If T < 200 or a causal variable has zero variance
    """
    z = _as_2d(latents, "latents")
    c = _as_2d(causals, "causals")
    if len(z) != len(c):
        raise ValueError(f"latents and causals differ in length: {len(z)} vs {len(c)}")
    if len(c) < MIN_EVAL_FRAMES:
        raise EvaluationError(f"R² evaluation needs at least {MIN_EVAL_FRAMES} frames, got {len(c)}")
    flat = np.flatnonzero(c.var(axis=0) == 0.0)
    if flat.size:
        raise EvaluationError(f"Causal variable {int(flat[0])} has zero variance")

    order = (rng or RngStream(0).split("r2-split")).generator().permutation(len(c))
    half = len(c) // 2
    fit, held = order[:half], order[half:]
    k, m = c.shape[1], z.shape[1]
    values = np.zeros((k, m))
    dead = []
    for j in range(m):
        if z[held, j].var() < dead_variance:
            dead.append(j)
            continue
        regressor = KNeighborsRegressor(n_neighbors=min(neighbors, half))
        regressor.fit(z[fit, j : j + 1], c[fit])
        predicted = regressor.predict(z[held, j : j + 1]).reshape(len(held), k)
        values[:, j] = r2_score(c[held], predicted, multioutput="raw_values")
    if dead:
        logger.warning(f"Dead latents excluded from alignment: {dead}")
    return R2Matrix(np.clip(values, 0.0, 1.0), tuple(dead))


def _profit(values: np.ndarray, dead: tuple[int, ...]) -> np.ndarray:
    profit = np.array(values, dtype=np.float64)
    if dead:
        profit[:, list(dead)] = -1.0
    return profit


def _optimum(profit: np.ndarray) -> float:
    if profit.shape[0] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(profit, maximize=True)
    return float(profit[rows, cols].sum())


def best_assignment(matrix: R2Matrix | np.ndarray) -> Assignment:
    """
    Injective alignment maximising the summed aligned entries.

    Among optimal alignments the lexicographically smallest is returned.
    Dead latents are only used when no live latent is left.
    """
    if isinstance(matrix, R2Matrix):
        values, dead = matrix.values, matrix.dead_latents
    else:
        values, dead = np.asarray(matrix, dtype=np.float64), ()
    k, m = values.shape
    if k > m:
        raise EvaluationError(f"Cannot align {k} causal variables to {m} latents")
    if len(dead) == m:
        raise EvaluationError("Alignment failed: every latent is dead (no variance on held-out data)")
    profit = _profit(values, dead)
    target = _optimum(profit)

    mapping: list[int] = []
    fixed = 0.0
    free_cols = list(range(m))
    for i in range(k):
        for j in free_cols:
            rest_cols = [c for c in free_cols if c != j]
            rest = _optimum(profit[np.ix_(range(i + 1, k), rest_cols)]) if i + 1 < k else 0.0
            if fixed + profit[i, j] + rest >= target - TIE_TOLERANCE * max(1.0, abs(target)):
                mapping.append(j)
                fixed += profit[i, j]
                free_cols = rest_cols
                break
    return Assignment(tuple(mapping))


def _diag_sep(values: np.ndarray, assignment: Assignment) -> tuple[float, float]:
    k, m = values.shape
    diag = np.array([values[i, assignment[i]] for i in range(k)])
    if m == 1:
        return float(diag.mean()), 0.0
    sep = []
    for i in range(k):
        others = np.delete(values[i], assignment[i])
        sep.append(others.max())
    return float(diag.mean()), float(np.mean(sep))


def r2_diag(matrix: R2Matrix | np.ndarray, assignment: Assignment) -> float:
    values = matrix.values if isinstance(matrix, R2Matrix) else np.asarray(matrix)
    return _diag_sep(values, assignment)[0]


def r2_sep(matrix: R2Matrix | np.ndarray, assignment: Assignment) -> float:
    """Mean over causal variables of the best R² outside the alignment."""
    values = matrix.values if isinstance(matrix, R2Matrix) else np.asarray(matrix)
    return _diag_sep(values, assignment)[1]


def spearman_matrix(latents: np.ndarray, causals: np.ndarray) -> np.ndarray:
    """(K, M) absolute Spearman rank correlations; constant columns score 0."""
    z = _as_2d(latents, "latents")
    c = _as_2d(causals, "causals")
    k = c.shape[1]
    with np.errstate(invalid="ignore", divide="ignore"):
        statistic = spearmanr(np.hstack([c, z])).statistic
    corr = np.asarray(statistic, dtype=np.float64)
    if corr.ndim == 0:
        corr = np.array([[1.0, float(corr)], [float(corr), 1.0]])
    block = np.abs(corr[:k, k:])
    return np.nan_to_num(block, nan=0.0)


def spearman_diag_sep(latents: np.ndarray, causals: np.ndarray, assignment: Assignment) -> tuple[float, float]:
    return _diag_sep(spearman_matrix(latents, causals), assignment)


def spearman_diag(latents: np.ndarray, causals: np.ndarray, assignment: Assignment) -> float:
    return spearman_diag_sep(latents, causals, assignment)[0]


def spearman_sep(latents: np.ndarray, causals: np.ndarray, assignment: Assignment) -> float:
    return spearman_diag_sep(latents, causals, assignment)[1]


# Interaction variables


def interaction_f1(predicted: np.ndarray, true: np.ndarray, assignment: Assignment) -> F1Result:
    """
    F1 of each true interaction variable against its aligned prediction.

    The prediction and its complement are both scored; the better one counts.
    """
    pred = np.asarray(predicted).astype(int)
    truth = np.asarray(true).astype(int)
    if len(pred) != len(truth):
        raise ValueError(f"Predicted and true interactions differ in length: {len(pred)} vs {len(truth)}")
    scores, flipped = [], []
    for i in range(truth.shape[1]):
        column = pred[:, assignment[i]]
        direct = f1_score(truth[:, i], column, zero_division=1.0)
        complement = f1_score(truth[:, i], 1 - column, zero_division=1.0)
        scores.append(float(max(direct, complement)))
        flipped.append(bool(complement > direct))
    return F1Result(scores, float(np.mean(scores)), flipped)


# Counterfactuals


def counterfactual_swap(model, x_a: np.ndarray, x_b: np.ndarray, variables, assignment: Assignment) -> np.ndarray:
    """
    Decode x_a's code with the aligned latents of `variables` taken from x_b.

    Raises:
        ValueError: If a variable index is not covered by the alignment
    """
    z_a = model.encode_mean(np.atleast_2d(x_a)).copy()
    z_b = model.encode_mean(np.atleast_2d(x_b))
    for v in variables:
        if not 0 <= v < len(assignment):
            raise ValueError(f"Unknown causal variable index: {v}")
        z_a[:, assignment[v]] = z_b[:, assignment[v]]
    return model.decode(z_a)


# Graph discovery


def _fit_gates(
    inputs: np.ndarray, target: np.ndarray, config: EvalConfig, rng: RngStream
) -> np.ndarray:
    """Train one gated predictor of `target` and return |gate| per input."""
    store = ParamStore()
    num_inputs = inputs.shape[1]
    gate = store.add("gate", np.ones(num_inputs))
    net = MLP(store, "predictor", [num_inputs, config.graph_hidden, 1], rng.split("init"))
    weights = [tensor for path, tensor in store.items() if path.endswith("weight")]
    n = len(inputs)
    for epoch in range(config.graph_epochs):
        order = rng.split("shuffle", epoch).generator().permutation(n)
        for start in range(0, n, config.graph_batch_size):
            idx = order[start : start + config.graph_batch_size]
            residual = net(Tensor(inputs[idx]) * gate) - target[idx].reshape(-1, 1)
            loss = mean(residual * residual) + sum_(abs_(gate)) * config.graph_l1
            for weight in weights:
                loss = loss + sum_(weight * weight) * config.graph_weight_decay
            backward(loss)
            adam_step(store, config.graph_learning_rate)
    return np.abs(gate.data)


def discover_graph(
    latents: np.ndarray,
    assignment: Assignment,
    config: EvalConfig | None = None,
    rng: RngStream | None = None,
    usable: np.ndarray | None = None,
) -> np.ndarray:
    """
    Temporal adjacency among aligned latents.

    For every aligned target latent a predictor of z_i^t from gated z^{t-1}
    is fitted under an L1 penalty on the gates; an edge j -> i is kept when
    its gate exceeds `gate_threshold` times the largest gate of that target.

    Args:
        latents: (T, M) sequential latent values
        assignment: Causal-to-latent alignment
        usable: Optional (T-1, K) mask of transitions usable for target i
            (frames where that variable was not interacted with)

    Returns:
        (K, K) int adjacency, entry [i, j] == 1 iff j -> i
    """
    config = config or EvalConfig()
    rng = rng or RngStream(0).split("graph")
    z = _as_2d(latents, "latents")[:, list(assignment.mapping)]
    z = (z - z.mean(axis=0)) / np.maximum(z.std(axis=0), 1e-8)
    previous, current = z[:-1], z[1:]
    k = z.shape[1]
    adjacency = np.zeros((k, k), dtype=int)
    for i in range(k):
        rows = np.arange(len(previous)) if usable is None else np.flatnonzero(usable[:, i])
        rows = rows[: config.graph_max_frames]
        if len(rows) < 2:
            logger.warning(f"Too few usable transitions for target {i}, no parents inferred")
            continue
        gates = _fit_gates(previous[rows], current[rows, i], config, rng.split("target", i))
        top = gates.max()
        if top > 0:
            adjacency[i] = (gates > config.gate_threshold * top).astype(int)
        logger.debug(f"Gates of target {i}: {np.round(gates, 3).tolist()}")
    return adjacency


def shd(a: np.ndarray, b: np.ndarray) -> int:
    """Structural Hamming distance: number of differing adjacency entries."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"Adjacency shapes differ: {a.shape} vs {b.shape}")
    return int(np.abs(a.astype(int) - b.astype(int)).sum())


# Oracle encoder and full evaluation


class GroundTruthEncoder:
    """Inverse entangler posing as a learned model; interactions come from the true rule."""

    def __init__(self, world: World):
        self.world = world
        self.num_latents = world.num_vars

    def encode_mean(self, x: np.ndarray) -> np.ndarray:
        return inverse_entangle(np.atleast_2d(x).astype(np.float64), self.world.entangler)

    def decode(self, z: np.ndarray) -> np.ndarray:
        return entangle(np.atleast_2d(z), self.world.entangler)

    def hard_interactions(self, regimes: np.ndarray, z_prev: np.ndarray) -> np.ndarray:
        del z_prev
        return self.world.rule.interactions(np.atleast_2d(regimes).astype(np.float64))


def ground_truth_encoder(world: World) -> GroundTruthEncoder:
    return GroundTruthEncoder(world)


def evaluate(
    model,
    dataset: Dataset,
    world: World,
    config: EvalConfig | None = None,
    rng: RngStream | None = None,
    with_graph: bool = True,
) -> MetricsReport:
    """
    Score a model on a held-out sequence.

    R² and Spearman use the independent view of the sequence; interaction
    F1 and graph discovery use the sequence itself.
    """
    config = config or EvalConfig()
    rng = rng or RngStream(int(dataset.manifest["seed"])).split("eval")
    independent = independent_view(dataset, world, rng.split("independent"))
    latents = model.encode_mean(independent.X.astype(np.float64))
    causals = independent.C.astype(np.float64)
    matrix = r2_matrix(latents, causals, config.knn_neighbors, rng.split("r2"), config.dead_variance)
    assignment = best_assignment(matrix)
    diag, sep = _diag_sep(matrix.values, assignment)
    sp_diag, sp_sep = spearman_diag_sep(latents, causals, assignment)
    logger.info(f"R² diag {diag:.3f}, sep {sep:.3f}; alignment {list(assignment.mapping)}")

    sequence = model.encode_mean(dataset.X.astype(np.float64))
    predicted = model.hard_interactions(dataset.R[1:].astype(np.float64), sequence[:-1])
    f1 = interaction_f1(predicted, dataset.I[1:], assignment)
    logger.info(f"Interaction F1 mean {f1.mean:.3f}")

    report = MetricsReport(
        r2_diag=diag,
        r2_sep=sep,
        spearman_diag=sp_diag,
        spearman_sep=sp_sep,
        interaction_f1=f1.per_variable,
        interaction_f1_mean=f1.mean,
        alignment=list(assignment.mapping),
        dead_latents=list(matrix.dead_latents),
        true_graph=world.graph.mask.astype(int).tolist(),
        r2_matrix=matrix.values.tolist(),
    )
    if with_graph:
        aligned = predicted[:, list(assignment.mapping)].astype(bool)
        aligned = np.where(np.array(f1.complemented)[None, :], ~aligned, aligned)
        graph = discover_graph(sequence, assignment, config, rng.split("graph"), usable=~aligned)
        report.discovered_graph = graph.tolist()
        report.shd = shd(graph, world.graph.mask)
        logger.info(f"Discovered graph SHD {report.shd}")
    return report


def write_report(report: MetricsReport, path: Path) -> None:
    write_json(report.to_dict(), path)
    logger.info(f"Report written: {path}")


def write_r2_csv(matrix: R2Matrix | np.ndarray | list, path: Path) -> None:
    """R² matrix as CSV: one row per causal variable, one column per latent."""
    values = matrix.values if isinstance(matrix, R2Matrix) else np.asarray(matrix)
    frame = pd.DataFrame(values, columns=[f"z{j}" for j in range(values.shape[1])])
    frame.insert(0, "variable", [f"C{i}" for i in range(values.shape[0])])
    write_table(frame.to_dict("records"), path, columns=list(frame.columns))


REPORT_COLUMNS = [
    "run", "r2_diag", "r2_sep", "spearman_diag", "spearman_sep", "interaction_f1_mean", "shd",
]


def aggregate_reports(report_paths: list[Path], out_path: Path) -> pd.DataFrame:
    """Collect several report JSON files into one comparison CSV (one row per run)."""
    rows = []
    for path in report_paths:
        data = read_json(path)
        path = Path(path)
        row = {"run": path.stem if path.stem != "report" else path.parent.name}
        row.update({column: data.get(column) for column in REPORT_COLUMNS[1:]})
        rows.append(row)
    return write_table(rows, out_path, columns=REPORT_COLUMNS)
