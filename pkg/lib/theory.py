"""
Executable identifiability checks.

Covers distinct interaction patterns, the log-likelihood difference Δ of a
variable's two mechanisms, the curvature (dynamics variability) and
state-dependence rank (time variability) conditions on Δ, the
minimal-regime construction and the two-variable Gaussian rotation example.
"""

import logging
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass

import numpy as np

from lib.rng import RngStream
from lib.scm import World, min_regimes, minimal_code_table

logger = logging.getLogger(__name__)

DERIVATIVE_STEP = 1e-4
CURVATURE_THRESHOLD = 1e-4
RANK_TOLERANCE = 1e-6
MEAN_TOLERANCE = 1e-9


# Distinct interaction patterns


@dataclass(frozen=True, eq=False)
class PatternTable:
    """Q x K binary table: row q is the interaction vector of regime value q."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows)
        if rows.ndim != 2:
            raise ValueError(f"Pattern table must be 2-D, got shape {rows.shape}")
        if not np.isin(rows, (0, 1)).all():
            raise ValueError("Pattern table entries must be binary")
        object.__setattr__(self, "rows", rows.astype(np.int8))

    @property
    def num_vars(self) -> int:
        return int(self.rows.shape[1])


@dataclass
class PatternCheck:
    holds: bool
    offending_pair: tuple[int, int] | None = None
    reason: str = ""


def distinct_pattern_check(table: PatternTable | np.ndarray) -> PatternCheck:
    """
    True iff no variable's column is constant, equal to another column or
    to another column's complement.

    Raises:
        ValueError: If the table has fewer than 2 rows
    """
    if not isinstance(table, PatternTable):
        table = PatternTable(np.asarray(table))
    rows = table.rows
    if rows.shape[0] < 2:
        raise ValueError("Distinct-pattern check needs at least 2 regimes")
    k = rows.shape[1]
    for i in range(k):
        if (rows[:, i] == rows[0, i]).all():
            other = 1 if i == 0 and k > 1 else 0
            return PatternCheck(False, (i, other), "constant")
    for i in range(k):
        for j in range(i + 1, k):
            if np.array_equal(rows[:, i], rows[:, j]):
                return PatternCheck(False, (i, j), "identical")
            if np.array_equal(rows[:, i], 1 - rows[:, j]):
                return PatternCheck(False, (i, j), "complement")
    return PatternCheck(True)


# Log-likelihood differences


def delta_additive_gaussian(mu0, mu1, sigma: float, c):
    """
    Δ = log N(c; mu1, sigma^2) - log N(c; mu0, sigma^2) = [(c - mu0)^2 - (c - mu1)^2] / (2 sigma^2).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return ((c - mu0) ** 2 - (c - mu1) ** 2) / (2.0 * sigma**2)


def delta_gaussian(mu0, sigma0: float, mu1, sigma1: float, c):
    """Δ between two Gaussians with their own scales."""
    if sigma0 <= 0 or sigma1 <= 0:
        raise ValueError("standard deviations must be positive")
    log_p1 = -0.5 * ((c - mu1) / sigma1) ** 2 - math.log(sigma1)
    log_p0 = -0.5 * ((c - mu0) / sigma0) ** 2 - math.log(sigma0)
    return log_p1 - log_p0


@dataclass(frozen=True)
class DeltaFn:
    """
    Δ(C_i^t | C^{t-1}) of a K-variable model.

    `fn(i, c, c_prev)` evaluates variable i at values c (S,) given previous
    states c_prev (S, K) and returns (S,) values.
    """

    num_vars: int
    fn: Callable[[int, np.ndarray, np.ndarray], np.ndarray]

    def __call__(self, i: int, c, c_prev) -> np.ndarray:
        c = np.atleast_1d(np.asarray(c, dtype=np.float64))
        c_prev = np.atleast_2d(np.asarray(c_prev, dtype=np.float64))
        if len(c_prev) == 1 and len(c) > 1:
            c_prev = np.repeat(c_prev, len(c), axis=0)
        return np.asarray(self.fn(i, c, c_prev), dtype=np.float64)

    def derivative(self, i: int, c, c_prev, h: float = DERIVATIVE_STEP) -> np.ndarray:
        c = np.atleast_1d(np.asarray(c, dtype=np.float64))
        return (self(i, c + h, c_prev) - self(i, c - h, c_prev)) / (2.0 * h)

    def second_derivative(self, i: int, c, c_prev, h: float = DERIVATIVE_STEP) -> np.ndarray:
        c = np.atleast_1d(np.asarray(c, dtype=np.float64))
        return (self(i, c + h, c_prev) - 2.0 * self(i, c, c_prev) + self(i, c - h, c_prev)) / (h * h)


def benchmark_delta(world: World) -> DeltaFn:
    """
    Δ of a generated world: interaction replaces mean μ_i(c_prev) by 0,
    the noise scale is shared by both mechanisms.
    """
    sigma = world.mechanism.noise_std
    if sigma <= 0:
        raise ValueError("Benchmark Δ needs a positive noise scale")
    mask = world.graph.mask

    def fn(i: int, c: np.ndarray, c_prev: np.ndarray) -> np.ndarray:
        mu0 = world.mechanism.mean(c_prev, mask)[:, i]
        return delta_additive_gaussian(mu0, 0.0, sigma, c)

    return DeltaFn(world.num_vars, fn)


@dataclass
class DynamicsResult:
    holds: bool
    per_variable: list[bool]
    max_curvature: list[float]


def dynamics_variability_check(delta: DeltaFn, c_t: np.ndarray, c_prev: np.ndarray) -> DynamicsResult:
    """
    True iff |∂²Δ/∂(C_i^t)²| exceeds 1e-4 at some sampled point, for every variable.

    Args:
        delta: Log-likelihood difference of the model
        c_t: (S, K) sampled current values
        c_prev: (S, K) matching previous states

    Raises:
        ValueError: On non-finite Δ (support violation) or Δ identically 0
    """
    c_t = np.atleast_2d(np.asarray(c_t, dtype=np.float64))
    c_prev = np.atleast_2d(np.asarray(c_prev, dtype=np.float64))
    per_variable, curvature = [], []
    for i in range(delta.num_vars):
        values = delta(i, c_t[:, i], c_prev)
        if not np.isfinite(values).all():
            raise ValueError(f"Δ of variable {i} is not finite on the sampled support")
        if not values.any():
            raise ValueError(f"Δ of variable {i} is identically zero: both mechanisms coincide")
        second = np.abs(delta.second_derivative(i, c_t[:, i], c_prev))
        if not np.isfinite(second).all():
            raise ValueError(f"Second derivative of Δ for variable {i} is not finite")
        curvature.append(float(second.max()))
        per_variable.append(bool(second.max() > CURVATURE_THRESHOLD))
    return DynamicsResult(all(per_variable), per_variable, curvature)


@dataclass
class RankResult:
    holds: bool
    singular_values: list[float]


def linear_independence_check(vectors: np.ndarray) -> RankResult:
    """True iff the columns of a (K+1) x K matrix are linearly independent (relative tolerance 1e-6)."""
    matrix = np.asarray(vectors, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError(f"Expected a 2-D matrix, got shape {matrix.shape}")
    singular = np.linalg.svd(matrix, compute_uv=False)
    holds = matrix.shape[0] >= matrix.shape[1] and singular.size == matrix.shape[1] and bool(
        singular[-1] > RANK_TOLERANCE * singular[0]
    )
    return RankResult(holds, singular.tolist())


def time_variability_check(delta: DeltaFn, prev_states: np.ndarray, at: np.ndarray | None = None) -> RankResult:
    """
    Condition on the state dependence of ∂Δ/∂C_i^t.

    Builds V[j, i] = ∂Δ(C_i^t | C^{t-1} = c^j)/∂C_i^t at C_i^t = at[i] for
    K+1 previous states and checks that the K columns are linearly independent.

    Raises:
        ValueError: If fewer than K+1 previous states are given
    """
    states = np.atleast_2d(np.asarray(prev_states, dtype=np.float64))
    k = delta.num_vars
    if len(states) < k + 1:
        raise ValueError(f"Time-variability check needs {k + 1} previous states, got {len(states)}")
    at = np.zeros(k) if at is None else np.asarray(at, dtype=np.float64)
    v = np.zeros((len(states), k))
    for i in range(k):
        v[:, i] = delta.derivative(i, np.full(len(states), at[i]), states)
    return linear_independence_check(v)


# Two-variable rotation example


@dataclass
class RotationOracle:
    distinct_counts: tuple[int, int]
    binary_describable: bool
    means: list[list[float]]


def _count_distinct(values: np.ndarray, tol: float = MEAN_TOLERANCE) -> int:
    ordered = np.sort(values)
    return int(1 + np.count_nonzero(np.diff(ordered) > tol))


def gaussian_rotation_oracle(theta: float) -> RotationOracle:
    """
    Rotate two variables whose interaction moves their mean from 0 to 1.

    The four regimes (I_1, I_2) give rotated means R(theta) (I_1, I_2); each
    rotated axis is describable by a binary interaction variable only if it
    takes at most two distinct means.
    """
    if not 0.0 <= theta < 2.0 * math.pi:
        raise ValueError("theta must lie in [0, 2π)")
    rotation = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    regimes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    means = regimes @ rotation.T
    counts = (_count_distinct(means[:, 0]), _count_distinct(means[:, 1]))
    return RotationOracle(counts, max(counts) <= 2, means.tolist())


# Minimal regimes


@dataclass
class MinimalRegimeResult:
    num_vars: int
    clusters: int
    codes_unique: bool
    distinct: bool


def minimal_regime_check(num_vars: int) -> MinimalRegimeResult:
    """
    Validate the floor(log2 K) + 2 cluster construction.

    The code table plus the observational all-zero regime must pass the
    distinct-pattern check, and no two variables may share a code.
    """
    clusters = min_regimes(num_vars)
    codes = minimal_code_table(num_vars)
    table = np.vstack([np.zeros((1, num_vars), dtype=np.int8), codes])
    unique = len({tuple(codes[:, i]) for i in range(num_vars)}) == num_vars
    return MinimalRegimeResult(num_vars, clusters, unique, distinct_pattern_check(table).holds)


# Suite


def stationary_states(world: World, count: int, rng: RngStream, burn_in: int = 100, stride: int = 5) -> np.ndarray:
    """
    Observational states of the world after a burn-in, `stride` steps apart.

    Every state comes from its own chain started at N(0, I).
    """
    k = world.num_vars
    states = rng.split("initial").normal((count, k))
    noise_rng = rng.split("noise")
    steps = burn_in + stride
    for t in range(steps):
        noise = noise_rng.split("step", t).normal((count, k)) * world.mechanism.noise_std
        states = world.mechanism.mean(states, world.graph.mask) + noise
    return states


def run_theory_suite(world: World, rng: RngStream, trials: int = 100, samples: int = 256) -> dict:
    """Run every check on a generated world and return JSON-ready verdicts."""
    patterns = PatternTable(world.rule.pattern_table())
    pattern_check = distinct_pattern_check(patterns)
    logger.info(f"Distinct patterns: {pattern_check.holds} over {len(patterns.rows)} regime patterns")

    delta = benchmark_delta(world)
    prev = stationary_states(world, samples, rng.split("dynamics"))
    current = world.mechanism.mean(prev, world.graph.mask) + rng.split("dynamics-noise").normal(prev.shape) * world.mechanism.noise_std
    dynamics = dynamics_variability_check(delta, current, prev)
    logger.info(f"Dynamics variability holds: {dynamics.holds}")

    k = world.num_vars
    all_states = stationary_states(world, trials * (k + 1), rng.split("time"))
    results = [
        time_variability_check(delta, all_states[n * (k + 1) : (n + 1) * (k + 1)]) for n in range(trials)
    ]
    fraction = sum(r.holds for r in results) / trials
    logger.info(f"Time variability holds on {fraction:.0%} of {trials} state sets")

    grid = np.arange(10_000) * (2.0 * math.pi / 10_000)
    agreement = all(
        gaussian_rotation_oracle(theta).binary_describable
        == (min(theta % (math.pi / 2), math.pi / 2 - theta % (math.pi / 2)) < 1e-9)
        for theta in grid
    )
    eighth = gaussian_rotation_oracle(math.pi / 4)

    return {
        "distinct_patterns": {
            "holds": pattern_check.holds,
            "offending_pair": list(pattern_check.offending_pair) if pattern_check.offending_pair else None,
            "reason": pattern_check.reason,
            "num_patterns": int(len(patterns.rows)),
        },
        "dynamics_variability": asdict(dynamics),
        "time_variability": {
            "holds": fraction >= 0.95,
            "fraction": fraction,
            "trials": trials,
            "singular_values": results[0].singular_values,
        },
        "rotation_oracle": {
            "grid_agreement": agreement,
            "eighth_turn_counts": list(eighth.distinct_counts),
            "eighth_turn_describable": eighth.binary_describable,
        },
        "minimal_regimes": asdict(minimal_regime_check(k)),
    }
