"""Synthetic experiment harness: designs, permutations, grids, replications.

A scenario pins down the response family, problem size, signal level,
mismatch mechanism and tuning grid.  Replications are deterministic
given (seed, replication index): each replication owns a counter-based
RNG stream, so results are identical whether replications run serially
or across workers, and are always returned ordered by index.
"""

from __future__ import annotations

import enum
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial

import numpy as np

from .baselines import fit_chambers, fit_ll
from .blocks import BlockPartition
from .estimators import (
    FitError,
    FitOptions,
    MergedDataset,
    fit_glm,
    fit_penalized,
    fit_penalized_constrained,
)
from .families import Family, Kind
from .matching import hamming_distance, recover_permutation

KNOWN_METHODS = ("naive", "oracle", "proposed", "constrained", "ll", "chambers", "recovery")


class DesignKind(str, enum.Enum):
    STD_NORMAL = "std_normal"
    UNIFORM_SQRT3 = "uniform_sqrt3"
    RESCALED_T5 = "rescaled_t5"


class PermutationKind(str, enum.Enum):
    KSPARSE = "ksparse"
    BLOCK_UNIFORM = "block_uniform"


@dataclass(frozen=True)
class SimulationScenario:
    family: Family
    n: int
    d: int
    beta_norm: float
    intercept: float
    mismatch_fraction: float = 0.0
    design: DesignKind = DesignKind.UNIFORM_SQRT3
    permutation: PermutationKind = PermutationKind.KSPARSE
    block_size: int | None = None
    prefactors: tuple[float, ...] = (0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5, 2.0)
    replications: int = 100
    seed: int = 0
    methods: tuple[str, ...] = ("naive", "oracle", "proposed")
    sigma_y_mode: str = "known"  # "known" uses beta*, "data" averages V(y_i)

    def __post_init__(self):
        if not 0.0 <= self.mismatch_fraction < 1.0:
            raise ValueError("mismatch_fraction must lie in [0, 1)")
        unknown = set(self.methods) - set(KNOWN_METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        if self.permutation == PermutationKind.BLOCK_UNIFORM and self.block_size is None:
            raise ValueError("block_uniform permutations need block_size")

    @property
    def k(self) -> int:
        return int(round(self.n * self.mismatch_fraction))

    def block_partition(self) -> BlockPartition | None:
        if self.block_size is None:
            return None
        return BlockPartition.from_labels(np.arange(self.n) // self.block_size)


@dataclass
class MethodResult:
    method: str
    prefactor: float | None
    lam: float | None
    beta_err: float | None
    theta_err: float | None
    deviance: float | None
    hamming: float | None
    converged: bool | None
    note: str | None = None
    runtime_s: float | None = None


@dataclass
class ReplicationResult:
    replication: int
    k_realized: int
    entries: tuple[MethodResult, ...]


# -- randomness ------------------------------------------------------------


def replication_rng(seed: int, replication: int) -> np.random.Generator:
    """Counter-based stream for one replication; disjoint across indices."""
    return np.random.Generator(np.random.Philox(key=seed, counter=replication << 128))


def _as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(key=int(seed)))


# -- generators --------------------------------------------------------------


def generate_design(design: DesignKind, n: int, d: int, seed, intercept: bool = False) -> np.ndarray:
    """i.i.d. unit-variance design entries; optional leading ones column."""
    rng = _as_generator(seed)
    design = DesignKind(design)
    if design == DesignKind.STD_NORMAL:
        x = rng.standard_normal((n, d))
    elif design == DesignKind.UNIFORM_SQRT3:
        root3 = math.sqrt(3.0)
        x = rng.uniform(-root3, root3, size=(n, d))
    else:
        # t with 5 degrees of freedom has variance 5/3
        x = rng.standard_t(5, size=(n, d)) * math.sqrt(3.0 / 5.0)
    if intercept:
        x = np.hstack([np.ones((n, 1)), x])
    return x


def generate_beta(d: int, norm: float, seed) -> np.ndarray:
    """Standard normal draws rescaled to an exact l2 norm."""
    if norm < 0:
        raise ValueError("norm must be nonnegative")
    rng = _as_generator(seed)
    v = rng.standard_normal(d)
    if norm == 0.0:
        return np.zeros(d)
    return v * (norm / float(np.linalg.norm(v)))


def generate_permutation_ksparse(n: int, k: int, seed) -> np.ndarray:
    """Uniform permutation moving exactly k indices.

    A random size-k subset is drawn, then permutations of that subset
    are drawn until one is a derangement (any fixed point rejects the
    draw).  k = 1 is impossible by definition.
    """
    if k < 0 or k > n:
        raise ValueError("k must lie in [0, n]")
    if k == 1:
        raise ValueError("no permutation moves exactly one index")
    pi = np.arange(n, dtype=np.int64)
    if k == 0:
        return pi
    rng = _as_generator(seed)
    subset = rng.choice(n, size=k, replace=False)
    for _ in range(100000):
        order = rng.permutation(k)
        if not np.any(order == np.arange(k)):
            pi[subset] = subset[order]
            return pi
    raise RuntimeError("derangement rejection sampling failed to terminate")


def generate_permutation_blocks(blocks: BlockPartition, seed) -> np.ndarray:
    """Independent uniform within-block permutations, identity across blocks."""
    rng = _as_generator(seed)
    pi = np.arange(blocks.n, dtype=np.int64)
    for g in blocks.groups:
        if g.size > 1:
            pi[g] = g[rng.permutation(g.size)]
    return pi


# -- tuning calibration --------------------------------------------------------


def _variance_function(family: Family, mu: np.ndarray) -> np.ndarray:
    """Var(y) as a function of the mean, dispersion included."""
    mu = np.asarray(mu, dtype=float)
    if family.kind == Kind.GAUSSIAN:
        return np.full_like(mu, family.dispersion)
    if family.kind == Kind.POISSON:
        return mu
    if family.kind in (Kind.BINOMIAL, Kind.BERNOULLI):
        return mu * (1.0 - mu / family.trials)
    return family.dispersion * mu * mu


def response_sd_known(family: Family, intercept: float, beta_norm: float) -> float:
    """Expected conditional response standard deviation, E[sd(y | eta)].

    The linear predictor is approximated by a N(intercept, norm^2)
    variable and sqrt(Var(y | eta)) is integrated by Gauss-Hermite
    quadrature.  This pins the tuning grid to the noise scale of the
    response rather than to the spread of its conditional mean.
    """
    if beta_norm < 1e-12:
        mu = float(np.asarray(family.mean(np.array([intercept])))[0])
        return math.sqrt(float(_variance_function(family, np.array([mu]))[0]))
    nodes, weights = np.polynomial.hermite_e.hermegauss(201)
    weights = weights / math.sqrt(2.0 * math.pi)
    eta = intercept + beta_norm * nodes
    mu = np.asarray(family.mean(eta))
    sd = np.sqrt(_variance_function(family, mu))
    return float(weights @ sd)


def response_sd_data(family: Family, y) -> float:
    """Data-only calibration: conditional sd averaged at the observed y."""
    y = np.asarray(y, dtype=float)
    return float(np.mean(np.sqrt(_variance_function(family, y))))


def lambda_grid(family: Family, scenario: SimulationScenario, y=None) -> np.ndarray:
    """Tuning grid prefactor * sigma_y * sqrt(log(n + d) / n)."""
    if scenario.sigma_y_mode == "known":
        sigma_y = response_sd_known(family, scenario.intercept, scenario.beta_norm)
    elif scenario.sigma_y_mode == "data":
        if y is None:
            raise ValueError("data mode needs an observed response vector")
        sigma_y = response_sd_data(family, y)
    else:
        raise ValueError(f"unknown sigma_y_mode: {scenario.sigma_y_mode}")
    base = sigma_y * math.sqrt(math.log(scenario.n + scenario.d) / scenario.n)
    return np.asarray([c * base for c in scenario.prefactors])


# -- metrics -------------------------------------------------------------------


def deviance_between_means(family: Family, mu_star, mu_hat) -> float:
    """Total unit deviance between two mean vectors; zero iff equal."""
    mu_star = np.asarray(mu_star, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    return float(np.sum(family.unit_deviance(mu_star, mu_hat)))


def _safe_mean(family: Family, eta: np.ndarray) -> np.ndarray:
    """Fitted means nudged into the open mean space for deviance evaluation."""
    mu = np.asarray(family.mean(np.clip(eta, -700.0, 700.0)))
    lo = 1e-12
    if family.kind in (Kind.BINOMIAL, Kind.BERNOULLI):
        return np.clip(mu, lo, family.trials - lo)
    if family.kind in (Kind.POISSON, Kind.GAMMA):
        return np.maximum(mu, lo)
    return mu


# -- replication runner ----------------------------------------------------------


def _metric_entry(
    family,
    scenario,
    method,
    beta_star,
    xi_star,
    mu_star,
    X,
    beta_hat,
    xi_hat,
    *,
    prefactor=None,
    lam=None,
    converged=True,
    runtime_s=None,
) -> MethodResult:
    beta_err = float(np.linalg.norm(beta_hat - beta_star))
    xi_err = float(np.linalg.norm(xi_hat - xi_star))
    theta_err = math.hypot(beta_err, xi_err)
    mu_hat = _safe_mean(family, X @ beta_hat)
    dev = deviance_between_means(family, mu_star, mu_hat)
    return MethodResult(
        method=method,
        prefactor=prefactor,
        lam=lam,
        beta_err=beta_err,
        theta_err=theta_err,
        deviance=dev,
        hamming=None,
        converged=converged,
        runtime_s=runtime_s,
    )


def _failure_entry(method, err, prefactor=None, lam=None) -> MethodResult:
    return MethodResult(
        method=method,
        prefactor=prefactor,
        lam=lam,
        beta_err=None,
        theta_err=None,
        deviance=None,
        hamming=None,
        converged=False,
        note=f"NA: {err}",
    )


def run_one_replication(scenario: SimulationScenario, replication: int) -> ReplicationResult:
    """Draw one synthetic dataset and evaluate every requested method."""
    family = scenario.family
    rng = replication_rng(scenario.seed, replication)
    n, d = scenario.n, scenario.d

    x0 = generate_design(scenario.design, n, d, rng)
    X = np.hstack([np.ones((n, 1)), x0])
    beta_star = np.concatenate([[scenario.intercept], generate_beta(d, scenario.beta_norm, rng)])
    eta_star = X @ beta_star
    y_star = family.sample(eta_star, rng)

    blocks = scenario.block_partition()
    if scenario.permutation == PermutationKind.KSPARSE:
        pi_star = generate_permutation_ksparse(n, scenario.k, rng)
    else:
        pi_star = generate_permutation_blocks(blocks, rng)
    y = y_star[pi_star]
    k_realized = int(np.sum(pi_star != np.arange(n)))

    data = MergedDataset(X=X, y=y, y_star=y_star, pi_star=pi_star, blocks=blocks)
    xi_star = (eta_star[pi_star] - eta_star) / math.sqrt(n)
    mu_star = np.asarray(family.mean(eta_star))
    zeros = np.zeros(n)

    grid = None
    if "proposed" in scenario.methods or "constrained" in scenario.methods:
        grid = lambda_grid(family, scenario, y=y)

    entries: list[MethodResult] = []
    for method in scenario.methods:
        t0 = time.perf_counter()
        try:
            if method == "naive":
                beta_hat = fit_glm(family, X, y)
                entries.append(
                    _metric_entry(
                        family, scenario, method, beta_star, xi_star, mu_star, X,
                        beta_hat, zeros, runtime_s=time.perf_counter() - t0,
                    )
                )
            elif method == "oracle":
                beta_hat = fit_glm(family, X, y_star)
                entries.append(
                    _metric_entry(
                        family, scenario, method, beta_star, xi_star, mu_star, X,
                        beta_hat, zeros, runtime_s=time.perf_counter() - t0,
                    )
                )
            elif method in ("proposed", "constrained"):
                entries.extend(
                    _penalized_path_entries(
                        family, scenario, method, data, grid,
                        beta_star, xi_star, mu_star,
                    )
                )
            elif method == "ll":
                fit = fit_ll(family, data, blocks)
                entries.append(
                    _metric_entry(
                        family, scenario, method, beta_star, xi_star, mu_star, X,
                        fit.beta, zeros, converged=fit.converged,
                        runtime_s=time.perf_counter() - t0,
                    )
                )
            elif method == "chambers":
                fit = fit_chambers(family, data, blocks)
                entries.append(
                    _metric_entry(
                        family, scenario, method, beta_star, xi_star, mu_star, X,
                        fit.beta, zeros, converged=fit.converged,
                        runtime_s=time.perf_counter() - t0,
                    )
                )
            elif method == "recovery":
                estimate = recover_permutation(X, y, beta_star, blocks)
                entries.append(
                    MethodResult(
                        method=method,
                        prefactor=None,
                        lam=None,
                        beta_err=None,
                        theta_err=None,
                        deviance=None,
                        hamming=hamming_distance(estimate.pi_hat, pi_star),
                        converged=True,
                        runtime_s=time.perf_counter() - t0,
                    )
                )
        except (FitError, np.linalg.LinAlgError) as err:
            entries.append(_failure_entry(method, err))

    return ReplicationResult(replication=replication, k_realized=k_realized, entries=tuple(entries))


def _penalized_path_entries(
    family, scenario, method, data, grid, beta_star, xi_star, mu_star
):
    """Fit the whole lambda grid, warm-starting from larger lambdas."""
    entries = []
    order = np.argsort(grid)[::-1]
    warm = None
    for idx in order:
        lam = float(grid[idx])
        prefactor = float(scenario.prefactors[idx])
        t0 = time.perf_counter()
        try:
            opts = FitOptions(warm_start=warm)
            if method == "constrained":
                fit = fit_penalized_constrained(family, data, lam, options=opts)
            else:
                fit = fit_penalized(family, data, lam, options=opts)
            warm = (fit.beta, fit.xi)
            entries.append(
                _metric_entry(
                    family, scenario, method, beta_star, xi_star, mu_star, data.X,
                    fit.beta, fit.xi, prefactor=prefactor, lam=lam,
                    converged=fit.converged, runtime_s=time.perf_counter() - t0,
                )
            )
        except (FitError, np.linalg.LinAlgError) as err:
            entries.append(_failure_entry(method, err, prefactor=prefactor, lam=lam))
    entries.sort(key=lambda e: e.prefactor)
    return entries


def run_replications(scenario: SimulationScenario, workers: int = 1) -> list[ReplicationResult]:
    """All replications of a scenario, ordered by replication index.

    Individual fit failures are recorded as NA entries and never abort
    the batch.  With workers > 1 the replications are distributed over
    processes; per-replication RNG streams keep the output identical to
    a serial run.
    """
    reps = range(scenario.replications)
    if workers <= 1:
        results = [run_one_replication(scenario, r) for r in reps]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(partial(run_one_replication, scenario), reps))
    results.sort(key=lambda r: r.replication)
    return results
