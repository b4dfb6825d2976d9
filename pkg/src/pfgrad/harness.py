"""Experiment drivers: variance-vs-time, convergence-rate and online-estimation studies.

Every study fixes one simulated observation record, spreads independent
replications over deterministic child seeds, and reports delimited rows
plus fitted summaries. Replications may run in a process pool; results
are keyed by replication index so the worker count never changes any
output value.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.stats

from .fderiv import DegenerateBackwardRowError, estimator_hooks
from .models import ModelSpec, Theta
from .oracle import exact_hmm_init, exact_hmm_step, exact_zeta_phi
from .smc import init_cloud
from .rml import (
    ClampBox,
    PredictiveLikelihoodCollapseError,
    RmlState,
    StepSizeSchedule,
    init_rml,
    iter_increments,
    rml_step,
)
from .smc import WeightCollapseError
from .testfns import TestFunction

log = logging.getLogger(__name__)

_REPLICATION_ERRORS = (WeightCollapseError, DegenerateBackwardRowError, PredictiveLikelihoodCollapseError)


def simulate(model: ModelSpec, theta: Theta, n_steps: int, rng: np.random.Generator):
    """Draw a latent path and its observations, returned as (states, observations)."""
    if n_steps < 1:
        raise ValueError(f"need at least one step, got {n_steps}")
    x = model.sample_initial(theta, rng, 1)
    xs, ys = [], []
    for _ in range(n_steps):
        xs.append(x[0])
        ys.append(model.sample_observation(theta, x, rng)[0])
        x = model.sample_transition(theta, x, rng)
    return np.asarray(xs), np.asarray(ys)


@dataclass(frozen=True)
class SlopeFit:
    """Least-squares slope with a heteroskedasticity-robust confidence interval."""

    slope: float
    stderr: float
    ci_low: float
    ci_high: float


def ols_slope(x: np.ndarray, y: np.ndarray, level: float = 0.95) -> SlopeFit:
    """Straight-line slope of y on x with an HC1 sandwich standard error."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m = x.shape[0]
    if m < 3:
        raise ValueError("need >= 3 grid points to fit a slope")
    design = np.column_stack([np.ones(m), x])
    gram_inv = np.linalg.inv(design.T @ design)
    beta = gram_inv @ design.T @ y
    resid = y - design @ beta
    meat = design.T @ (design * resid[:, None] ** 2)
    cov = gram_inv @ meat @ gram_inv * (m / (m - 2))
    se = float(np.sqrt(max(cov[1, 1], 0.0)))
    tq = float(scipy.stats.t.ppf(0.5 + level / 2.0, m - 2))
    return SlopeFit(slope=float(beta[1]), stderr=se, ci_low=float(beta[1] - tq * se),
                    ci_high=float(beta[1] + tq * se))


# ---------------------------------------------------------------------------
# variance of block scores over time


@dataclass(frozen=True)
class VarianceCurve:
    """Per-coordinate variances of block-score estimates over a time grid."""

    grid: np.ndarray             # (G,)
    variances: np.ndarray        # (G, d)
    n_reps_used: int
    n_excluded: int
    fits: tuple[SlopeFit, ...]   # one per parameter coordinate
    estimator: str
    n_particles: int
    block_len: int


def _one_block_score_rep(args):
    model, theta, ys, n_particles, grid, block_len, estimator, child_seed = args
    rng = np.random.default_rng(child_seed)
    out = np.zeros((len(grid), theta.dim))
    try:
        for k, inc in enumerate(iter_increments(model, theta, ys, n_particles, rng, estimator)):
            for gi, start in enumerate(grid):
                if start <= k < start + block_len:
                    out[gi] += inc
    except _REPLICATION_ERRORS:
        return None
    return out


def _map_replications(worker, payloads, workers: int):
    if workers <= 1:
        return [worker(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, payloads, chunksize=1))


def run_variance_study(
    model: ModelSpec,
    theta: Theta,
    ys: np.ndarray,
    *,
    estimator: str,
    n_particles: int,
    grid,
    block_len: int,
    n_reps: int,
    seed: int,
    workers: int = 1,
) -> VarianceCurve:
    """Variance across replications of block evidence-gradient estimates.

    Each replication runs one filter over the shared record at the fixed
    theta and accumulates, for every grid point n, the sum of predictive
    gradient increments over the block [n, n + block_len). Replications
    that lose all particle weight are excluded and counted.
    """
    estimator_hooks(estimator)
    grid = np.asarray(sorted(grid), dtype=int)
    if n_reps < 2:
        raise ValueError("variance estimation needs at least 2 replications")
    if block_len < 1:
        raise ValueError("block length must be >= 1")
    horizon = int(grid[-1]) + block_len
    if len(ys) < horizon:
        raise ValueError(f"record of length {len(ys)} too short for horizon {horizon}")
    ys = np.asarray(ys)[:horizon]
    seeds = np.random.SeedSequence(seed).spawn(n_reps)
    payloads = [
        (model, theta, ys, n_particles, grid, block_len, estimator, seeds[r])
        for r in range(n_reps)
    ]
    results = _map_replications(_one_block_score_rep, payloads, workers)
    kept = [r for r in results if r is not None]
    n_excluded = n_reps - len(kept)
    if len(kept) < 2:
        raise RuntimeError(f"only {len(kept)} usable replications; {n_excluded} excluded")
    scores = np.stack(kept)                      # (R, G, d)
    variances = scores.var(axis=0, ddof=1)       # (G, d)
    fits = tuple(ols_slope(grid, variances[:, r]) for r in range(theta.dim))
    return VarianceCurve(
        grid=grid,
        variances=variances,
        n_reps_used=len(kept),
        n_excluded=n_excluded,
        fits=fits,
        estimator=estimator,
        n_particles=n_particles,
        block_len=block_len,
    )


# ---------------------------------------------------------------------------
# error decay against the exact filter derivative


@dataclass(frozen=True)
class RateCurve:
    """Root-mean-square errors against the exact recursion over a particle grid."""

    n_grid: np.ndarray         # (Q,) particle counts
    rmse_zeta: np.ndarray      # (Q,)
    rmse_eta: np.ndarray       # (Q,)
    zeta_fit: SlopeFit | None  # log-log slope; None when an error is exactly zero
    eta_fit: SlopeFit | None
    horizon: int
    n_reps: int


def _one_rate_rep(args):
    model, theta, ys, n_particles, phi, child_seed = args
    rng = np.random.default_rng(child_seed)
    init_table, advance, zeta_of = estimator_hooks("backward")
    cloud = init_cloud(model, theta, n_particles, rng)
    table = init_table(model, theta, cloud)
    for y in ys:
        cloud, table = advance(model, theta, cloud, table, y, rng)
    zeta_val = zeta_of(cloud, table).evaluate(phi)
    eta_val = float(np.mean(phi(cloud.particles)))
    return zeta_val, eta_val


def run_rate_study(
    model: ModelSpec,
    theta: Theta,
    ys: np.ndarray,
    *,
    n_grid,
    horizon: int,
    phi: TestFunction,
    n_reps: int,
    seed: int,
    workers: int = 1,
) -> RateCurve:
    """Error decay of the backward estimator against the exact recursion.

    Runs the filter to the horizon for every particle count in the grid,
    n_reps times each, and reports the root-mean-square error of the
    derivative and filter integrals of phi together with log-log slopes.
    """
    if model.n_states is None:
        raise TypeError("rate study needs the exact recursion, so a finite state space")
    n_grid = np.asarray(sorted(n_grid), dtype=int)
    if len(ys) < horizon:
        raise ValueError(f"record of length {len(ys)} too short for horizon {horizon}")
    ys = np.asarray(ys)[:horizon]
    state = exact_hmm_init(model, theta)
    for y in ys:
        state = exact_hmm_step(model, theta, state, y)
    zeta_truth = exact_zeta_phi(state, phi)
    eta_truth = float(np.asarray(phi(np.arange(model.n_states)), dtype=float) @ state.eta)

    rmse_zeta = np.empty(len(n_grid))
    rmse_eta = np.empty(len(n_grid))
    root = np.random.SeedSequence(seed)
    for qi, n_particles in enumerate(n_grid):
        seeds = root.spawn(n_reps)
        payloads = [(model, theta, ys, int(n_particles), phi, seeds[r]) for r in range(n_reps)]
        results = _map_replications(_one_rate_rep, payloads, workers)
        zeta_err = np.stack([r[0] - zeta_truth for r in results])
        eta_err = np.asarray([r[1] - eta_truth for r in results])
        rmse_zeta[qi] = float(np.sqrt(np.mean(np.sum(zeta_err**2, axis=1))))
        rmse_eta[qi] = float(np.sqrt(np.mean(eta_err**2)))

    def fit(rmse):
        if np.any(rmse == 0.0):
            return None
        return ols_slope(np.log(n_grid), np.log(rmse))

    return RateCurve(
        n_grid=n_grid,
        rmse_zeta=rmse_zeta,
        rmse_eta=rmse_eta,
        zeta_fit=fit(rmse_zeta),
        eta_fit=fit(rmse_eta),
        horizon=horizon,
        n_reps=n_reps,
    )


# ---------------------------------------------------------------------------
# online estimation runs


@dataclass(frozen=True)
class RmlTrace:
    """Parameter trajectory of one online estimation run."""

    theta_names: tuple[str, ...]
    thetas: np.ndarray        # (T, d) value after consuming each observation
    increments: np.ndarray    # (T,) gradient estimate norms
    gammas: np.ndarray        # (T,)
    seed: int
    converged_window: int
    clamp_events: int
    estimator: str
    n_particles: int

    @property
    def converged(self) -> np.ndarray:
        w = min(self.converged_window, self.thetas.shape[0])
        return self.thetas[-w:].mean(axis=0)


def run_rml(
    model: ModelSpec,
    theta0: Theta,
    ys: np.ndarray,
    schedule: StepSizeSchedule,
    *,
    n_particles: int,
    estimator: str = "backward",
    seed: int = 0,
    clamp: ClampBox | None = None,
    converged_window: int = 1000,
    log_every: int = 0,
) -> RmlTrace:
    """Run the online ascent over a record and keep the full trajectory."""
    rng = np.random.default_rng(seed)
    state: RmlState = init_rml(model, theta0, n_particles, rng, estimator=estimator, clamp=clamp)
    n = len(ys)
    thetas = np.empty((n, theta0.dim))
    inc_norms = np.empty(n)
    gammas = np.empty(n)
    for k, y in enumerate(ys):
        gammas[k] = schedule.gamma(k)
        state = rml_step(model, state, y, schedule, rng)
        thetas[k] = state.theta.values
        inc_norms[k] = float(np.linalg.norm(state.last_increment))
        if log_every and (k + 1) % log_every == 0:
            log.info("step %d/%d theta=%s", k + 1, n, np.array2string(state.theta.values, precision=4))
    return RmlTrace(
        theta_names=theta0.names,
        thetas=thetas,
        increments=inc_norms,
        gammas=gammas,
        seed=seed,
        converged_window=converged_window,
        clamp_events=state.clamp_events,
        estimator=estimator,
        n_particles=n_particles,
    )
