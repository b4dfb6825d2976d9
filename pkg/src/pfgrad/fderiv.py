"""Particle estimators of the filter derivative.

Two estimators share the bootstrap filter core:

* the backward estimator pushes per-particle conditional score
  expectations through a row-normalized backward weight matrix, at
  quadratic cost per step, and stays stable over long horizons;
* the path estimator drags cumulative scores along surviving ancestral
  lines at linear cost per step, at the price of growing variance.

Either one yields a centered signed measure over the current cloud whose
integrals against test functions estimate the parameter gradient of the
filter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .models import ModelSpec, Theta, score_increment
from .smc import ParticleCloud, bootstrap_step

# rows of the backward weight computation are processed in blocks of at
# most this many pairwise terms, keeping temporaries inside the malloc
# arena cache (see _alloc)
_BLOCK_ELEMENTS = 4_000_000


class DegenerateBackwardRowError(RuntimeError):
    """A backward weight row summed to zero."""

    def __init__(self, time: int, row: int):
        self.time = time
        self.row = row
        super().__init__(f"backward weight row {row} degenerated to zero at time {time}")


@dataclass(frozen=True)
class TBarTable:
    """Per-particle conditional score expectations at one time point."""

    time: int
    values: np.ndarray  # (N, d)


@dataclass(frozen=True)
class PathScoreTable:
    """Per-particle cumulative scores along surviving ancestral lines."""

    time: int
    values: np.ndarray  # (N, d)


@dataclass(frozen=True)
class BackwardWeightMatrix:
    """Row-stochastic matrix of backward transition weights (debug view)."""

    matrix: np.ndarray  # (N, N); row i weights the previous cloud given particle i

    def __post_init__(self) -> None:
        sums = self.matrix.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-10):
            raise ValueError("backward weight rows must each sum to 1")
        if np.any(self.matrix < 0.0):
            raise ValueError("backward weights must be non-negative")


@dataclass(frozen=True)
class SignedParticleMeasure:
    """Signed measure with a d-vector weight on each particle.

    Weights are mean-centered, so the measure integrates constants to
    zero and evaluating an affine a*phi + c gives a times the value on
    phi.
    """

    particles: np.ndarray
    signed_weights: np.ndarray  # (N, d)

    def evaluate(self, phi: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        vals = np.asarray(phi(self.particles), dtype=float)
        return vals @ self.signed_weights

    def total_mass(self) -> np.ndarray:
        return self.signed_weights.sum(axis=0)


def _centered_measure(cloud: ParticleCloud, table) -> SignedParticleMeasure:
    if table.time != cloud.time:
        raise ValueError(f"table at time {table.time} does not match cloud at time {cloud.time}")
    vals = table.values
    if vals.shape[0] != cloud.n:
        raise ValueError("table and cloud sizes differ")
    centered = (vals - vals.mean(axis=0)) / cloud.n
    return SignedParticleMeasure(particles=cloud.particles, signed_weights=centered)


def init_tbar(model: ModelSpec, theta: Theta, cloud: ParticleCloud) -> TBarTable:
    """Start the backward estimator from the initial score terms."""
    if cloud.time != 0:
        raise ValueError("backward estimator starts from a time-0 cloud")
    vals = score_increment(model, theta, 0, None, None, cloud.particles)
    return TBarTable(time=0, values=np.asarray(vals, dtype=float))


def init_path_scores(model: ModelSpec, theta: Theta, cloud: ParticleCloud) -> PathScoreTable:
    """Start the path estimator from the initial score terms."""
    if cloud.time != 0:
        raise ValueError("path estimator starts from a time-0 cloud")
    vals = score_increment(model, theta, 0, None, None, cloud.particles)
    return PathScoreTable(time=0, values=np.asarray(vals, dtype=float))


def _check_alignment(cloud_prev: ParticleCloud, cloud_cur: ParticleCloud, table) -> None:
    if cloud_cur.time != cloud_prev.time + 1:
        raise ValueError(f"clouds at times {cloud_prev.time} and {cloud_cur.time} are not consecutive")
    if table.time != cloud_prev.time:
        raise ValueError(f"table at time {table.time} does not match cloud at time {cloud_prev.time}")
    if table.values.shape[0] != cloud_prev.n or cloud_cur.n != cloud_prev.n:
        raise ValueError("particle counts differ between steps")


def _tbar_rows_generic(model, theta, x_prev, x_cur, logg, base, logw_prev, want_weights, time):
    n_cur = x_cur.shape[0]
    n_prev = x_prev.shape[0]
    d = base.shape[1]
    out = np.empty((n_cur, d))
    weights = np.empty((n_cur, n_prev)) if want_weights else None
    block = max(1, min(n_cur, _BLOCK_ELEMENTS // max(1, n_prev)))
    for start in range(0, n_cur, block):
        rows = slice(start, min(start + block, n_cur))
        logq, grad_terms = model.transition_pair_terms(theta, x_prev[None, :], x_cur[rows, None])
        full = (rows.stop - rows.start, n_prev)
        if logq.shape != full or not logq.flags.writeable:
            logq = np.broadcast_to(logq, full).copy()
        logq += logg[None, :]
        if logw_prev is not None:
            logq += logw_prev[None, :]
        m = logq.max(axis=1)
        dead = ~np.isfinite(m)
        if dead.any():
            raise DegenerateBackwardRowError(time, start + int(np.flatnonzero(dead)[0]))
        np.subtract(logq, m[:, None], out=logq)
        w = np.exp(logq, out=logq)
        w /= w.sum(axis=1)[:, None]
        out[rows] = w @ base
        for r, g_tr in enumerate(grad_terms):
            if g_tr is not None:
                out[rows, r] += np.einsum("cn,cn->c", w, np.broadcast_to(g_tr, w.shape))
        if weights is not None:
            weights[rows] = w
    return out, weights


def _tbar_rows_grouped(model, theta, x_prev, x_cur, logg_states, base, w_prev, want_weights, time):
    """Same update for finite state spaces, grouping particles by state.

    Pairwise terms depend on particles only through their states, so the
    quadratic sum collapses to a per-state one at O(K^2 d + N d) cost
    with identical estimator values.
    """
    k = model.n_states
    d = base.shape[1]
    states = np.arange(k)
    cnt = np.bincount(x_prev, weights=w_prev, minlength=k)
    base_w = np.zeros((k, d))
    for r in range(d):
        base_w[:, r] = np.bincount(x_prev, weights=w_prev * base[:, r], minlength=k)
    logq = model.transition_logdensity(theta, states[None, :], states[:, None]) + logg_states[None, :]
    q = np.exp(logq - logq.max())  # uniform shift cancels in the row ratio
    g_tr = model.grad_log_transition(theta, states[None, :], states[:, None])  # (cur, prev, d)
    norm = q @ cnt
    numer = q @ base_w + np.einsum("cp,p,cpd->cd", q, cnt, g_tr)
    dead = norm[x_cur] == 0.0
    if dead.any():
        raise DegenerateBackwardRowError(time, int(np.flatnonzero(dead)[0]))
    out = numer[x_cur] / norm[x_cur][:, None]
    weights = None
    if want_weights:
        weights = (q[x_cur][:, x_prev] * w_prev[None, :]) / (norm[x_cur][:, None])
    return out, weights


def update_tbar(
    model: ModelSpec,
    theta: Theta,
    cloud_prev: ParticleCloud,
    cloud_cur: ParticleCloud,
    y_prev,
    tbar_prev: TBarTable,
    *,
    prev_weights: np.ndarray | None = None,
    return_weights: bool = False,
    method: str = "auto",
):
    """One backward-kernel update of the per-particle score expectations.

    Row i of the implicit backward matrix weights previous particle j by
    the transition density into particle i times its observation weight;
    the new expectation averages previous expectations plus the step
    score under those weights. Cost is O(N^2 d) per call in the generic
    path; models with a finite state space take a grouped path with
    identical values. Repeated calls in one environment give identical
    floats; across BLAS thread counts row sums may differ by at most
    ~1e-12 times the particle count.

    `prev_weights` replaces the uniform weighting of the previous cloud
    (used to feed exact atom weights through the same code path). With
    `return_weights` the full matrix is materialized and returned next
    to the table.
    """
    _check_alignment(cloud_prev, cloud_cur, tbar_prev)
    if method not in ("auto", "generic", "grouped"):
        raise ValueError(f"unknown method {method!r}")
    x_prev = cloud_prev.particles
    x_cur = cloud_cur.particles
    logg = np.asarray(model.observation_logdensity(theta, y_prev, x_prev), dtype=float)
    g_obs = np.asarray(model.grad_log_observation(theta, y_prev, x_prev), dtype=float)
    base = tbar_prev.values + g_obs
    grouped = model.n_states is not None if method == "auto" else method == "grouped"
    if grouped:
        if model.n_states is None:
            raise ValueError("grouped method requires a finite state space")
        w_prev = np.full(cloud_prev.n, 1.0 / cloud_prev.n) if prev_weights is None else np.asarray(prev_weights, float)
        logg_states = np.asarray(
            model.observation_logdensity(theta, y_prev, np.arange(model.n_states)), dtype=float
        )
        vals, weights = _tbar_rows_grouped(
            model, theta, x_prev, x_cur, logg_states, base, w_prev, return_weights, cloud_cur.time
        )
    else:
        logw_prev = None if prev_weights is None else np.log(np.asarray(prev_weights, float))
        vals, weights = _tbar_rows_generic(
            model, theta, x_prev, x_cur, logg, base, logw_prev, return_weights, cloud_cur.time
        )
    table = TBarTable(time=cloud_cur.time, values=vals)
    if return_weights:
        return table, BackwardWeightMatrix(matrix=weights)
    return table


def update_path_scores(
    model: ModelSpec,
    theta: Theta,
    cloud_prev: ParticleCloud,
    cloud_cur: ParticleCloud,
    y_prev,
    scores_prev: PathScoreTable,
) -> PathScoreTable:
    """Carry cumulative scores along each particle's ancestral line.

    Each particle inherits its ancestor's running score plus the score
    term of its own move; cost O(N d) per step.
    """
    _check_alignment(cloud_prev, cloud_cur, scores_prev)
    if cloud_cur.ancestors is None:
        raise ValueError("current cloud carries no ancestor indices")
    parents = cloud_prev.particles[cloud_cur.ancestors]
    inc = score_increment(model, theta, cloud_cur.time, y_prev, parents, cloud_cur.particles)
    vals = scores_prev.values[cloud_cur.ancestors] + inc
    return PathScoreTable(time=cloud_cur.time, values=vals)


def zeta_from_tbar(cloud: ParticleCloud, tbar: TBarTable) -> SignedParticleMeasure:
    """Centered signed measure of the backward estimator."""
    return _centered_measure(cloud, tbar)


def zeta_path(cloud: ParticleCloud, scores: PathScoreTable) -> SignedParticleMeasure:
    """Centered signed measure of the path estimator."""
    return _centered_measure(cloud, scores)


def advance_backward(model, theta, cloud, tbar, y, rng):
    """Bootstrap step plus backward table update, sharing one cloud."""
    cloud_next = bootstrap_step(model, theta, cloud, y, rng)
    tbar_next = update_tbar(model, theta, cloud, cloud_next, y, tbar)
    return cloud_next, tbar_next


def advance_path(model, theta, cloud, scores, y, rng):
    """Bootstrap step plus path score update, sharing one cloud."""
    cloud_next = bootstrap_step(model, theta, cloud, y, rng)
    scores_next = update_path_scores(model, theta, cloud, cloud_next, y, scores)
    return cloud_next, scores_next


# estimator registry: init, advance and measure hooks keyed by name
ESTIMATORS = {
    "backward": (init_tbar, advance_backward, zeta_from_tbar),
    "path": (init_path_scores, advance_path, zeta_path),
}


def estimator_hooks(name: str):
    try:
        return ESTIMATORS[name]
    except KeyError:
        raise ValueError(f"unknown estimator {name!r}; choose from {sorted(ESTIMATORS)}") from None
