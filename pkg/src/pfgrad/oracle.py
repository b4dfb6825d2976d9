"""Exact reference computations.

For the finite-state model the predictive filter, its parameter
derivative and the evidence gradient are all available in closed form by
K-dimensional recursions; these are the large-sample limits the particle
estimators are tested against. Tiny instances can additionally be checked
by literal enumeration of every state path. For the linear-Gaussian model
a Kalman filter is propagated together with the derivatives of all its
recursion quantities, giving the exact evidence gradient there too.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .fderiv import TBarTable, update_tbar
from .models import DomainError, Lgssm, ModelSpec, Theta
from .smc import ParticleCloud

_MAX_ENUMERATED_PATHS = 1_000_000


@dataclass(frozen=True)
class ExactHmmState:
    """Predictive filter, per-state score expectations and accumulated evidence."""

    time: int
    eta: np.ndarray   # (K,) probabilities of the state given observations so far
    tbar: np.ndarray  # (K, d) conditional score expectations
    loglik: float     # log density of the observations consumed so far


def _hmm_tables(model: ModelSpec, theta: Theta, y):
    states = np.arange(model.n_states)
    g = np.exp(np.asarray(model.observation_logdensity(theta, y, states), dtype=float))
    f = np.exp(np.asarray(model.transition_logdensity(theta, states[:, None], states[None, :]), dtype=float))
    return states, g, f


def exact_hmm_init(model: ModelSpec, theta: Theta) -> ExactHmmState:
    if model.n_states is None:
        raise TypeError("exact filter recursion needs a finite state space")
    states = np.arange(model.n_states)
    eta = np.exp(np.asarray(model.initial_logdensity(theta, states), dtype=float))
    eta = eta / eta.sum()
    tbar = np.asarray(model.grad_log_initial(theta, states), dtype=float)
    return ExactHmmState(time=0, eta=eta, tbar=tbar, loglik=0.0)


def exact_backward_matrix(model: ModelSpec, theta: Theta, eta: np.ndarray, y) -> np.ndarray:
    """Row-stochastic (current, previous) backward transition matrix."""
    _, g, f = _hmm_tables(model, theta, y)
    w = eta * g
    mat = (f * w[:, None]).T  # [cur, prev] proportional to eta_prev * g * f
    norms = mat.sum(axis=1)
    if np.any(norms <= 0.0):
        raise DomainError("degenerate model: a backward row has zero mass")
    return mat / norms[:, None]


def exact_hmm_step(model: ModelSpec, theta: Theta, state: ExactHmmState, y) -> ExactHmmState:
    """Advance the predictive filter and score expectations by one observation."""
    states, g, f = _hmm_tables(model, theta, y)
    w = state.eta * g
    z = w.sum()
    if z <= 0.0:
        raise DomainError(f"degenerate model: zero filter normalizer at time {state.time}")
    eta_next = (w @ f) / z
    back = exact_backward_matrix(model, theta, state.eta, y)
    g_obs = np.asarray(model.grad_log_observation(theta, y, states), dtype=float)
    g_tr = np.asarray(model.grad_log_transition(theta, states[:, None], states[None, :]), dtype=float)
    # tbar'(x) averages previous tbar plus the step score over the backward row
    tbar_next = back @ (state.tbar + g_obs) + np.einsum("cp,pcd->cd", back, g_tr)
    return ExactHmmState(
        time=state.time + 1,
        eta=eta_next,
        tbar=tbar_next,
        loglik=state.loglik + float(np.log(z)),
    )


def exact_zeta(state: ExactHmmState) -> np.ndarray:
    """Signed per-state masses of the filter derivative, shape (K, d)."""
    mean = state.eta @ state.tbar
    return state.eta[:, None] * (state.tbar - mean)


def exact_zeta_phi(state: ExactHmmState, phi) -> np.ndarray:
    vals = np.asarray(phi(np.arange(state.eta.shape[0])), dtype=float)
    return vals @ exact_zeta(state)


def exact_score_increment(model: ModelSpec, theta: Theta, state: ExactHmmState, y) -> np.ndarray:
    """Exact gradient of the log predictive density of the next observation."""
    states = np.arange(model.n_states)
    g = np.exp(np.asarray(model.observation_logdensity(theta, y, states), dtype=float))
    g_obs = np.asarray(model.grad_log_observation(theta, y, states), dtype=float)
    den = float(state.eta @ g)
    if den <= 0.0:
        raise DomainError(f"degenerate model: zero predictive mass at time {state.time}")
    num = (state.eta * g) @ g_obs + g @ exact_zeta(state)
    return num / den


def exact_hmm_score(model: ModelSpec, theta: Theta, ys) -> tuple[np.ndarray, np.ndarray, ExactHmmState]:
    """Exact evidence gradient with its per-step increments.

    Returns (total, increments, final state); the total is the sum of the
    increments and the final state carries the exact log evidence.
    """
    state = exact_hmm_init(model, theta)
    incs = np.empty((len(ys), state.tbar.shape[1]))
    for k, y in enumerate(ys):
        incs[k] = exact_score_increment(model, theta, state, y)
        state = exact_hmm_step(model, theta, state, y)
    return incs.sum(axis=0), incs, state


def exact_hmm_loglik(model: ModelSpec, theta: Theta, ys) -> float:
    state = exact_hmm_init(model, theta)
    for y in ys:
        state = exact_hmm_step(model, theta, state, y)
    return state.loglik


def backward_fixed_point_gap(model: ModelSpec, theta: Theta, ys) -> float:
    """Feed exact atoms and weights through the particle update and diff the oracle.

    With the previous cloud replaced by the K state atoms weighted by the
    exact filter, the particle backward update must reproduce the exact
    recursion. Returns the largest absolute deviation over all steps for
    both the score table and the backward matrix.
    """
    if model.n_states is None:
        raise TypeError("fixed point check needs a finite state space")
    atoms = np.arange(model.n_states)
    state = exact_hmm_init(model, theta)
    gap = 0.0
    for y in ys:
        cloud_prev = ParticleCloud(time=state.time, particles=atoms)
        cloud_cur = ParticleCloud(time=state.time + 1, particles=atoms)
        table, weights = update_tbar(
            model,
            theta,
            cloud_prev,
            cloud_cur,
            y,
            TBarTable(time=state.time, values=state.tbar),
            prev_weights=state.eta,
            return_weights=True,
        )
        back = exact_backward_matrix(model, theta, state.eta, y)
        state = exact_hmm_step(model, theta, state, y)
        gap = max(gap, float(np.abs(table.values - state.tbar).max()))
        gap = max(gap, float(np.abs(weights.matrix - back).max()))
    return gap


# ---------------------------------------------------------------------------
# literal path enumeration for tiny instances


def _enumerate_paths(k: int, length: int) -> np.ndarray:
    if k**length > _MAX_ENUMERATED_PATHS:
        raise ValueError(f"refusing to enumerate {k}**{length} paths (> {_MAX_ENUMERATED_PATHS})")
    return np.array(list(itertools.product(range(k), repeat=length)), dtype=int)


def brute_force_path_weights(model: ModelSpec, theta: Theta, ys) -> tuple[np.ndarray, np.ndarray]:
    """All state paths x_{0:n} with their joint weights against y_{0:n-1}."""
    if model.n_states is None:
        raise TypeError("path enumeration needs a finite state space")
    n = len(ys)
    paths = _enumerate_paths(model.n_states, n + 1)
    logw = np.asarray(model.initial_logdensity(theta, paths[:, 0]), dtype=float)
    for k in range(1, n + 1):
        logw = logw + model.transition_logdensity(theta, paths[:, k - 1], paths[:, k])
    for k in range(n):
        logw = logw + model.observation_logdensity(theta, ys[k], paths[:, k])
    return paths, np.exp(logw)


def brute_force_filter(model: ModelSpec, theta: Theta, ys) -> tuple[np.ndarray, float]:
    """Predictive filter at time n and log evidence by summing every path."""
    paths, w = brute_force_path_weights(model, theta, ys)
    total = w.sum()
    eta = np.bincount(paths[:, -1], weights=w, minlength=model.n_states) / total
    return eta, float(np.log(total))


def brute_force_eta_phi(model: ModelSpec, theta: Theta, ys, phi) -> float:
    eta, _ = brute_force_filter(model, theta, ys)
    vals = np.asarray(phi(np.arange(model.n_states)), dtype=float)
    return float(vals @ eta)


def central_difference(fun, theta: Theta, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of theta."""
    out = np.empty(theta.dim)
    for r in range(theta.dim):
        hi = theta.values.copy()
        lo = theta.values.copy()
        hi[r] += step
        lo[r] -= step
        out[r] = (fun(theta.replace(hi)) - fun(theta.replace(lo))) / (2.0 * step)
    return out


# ---------------------------------------------------------------------------
# Kalman filter with parameter derivatives for the linear-Gaussian model


@dataclass(frozen=True)
class TangentKalmanState:
    """Predictive Kalman moments with their parameter derivatives."""

    time: int
    mean: float
    var: float
    dmean: np.ndarray  # (d,)
    dvar: np.ndarray   # (d,)
    loglik: float
    dloglik: np.ndarray  # (d,)
    # gradient of the log predictive density of the last consumed observation
    last_increment: np.ndarray | None = None


def tangent_kalman_init(model: Lgssm, theta: Theta) -> TangentKalmanState:
    if not isinstance(model, Lgssm):
        raise TypeError("tangent Kalman recursion applies to the linear-Gaussian model only")
    model.check_theta(theta)
    phi, sigma, _ = theta.values
    var = sigma**2 / (1.0 - phi**2)
    dvar = np.array([
        2.0 * phi * sigma**2 / (1.0 - phi**2) ** 2,
        2.0 * sigma / (1.0 - phi**2),
        0.0,
    ])
    zeros = np.zeros(3)
    return TangentKalmanState(
        time=0, mean=0.0, var=var, dmean=zeros, dvar=dvar, loglik=0.0, dloglik=zeros.copy()
    )


def tangent_kalman_step(model: Lgssm, theta: Theta, state: TangentKalmanState, y) -> TangentKalmanState:
    """Consume one observation: update the evidence, condition, and predict.

    Every recursion quantity is differentiated in each parameter
    coordinate alongside the quantity itself.
    """
    phi, sigma, beta = theta.values
    e_phi = np.array([1.0, 0.0, 0.0])
    e_sigma = np.array([0.0, 1.0, 0.0])
    e_beta = np.array([0.0, 0.0, 1.0])

    s = state.var + beta**2
    if s <= 0.0:
        raise FloatingPointError(f"non-positive innovation variance at time {state.time}")
    ds = state.dvar + 2.0 * beta * e_beta
    resid = float(y) - state.mean
    dresid = -state.dmean

    ll = -0.5 * (np.log(2.0 * np.pi * s) + resid**2 / s)
    dll = -ds / (2.0 * s) - resid * dresid / s + resid**2 * ds / (2.0 * s**2)

    gain = state.var / s
    dgain = state.dvar / s - state.var * ds / s**2
    mean_post = state.mean + gain * resid
    dmean_post = state.dmean + dgain * resid + gain * dresid
    var_post = (1.0 - gain) * state.var
    dvar_post = -dgain * state.var + (1.0 - gain) * state.dvar

    mean_next = phi * mean_post
    dmean_next = e_phi * mean_post + phi * dmean_post
    var_next = phi**2 * var_post + sigma**2
    dvar_next = 2.0 * phi * var_post * e_phi + phi**2 * dvar_post + 2.0 * sigma * e_sigma

    return TangentKalmanState(
        time=state.time + 1,
        mean=float(mean_next),
        var=float(var_next),
        dmean=dmean_next,
        dvar=dvar_next,
        loglik=state.loglik + float(ll),
        dloglik=state.dloglik + dll,
        last_increment=dll,
    )


def tangent_kalman_score(model: Lgssm, theta: Theta, ys) -> tuple[np.ndarray, np.ndarray, TangentKalmanState]:
    """Exact evidence gradient for the linear-Gaussian model.

    Returns (total, per-step increments, final state).
    """
    state = tangent_kalman_init(model, theta)
    incs = np.empty((len(ys), 3))
    for k, y in enumerate(ys):
        state = tangent_kalman_step(model, theta, state, y)
        incs[k] = state.last_increment
    return state.dloglik.copy(), incs, state


def kalman_loglik(model: Lgssm, theta: Theta, ys) -> float:
    state = tangent_kalman_init(model, theta)
    for y in ys:
        state = tangent_kalman_step(model, theta, state, y)
    return state.loglik
