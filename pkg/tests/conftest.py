"""Shared fixtures: the reference model instances and the heavy study runs.

The study fixtures are session scoped so the module-level checks and the
acceptance gate share one computation.
"""

from __future__ import annotations

import numpy as np
import pytest

import pfgrad
from pfgrad import harness
from pfgrad.models import FiniteHmm, Theta
from pfgrad.testfns import IndicatorEq

# reference parameter points used throughout the suite
HMM_THETA = Theta(np.array([0.85, 1.1]), ("trans_logit", "emis_scale"))
AR_THETA = Theta(np.array([0.8, np.sqrt(0.1), 1.0]), ("phi", "sigma", "beta"))

WORKERS = 2


class ThetaFreeHmm(FiniteHmm):
    """Finite-state chain whose law ignores theta entirely (all scores zero)."""

    def __init__(self, n_states: int = 3):
        super().__init__(n_states)
        self._fixed = Theta(np.zeros(2), self.theta_names)

    def transition_matrix(self, theta):
        return super().transition_matrix(self._fixed)

    def emission_matrix(self, theta):
        return super().emission_matrix(self._fixed)

    def _stay_prob(self, theta):
        return super()._stay_prob(self._fixed)

    def grad_log_initial(self, theta, x):
        return np.zeros(np.shape(x) + (2,))

    def grad_log_transition(self, theta, x_prev, x_cur):
        return np.zeros(np.broadcast_shapes(np.shape(x_prev), np.shape(x_cur)) + (2,))

    def grad_log_observation(self, theta, y, x):
        return np.zeros(np.shape(x) + (2,))


class ObsFreeGradHmm(FiniteHmm):
    """Reference chain with a theta-free observation channel."""

    def grad_log_observation(self, theta, y, x):
        return np.zeros(np.shape(x) + (2,))


@pytest.fixture(scope="session")
def hmm3():
    return pfgrad.make_finite_hmm(3, HMM_THETA), HMM_THETA


@pytest.fixture(scope="session")
def sv_model():
    return pfgrad.make_sv(AR_THETA), AR_THETA


@pytest.fixture(scope="session")
def lgssm_model():
    return pfgrad.make_lgssm(AR_THETA), AR_THETA


@pytest.fixture(scope="session")
def theta_free_hmm():
    return ThetaFreeHmm(3), Theta(np.array([0.4, -0.3]), ("trans_logit", "emis_scale"))


@pytest.fixture(scope="session")
def variance_record(hmm3):
    model, theta = hmm3
    _, ys = harness.simulate(model, theta, 550, np.random.default_rng(2024))
    return ys


@pytest.fixture(scope="session")
def rate_record(hmm3):
    model, theta = hmm3
    _, ys = harness.simulate(model, theta, 25, np.random.default_rng(101))
    return ys


@pytest.fixture(scope="session")
def rate_curve(hmm3, rate_record):
    model, theta = hmm3
    return harness.run_rate_study(
        model,
        theta,
        rate_record,
        n_grid=[50, 200, 800, 3200],
        horizon=25,
        phi=IndicatorEq(0),
        n_reps=200,
        seed=7,
        workers=WORKERS,
    )


@pytest.fixture(scope="session")
def variance_curve_backward(hmm3, variance_record):
    model, theta = hmm3
    return harness.run_variance_study(
        model,
        theta,
        variance_record,
        estimator="backward",
        n_particles=200,
        grid=[0, 100, 200, 300, 400, 500],
        block_len=50,
        n_reps=100,
        seed=11,
        workers=WORKERS,
    )


@pytest.fixture(scope="session")
def variance_curve_path(hmm3, variance_record):
    model, theta = hmm3
    return harness.run_variance_study(
        model,
        theta,
        variance_record,
        estimator="path",
        n_particles=10_000,
        grid=[0, 100, 200, 300, 400, 500],
        block_len=50,
        n_reps=100,
        seed=12,
        workers=WORKERS,
    )
