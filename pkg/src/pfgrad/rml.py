"""Online parameter estimation by gradient ascent on the predictive likelihood.

Each incoming observation contributes the gradient of its log predictive
density, estimated from the running particle filter and its derivative
measure; the parameter moves a scheduled step along that gradient and the
filter keeps running with the parameter frozen at its previous value.
The same increments summed at a fixed parameter give the batch evidence
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import oracle
from .fderiv import PathScoreTable, SignedParticleMeasure, TBarTable, estimator_hooks
from .models import ModelSpec, Theta
from .smc import ParticleCloud, init_cloud


class PredictiveLikelihoodCollapseError(RuntimeError):
    """The particle estimate of the predictive density underflowed to zero."""

    def __init__(self, time: int):
        self.time = time
        super().__init__(f"predictive likelihood collapsed to zero at time {time}")


@dataclass(frozen=True)
class StepSizeSchedule:
    """Step sizes for the ascent updates.

    Kinds: a constant step, a flat phase followed by polynomial decay
    (gamma0 up to and including n_flat, then (n - offset)^(-exponent)),
    or an explicit table indexed by time (last entry repeats). Decaying
    schedules must have exponent in (0.5, 1] so the usual summability
    conditions hold.
    """

    kind: str
    gamma0: float = 0.0
    n_flat: int = 0
    offset: int = 0
    exponent: float = 0.0
    table: tuple[float, ...] = ()

    @staticmethod
    def constant(gamma: float) -> "StepSizeSchedule":
        if gamma < 0.0:
            raise ValueError(f"step size must be >= 0, got {gamma}")
        return StepSizeSchedule(kind="constant", gamma0=gamma)

    @staticmethod
    def flat_then_decay(gamma0: float, n_flat: int, offset: int, exponent: float) -> "StepSizeSchedule":
        if gamma0 <= 0.0:
            raise ValueError(f"flat step size must be > 0, got {gamma0}")
        if not 0.5 < exponent <= 1.0:
            raise ValueError(f"decay exponent must be in (0.5, 1], got {exponent}")
        if offset > n_flat:
            raise ValueError("decay offset may not exceed the flat horizon")
        return StepSizeSchedule(kind="flat-then-decay", gamma0=gamma0, n_flat=int(n_flat),
                                offset=int(offset), exponent=exponent)

    @staticmethod
    def from_table(values) -> "StepSizeSchedule":
        table = tuple(float(v) for v in values)
        if not table or any(v <= 0.0 for v in table):
            raise ValueError("step size table must be non-empty and strictly positive")
        return StepSizeSchedule(kind="table", table=table)

    @staticmethod
    def parse(spec: str) -> "StepSizeSchedule":
        """Parse 'constant:G', 'flat-then-decay:G0,NFLAT,OFFSET,EXP' or 'table:v1,v2,...'."""
        kind, _, rest = spec.partition(":")
        args = [a for a in rest.split(",") if a]
        if kind == "constant" and len(args) == 1:
            return StepSizeSchedule.constant(float(args[0]))
        if kind == "flat-then-decay" and len(args) == 4:
            return StepSizeSchedule.flat_then_decay(
                float(args[0]), int(float(args[1])), int(float(args[2])), float(args[3])
            )
        if kind == "table" and args:
            return StepSizeSchedule.from_table(float(a) for a in args)
        raise ValueError(f"cannot parse step size schedule {spec!r}")

    def spec_string(self) -> str:
        if self.kind == "constant":
            return f"constant:{self.gamma0!r}"
        if self.kind == "flat-then-decay":
            return f"flat-then-decay:{self.gamma0!r},{self.n_flat},{self.offset},{self.exponent!r}"
        return "table:" + ",".join(repr(v) for v in self.table)

    def gamma(self, n: int) -> float:
        if self.kind == "constant":
            return self.gamma0
        if self.kind == "flat-then-decay":
            if n <= self.n_flat:
                return self.gamma0
            return float(n - self.offset) ** (-self.exponent)
        return self.table[min(n, len(self.table) - 1)]


@dataclass(frozen=True)
class ClampBox:
    """Closed coordinate box the parameter is projected back into."""

    lo: np.ndarray
    hi: np.ndarray

    def clamp(self, values: np.ndarray) -> tuple[np.ndarray, bool]:
        clipped = np.clip(values, self.lo, self.hi)
        return clipped, bool(np.any(clipped != values))


def default_clamp(model: ModelSpec) -> ClampBox:
    """Sub-box of the open parameter domain the updates are confined to."""
    if model.theta_names == ("phi", "sigma", "beta"):
        return ClampBox(lo=np.array([-0.999, 1e-4, 1e-4]), hi=np.array([0.999, 1e4, 1e4]))
    return ClampBox(lo=np.full(model.dim_theta, -50.0), hi=np.full(model.dim_theta, 50.0))


def score_increment_estimate(
    model: ModelSpec,
    theta: Theta,
    cloud: ParticleCloud,
    zeta: SignedParticleMeasure,
    y,
) -> np.ndarray:
    """Particle estimate of the gradient of the log predictive density.

    Combines the cloud's average observation-density gradient with the
    derivative measure integrated against the observation density, over
    the cloud's average observation density. Weights are rescaled by
    their maximum before exponentiation; the scale cancels in the ratio.
    """
    logg = np.asarray(model.observation_logdensity(theta, y, cloud.particles), dtype=float)
    m = logg.max()
    if not np.isfinite(m):
        raise PredictiveLikelihoodCollapseError(cloud.time)
    w = np.exp(logg - m)
    den = w.sum()
    if den <= 0.0:
        raise PredictiveLikelihoodCollapseError(cloud.time)
    g_obs = np.asarray(model.grad_log_observation(theta, y, cloud.particles), dtype=float)
    num = w @ g_obs + cloud.n * (w @ zeta.signed_weights)
    return num / den


@dataclass(frozen=True)
class RmlState:
    """Running state of an online estimation run.

    The cloud and derivative table live one observation behind the next
    update: consuming observation n first advances them with the
    previously seen observation at the current parameter, then updates
    the parameter with observation n.
    """

    theta: Theta
    cloud: ParticleCloud
    table: TBarTable | PathScoreTable
    estimator: str
    n_seen: int
    prev_y: float | None
    clamp: ClampBox
    clamp_events: int = 0
    last_increment: np.ndarray | None = None

    @property
    def time(self) -> int:
        return self.cloud.time


def init_rml(
    model: ModelSpec,
    theta0: Theta,
    n_particles: int,
    rng: np.random.Generator,
    estimator: str = "backward",
    clamp: ClampBox | None = None,
) -> RmlState:
    model.check_theta(theta0)
    init_table, _, _ = estimator_hooks(estimator)
    cloud = init_cloud(model, theta0, n_particles, rng)
    table = init_table(model, theta0, cloud)
    return RmlState(
        theta=theta0,
        cloud=cloud,
        table=table,
        estimator=estimator,
        n_seen=0,
        prev_y=None,
        clamp=clamp if clamp is not None else default_clamp(model),
    )


def rml_step(
    model: ModelSpec,
    state: RmlState,
    y,
    schedule: StepSizeSchedule,
    rng: np.random.Generator,
) -> RmlState:
    """Consume one observation and take one ascent step.

    The particle state advances at the pre-update parameter; the new
    parameter is the clamped ascent update and stays inside the open
    domain by construction of the clamp box.
    """
    _, advance, zeta_of = estimator_hooks(state.estimator)
    cloud, table = state.cloud, state.table
    if state.n_seen > 0:
        cloud, table = advance(model, state.theta, cloud, table, state.prev_y, rng)
    zeta = zeta_of(cloud, table)
    inc = score_increment_estimate(model, state.theta, cloud, zeta, y)
    gamma = schedule.gamma(state.n_seen)
    proposed = state.theta.values + gamma * inc
    clamped, hit = state.clamp.clamp(proposed)
    theta_next = state.theta.replace(clamped)
    model.check_theta(theta_next)
    return replace(
        state,
        theta=theta_next,
        cloud=cloud,
        table=table,
        n_seen=state.n_seen + 1,
        prev_y=float(y),
        clamp_events=state.clamp_events + int(hit),
        last_increment=inc,
    )


def iter_increments(
    model: ModelSpec,
    theta: Theta,
    ys,
    n_particles: int,
    rng: np.random.Generator,
    estimator: str = "backward",
):
    """Yield the predictive log-density gradient estimate at each time, theta fixed."""
    init_table, advance, zeta_of = estimator_hooks(estimator)
    cloud = init_cloud(model, theta, n_particles, rng)
    table = init_table(model, theta, cloud)
    for n, y in enumerate(ys):
        if n > 0:
            cloud, table = advance(model, theta, cloud, table, ys[n - 1], rng)
        zeta = zeta_of(cloud, table)
        yield score_increment_estimate(model, theta, cloud, zeta, y)


def offline_gradient(
    model: ModelSpec,
    theta: Theta,
    ys,
    n_particles: int,
    rng: np.random.Generator,
    estimator: str = "backward",
) -> np.ndarray:
    """Particle estimate of the full-record evidence gradient at a fixed theta."""
    if len(ys) == 0:
        raise ValueError("need at least one observation")
    total = np.zeros(theta.dim)
    for inc in iter_increments(model, theta, ys, n_particles, rng, estimator):
        total += inc
    return total


# ---------------------------------------------------------------------------
# reference variant driven by the exact finite-state recursions


@dataclass(frozen=True)
class ExactRmlState:
    """Online estimation state driven by the exact filter recursions."""

    theta: Theta
    hmm: oracle.ExactHmmState
    n_seen: int
    prev_y: float | None
    clamp: ClampBox
    last_increment: np.ndarray | None = None


def init_exact_rml(model: ModelSpec, theta0: Theta, clamp: ClampBox | None = None) -> ExactRmlState:
    model.check_theta(theta0)
    return ExactRmlState(
        theta=theta0,
        hmm=oracle.exact_hmm_init(model, theta0),
        n_seen=0,
        prev_y=None,
        clamp=clamp if clamp is not None else default_clamp(model),
    )


def exact_rml_step(model: ModelSpec, state: ExactRmlState, y, schedule: StepSizeSchedule) -> ExactRmlState:
    """Deterministic-filter counterpart of rml_step for finite state spaces."""
    hmm = state.hmm
    if state.n_seen > 0:
        hmm = oracle.exact_hmm_step(model, state.theta, hmm, state.prev_y)
    inc = oracle.exact_score_increment(model, state.theta, hmm, y)
    gamma = schedule.gamma(state.n_seen)
    clamped, _ = state.clamp.clamp(state.theta.values + gamma * inc)
    theta_next = state.theta.replace(clamped)
    model.check_theta(theta_next)
    return ExactRmlState(
        theta=theta_next,
        hmm=hmm,
        n_seen=state.n_seen + 1,
        prev_y=float(y),
        clamp=state.clamp,
        last_increment=inc,
    )
