"""State-space model families with parameter gradients.

Three concrete families share one interface: a finite-state hidden Markov
chain (probabilities w.r.t. counting measure), a scalar linear-Gaussian
model, and a stochastic volatility model. Every family exposes log
densities for the initial law, the transition and the observation,
together with the gradient of each log density in every parameter
coordinate. All densities are evaluated and stored in log space.

Evaluation methods are pure, broadcast over numpy arrays of states and
are safe to call concurrently; sampling takes the caller's Generator.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class DomainError(ValueError):
    """Parameter vector outside a model's open parameter domain."""


@dataclass(frozen=True)
class Theta:
    """Parameter vector with one label per coordinate."""

    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        vals = np.atleast_1d(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "names", tuple(self.names))
        if vals.ndim != 1 or vals.size == 0:
            raise DomainError("parameter vector must be one-dimensional and non-empty")
        if len(self.names) != vals.size:
            raise DomainError(f"{vals.size} parameter values but {len(self.names)} names")
        if not np.all(np.isfinite(vals)):
            raise DomainError("parameter vector contains non-finite entries")

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def replace(self, values: np.ndarray) -> "Theta":
        """Same coordinate labels, new values."""
        return Theta(np.asarray(values, dtype=float), self.names)

    def as_dict(self) -> dict[str, float]:
        return {name: float(v) for name, v in zip(self.names, self.values)}


class ModelSpec(abc.ABC):
    """A parametric state-space model family.

    `n_states` is the state count for discrete-state models and None for
    continuous ones. Gradients are returned with the parameter coordinate
    as the trailing axis, so scalar state input gives shape (d,) and an
    (N,) state array gives (N, d).
    """

    dim_theta: int
    theta_names: tuple[str, ...]
    n_states: int | None = None

    @property
    def state_kind(self) -> str:
        return "discrete" if self.n_states is not None else "continuous"

    @abc.abstractmethod
    def check_theta(self, theta: Theta) -> None:
        """Raise DomainError unless theta lies in the open parameter domain."""

    @abc.abstractmethod
    def initial_logdensity(self, theta: Theta, x) -> np.ndarray: ...

    @abc.abstractmethod
    def transition_logdensity(self, theta: Theta, x_prev, x_cur) -> np.ndarray: ...

    @abc.abstractmethod
    def observation_logdensity(self, theta: Theta, y, x) -> np.ndarray: ...

    @abc.abstractmethod
    def grad_log_initial(self, theta: Theta, x) -> np.ndarray: ...

    @abc.abstractmethod
    def grad_log_transition(self, theta: Theta, x_prev, x_cur) -> np.ndarray: ...

    @abc.abstractmethod
    def grad_log_observation(self, theta: Theta, y, x) -> np.ndarray: ...

    @abc.abstractmethod
    def sample_initial(self, theta: Theta, rng: np.random.Generator, size: int) -> np.ndarray: ...

    @abc.abstractmethod
    def sample_transition(self, theta: Theta, x_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...

    @abc.abstractmethod
    def sample_observation(self, theta: Theta, x: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...

    def transition_pair_terms(self, theta: Theta, x_prev, x_cur):
        """Transition log density plus per-coordinate gradient blocks.

        Returns (logdensity, [g_1, ..., g_d]) where a None entry marks a
        coordinate whose gradient is identically zero. Hot quadratic-cost
        loops call this; families override it to share temporaries
        between the density and its gradients.
        """
        logq = self.transition_logdensity(theta, x_prev, x_cur)
        grads = self.grad_log_transition(theta, x_prev, x_cur)
        return logq, [grads[..., r] for r in range(self.dim_theta)]


def _grad_stack(*coords) -> np.ndarray:
    """Stack per-coordinate gradient arrays along a trailing axis."""
    shape = np.broadcast_shapes(*(np.shape(c) for c in coords))
    cols = [np.broadcast_to(np.asarray(c, dtype=float), shape) for c in coords]
    return np.stack(cols, axis=-1)


class FiniteHmm(ModelSpec):
    """Finite-state chain with a finite observation alphabet.

    The initial law is uniform over the states (the transition matrix is
    doubly stochastic, so uniform is also stationary). theta has two
    coordinates: the first sets the stay probability of the chain through
    a logistic link, the second sharpens the emission rows through a
    softmax over the alphabet. Both matrices stay strictly positive for
    every finite theta, which keeps the chain uniformly mixing.
    """

    theta_names = ("trans_logit", "emis_scale")
    dim_theta = 2

    def __init__(self, n_states: int, n_symbols: int | None = None):
        if n_states < 2:
            raise ValueError(f"need at least 2 states, got {n_states}")
        n_symbols = n_states if n_symbols is None else n_symbols
        if n_symbols < 2:
            raise ValueError(f"need at least 2 observation symbols, got {n_symbols}")
        self.n_states = int(n_states)
        self.n_symbols = int(n_symbols)
        # fixed affinity pattern: state x prefers symbol x mod n_symbols
        self._match = np.equal(
            np.arange(self.n_states)[:, None] % self.n_symbols,
            np.arange(self.n_symbols)[None, :],
        ).astype(float)

    def check_theta(self, theta: Theta) -> None:
        if theta.dim != self.dim_theta:
            raise DomainError(f"expected {self.dim_theta} parameters, got {theta.dim}")

    def _stay_prob(self, theta: Theta) -> float:
        a = float(theta.values[0])
        return 1.0 / (1.0 + np.exp(-a))

    def transition_matrix(self, theta: Theta) -> np.ndarray:
        """Row-stochastic (from, to) matrix; strictly positive entries."""
        self.check_theta(theta)
        s = self._stay_prob(theta)
        k = self.n_states
        off = (1.0 - s) / (k - 1)
        mat = np.full((k, k), off)
        np.fill_diagonal(mat, s)
        if not np.all(mat > 0.0):
            raise DomainError("transition probability underflowed to zero; trans_logit too large in magnitude")
        return mat

    def emission_matrix(self, theta: Theta) -> np.ndarray:
        """Row-stochastic (state, symbol) matrix; strictly positive entries."""
        self.check_theta(theta)
        b = float(theta.values[1])
        logits = b * self._match
        logits -= logits.max(axis=1, keepdims=True)
        mat = np.exp(logits)
        mat /= mat.sum(axis=1, keepdims=True)
        if not np.all(mat > 0.0):
            raise DomainError("emission probability underflowed to zero; emis_scale too large in magnitude")
        return mat

    def initial_logdensity(self, theta: Theta, x) -> np.ndarray:
        self.check_theta(theta)
        x = np.asarray(x)
        return np.full(x.shape, -np.log(self.n_states))

    def transition_logdensity(self, theta: Theta, x_prev, x_cur) -> np.ndarray:
        mat = self.transition_matrix(theta)
        return np.log(mat[np.asarray(x_prev), np.asarray(x_cur)])

    def observation_logdensity(self, theta: Theta, y, x) -> np.ndarray:
        mat = self.emission_matrix(theta)
        return np.log(mat[np.asarray(x), int(y)])

    def grad_log_initial(self, theta: Theta, x) -> np.ndarray:
        self.check_theta(theta)
        return _grad_stack(np.zeros(np.shape(x)), np.zeros(np.shape(x)))

    def grad_log_transition(self, theta: Theta, x_prev, x_cur) -> np.ndarray:
        self.check_theta(theta)
        s = self._stay_prob(theta)
        # d log P / d a is (1 - s) on the diagonal and -s off it
        g_a = np.where(np.equal(x_prev, x_cur), 1.0 - s, -s)
        return _grad_stack(g_a, np.zeros_like(g_a))

    def grad_log_observation(self, theta: Theta, y, x) -> np.ndarray:
        mat = self.emission_matrix(theta)
        x = np.asarray(x)
        preferred = x % self.n_symbols
        match_prob = mat[x, preferred]
        g_b = np.equal(preferred, int(y)).astype(float) - match_prob
        return _grad_stack(np.zeros_like(g_b), g_b)

    def sample_initial(self, theta: Theta, rng: np.random.Generator, size: int) -> np.ndarray:
        self.check_theta(theta)
        return rng.integers(0, self.n_states, size=size)

    def sample_transition(self, theta: Theta, x_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        cum = np.cumsum(self.transition_matrix(theta), axis=1)
        u = rng.random(np.asarray(x_prev).shape)
        return np.sum(u[..., None] > cum[np.asarray(x_prev)], axis=-1)

    def sample_observation(self, theta: Theta, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        cum = np.cumsum(self.emission_matrix(theta), axis=1)
        u = rng.random(np.asarray(x).shape)
        return np.sum(u[..., None] > cum[np.asarray(x)], axis=-1)


class _GaussianArFamily(ModelSpec):
    """Shared AR(1) state dynamics: X_0 ~ N(0, sigma^2/(1-phi^2)), X' = phi X + sigma V."""

    theta_names = ("phi", "sigma", "beta")
    dim_theta = 3
    n_states = None

    def check_theta(self, theta: Theta) -> None:
        if theta.dim != self.dim_theta:
            raise DomainError(f"expected {self.dim_theta} parameters, got {theta.dim}")
        phi, sigma, beta = theta.values
        if not abs(phi) < 1.0:
            raise DomainError(f"|phi| must be < 1, got {phi}")
        if not sigma > 0.0:
            raise DomainError(f"sigma must be > 0, got {sigma}")
        if not beta > 0.0:
            raise DomainError(f"beta must be > 0, got {beta}")

    def _unpack(self, theta: Theta) -> tuple[float, float, float]:
        self.check_theta(theta)
        phi, sigma, beta = theta.values
        return float(phi), float(sigma), float(beta)

    def stationary_variance(self, theta: Theta) -> float:
        phi, sigma, _ = self._unpack(theta)
        return sigma**2 / (1.0 - phi**2)

    def initial_logdensity(self, theta: Theta, x) -> np.ndarray:
        v = self.stationary_variance(theta)
        x = np.asarray(x, dtype=float)
        return -0.5 * (LOG_2PI + np.log(v) + x * x / v)

    def transition_logdensity(self, theta: Theta, x_prev, x_cur) -> np.ndarray:
        phi, sigma, _ = self._unpack(theta)
        r = np.asarray(x_cur, dtype=float) - phi * np.asarray(x_prev, dtype=float)
        return -0.5 * (LOG_2PI + 2.0 * np.log(sigma) + r * r / sigma**2)

    def grad_log_initial(self, theta: Theta, x) -> np.ndarray:
        phi, sigma, _ = self._unpack(theta)
        x2 = np.square(np.asarray(x, dtype=float))
        g_phi = phi * (x2 / sigma**2 - 1.0 / (1.0 - phi**2))
        g_sigma = x2 * (1.0 - phi**2) / sigma**3 - 1.0 / sigma
        return _grad_stack(g_phi, g_sigma, np.zeros_like(g_phi))

    def grad_log_transition(self, theta: Theta, x_prev, x_cur) -> np.ndarray:
        phi, sigma, _ = self._unpack(theta)
        x_prev = np.asarray(x_prev, dtype=float)
        r = np.asarray(x_cur, dtype=float) - phi * x_prev
        g_phi = r * x_prev / sigma**2
        g_sigma = r * r / sigma**3 - 1.0 / sigma
        return _grad_stack(g_phi, g_sigma, np.zeros_like(g_phi))

    def sample_initial(self, theta: Theta, rng: np.random.Generator, size: int) -> np.ndarray:
        v = self.stationary_variance(theta)
        return np.sqrt(v) * rng.standard_normal(size)

    def sample_transition(self, theta: Theta, x_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        phi, sigma, _ = self._unpack(theta)
        x_prev = np.asarray(x_prev, dtype=float)
        return phi * x_prev + sigma * rng.standard_normal(x_prev.shape)

    def transition_pair_terms(self, theta: Theta, x_prev, x_cur):
        # fused form of transition_logdensity + grad_log_transition; the
        # residual and its square each back one gradient buffer in place
        phi, sigma, _ = self._unpack(theta)
        x_prev = np.asarray(x_prev, dtype=float)
        r = np.asarray(x_cur, dtype=float) - phi * x_prev
        r2 = r * r
        logq = r2 * (-0.5 / sigma**2)
        logq += -0.5 * LOG_2PI - np.log(sigma)
        g_phi = np.multiply(r, x_prev / sigma**2, out=r)
        g_sigma = np.multiply(r2, 1.0 / sigma**3, out=r2)
        g_sigma -= 1.0 / sigma
        return logq, [g_phi, g_sigma, None]


class Lgssm(_GaussianArFamily):
    """Scalar linear-Gaussian model: Y = X + beta W with W standard normal."""

    def observation_logdensity(self, theta: Theta, y, x) -> np.ndarray:
        _, _, beta = self._unpack(theta)
        r = float(y) - np.asarray(x, dtype=float)
        return -0.5 * (LOG_2PI + 2.0 * np.log(beta) + r * r / beta**2)

    def grad_log_observation(self, theta: Theta, y, x) -> np.ndarray:
        _, _, beta = self._unpack(theta)
        r = float(y) - np.asarray(x, dtype=float)
        g_beta = r * r / beta**3 - 1.0 / beta
        zeros = np.zeros_like(g_beta)
        return _grad_stack(zeros, zeros, g_beta)

    def sample_observation(self, theta: Theta, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        _, _, beta = self._unpack(theta)
        x = np.asarray(x, dtype=float)
        return x + beta * rng.standard_normal(x.shape)


class StochVol(_GaussianArFamily):
    """Stochastic volatility: Y = beta exp(X/2) W, i.e. Y | X ~ N(0, beta^2 e^X)."""

    def observation_logdensity(self, theta: Theta, y, x) -> np.ndarray:
        _, _, beta = self._unpack(theta)
        x = np.asarray(x, dtype=float)
        # written with exp(-x) so large positive x cannot overflow
        return -0.5 * (LOG_2PI + 2.0 * np.log(beta) + x + float(y) ** 2 * np.exp(-x) / beta**2)

    def grad_log_observation(self, theta: Theta, y, x) -> np.ndarray:
        _, _, beta = self._unpack(theta)
        x = np.asarray(x, dtype=float)
        g_beta = float(y) ** 2 * np.exp(-x) / beta**3 - 1.0 / beta
        zeros = np.zeros_like(g_beta)
        return _grad_stack(zeros, zeros, g_beta)

    def sample_observation(self, theta: Theta, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        _, _, beta = self._unpack(theta)
        x = np.asarray(x, dtype=float)
        return beta * np.exp(0.5 * x) * rng.standard_normal(x.shape)


def make_finite_hmm(n_states: int, theta: Theta, n_symbols: int | None = None) -> FiniteHmm:
    """Build the finite-state model and validate theta against it.

    Construction fails if, at the given theta, any transition or emission
    probability has underflowed to zero.
    """
    model = FiniteHmm(n_states, n_symbols)
    model.check_theta(theta)
    model.transition_matrix(theta)
    model.emission_matrix(theta)
    return model


def make_lgssm(theta: Theta) -> Lgssm:
    model = Lgssm()
    model.check_theta(theta)
    return model


def make_sv(theta: Theta) -> StochVol:
    model = StochVol()
    model.check_theta(theta)
    return model


def score_increment(model: ModelSpec, theta: Theta, k: int, y_prev, x_prev, x_cur) -> np.ndarray:
    """Per-step score term of the log joint density.

    k = 0 takes only the initial state and returns the gradient of the
    initial log density; k > 0 combines the observation term at time k-1
    with the transition into x_cur. Broadcasts over state arrays, adding
    a trailing parameter axis.
    """
    if k == 0:
        if y_prev is not None or x_prev is not None:
            raise ValueError("k=0 takes no previous observation or state")
        out = model.grad_log_initial(theta, x_cur)
        if not np.all(np.isfinite(out)):
            raise DomainError("initial density gradient is non-finite at the evaluation point")
        return out
    if y_prev is None or x_prev is None:
        raise ValueError("k>0 requires the previous observation and state")
    g_obs = model.grad_log_observation(theta, y_prev, x_prev)
    if not np.all(np.isfinite(g_obs)):
        raise DomainError("observation density gradient is non-finite at the evaluation point")
    g_tr = model.grad_log_transition(theta, x_prev, x_cur)
    if not np.all(np.isfinite(g_tr)):
        raise DomainError("transition density gradient is non-finite at the evaluation point")
    return g_obs + g_tr
