"""Bootstrap particle filter with recorded ancestry.

Clouds are always equally weighted: every step resamples multinomially
from the observation-weighted mixture and then moves each particle
through the transition. Ancestor indices from the resampling draw are
kept on the new cloud so path-following estimators can use them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import ModelSpec, Theta


class WeightCollapseError(RuntimeError):
    """Every mixture weight underflowed to zero."""

    def __init__(self, time: int):
        self.time = time
        super().__init__(f"all mixture weights underflowed to zero while stepping to time {time}")


@dataclass(frozen=True)
class ParticleCloud:
    """Equally weighted particles at one time point.

    `ancestors` holds, for each particle, the index of its parent in the
    previous cloud; it is None at time 0.
    """

    time: int
    particles: np.ndarray
    ancestors: np.ndarray | None = None
    seed_trace: str | None = None

    @property
    def n(self) -> int:
        return int(self.particles.shape[0])

    def __post_init__(self) -> None:
        if self.particles.ndim != 1 or self.particles.shape[0] < 1:
            raise ValueError("particles must form a non-empty vector")
        if self.ancestors is not None:
            anc = np.asarray(self.ancestors)
            if anc.shape != self.particles.shape:
                raise ValueError("ancestors must have one entry per particle")
            if anc.min() < 0 or anc.max() >= anc.shape[0]:
                raise ValueError("ancestor indices out of range")


@dataclass(frozen=True)
class MixtureWeights:
    """Observation log-weights of a cloud and their normalization."""

    logw: np.ndarray
    normalized: np.ndarray


def _seed_trace(rng: np.random.Generator) -> str | None:
    seq = getattr(rng.bit_generator, "seed_seq", None)
    if seq is None:
        return None
    return f"entropy={seq.entropy},spawn_key={seq.spawn_key}"


def mixture_weights(model: ModelSpec, theta: Theta, cloud: ParticleCloud, y) -> MixtureWeights:
    """Normalized observation weights g(y | x_i) over a cloud."""
    logw = np.asarray(model.observation_logdensity(theta, y, cloud.particles), dtype=float)
    if np.isnan(logw).any():
        raise ValueError(f"NaN observation log-density at time {cloud.time}")
    m = logw.max()
    if not np.isfinite(m):
        raise WeightCollapseError(cloud.time + 1)
    w = np.exp(logw - m)
    return MixtureWeights(logw=logw, normalized=w / w.sum())


def multinomial_indices(rng: np.random.Generator, weights: np.ndarray, size: int) -> np.ndarray:
    """Exact multinomial draw of `size` indices: inverse CDF over sorted uniforms."""
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0  # absorb fp shortfall in the final bin
    u = np.sort(rng.random(size))
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, len(weights) - 1)


def init_cloud(model: ModelSpec, theta: Theta, n_particles: int, rng: np.random.Generator) -> ParticleCloud:
    """Draw n_particles independent samples from the initial law."""
    if n_particles < 1:
        raise ValueError(f"need at least one particle, got {n_particles}")
    x = model.sample_initial(theta, rng, n_particles)
    return ParticleCloud(time=0, particles=np.asarray(x), ancestors=None, seed_trace=_seed_trace(rng))


def bootstrap_step(
    model: ModelSpec,
    theta: Theta,
    cloud: ParticleCloud,
    y,
    rng: np.random.Generator,
) -> ParticleCloud:
    """Advance a cloud one step through the observation-weighted mixture.

    Each new particle picks an ancestor multinomially with probability
    proportional to g(y | x_prev) and then moves through the transition,
    which is an i.i.d. draw from the mixture of transition densities.
    """
    w = mixture_weights(model, theta, cloud, y)
    ancestors = multinomial_indices(rng, w.normalized, cloud.n)
    parents = cloud.particles[ancestors]
    x = model.sample_transition(theta, parents, rng)
    return ParticleCloud(
        time=cloud.time + 1,
        particles=np.asarray(x),
        ancestors=ancestors,
        seed_trace=cloud.seed_trace,
    )
