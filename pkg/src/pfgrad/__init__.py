"""Particle estimation of filter derivatives for state-space models.

A bootstrap particle filter core, two estimators of the filter's
parameter derivative (a stable quadratic-cost backward update and a
linear-cost path update), exact reference recursions for finite-state
and linear-Gaussian models, online likelihood-ascent parameter
estimation, and drivers for variance, rate and estimation studies.
"""

__version__ = "0.1.0"

from . import _alloc  # noqa: F401  (malloc tuning side effect)
from .models import (  # noqa: F401
    DomainError,
    FiniteHmm,
    Lgssm,
    ModelSpec,
    StochVol,
    Theta,
    make_finite_hmm,
    make_lgssm,
    make_sv,
    score_increment,
)
from .smc import (  # noqa: F401
    MixtureWeights,
    ParticleCloud,
    WeightCollapseError,
    bootstrap_step,
    init_cloud,
    mixture_weights,
    multinomial_indices,
)
from .fderiv import (  # noqa: F401
    BackwardWeightMatrix,
    DegenerateBackwardRowError,
    PathScoreTable,
    SignedParticleMeasure,
    TBarTable,
    init_path_scores,
    init_tbar,
    update_path_scores,
    update_tbar,
    zeta_from_tbar,
    zeta_path,
)
from .rml import (  # noqa: F401
    ClampBox,
    PredictiveLikelihoodCollapseError,
    RmlState,
    StepSizeSchedule,
    init_rml,
    offline_gradient,
    rml_step,
    score_increment_estimate,
)
