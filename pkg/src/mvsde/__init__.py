"""McKean-Vlasov particle simulation with pathwise Malliavin derivatives."""

__version__ = "0.1.0"

from .errors import DivergenceError, InvalidInputError
from .grid import TimeGrid
from .measure import (
    EmpiricalMeasure,
    MeasureFlow,
    empirical_w2_upper_bound,
    first_moment,
    second_moment,
    wasserstein2,
)
from .model import (
    DoubleWell,
    FunctionModel,
    MeanFieldOU,
    Model,
    Regularity,
    ScalarStateDiffusion,
    make_model,
)
from .sde import InitSampler, NoiseBundle, ParticlePaths, Scheme, picard_solve, sample_noise, simulate_frozen_flow, step
from .particle import CoupledSystems, poc_gap, simulate_coupled, simulate_ips, simulate_non_ips
from .malliavin import (
    directional_derivative,
    finite_difference_oracle,
    malliavin_ips,
    malliavin_limit,
)
