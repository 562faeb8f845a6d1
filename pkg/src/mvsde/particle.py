"""Interacting and non-interacting particle systems on shared noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .measure import EmpiricalMeasure, MeasureFlow
from .model import Model
from .sde import (
    NoiseBundle,
    ParticlePaths,
    _check_init,
    advance,
    check_finite,
    resolve_scheme,
    simulate_frozen_flow,
)


def simulate_ips(model: Model, noise: NoiseBundle, init, scheme=None) -> ParticlePaths:
    """N particles coupled through the empirical measure of their current states.

    Each step reads ``mu^N_k`` from the states at node ``k`` and then advances
    every particle with its own increment row.
    """
    grid = noise.grid
    if noise.dim != model.dim_noise:
        raise InvalidInputError("noise dimension does not match the model")
    scheme = resolve_scheme(model, scheme)
    x = _check_init(model, init, noise.particles)
    out = np.empty((x.shape[0], grid.steps + 1, x.shape[1]))
    out[:, 0] = x
    dt, times = grid.dt, grid.times
    for k in range(grid.steps):
        mu = EmpiricalMeasure(x)
        x_new = advance(model, scheme, times[k], x, mu, dt, noise.increments[:, k])
        check_finite(x_new, x, times[k], k)
        out[:, k + 1] = x = x_new
    return ParticlePaths(grid, out)


def simulate_non_ips(model: Model, flow: MeasureFlow, noise: NoiseBundle, init, scheme=None) -> ParticlePaths:
    """N decoupled copies, all reading the same deterministic ``flow``."""
    return simulate_frozen_flow(model, flow, init, noise, scheme)


@dataclass(frozen=True, eq=False)
class CoupledSystems:
    ips: ParticlePaths
    nonips: ParticlePaths
    noise: NoiseBundle
    flow_used: MeasureFlow

    def __post_init__(self):
        if self.ips.grid != self.nonips.grid or self.ips.grid != self.noise.grid:
            raise InvalidInputError("coupled systems must share one grid")
        if self.ips.values.shape != self.nonips.values.shape:
            raise InvalidInputError("coupled systems must have the same particle count")


def simulate_coupled(model: Model, flow: MeasureFlow, noise: NoiseBundle, init, scheme=None) -> CoupledSystems:
    """IPS and non-IPS driven stream-by-stream by the same increments and initial states."""
    x0 = _check_init(model, init, noise.particles)
    return CoupledSystems(
        simulate_ips(model, noise, x0, scheme),
        simulate_non_ips(model, flow, noise, x0, scheme),
        noise,
        flow,
    )


def poc_gap(coupled: CoupledSystems):
    """Per-particle ``sup_t |X^i_t - Z^i_t|^2`` and its maximum over particles."""
    diff = coupled.ips.values - coupled.nonips.values
    per_particle = np.max(np.sum(diff**2, axis=2), axis=1)
    return per_particle, float(per_particle.max())
