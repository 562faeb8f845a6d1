"""Brownian noise, one-step schemes, frozen-flow simulation and Picard iteration."""

from __future__ import annotations

import csv
import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DivergenceError, InvalidInputError
from .grid import TimeGrid
from .measure import EmpiricalMeasure, MeasureFlow, second_moment, sup_w2
from .model import Model, Regularity
from .rng import substream

log = logging.getLogger(__name__)

__all__ = [
    "Scheme",
    "TimeGrid",
    "NoiseBundle",
    "ParticlePaths",
    "PicardResult",
    "sample_noise",
    "step",
    "advance",
    "simulate_frozen_flow",
    "picard_solve",
    "default_tolerance",
    "InitSampler",
]


class Scheme(enum.Enum):
    EM = "em"
    TAMED_EM = "tamed_em"

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"em": cls.EM, "euler": cls.EM, "tamed_em": cls.TAMED_EM, "tamedem": cls.TAMED_EM,
                   "tamed": cls.TAMED_EM}
        if key not in aliases:
            raise InvalidInputError(f"unknown scheme {value!r}; use 'em' or 'tamed_em'")
        return aliases[key]


def resolve_scheme(model: Model, scheme=None) -> Scheme:
    """Pick the scheme declared by the model's regularity unless one is forced."""
    if scheme is None:
        return Scheme.TAMED_EM if model.regularity is Regularity.ONE_SIDED_LIPSCHITZ else Scheme.EM
    scheme = Scheme.parse(scheme)
    if scheme is Scheme.EM and model.regularity is Regularity.ONE_SIDED_LIPSCHITZ:
        log.warning("plain Euler-Maruyama forced on a one-sided Lipschitz model; paths may diverge")
    return scheme


# noise ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NoiseBundle:
    """Brownian increments of shape ``(particles, steps, m)``.

    Row ``p`` is drawn from substream ``(seed, *stream, first_particle + p)``
    and therefore does not depend on how many particles were requested.
    """

    grid: TimeGrid
    seed: int
    increments: np.ndarray
    stream: tuple = ()
    first_particle: int = 0

    @property
    def particles(self) -> int:
        return self.increments.shape[0]

    @property
    def dim(self) -> int:
        return self.increments.shape[2]

    def with_increments(self, increments: np.ndarray) -> "NoiseBundle":
        if increments.shape != self.increments.shape:
            raise InvalidInputError("replacement increments must keep the bundle shape")
        return NoiseBundle(self.grid, self.seed, increments, self.stream, self.first_particle)

    def select(self, particles) -> "NoiseBundle":
        """Bundle restricted (and reordered) to the given particle rows."""
        return NoiseBundle(self.grid, self.seed, self.increments[np.asarray(particles)], self.stream,
                           self.first_particle)


def _particle_increments(grid: TimeGrid, m: int, seed: int, stream: tuple, p: int) -> np.ndarray:
    g = substream(seed, "noise", *stream, p)
    return g.standard_normal((grid.steps, m)) * np.sqrt(grid.dt)


def sample_noise(grid: TimeGrid, particles: int, m: int, seed: int, *, stream: tuple = (),
                 first_particle: int = 0, threads: int = 1) -> NoiseBundle:
    """Draw ``dW ~ N(0, dt I)`` with one deterministic substream per particle."""
    if particles < 1 or m < 1:
        raise InvalidInputError("particles and noise dimension must be >= 1")
    stream = tuple(stream)
    out = np.empty((particles, grid.steps, m))

    def fill(rows):
        for p in rows:
            out[p] = _particle_increments(grid, m, seed, stream, first_particle + p)

    chunks = np.array_split(np.arange(particles), max(1, min(threads, particles)))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, chunks))
    else:
        for c in chunks:
            fill(c)
    return NoiseBundle(grid, int(seed), out, stream, first_particle)


# one-step maps ----------------------------------------------------------------


def _tame(drift_dt: np.ndarray, dt: float, drift: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(drift**2, axis=1, keepdims=True))
    return drift_dt / (1.0 + dt * norm)


def advance(model: Model, scheme: Scheme, t: float, x: np.ndarray, mu: EmpiricalMeasure, dt: float,
            dw: np.ndarray) -> np.ndarray:
    """Vectorized one-step map for ``x`` of shape ``(P, d)`` and ``dw`` of shape ``(P, m)``.

    Non-finite results are returned as-is; callers decide how to report them.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        b = model.drift(t, x, mu)
        sig = model.diffusion(t, x, mu)
        inc = b * dt
        if scheme is Scheme.TAMED_EM:
            inc = _tame(inc, dt, b)
        return x + inc + np.einsum("pal,pl->pa", sig, dw)


def step(model: Model, scheme, t: float, x, mu: EmpiricalMeasure, dt: float, dw) -> np.ndarray:
    """Advance a single state by one EM or tamed-EM step."""
    if dt <= 0:
        raise InvalidInputError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    dw = np.asarray(dw, dtype=float).reshape(1, -1)
    if x.shape[1] != model.dim_state or dw.shape[1] != model.dim_noise:
        raise InvalidInputError("state or increment dimension does not match the model")
    out = advance(model, Scheme.parse(scheme), t, x, mu, dt, dw)[0]
    if not np.all(np.isfinite(out)):
        raise DivergenceError(t, x[0])
    return out


def check_finite(x_new: np.ndarray, x_old: np.ndarray, t: float, k: int, particle_ids=None) -> None:
    bad = ~np.all(np.isfinite(x_new), axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        pid = i if particle_ids is None else int(particle_ids[i])
        raise DivergenceError(t, x_old[i].copy(), step=k, particle=pid)


# paths ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParticlePaths:
    """Trajectories of shape ``(P, steps+1, d)``."""

    grid: TimeGrid
    values: np.ndarray

    @property
    def particles(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def measure(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.values[:, k, :])

    def to_flow(self) -> MeasureFlow:
        return MeasureFlow(self.grid, np.ascontiguousarray(self.values.transpose(1, 0, 2)))

    def to_csv(self, path) -> None:
        times = self.grid.times
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["particle", "node", "time"] + [f"x{c}" for c in range(self.dim)])
            for p in range(self.particles):
                for k in range(self.grid.steps + 1):
                    w.writerow([p, k, repr(float(times[k]))] + [repr(float(v)) for v in self.values[p, k]])


def _check_init(model: Model, init, particles: Optional[int] = None) -> np.ndarray:
    x0 = np.asarray(init, dtype=float)
    if x0.ndim == 1:
        x0 = x0[:, None]
    if x0.ndim != 2 or x0.shape[1] != model.dim_state:
        raise InvalidInputError(f"initial states must have shape (P, {model.dim_state}), got {x0.shape}")
    if particles is not None and x0.shape[0] != particles:
        raise InvalidInputError(f"{x0.shape[0]} initial states for {particles} noise streams")
    return x0


def simulate_frozen_flow(model: Model, flow: MeasureFlow, init, noise: NoiseBundle, scheme=None) -> ParticlePaths:
    """Independent paths of the SDE whose measure argument is frozen to ``flow``."""
    grid = noise.grid
    if flow.grid != grid:
        raise InvalidInputError("flow grid and noise grid differ")
    if flow.dim != model.dim_state:
        raise InvalidInputError("flow dimension does not match the model")
    if noise.dim != model.dim_noise:
        raise InvalidInputError("noise dimension does not match the model")
    scheme = resolve_scheme(model, scheme)
    x = _check_init(model, init, noise.particles)
    out = np.empty((x.shape[0], grid.steps + 1, x.shape[1]))
    out[:, 0] = x
    dt, times = grid.dt, grid.times
    for k in range(grid.steps):
        x_new = advance(model, scheme, times[k], x, flow.measure(k), dt, noise.increments[:, k])
        check_finite(x_new, x, times[k], k)
        out[:, k + 1] = x = x_new
    return ParticlePaths(grid, out)


# Picard measure-flow iteration --------------------------------------------------


@dataclass
class PicardResult:
    flow: MeasureFlow
    iterations: int
    residuals: list = field(default_factory=list)
    converged: bool = False
    tol: float = 0.0
    paths: Optional[ParticlePaths] = None

    def residuals_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "residual"])
            for n, r in enumerate(self.residuals, start=1):
                w.writerow([n, repr(float(r))])


def default_tolerance(flow0: MeasureFlow) -> float:
    return 1e-2 * (1.0 + np.sqrt(second_moment(flow0.measure(0))))


def picard_solve(model: Model, init_sampler: Callable[[np.random.Generator, int], np.ndarray], M: int,
                 grid: TimeGrid, tol: Optional[float] = None, max_iter: int = 25, seed: int = 42,
                 scheme=None, threads: int = 1) -> PicardResult:
    """Fixed point of ``flow -> Law(SDE driven by flow)`` on M-sample empirical flows.

    ``flow^0`` is the time-constant law of the initial samples. Iterate ``n``
    simulates the same initial samples against ``flow^(n-1)`` with fresh noise
    from stream ``(seed, "picard", n)``. Iteration stops once the sup-in-time
    W2 distance between consecutive flows is at most ``tol``; if that never
    happens the last flow is returned with ``converged=False``.
    """
    if M < 2:
        raise InvalidInputError("Picard iteration needs M >= 2 samples")
    if max_iter < 1:
        raise InvalidInputError("max_iter must be >= 1")
    scheme = resolve_scheme(model, scheme)
    xi = _check_init(model, init_sampler(substream(seed, "picard", "init"), M), M)
    flow = MeasureFlow.constant(grid, xi)
    if tol is None:
        tol = default_tolerance(flow)
    elif tol <= 0:
        raise InvalidInputError("tol must be positive")
    residuals = []
    paths = None
    for n in range(1, max_iter + 1):
        noise = sample_noise(grid, M, model.dim_noise, seed, stream=("picard", n), threads=threads)
        paths = simulate_frozen_flow(model, flow, xi, noise, scheme)
        new_flow = paths.to_flow()
        residuals.append(sup_w2(flow, new_flow))
        flow = new_flow
        log.debug("picard iteration %d residual %.3e", n, residuals[-1])
        if residuals[-1] <= tol:
            return PicardResult(flow, n, residuals, True, tol, paths)
    log.warning("Picard iteration did not reach tol=%.3g in %d iterations (last residual %.3g)",
                tol, max_iter, residuals[-1])
    return PicardResult(flow, max_iter, residuals, False, tol, paths)


# initial-condition samplers -----------------------------------------------------


@dataclass(frozen=True)
class InitSampler:
    """``xi`` drawn i.i.d. as ``constant``, ``gaussian`` (loc, scale) or ``uniform`` (low=loc-scale, high=loc+scale)."""

    kind: str = "constant"
    loc: float = 1.0
    scale: float = 0.0
    dim: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "gaussian", "uniform"):
            raise InvalidInputError(f"unknown initial sampler {self.kind!r}")
        if self.scale < 0:
            raise InvalidInputError("initial sampler scale must be nonnegative")

    def __call__(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full((n, self.dim), float(self.loc))
        if self.kind == "gaussian":
            return self.loc + self.scale * rng.standard_normal((n, self.dim))
        return rng.uniform(self.loc - self.scale, self.loc + self.scale, (n, self.dim))

    def second_moment(self) -> float:
        """``E|xi|^2`` (per coordinate times dim)."""
        var = {"constant": 0.0, "gaussian": self.scale**2, "uniform": self.scale**2 / 3.0}[self.kind]
        return self.dim * (self.loc**2 + var)

    def scaled_variance(self, factor: float) -> "InitSampler":
        return InitSampler(self.kind, self.loc, self.scale * np.sqrt(factor), self.dim)
