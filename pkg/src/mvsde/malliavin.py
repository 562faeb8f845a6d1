"""Pathwise Malliavin derivatives of simulated paths.

Derivatives are propagated as the exact derivative of the discrete scheme with
respect to the Brownian increments. For a source node ``j`` and target node
``k`` the stored block is

    D_{s_j} X_{t_k} = 0                         k < j
                    = sigma(X_j, mu_j)          k = j, j + 1
                    = J_{k-1} ... J_{j+1} sigma(X_j, mu_j)    k > j + 1

where ``J_k`` is the one-step Jacobian (drift part taken through the tamed map
when the tamed scheme is used). Since ``dW_j`` first moves ``X_{j+1}``, this
makes a Wiener shift of the increments and the directional pairing agree up to
rounding for schemes that are affine in the noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DivergenceError, InvalidInputError
from .grid import TimeGrid
from .measure import EmpiricalMeasure, MeasureFlow, symmetric_mean
from .model import Model
from .sde import NoiseBundle, ParticlePaths, Scheme, resolve_scheme, simulate_frozen_flow


def _drift_map_jacobian(b: np.ndarray, dt: float, scheme: Scheme) -> np.ndarray:
    """Derivative of the drift increment ``dt * f(b)`` with respect to ``b``; shape ``(P, d, d)``."""
    P, d = b.shape
    eye = np.broadcast_to(np.eye(d), (P, d, d))
    if scheme is Scheme.EM:
        return dt * eye
    norm = np.sqrt(np.sum(b**2, axis=1))
    scale = 1.0 + dt * norm
    safe = np.where(norm > 0, norm, 1.0)
    outer = b[:, :, None] * b[:, None, :] / (safe * scale**2)[:, None, None]
    return dt * (eye / scale[:, None, None] - dt * outer)


def _index_array(values, upper: int, what: str) -> np.ndarray:
    idx = np.atleast_1d(np.asarray(values, dtype=np.int64))
    if idx.ndim != 1 or idx.size == 0:
        raise InvalidInputError(f"{what} must be a nonempty 1-d list of node indices")
    if idx.min() < 0 or idx.max() > upper:
        raise InvalidInputError(f"{what} out of grid range [0, {upper}]: {idx.tolist()}")
    return idx


@dataclass(frozen=True, eq=False)
class DerivativeSlice:
    """Derivative blocks of one particle: ``values[s, t] = D_{s} X_{t}`` of shape ``(d, m)``."""

    grid: TimeGrid
    s_indices: np.ndarray
    t_indices: np.ndarray
    values: np.ndarray  # (S, T, d, m)


@dataclass(frozen=True, eq=False)
class MalliavinLimitField:
    """``D_s Z_t`` for a batch of frozen-flow paths.

    ``values`` has shape ``(P, S, T, d, m)`` where ``S`` indexes ``s_indices``
    and ``T`` indexes ``t_indices`` (all grid nodes by default).
    """

    grid: TimeGrid
    s_indices: np.ndarray
    t_indices: np.ndarray
    values: np.ndarray
    flow_source: str = "picard"

    def slice_for(self, p: int = 0) -> DerivativeSlice:
        return DerivativeSlice(self.grid, self.s_indices, self.t_indices, self.values[p])

    def to_csv(self, path) -> None:
        _write_field_csv(path, self.grid, self.s_indices, self.t_indices,
                         self.values.transpose(1, 2, 0, 3, 4), source=None)


@dataclass(frozen=True, eq=False)
class MalliavinIpsField:
    """``D^j_s X^i_t`` for one source particle ``j`` and every target particle ``i``.

    ``values`` has shape ``(S, T, N, d, m)``.
    """

    grid: TimeGrid
    source: int
    s_indices: np.ndarray
    t_indices: np.ndarray
    values: np.ndarray

    def slice_for(self, i: int) -> DerivativeSlice:
        return DerivativeSlice(self.grid, self.s_indices, self.t_indices, self.values[:, :, i])

    def to_csv(self, path) -> None:
        _write_field_csv(path, self.grid, self.s_indices, self.t_indices, self.values, source=self.source)


def _write_field_csv(path, grid, s_indices, t_indices, values, source) -> None:
    # values: (S, T, P, d, m)
    times = grid.times
    d, m = values.shape[3], values.shape[4]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["j", "s", "i", "t", "component", "value"])
        j = "" if source is None else source
        for a, s in enumerate(s_indices):
            for b, k in enumerate(t_indices):
                for i in range(values.shape[2]):
                    for c in range(d * m):
                        w.writerow([j, repr(float(times[s])), i, repr(float(times[k])), c,
                                    repr(float(values[a, b, i, c // m, c % m]))])


class _Recorder:
    """Collects the propagated state at the requested target nodes."""

    def __init__(self, t_indices: np.ndarray, shape: tuple):
        self.t_indices = t_indices
        self.slot = {int(k): n for n, k in enumerate(t_indices)}
        self.values = np.zeros(shape[:1] + (len(t_indices),) + shape[1:])

    def __call__(self, k: int, state: np.ndarray) -> None:
        n = self.slot.get(k)
        if n is not None:
            self.values[:, n] = state


def malliavin_limit(model: Model, paths: ParticlePaths, flow: MeasureFlow, s_indices, noise: NoiseBundle,
                    scheme=None, t_indices=None, flow_source: str = "picard") -> MalliavinLimitField:
    """Propagate ``D_s Z_t`` along frozen-flow paths.

    ``paths`` must come from :func:`simulate_frozen_flow` with the same
    ``flow``, ``noise`` and scheme. The recursion has no measure-derivative term
    because the flow is deterministic.
    """
    grid = paths.grid
    if flow.grid != grid or noise.grid != grid:
        raise InvalidInputError("paths, flow and noise must share one grid")
    if noise.particles != paths.particles:
        raise InvalidInputError("noise and paths disagree on the number of particles")
    n = grid.steps
    s_idx = _index_array(s_indices, n, "source indices")
    t_idx = np.arange(n + 1) if t_indices is None else _index_array(t_indices, n, "target indices")
    scheme = resolve_scheme(model, scheme)
    P, d, m = paths.particles, model.dim_state, model.dim_noise
    S = len(s_idx)
    D = np.zeros((P, S, d, m))
    rec = _Recorder(t_idx, (P, S, d, m))
    dt, times = grid.dt, grid.times
    # s_j <= k - 1 propagates; s_j == k starts; s_j > k stays zero
    for k in range(n + 1):
        x = paths.values[:, k]
        mu = flow.measure(k)
        starting = s_idx == k
        if starting.any():
            D[:, starting] = model.diffusion(times[k], x, mu)[:, None]
        rec(k, D)
        if k == n:
            break
        active = s_idx < k
        if active.any():
            Da = D[:, active]
            b = model.drift(times[k], x, mu)
            A = np.einsum("pab,pbc->pac", _drift_map_jacobian(b, dt, scheme), model.grad_x_drift(times[k], x, mu))
            gs = model.grad_x_diffusion(times[k], x, mu)
            inc = np.einsum("pab,psbm->psam", A, Da)
            inc += np.einsum("pabl,psbm,pl->psam", gs, Da, noise.increments[:, k])
            D[:, active] = Da + inc
            if not np.all(np.isfinite(D)):
                raise DivergenceError(times[k], step=k, message=f"derivative became non-finite at step {k}")
    # recorder layout is (P, T, S, d, m)
    return MalliavinLimitField(grid, s_idx, t_idx, rec.values.transpose(0, 2, 1, 3, 4), flow_source)


def malliavin_ips(model: Model, paths: ParticlePaths, s_indices, j: int, noise: NoiseBundle, scheme=None,
                  t_indices=None) -> MalliavinIpsField:
    """Propagate ``D^j_s X^i_t`` for all ``i`` jointly along an IPS run.

    Each step applies, for every particle ``i``,

        grad_x b(X^i, mu^N) D^i + (1/N) sum_k d_mu b(X^i, mu^N)(X^k) D^k

    through the drift map and the analogous diffusion term against ``dW^i``.
    Models flagged ``first_moment_interaction`` use the running mean of
    ``D^k`` for the ``1/N`` sums (O(N) per step); otherwise the full O(N^2)
    contraction is evaluated.
    """
    grid = paths.grid
    if noise.grid != grid:
        raise InvalidInputError("paths and noise must share one grid")
    N = paths.particles
    if noise.particles != N:
        raise InvalidInputError("noise and paths disagree on the number of particles")
    if not (0 <= j < N):
        raise InvalidInputError(f"source particle {j} out of range [0, {N})")
    n = grid.steps
    s_idx = _index_array(s_indices, n, "source indices")
    t_idx = np.arange(n + 1) if t_indices is None else _index_array(t_indices, n, "target indices")
    scheme = resolve_scheme(model, scheme)
    d, m = model.dim_state, model.dim_noise
    S = len(s_idx)
    D = np.zeros((S, N, d, m))
    rec = _Recorder(t_idx, (S, N, d, m))
    dt, times = grid.dt, grid.times
    fast = model.first_moment_interaction
    for k in range(n + 1):
        x = paths.values[:, k]
        mu = EmpiricalMeasure(x)
        starting = s_idx == k
        if starting.any():
            sig_j = model.diffusion(times[k], x[j:j + 1], mu)[0]
            D[starting] = 0.0
            D[starting, j] = sig_j
        rec(k, D)
        if k == n:
            break
        active = s_idx < k
        if not active.any():
            continue
        Da = D[active]
        t = times[k]
        dw = noise.increments[:, k]
        b = model.drift(t, x, mu)
        T = _drift_map_jacobian(b, dt, scheme)
        G = np.einsum("iab,sibm->siam", model.grad_x_drift(t, x, mu), Da)
        H = np.einsum("iabl,sibm->siaml", model.grad_x_diffusion(t, x, mu), Da)
        if fast:
            Dbar = symmetric_mean(Da, axis=1)
            lb = model.lions_drift(t, x, mu, x[:1])[:, 0]
            ls = model.lions_diffusion(t, x, mu, x[:1])[:, 0]
            G += np.einsum("iab,sbm->siam", lb, Dbar)
            H += np.einsum("iabl,sbm->siaml", ls, Dbar)
        else:
            lb = model.lions_drift(t, x, mu, x)
            ls = model.lions_diffusion(t, x, mu, x)
            G += np.einsum("ikab,skbm->siam", lb, Da) / N
            H += np.einsum("ikabl,skbm->siaml", ls, Da) / N
        inc = np.einsum("iab,sibm->siam", T, G) + np.einsum("siaml,il->siam", H, dw)
        D[active] = Da + inc
        if not np.all(np.isfinite(D)):
            raise DivergenceError(t, step=k, message=f"IPS derivative became non-finite at step {k}")
    return MalliavinIpsField(grid, int(j), s_idx, t_idx, rec.values)


def _as_direction(h, grid: TimeGrid, m: int) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.ndim == 1:
        h = h[:, None]
    if h.shape[0] != grid.steps or h.shape[1] != m:
        raise InvalidInputError(f"direction must give one value per grid cell: expected ({grid.steps}, {m}), "
                                f"got {h.shape}")
    return h


def directional_derivative(field: DerivativeSlice, h, component: int = 0) -> np.ndarray:
    """``D^h X_t = sum_{s_k < t} D_{s_k} X_t h(s_k) dt`` at the slice's target nodes.

    ``h`` holds one value (or one ``m``-vector) per grid cell; the slice must
    carry every source node ``0 .. steps-1``.
    """
    grid = field.grid
    n = grid.steps
    if len(field.s_indices) != n or np.any(field.s_indices != np.arange(n)):
        raise InvalidInputError("directional derivative needs the field at every source cell of the grid")
    m = field.values.shape[-1]
    hv = _as_direction(h, grid, m)
    before = field.s_indices[:, None] < field.t_indices[None, :]  # (S, T)
    comp = field.values[:, :, component, :]  # (S, T, m)
    return np.einsum("st,stl,sl->t", before, comp, hv) * grid.dt


def finite_difference_oracle(simulate: Callable[[NoiseBundle], ParticlePaths], noise: NoiseBundle, h,
                             epsilon: float = 1e-4, stream: Optional[int] = 0, component: int = 0) -> np.ndarray:
    """Central Wiener-shift difference ``(X^{+eps} - X^{-eps}) / (2 eps)``.

    Increments of noise row ``stream`` are shifted by ``+-eps h(t_k) dt`` and
    the system is re-simulated with ``simulate``. Returns shape
    ``(particles, steps+1)`` for state coordinate ``component``.

    ``stream=None`` shifts every row at once. That is only meaningful for
    decoupled systems, where particle ``i`` reads nothing but row ``i`` and the
    result is each particle's derivative along its own noise.
    """
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")
    if stream is not None and not (0 <= stream < noise.particles):
        raise InvalidInputError(f"stream {stream} out of range")
    hv = _as_direction(h, noise.grid, noise.dim)
    shift = epsilon * hv * noise.grid.dt
    rows = slice(None) if stream is None else stream
    plus = noise.increments.copy()
    minus = noise.increments.copy()
    plus[rows] += shift
    minus[rows] -= shift
    xp = simulate(noise.with_increments(plus)).values[:, :, component]
    xm = simulate(noise.with_increments(minus)).values[:, :, component]
    return (xp - xm) / (2.0 * epsilon)


def frozen_flow_system(model: Model, flow: MeasureFlow, init, scheme=None):
    """Simulator closure for :func:`finite_difference_oracle` on frozen-flow paths."""
    return lambda noise: simulate_frozen_flow(model, flow, init, noise, scheme)


def ips_system(model: Model, init, scheme=None):
    from .particle import simulate_ips

    return lambda noise: simulate_ips(model, noise, init, scheme)


def source_subgrid(grid: TimeGrid, count: int = 8) -> np.ndarray:
    return grid.subgrid(count)


def full_sources(grid: TimeGrid) -> np.ndarray:
    return np.arange(grid.steps)


def sup_sq_norm(values: np.ndarray, axis: Sequence[int] = (-2, -1)) -> np.ndarray:
    """Squared Frobenius norm of each ``(d, m)`` block."""
    return np.sum(values**2, axis=tuple(axis))
