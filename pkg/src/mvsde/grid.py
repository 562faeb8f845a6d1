from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``0 = t_0 < ... < t_n = T`` with ``dt = T / n``."""

    T: float
    steps: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise InvalidInputError(f"horizon T must be positive, got {self.T}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidInputError(f"steps must be a positive integer, got {self.steps}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "steps", int(self.steps))

    @classmethod
    def from_dt(cls, T: float, dt: float) -> "TimeGrid":
        if dt <= 0:
            raise InvalidInputError(f"dt must be positive, got {dt}")
        steps = int(round(T / dt))
        if steps < 1 or abs(steps * dt - T) > 1e-9 * max(1.0, T):
            raise InvalidInputError(f"T={T} is not an integer multiple of dt={dt}")
        return cls(T, steps)

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @cached_property
    def times(self) -> np.ndarray:
        t = np.arange(self.steps + 1) * self.dt
        t[-1] = self.T
        return t

    def index_of(self, t: float) -> int:
        """Left-endpoint node index of the cell containing ``t``."""
        if t < 0 or t > self.T * (1 + 1e-12):
            raise InvalidInputError(f"t={t} outside [0, {self.T}]")
        k = int(np.floor(t / self.dt + 1e-9))
        return min(k, self.steps)

    def subgrid(self, count: int) -> np.ndarray:
        """``count`` equispaced source-time node indices in ``[0, T)``."""
        if count < 1 or count > self.steps:
            raise InvalidInputError(f"sub-grid size must be in [1, {self.steps}], got {count}")
        return np.array([(k * self.steps) // count for k in range(count)], dtype=np.int64)
