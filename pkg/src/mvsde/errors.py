"""Exception types shared across the package."""

from __future__ import annotations


class InvalidInputError(ValueError):
    """Raised on shape, size or parameter violations."""


class DivergenceError(RuntimeError):
    """Raised when a simulated state becomes non-finite.

    Carries enough context (time, step, particle, last finite state) to locate
    the blow-up.
    """

    def __init__(self, t, x=None, *, step=None, particle=None, message=None):
        self.t = float(t)
        self.x = x
        self.step = step
        self.particle = particle
        parts = [f"non-finite state at t={self.t:.6g}"]
        if step is not None:
            parts.append(f"step={step}")
        if particle is not None:
            parts.append(f"particle={particle}")
        if x is not None:
            parts.append(f"x={x!r}")
        super().__init__(message or ", ".join(parts))
