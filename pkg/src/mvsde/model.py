"""Coefficient interface and built-in McKean-Vlasov models.

All evaluators are vectorized over particles: ``x`` has shape ``(P, d)`` and
outputs carry a leading ``P`` axis. Shapes:

    drift             (P, d)
    diffusion         (P, d, m)
    grad_x_drift      (P, d, d)         [a, b] = d b_a / d x_b
    grad_x_diffusion  (P, d, d, m)      [a, b, l] = d sigma_{a l} / d x_b
    lions_drift       (P, Q, d, d)      at atoms v of shape (Q, d)
    lions_diffusion   (P, Q, d, d, m)

The single-point helpers ``eval_*`` accept ``x`` of shape ``(d,)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import InvalidInputError
from .measure import EmpiricalMeasure, wasserstein2


class Regularity(enum.Enum):
    GLOBALLY_LIPSCHITZ = "globally_lipschitz"
    ONE_SIDED_LIPSCHITZ = "one_sided_lipschitz"


class Model:
    """Base class for coefficient sets.

    Subclasses set ``dim_state``, ``dim_noise``, ``regularity`` and implement
    the six evaluators. ``first_moment_interaction = True`` promises that the
    Lions derivatives do not depend on the evaluation atom ``v``; the
    derivative propagators then collapse the ``1/N`` sums into running means.
    """

    dim_state: int = 1
    dim_noise: int = 1
    regularity: Regularity = Regularity.GLOBALLY_LIPSCHITZ
    first_moment_interaction: bool = False
    name: str = "model"

    def drift(self, t, x, mu):
        raise NotImplementedError

    def diffusion(self, t, x, mu):
        raise NotImplementedError

    def grad_x_drift(self, t, x, mu):
        raise NotImplementedError

    def grad_x_diffusion(self, t, x, mu):
        raise NotImplementedError

    def lions_drift(self, t, x, mu, v):
        raise NotImplementedError

    def lions_diffusion(self, t, x, mu, v):
        raise NotImplementedError

    def params(self) -> dict:
        return {}

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params().items())
        return f"{type(self).__name__}({args})"


class FunctionModel(Model):
    """Model assembled from user callables with the vectorized signatures above."""

    def __init__(
        self,
        dim_state: int,
        dim_noise: int,
        regularity: Regularity,
        drift: Callable,
        diffusion: Callable,
        grad_x_drift: Callable,
        grad_x_diffusion: Callable,
        lions_drift: Callable,
        lions_diffusion: Callable,
        first_moment_interaction: bool = False,
        name: str = "custom",
    ):
        if dim_state < 1 or dim_noise < 1:
            raise InvalidInputError("dimensions must be positive")
        if not isinstance(regularity, Regularity):
            raise InvalidInputError("regularity must be declared as a Regularity member")
        self.dim_state = dim_state
        self.dim_noise = dim_noise
        self.regularity = regularity
        self.first_moment_interaction = first_moment_interaction
        self.name = name
        self.drift = drift
        self.diffusion = diffusion
        self.grad_x_drift = grad_x_drift
        self.grad_x_diffusion = grad_x_diffusion
        self.lions_drift = lions_drift
        self.lions_diffusion = lions_diffusion


class _ScalarMeanFieldModel(Model):
    """d = m = 1 models whose measure dependence is ``kappa * mean(mu)``."""

    first_moment_interaction = True
    kappa: float = 0.0

    def lions_drift(self, t, x, mu, v):
        v = np.asarray(v, dtype=float).reshape(-1, 1)
        return np.full((x.shape[0], v.shape[0], 1, 1), self.kappa)

    def lions_diffusion(self, t, x, mu, v):
        v = np.asarray(v, dtype=float).reshape(-1, 1)
        return np.zeros((x.shape[0], v.shape[0], 1, 1, 1))


@dataclass(repr=False)
class MeanFieldOU(_ScalarMeanFieldModel):
    """``b = -a x + kappa mean(mu)``, ``sigma = sigma0``."""

    a: float = 1.0
    kappa: float = 0.5
    sigma0: float = 0.3
    name = "mean_field_ou"
    regularity = Regularity.GLOBALLY_LIPSCHITZ

    def drift(self, t, x, mu):
        return -self.a * x + self.kappa * mu.mean

    def diffusion(self, t, x, mu):
        return np.full((x.shape[0], 1, 1), self.sigma0)

    def grad_x_drift(self, t, x, mu):
        return np.full((x.shape[0], 1, 1), -self.a)

    def grad_x_diffusion(self, t, x, mu):
        return np.zeros((x.shape[0], 1, 1, 1))

    def params(self):
        return {"a": self.a, "kappa": self.kappa, "sigma0": self.sigma0}


@dataclass(repr=False)
class DoubleWell(_ScalarMeanFieldModel):
    """``b = x - x^3 + kappa (mean(mu) - x)``, ``sigma = sigma0``.

    Superlinear drift, one-sided Lipschitz with constant 1.
    """

    kappa: float = 0.5
    sigma0: float = 0.3
    name = "double_well"
    regularity = Regularity.ONE_SIDED_LIPSCHITZ

    def drift(self, t, x, mu):
        return x - x**3 + self.kappa * (mu.mean - x)

    def diffusion(self, t, x, mu):
        return np.full((x.shape[0], 1, 1), self.sigma0)

    def grad_x_drift(self, t, x, mu):
        return (1.0 - 3.0 * x**2 - self.kappa)[:, :, None]

    def grad_x_diffusion(self, t, x, mu):
        return np.zeros((x.shape[0], 1, 1, 1))

    def params(self):
        return {"kappa": self.kappa, "sigma0": self.sigma0}


@dataclass(repr=False)
class ScalarStateDiffusion(_ScalarMeanFieldModel):
    """Mean-field OU drift with ``sigma = sigma1 + sigma2 tanh(x)``."""

    a: float = 1.0
    kappa: float = 0.5
    sigma1: float = 0.2
    sigma2: float = 0.1
    name = "scalar_state_diffusion"
    regularity = Regularity.GLOBALLY_LIPSCHITZ

    def drift(self, t, x, mu):
        return -self.a * x + self.kappa * mu.mean

    def diffusion(self, t, x, mu):
        return (self.sigma1 + self.sigma2 * np.tanh(x))[:, :, None]

    def grad_x_drift(self, t, x, mu):
        return np.full((x.shape[0], 1, 1), -self.a)

    def grad_x_diffusion(self, t, x, mu):
        return (self.sigma2 * (1.0 - np.tanh(x) ** 2))[:, :, None, None]

    def params(self):
        return {"a": self.a, "kappa": self.kappa, "sigma1": self.sigma1, "sigma2": self.sigma2}


BUILTIN_MODELS = {
    "mean_field_ou": MeanFieldOU,
    "double_well": DoubleWell,
    "scalar_state_diffusion": ScalarStateDiffusion,
}

_ALIASES = {
    "meanfieldou": "mean_field_ou",
    "doublewell": "double_well",
    "scalarstatediffusion": "scalar_state_diffusion",
}


def make_model(name: str, params: Optional[dict] = None) -> Model:
    """Instantiate a built-in model by registry name (CamelCase accepted)."""
    key = _ALIASES.get(name.replace("_", "").replace("-", "").lower(), name)
    if key not in BUILTIN_MODELS:
        raise InvalidInputError(f"unknown model {name!r}; available: {', '.join(sorted(BUILTIN_MODELS))}")
    cls = BUILTIN_MODELS[key]
    params = dict(params or {})
    allowed = set(cls.__dataclass_fields__)
    unknown = set(params) - allowed
    if unknown:
        raise InvalidInputError(f"unknown parameter(s) {sorted(unknown)} for {key}; allowed: {sorted(allowed)}")
    for k, v in params.items():
        if not isinstance(v, (int, float)) or not np.isfinite(v):
            raise InvalidInputError(f"model parameter {k!r} must be a finite number")
    return cls(**{k: float(v) for k, v in params.items()})


# single-point operations -----------------------------------------------------


def _point(model: Model, x, mu: EmpiricalMeasure) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != model.dim_state:
        raise InvalidInputError(f"x has length {x.shape[0]}, model state dimension is {model.dim_state}")
    if mu.dim != model.dim_state:
        raise InvalidInputError(f"measure dimension {mu.dim} != state dimension {model.dim_state}")
    return x[None, :]


def eval_drift(model: Model, t: float, x, mu: EmpiricalMeasure) -> np.ndarray:
    return model.drift(t, _point(model, x, mu), mu)[0]


def eval_diffusion(model: Model, t: float, x, mu: EmpiricalMeasure) -> np.ndarray:
    return model.diffusion(t, _point(model, x, mu), mu)[0]


def eval_drift_gradients(model: Model, t: float, x, mu: EmpiricalMeasure, v):
    """``(grad_x b, d_mu b(.)(v))``, each ``(d, d)``."""
    xp = _point(model, x, mu)
    vp = _point(model, v, mu)
    return model.grad_x_drift(t, xp, mu)[0], model.lions_drift(t, xp, mu, vp)[0, 0]


def eval_diffusion_gradients(model: Model, t: float, x, mu: EmpiricalMeasure, v):
    """``(grad_x sigma, d_mu sigma(.)(v))``, each ``(d, d, m)``."""
    xp = _point(model, x, mu)
    vp = _point(model, v, mu)
    return model.grad_x_diffusion(t, xp, mu)[0], model.lions_diffusion(t, xp, mu, vp)[0, 0]


# statistical regularity probes -------------------------------------------------


def probe_lipschitz(model: Model, rng: np.random.Generator, *, probes: int = 1000, radius: float = 10.0,
                    atoms: int = 8, t: float = 0.0) -> float:
    """Largest sampled quotient ``|b(x,mu) - b(x',mu')| / (|x - x'| + W2(mu, mu'))``."""
    d = model.dim_state
    worst = 0.0
    for _ in range(probes):
        x, xp = rng.uniform(-radius, radius, (2, 1, d))
        mu = EmpiricalMeasure(rng.uniform(-radius, radius, (atoms, d)))
        nu = EmpiricalMeasure(rng.uniform(-radius, radius, (atoms, d)))
        num = np.linalg.norm(model.drift(t, x, mu)[0] - model.drift(t, xp, nu)[0])
        den = np.linalg.norm(x - xp) + wasserstein2(mu, nu)
        if den > 0:
            worst = max(worst, num / den)
    return worst


def probe_one_sided(model: Model, rng: np.random.Generator, *, probes: int = 10_000, radius: float = 10.0,
                    atoms: int = 8, t: float = 0.0) -> float:
    """Largest sampled ``<x - x', b(x,mu) - b(x',mu)> / |x - x'|^2`` at a shared measure."""
    d = model.dim_state
    x = rng.uniform(-radius, radius, (probes, d))
    xp = rng.uniform(-radius, radius, (probes, d))
    mu = EmpiricalMeasure(rng.uniform(-radius, radius, (atoms, d)))
    diff = x - xp
    inner = np.sum(diff * (model.drift(t, x, mu) - model.drift(t, xp, mu)), axis=1)
    sq = np.sum(diff**2, axis=1)
    keep = sq > 0
    return float(np.max(inner[keep] / sq[keep]))
