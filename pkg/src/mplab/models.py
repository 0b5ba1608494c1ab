"""Signal priors, Gaussian noise, problem instances and separable denoisers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .ensembles import SensingOperator
from .errors import InvalidDimensionError, InvalidInputError, InvalidParameterError

BERNOULLI_GAUSSIAN = "bernoulli_gaussian"
GAUSSIAN = "gaussian"
RADEMACHER = "rademacher"
PRIOR_KINDS = (BERNOULLI_GAUSSIAN, GAUSSIAN, RADEMACHER)

SOFT_THRESHOLD = "soft_threshold"
BG_MMSE = "bg_mmse"
LINEAR = "linear"
IDENTITY = "identity"
DENOISER_KINDS = (SOFT_THRESHOLD, BG_MMSE, LINEAR, IDENTITY)


@dataclass(frozen=True)
class Prior:
    """I.i.d. signal prior.

    ``bernoulli_gaussian``: zero with probability ``1 - rho``, otherwise
    ``N(0, variance)``.  ``gaussian`` ignores ``rho``.  ``rademacher`` is
    uniform on ``{-1, +1}``.
    """

    kind: str
    rho: float = 1.0
    variance: float = 1.0

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise InvalidParameterError(f"unknown prior kind {self.kind!r}")
        if self.kind == BERNOULLI_GAUSSIAN and not 0 < self.rho <= 1:
            raise InvalidParameterError("rho must lie in (0, 1]")
        if not self.variance > 0:
            raise InvalidParameterError("variance must be positive")

    @classmethod
    def bernoulli_gaussian(cls, rho, variance=1.0):
        return cls(BERNOULLI_GAUSSIAN, rho, variance)

    @classmethod
    def gaussian(cls, variance=1.0):
        return cls(GAUSSIAN, 1.0, variance)

    @classmethod
    def rademacher(cls):
        return cls(RADEMACHER)

    @property
    def second_moment(self) -> float:
        if self.kind == BERNOULLI_GAUSSIAN:
            return self.rho * self.variance
        if self.kind == GAUSSIAN:
            return self.variance
        return 1.0

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == RADEMACHER:
            return rng.choice(np.array([-1.0, 1.0]), size=n)
        x = math.sqrt(self.variance) * rng.standard_normal(n)
        if self.kind == BERNOULLI_GAUSSIAN:
            x *= rng.random(n) < self.rho
        return x

    def mixture(self):
        """``(weights, variances, atoms)``: a Gaussian/point-mass mixture view.

        Each component ``i`` is ``N(atoms[i], variances[i])`` with probability
        ``weights[i]``; point masses have variance 0.
        """
        if self.kind == BERNOULLI_GAUSSIAN:
            comps = [(1.0 - self.rho, 0.0, 0.0), (self.rho, self.variance, 0.0)]
            return [c for c in comps if c[0] > 0]
        if self.kind == GAUSSIAN:
            return [(1.0, self.variance, 0.0)]
        return [(0.5, 0.0, -1.0), (0.5, 0.0, 1.0)]

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == BERNOULLI_GAUSSIAN:
            out.update(rho=self.rho, variance=self.variance)
        elif self.kind == GAUSSIAN:
            out["variance"] = self.variance
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Prior":
        return cls(data["kind"], float(data.get("rho", 1.0)),
                   float(data.get("variance", 1.0)))


@dataclass(frozen=True)
class NoiseModel:
    variance: float = 0.0

    def __post_init__(self):
        if not self.variance >= 0:
            raise InvalidParameterError("noise variance must be >= 0")

    def to_dict(self) -> dict:
        return {"variance": self.variance}

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseModel":
        return cls(float(data["variance"]))


@dataclass(frozen=True, eq=False)
class Instance:
    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    op: SensingOperator
    prior: Prior
    noise: NoiseModel
    seed: int


def sample_instance(prior: Prior, noise: NoiseModel, op: SensingOperator,
                    seed) -> Instance:
    """Draw ``x`` from the prior and ``w ~ N(0, sigma^2 I)``; ``y = A x + w``."""
    rng = np.random.default_rng(seed)
    x = prior.sample(rng, op.n)
    w = math.sqrt(noise.variance) * rng.standard_normal(op.m)
    y = op.matvec(x) + w
    for arr in (x, w, y):
        arr.setflags(write=False)
    return Instance(x, w, y, op, prior, noise, int(seed))


@dataclass(frozen=True)
class Denoiser:
    """Separable denoiser returning values and element-wise derivatives.

    ``soft_threshold`` uses threshold ``lam`` (multiplied by ``tau`` when
    ``relative`` is set); ``bg_mmse`` is the posterior mean under a
    Bernoulli-Gaussian prior ``(rho, variance)`` given the effective noise
    variance supplied per call; ``linear`` multiplies by ``c``.
    """

    kind: str
    lam: float = 0.0
    rho: float = 1.0
    variance: float = 1.0
    c: float = 1.0
    relative: bool = False

    def __post_init__(self):
        if self.kind not in DENOISER_KINDS:
            raise InvalidParameterError(f"unknown denoiser kind {self.kind!r}")
        if self.kind == SOFT_THRESHOLD and not self.lam >= 0:
            raise InvalidParameterError("threshold must be >= 0")
        if self.kind == BG_MMSE:
            if not 0 < self.rho <= 1 or not self.variance > 0:
                raise InvalidParameterError("invalid Bernoulli-Gaussian prior")

    @classmethod
    def soft_threshold(cls, lam, relative=False):
        return cls(SOFT_THRESHOLD, lam=lam, relative=relative)

    @classmethod
    def bg_mmse(cls, rho, variance=1.0):
        return cls(BG_MMSE, rho=rho, variance=variance)

    @classmethod
    def mmse_for(cls, prior: Prior) -> "Denoiser":
        if prior.kind == RADEMACHER:
            raise InvalidParameterError("no MMSE denoiser for Rademacher priors")
        return cls.bg_mmse(prior.rho, prior.variance)

    @classmethod
    def linear(cls, c):
        return cls(LINEAR, c=c)

    @classmethod
    def identity(cls):
        return cls(IDENTITY)

    @property
    def needs_variance(self) -> bool:
        return self.kind == BG_MMSE or (self.kind == SOFT_THRESHOLD and self.relative)

    def __call__(self, r, tau_sq=None):
        return denoise(self, r, tau_sq)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == SOFT_THRESHOLD:
            out.update(lam=self.lam, relative=self.relative)
        elif self.kind == BG_MMSE:
            out.update(rho=self.rho, variance=self.variance)
        elif self.kind == LINEAR:
            out["c"] = self.c
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Denoiser":
        data = dict(data)
        return cls(data.pop("kind"), **data)


def _soft_threshold(r, lam):
    mag = np.abs(r) - lam
    value = np.sign(r) * np.maximum(mag, 0.0)
    # derivative at the kink |r| = lam taken as 0
    return value, (mag > 0).astype(float)


def _bg_mmse(r, rho, var, tau_sq):
    total = var + tau_sq
    gain = var / total
    if rho >= 1.0:
        return gain * r, np.full_like(r, gain)
    # log-likelihood ratio of the active component versus the spike
    llr = (math.log(rho / (1.0 - rho)) + 0.5 * math.log(tau_sq / total)
           + 0.5 * r * r * (gain / tau_sq))
    pi = expit(llr)
    value = pi * gain * r
    deriv = gain * pi * (1.0 + (1.0 - pi) * r * r * gain / tau_sq)
    return value, deriv


def denoise(d: Denoiser, r, tau_sq=None):
    """Apply ``d`` element-wise; returns ``(values, derivatives)``."""
    r = np.asarray(r, dtype=float)
    if d.needs_variance:
        if tau_sq is None or not tau_sq > 0:
            raise InvalidParameterError(
                f"{d.kind} needs a positive effective variance, got {tau_sq}")
    if d.kind == SOFT_THRESHOLD:
        lam = d.lam * math.sqrt(tau_sq) if d.relative else d.lam
        return _soft_threshold(r, lam)
    if d.kind == BG_MMSE:
        return _bg_mmse(r, d.rho, d.variance, float(tau_sq))
    if d.kind == LINEAR:
        return d.c * r, np.full_like(r, d.c)
    return r.copy(), np.ones_like(r)


def onsager_coefficient(derivatives) -> float:
    """Arithmetic mean of the derivative vector."""
    derivatives = np.asarray(derivatives, dtype=float)
    if derivatives.size == 0:
        raise InvalidInputError("empty derivative vector")
    return float(np.mean(derivatives))


def check_dimensions(inst: Instance):
    op = inst.op
    if inst.x.shape != (op.n,) or inst.y.shape != (op.m,) or inst.w.shape != (op.m,):
        raise InvalidDimensionError("instance does not match its operator")
