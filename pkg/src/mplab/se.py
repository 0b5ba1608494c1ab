"""Scalar state evolution for AMP and (memory-one) OAMP."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidParameterError, NumericalFailureError
from .models import SOFT_THRESHOLD, Denoiser, NoiseModel, Prior

DEFAULT_NODES = 61
_TAIL = 12.0
# variance floor standing in for sigma^2 = 0 in the linear-module transfer
_VARIANCE_FLOOR = 1e-12


@lru_cache(maxsize=8)
def _legendre(n: int):
    return np.polynomial.legendre.leggauss(n)


def _breakpoints(fine_scale: float, kinks=()) -> np.ndarray:
    pts = {0.0, _TAIL, -_TAIL}
    pts.update(float(k) for k in range(1, int(_TAIL)))
    s = fine_scale / 4.0
    while 0 < s < _TAIL:
        pts.update((s, -s))
        s *= 2.0
    pts.update(float(k) for k in kinks if abs(k) < _TAIL)
    return np.array(sorted(pts))


def normal_expectation(fn, n_nodes: int = DEFAULT_NODES, fine_scale: float = 1.0,
                       kinks=()):
    """``E[fn(U)]`` for ``U ~ N(0, 1)`` by composite Gauss-Legendre.

    The line ``[-12, 12]`` is split at the integers, at a geometric ladder
    reaching down to ``fine_scale / 4`` around the origin and at ``kinks``;
    each panel gets ``n_nodes`` points.  ``fn`` maps an array of abscissae to
    a tuple of arrays; the tuple of expectations is returned.
    """
    x, w = _legendre(n_nodes)
    bp = _breakpoints(fine_scale, kinks)
    a, b = bp[:-1, None], bp[1:, None]
    u = (0.5 * (b - a) * x + 0.5 * (a + b)).ravel()
    wt = (0.5 * (b - a) * w).ravel() * np.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)
    return tuple(float(np.dot(wt, f)) for f in fn(u))


def error_statistics(prior: Prior, denoiser: Denoiser, tau_sq: float,
                     n_nodes: int = DEFAULT_NODES):
    """``(mse, mean derivative)`` of ``denoiser(X + tau Z)`` with ``X ~ prior``.

    Point-mass components integrate over ``Z``.  Gaussian components
    integrate over the observation ``r``, using ``X | r ~ N(g r, g tau^2)``
    with ``g = v / (v + tau^2)`` so that only a one-dimensional integral is
    needed.
    """
    if not tau_sq > 0 or not math.isfinite(tau_sq):
        raise NumericalFailureError(f"effective variance {tau_sq} unusable")
    tau = math.sqrt(tau_sq)
    mse = deriv = 0.0
    for weight, var, atom in prior.mixture():
        if var == 0.0:
            kinks = ()
            if denoiser.kind == SOFT_THRESHOLD:
                lam = denoiser.lam * (tau if denoiser.relative else 1.0)
                kinks = ((lam - atom) / tau, (-lam - atom) / tau)

            def fn(z, atom=atom):
                v, d = denoiser(atom + tau * z, tau_sq)
                return (v - atom) ** 2, d
            e_sq, e_d = normal_expectation(fn, n_nodes, 1.0, kinks)
        else:
            s = math.sqrt(var + tau_sq)
            g = var / (var + tau_sq)
            kinks = ()
            if denoiser.kind == SOFT_THRESHOLD:
                lam = denoiser.lam * (tau if denoiser.relative else 1.0)
                kinks = (lam / s, -lam / s)

            def fn(u, s=s, g=g):
                r = s * u
                v, d = denoiser(r, tau_sq)
                return (v - g * r) ** 2, d
            e_sq, e_d = normal_expectation(fn, n_nodes, tau / s, kinks)
            e_sq += g * tau_sq
        mse += weight * e_sq
        deriv += weight * e_d
    if not (math.isfinite(mse) and math.isfinite(deriv)):
        raise NumericalFailureError("non-finite state-evolution expectation")
    return mse, deriv


@dataclass
class SECurve:
    """Per-iteration effective variances and predicted MSE.

    ``mse[t]`` is the error after the denoiser of iteration ``t`` (the same
    quantity a :class:`TraceRecord` reports).
    """

    tau_sq: list
    mse: list
    inputs: dict
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.mse)

    def to_csv(self) -> str:
        lines = ["t,tau_sq,mse"]
        for t, (ts, m) in enumerate(zip(self.tau_sq, self.mse)):
            lines.append(f"{t},{ts:.17g},{m:.17g}")
        return "\n".join(lines) + "\n"


def _schedule(denoisers, T):
    if isinstance(denoisers, Denoiser):
        return [denoisers] * T
    denoisers = list(denoisers)
    if len(denoisers) == 1:
        return denoisers * T
    if len(denoisers) < T:
        raise InvalidParameterError(f"need {T} denoisers, got {len(denoisers)}")
    return denoisers


def amp_se(prior: Prior, noise: NoiseModel, delta: float, denoisers, T: int,
           n_nodes: int = DEFAULT_NODES) -> SECurve:
    """Standard AMP state evolution.

    ``tau_0^2 = sigma^2 + E[X^2]/delta`` and
    ``tau_{t+1}^2 = sigma^2 + E[(theta_t(X + tau_t Z) - X)^2] / delta``.
    """
    if not delta > 0:
        raise InvalidParameterError("delta must be positive")
    if T < 1:
        raise InvalidParameterError("T must be >= 1")
    sched = _schedule(denoisers, T)
    tau_sq = noise.variance + prior.second_moment / delta
    taus, mses, derivs = [], [], []
    for t in range(T):
        mse, d = error_statistics(prior, sched[t], tau_sq, n_nodes)
        taus.append(tau_sq)
        mses.append(mse)
        derivs.append(d)
        tau_sq = noise.variance + mse / delta
    inputs = {"algorithm": "amp", "prior": prior.to_dict(),
              "noise": noise.to_dict(), "delta": delta, "T": T,
              "denoisers": [d.to_dict() for d in sched[:T]]}
    return SECurve(taus, mses, inputs, {"xi": derivs})


def spectrum_eta(spectrum):
    """Normalise a spectrum description into an eta-transform callable.

    Accepts a callable, an array of eigenvalues of ``A^T A``, or anything
    exposing ``lam`` (a :class:`SensingOperator`).
    """
    if callable(spectrum):
        return spectrum
    lam = np.asarray(getattr(spectrum, "lam", spectrum), dtype=float)

    def eta(x):
        return float(np.mean(1.0 / (1.0 + x * lam)))
    return eta


def oamp_se(prior: Prior, noise: NoiseModel, spectrum, delta: float, T: int,
            denoisers=None, n_nodes: int = DEFAULT_NODES) -> SECurve:
    """State evolution of memory-one OAMP with an LMMSE linear module.

    The linear module maps the input error variance ``v`` to the extrinsic
    variance ``tau^2 = v c / (1 - c)`` with ``c = eta(v / sigma^2)``; the
    denoiser maps ``tau^2`` back to ``v = (mse - d^2 tau^2) / (1 - d)^2``
    where ``d`` is the mean derivative.
    """
    if T < 1:
        raise InvalidParameterError("T must be >= 1")
    eta = spectrum_eta(spectrum)
    sched = _schedule(denoisers or Denoiser.mmse_for(prior), T)
    sigma2 = max(noise.variance, _VARIANCE_FLOOR)
    v = prior.second_moment
    taus, mses, vs, cs, ds = [], [], [], [], []
    for t in range(T):
        c = eta(v / sigma2)
        if not 0 <= c < 1:
            raise NumericalFailureError(f"linear-module divergence {c} not in [0,1)")
        tau_sq = v * c / (1.0 - c) if c > 0 else _VARIANCE_FLOOR
        mse, d = error_statistics(prior, sched[t], tau_sq, n_nodes)
        taus.append(tau_sq)
        mses.append(mse)
        vs.append(v)
        cs.append(c)
        ds.append(d)
        if d >= 1:
            raise NumericalFailureError(f"denoiser divergence {d} >= 1")
        v = max((mse - d * d * tau_sq) / (1.0 - d) ** 2, _VARIANCE_FLOOR)
    inputs = {"algorithm": "oamp", "prior": prior.to_dict(),
              "noise": noise.to_dict(), "delta": delta, "T": T,
              "denoisers": [d.to_dict() for d in sched[:T]]}
    return SECurve(taus, mses, inputs, {"v": vs, "c": cs, "xi": ds})
