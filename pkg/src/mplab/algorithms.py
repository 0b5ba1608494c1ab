"""AMP and memory-one OAMP recovery loops with per-iteration traces."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError
from .models import Denoiser, Instance, check_dimensions

OK = "ok"
DIVERGED = "diverged"
REGULARIZED = "regularized"

# floor on the per-mode LMMSE denominator sigma^2 + v lambda
FILTER_FLOOR = 1e-12
# keeps 1 - <divergence> away from zero in the extrinsic normalisation
_DIVERGENCE_CAP = 1.0 - 1e-9


@dataclass
class TraceRecord:
    """One iteration of a run.

    ``mse`` is ``N^-1 ||x_{t+1} - x||^2``, the error after the denoiser of
    iteration ``t``; ``residual_norm`` is ``M^-1 ||z_t||^2``.
    """

    t: int
    mse: float
    xi: float
    residual_norm: float
    status: str = OK
    extra: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    max_iterations: int
    denoisers: object
    divergence_threshold: float | None = None
    onsager: bool = True
    keep_vectors: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InvalidParameterError("max_iterations must be >= 1")
        if self.divergence_threshold is not None and not self.divergence_threshold > 0:
            raise InvalidParameterError("divergence threshold must be positive")

    def denoiser(self, t: int) -> Denoiser:
        if isinstance(self.denoisers, Denoiser):
            return self.denoisers
        sched = list(self.denoisers)
        return sched[t] if len(sched) > 1 else sched[0]

    def threshold(self, inst: Instance) -> float:
        if self.divergence_threshold is not None:
            return self.divergence_threshold
        return 10.0 * inst.prior.second_moment

    def to_dict(self) -> dict:
        if isinstance(self.denoisers, Denoiser):
            dens = self.denoisers.to_dict()
        else:
            dens = [d.to_dict() for d in self.denoisers]
        return {"max_iterations": self.max_iterations, "denoisers": dens,
                "divergence_threshold": self.divergence_threshold,
                "onsager": self.onsager}


@dataclass
class RunResult:
    records: list
    estimate: np.ndarray
    diverged: bool = False
    vectors: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def mse(self) -> np.ndarray:
        return np.array([r.mse for r in self.records])


def _finite(*values) -> bool:
    return all(np.all(np.isfinite(v)) for v in values)


def _blown_up(mse, threshold) -> bool:
    return not math.isfinite(mse) or mse > threshold


def run_amp(inst: Instance, cfg: RunConfig) -> RunResult:
    """AMP with ``x_0 = 0``, ``z_{-1} = 0``.

    ``z_t = y - A x_t + (xi_{t-1}/delta) z_{t-1}``,
    ``x_{t+1} = theta_t(x_t + A^T z_t)`` and ``xi_t = <theta_t'(.)>``.  The
    denoiser's effective variance is ``M^-1 ||z_t||^2``.  Setting
    ``cfg.onsager`` to False drops the memory term.
    """
    check_dimensions(inst)
    op = inst.op
    delta = op.m / op.n
    threshold = cfg.threshold(inst)
    x = np.zeros(op.n)
    z_prev = np.zeros(op.m)
    xi_prev = 0.0
    records, vecs = [], {"h": [], "q": [], "xi": [], "tau_sq": []}
    diverged = False
    for t in range(cfg.max_iterations):
        z = inst.y - op.matvec(x)
        if cfg.onsager:
            z = z + (xi_prev / delta) * z_prev
        tau_sq = float(z @ z) / op.m
        r = x + op.rmatvec(z)
        den = cfg.denoiser(t)
        if not _finite(tau_sq, r) or (den.needs_variance and tau_sq <= 0):
            records.append(TraceRecord(t, math.inf, math.nan, tau_sq, DIVERGED))
            diverged = True
            break
        x_new, deriv = den(r, tau_sq)
        xi = float(np.mean(deriv))
        err = x_new - inst.x
        mse = float(err @ err) / op.n
        if cfg.keep_vectors:
            vecs["h"].append(r - inst.x)
            vecs["q"].append(err)
            vecs["xi"].append(xi)
            vecs["tau_sq"].append(tau_sq)
        if _blown_up(mse, threshold) or not _finite(x_new, xi):
            records.append(TraceRecord(t, mse if math.isfinite(mse) else math.inf,
                                       xi, tau_sq, DIVERGED, {"tau_sq": tau_sq}))
            diverged = True
            break
        records.append(TraceRecord(t, mse, xi, tau_sq, OK, {"tau_sq": tau_sq}))
        x, z_prev, xi_prev = x_new, z, xi
    return RunResult(records, x, diverged, vecs if cfg.keep_vectors else {})


def estimate_input_variance(op, resid_sq: float, noise_var: float) -> float:
    """Input-error variance from ``M^-1 ||y - A x_in||^2``.

    For an isotropic input error of variance ``v`` the residual energy is
    ``M sigma^2 + v Tr(Lambda)``.
    """
    v = (resid_sq - op.m * noise_var) / float(np.sum(op.lam))
    return max(v, FILTER_FLOOR)


def lmmse_coefficients(lam, v: float, noise_var: float):
    """Per-mode LMMSE gain ``v / (sigma^2 + v lambda)`` and its floor flag."""
    denom = noise_var + v * lam
    floored = bool(np.any(denom < FILTER_FLOOR))
    return v / np.maximum(denom, FILTER_FLOOR), floored


def run_oamp(inst: Instance, cfg: RunConfig) -> RunResult:
    """Memory-one OAMP (VAMP-type) with an LMMSE filter in SVD coordinates.

    Linear module: ``x_post = x_in + V D Sigma^T U^T (y - A x_in)`` with
    ``D = v / (sigma^2 + v Lambda)``; the extrinsic estimate removes the
    divergence ``c = <sigma^2 / (sigma^2 + v lambda)>``.  Nonlinear module:
    denoise with ``tau^2 = v c / (1 - c)`` and remove the mean derivative
    ``d`` before feeding back.  ``v`` is re-estimated from the residual.
    """
    check_dimensions(inst)
    op = inst.op
    sigma2 = inst.noise.variance
    threshold = cfg.threshold(inst)
    x_in = np.zeros(op.n)
    records = []
    vecs = {"h": [], "q": [], "b_in": [], "c": [], "d": [], "v": [],
            "tau_sq": []}
    diverged = False
    warned = False
    for t in range(cfg.max_iterations):
        resid = inst.y - op.matvec(x_in)
        resid_sq = float(resid @ resid)
        v = estimate_input_variance(op, resid_sq, sigma2)
        gain, floored = lmmse_coefficients(op.lam, v, sigma2)
        status = OK
        if floored:
            status = REGULARIZED
            if not warned:
                warnings.warn("OAMP filter denominator floored", RuntimeWarning)
                warned = True
        c = float(np.mean(1.0 - gain * op.lam))
        c = min(c, _DIVERGENCE_CAP)
        x_post = x_in + op.v @ (gain * op.sigma_t(op.u.T @ resid))
        x_ext = (x_post - c * x_in) / (1.0 - c)
        tau_sq = v * c / (1.0 - c)
        den = cfg.denoiser(t)
        if not _finite(x_ext, tau_sq) or (den.needs_variance and not tau_sq > 0):
            records.append(TraceRecord(t, math.inf, math.nan, resid_sq / op.m,
                                       DIVERGED))
            diverged = True
            break
        x_hat, deriv = den(x_ext, tau_sq)
        d = min(float(np.mean(deriv)), _DIVERGENCE_CAP)
        err = x_hat - inst.x
        mse = float(err @ err) / op.n
        extra = {"tau_sq": tau_sq, "v": v, "c": c}
        if cfg.keep_vectors:
            vecs["b_in"].append(x_in - inst.x)
            vecs["h"].append(x_ext - inst.x)
            vecs["q"].append(err)
            vecs["c"].append(c)
            vecs["d"].append(d)
            vecs["v"].append(v)
            vecs["tau_sq"].append(tau_sq)
        if _blown_up(mse, threshold) or not _finite(x_hat):
            records.append(TraceRecord(t, mse if math.isfinite(mse) else math.inf,
                                       d, resid_sq / op.m, DIVERGED, extra))
            diverged = True
            break
        records.append(TraceRecord(t, mse, d, resid_sq / op.m, status, extra))
        x_in = (x_hat - d * x_ext) / (1.0 - d)
    return RunResult(records, x_in if not records else x_hat, diverged,
                     vecs if cfg.keep_vectors else {})


def trace_to_csv(result: RunResult) -> str:
    """CSV with columns ``t, mse, xi, residual_norm, status``."""
    lines = ["t,mse,xi,residual_norm,status"]
    for r in result.records:
        lines.append(f"{r.t},{r.mse:.17g},{r.xi:.17g},{r.residual_norm:.17g},"
                     f"{r.status}")
    return "\n".join(lines) + "\n"
