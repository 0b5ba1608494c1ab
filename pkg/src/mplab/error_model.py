"""Long-memory error recursion under an orthogonally invariant operator.

One step of the general model, with ``<.>`` the arithmetic mean over N::

    q~_t = q_t - sum_{t'<t} <d_{t'} psi_{t-1}> h_{t'}       b_t = V^T q~_t
    m_t  = phi_t(b_0, ..., b_t, w~)
    m~_t = m_t - sum_{t'<=t} <d_{t'} phi_t> b_{t'}           h_t = V m~_t
    q_{t+1} = psi_t(h_0, ..., h_t, x)

started from ``q_0 = q~_0 = -x`` with ``w~ = U^T w``.  AMP's own error
recursion is simulated by :func:`step_amp`, which differs only in using
``h_t = V m_t``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .algorithms import (
    _DIVERGENCE_CAP,
    estimate_input_variance,
    lmmse_coefficients,
)
from .ensembles import SensingOperator, build_operator, empirical_moments
from .errors import InvalidParameterError, InvalidStateError, SimulationDivergedError
from .models import Denoiser, Instance, NoiseModel, Prior, check_dimensions, sample_instance
from .onsager import g_table, onsager_weights

DEGENERATE_TOL = 1e-10


class HistoryFunction:
    """Separable map of the iterate history plus one side vector.

    Subclasses implement ``__call__(t, inputs, side)`` and return
    ``(value, partials)``; ``partials[j]`` is the element-wise derivative with
    respect to ``inputs[j]`` (an array, a scalar, or None for zero).
    """

    memory = None

    def __call__(self, t, inputs, side):
        raise NotImplementedError


class ElementwiseFunction(HistoryFunction):
    """Wrap a plain callable ``fn(t, inputs, side) -> (value, partials)``."""

    def __init__(self, fn, memory=None):
        self.fn = fn
        self.memory = memory

    def __call__(self, t, inputs, side):
        return self.fn(t, inputs, side)


class ZeroFunction(HistoryFunction):
    memory = 0

    def __call__(self, t, inputs, side):
        return np.zeros_like(inputs[-1]), [None] * len(inputs)


def partial_means(partials, count: int) -> list:
    """Arithmetic means of the partials, padded with zeros to ``count``."""
    partials = list(partials) + [None] * (count - len(partials))
    out = []
    for p in partials[:count]:
        out.append(0.0 if p is None else float(np.mean(p)))
    return out


@dataclass
class ErrorState:
    """Histories of the error recursion before iteration ``t``.

    ``q_tilde`` always holds one more entry than ``b`` once the step that
    produced it has completed: ``q_tilde[t]`` is the extrinsic input of the
    next iteration.
    """

    op: SensingOperator
    x: np.ndarray
    w_rot: np.ndarray
    t: int = 0
    q: list = field(default_factory=list)
    q_tilde: list = field(default_factory=list)
    b: list = field(default_factory=list)
    m: list = field(default_factory=list)
    m_tilde: list = field(default_factory=list)
    h: list = field(default_factory=list)
    phi_means: list = field(default_factory=list)
    psi_means: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.op.n

    def gram(self, name: str) -> np.ndarray:
        cols = getattr(self, name)
        if not cols:
            return np.zeros((0, 0))
        mat = np.column_stack(cols)
        return mat.T @ mat


def initial_state(inst: Instance) -> ErrorState:
    """State at ``t = 0`` with ``q_0 = q~_0 = -x``."""
    check_dimensions(inst)
    x = np.asarray(inst.x, dtype=float)
    q0 = -x
    return ErrorState(inst.op, x, inst.op.u.T @ inst.w, q=[q0], q_tilde=[q0])


def _check(state, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise SimulationDivergedError(
                f"non-finite value at iteration {state.t}", state)


def _onsager_sum(vecs, coeffs, base):
    out = base.copy()
    for c, v in zip(coeffs, vecs):
        if c:
            out -= c * v
    return out


def step_general(state: ErrorState, phi: HistoryFunction,
                 psi: HistoryFunction) -> ErrorState:
    """Advance the general error model by one iteration."""
    t = state.t
    if len(state.q_tilde) != t + 1 or len(state.b) != t:
        raise InvalidStateError("inconsistent history lengths")
    op = state.op
    b_t = op.v.T @ state.q_tilde[t]
    bs = state.b + [b_t]
    m_t, dphi = phi(t, bs, state.w_rot)
    phi_c = partial_means(dphi, t + 1)
    m_tilde = _onsager_sum(bs, phi_c, m_t)
    h_t = op.v @ m_tilde
    hs = state.h + [h_t]
    q_next, dpsi = psi(t, hs, state.x)
    psi_c = partial_means(dpsi, t + 1)
    q_tilde_next = _onsager_sum(hs, psi_c, q_next)
    new = replace(
        state, t=t + 1, b=bs, h=hs,
        m=state.m + [m_t], m_tilde=state.m_tilde + [m_tilde],
        q=state.q + [q_next], q_tilde=state.q_tilde + [q_tilde_next],
        phi_means=state.phi_means + [phi_c], psi_means=state.psi_means + [psi_c],
        extra=dict(state.extra))
    _check(new, m_t, h_t, q_next, q_tilde_next)
    return new


# -- memory-one OAMP ----------------------------------------------------------

class OampFunctions:
    """``phi_t``/``psi_t`` pair reproducing :func:`run_oamp` errors.

    ``phi_t`` is the LMMSE filter acting on the rescaled input error
    ``b_t / (1 - d_{t-1})``; ``psi_t`` denoises ``x + h_t / (1 - c_t)``.  The
    scalars ``v``, ``c``, ``tau^2`` and ``d`` are computed from the data the
    same way the algorithm computes them and shared between the two maps.
    """

    def __init__(self, op: SensingOperator, noise_var: float, denoiser: Denoiser):
        self.op = op
        self.noise_var = noise_var
        self.denoiser = denoiser
        self.scale = 1.0
        self.history = {"v": [], "c": [], "tau_sq": [], "d": []}
        self.phi = ElementwiseFunction(self._phi, memory=1)
        self.psi = ElementwiseFunction(self._psi, memory=1)

    def _phi(self, t, inputs, w_rot):
        op = self.op
        e_in = self.scale * inputs[-1]
        resid = w_rot - op.sigma_apply(e_in)
        v = estimate_input_variance(op, float(resid @ resid), self.noise_var)
        gain, _ = lmmse_coefficients(op.lam, v, self.noise_var)
        keep = 1.0 - gain * op.lam
        c = min(float(np.mean(keep)), _DIVERGENCE_CAP)
        self.c = c
        self.tau_sq = v * c / (1.0 - c)
        for k, val in (("v", v), ("c", c), ("tau_sq", self.tau_sq)):
            self.history[k].append(val)
        m = keep * e_in + gain * op.sigma_t(w_rot)
        return m, [None] * t + [self.scale * keep]

    def _psi(self, t, inputs, x):
        r = x + inputs[-1] / (1.0 - self.c)
        value, deriv = self.denoiser(r, self.tau_sq)
        raw = float(np.mean(deriv))
        d = min(raw, _DIVERGENCE_CAP)
        self.history["d"].append(d)
        self.scale = 1.0 / (1.0 - d)
        partial = deriv / (1.0 - self.c)
        if d != raw:
            # keep the Onsager weight consistent with the capped divergence
            partial = partial * (d / raw)
        return value - x, [None] * t + [partial]


# -- AMP embedding ------------------------------------------------------------

def amp_phi(state: ErrorState, xi_history) -> tuple:
    """AMP's ``phi_t`` evaluated on the current history.

    ``m_t = (I - Lambda) b_t - (xi_{t-1}/delta) b_{t-1} + Sigma^T w~
    + xi_{t-1} ((1 + 1/delta) I - Lambda) m_{t-1} - (xi_{t-1} xi_{t-2}/delta) m_{t-2}``
    with ``b_t = m_t = 0`` for ``t < 0``.  ``state.b`` must already contain
    ``b_t``.  Because the map is linear in the b-history, its element-wise
    partials are diagonal matrix polynomials in ``Lambda``; they are returned
    as ``coeffs[t'] = d m_t / d b_{t'}`` together with the noise coefficient.
    """
    t = len(state.b) - 1
    if t < 0 or len(state.m) != t:
        raise InvalidStateError("amp_phi needs b_0..b_t and m_0..m_{t-1}")
    xi = list(xi_history)
    if len(xi) < t:
        raise InvalidStateError(f"need {t} xi values, have {len(xi)}")
    op = state.op
    lam = op.lam
    delta = op.m / op.n
    amp = state.extra.setdefault("amp_coeffs", [])
    if len(amp) != t:
        raise InvalidStateError("coefficient history out of sync")
    xi1 = xi[t - 1] if t >= 1 else 0.0
    xi2 = xi[t - 2] if t >= 2 else 0.0
    carry = xi1 * ((1.0 + 1.0 / delta) - lam)
    sw = op.sigma_t(state.w_rot)

    m_t = (1.0 - lam) * state.b[t] + sw
    if t >= 1:
        m_t += -(xi1 / delta) * state.b[t - 1] + carry * state.m[t - 1]
    if t >= 2:
        m_t += -(xi1 * xi2 / delta) * state.m[t - 2]

    prev1 = amp[t - 1] if t >= 1 else None
    prev2 = amp[t - 2] if t >= 2 else None
    coeffs = []
    for tp in range(t + 1):
        if tp == t:
            coeffs.append(1.0 - lam)
            continue
        c = carry * prev1["b"][tp]
        if tp == t - 1:
            c = c - xi1 / delta
        if prev2 is not None and tp <= t - 2:
            c = c - (xi1 * xi2 / delta) * prev2["b"][tp]
        coeffs.append(c)
    noise = np.ones_like(lam)
    if prev1 is not None:
        noise = noise + carry * prev1["w"]
    if prev2 is not None:
        noise = noise - (xi1 * xi2 / delta) * prev2["w"]
    return m_t, {"b": coeffs, "w": noise}


def weighted_means(coeffs, lam, k: int) -> list:
    """``<Lambda^k C>`` for every coefficient vector ``C``."""
    lk = lam ** k
    return [float(np.mean(lk * c)) for c in coeffs]


def initial_amp_state(inst: Instance) -> ErrorState:
    st = initial_state(inst)
    st.extra.update(amp_coeffs=[], xi=[], tau_sq=[], z_rot=[])
    return st


def step_amp(state: ErrorState, denoiser: Denoiser) -> ErrorState:
    """One iteration of AMP written as an error recursion.

    Uses ``q~_t = q_t - xi_{t-1} h_{t-1}``, ``m_t`` from :func:`amp_phi` and
    ``h_t = V m_t``.  The extrinsic ``m~_t`` is still recorded so the
    orthogonality probes can be applied.  The denoiser variance is
    ``M^-1 ||z_t||^2`` with ``U^T z_t`` tracked in rotated coordinates.
    """
    t = state.t
    op = state.op
    ex = dict(state.extra)
    xi = list(ex["xi"])
    delta = op.m / op.n
    if t == 0:
        q_tilde = state.q[0]
    else:
        q_tilde = state.q[t] - xi[t - 1] * state.h[t - 1]
    b_t = op.v.T @ q_tilde
    tmp = replace(state, b=state.b + [b_t], extra=ex)
    m_t, coeffs = amp_phi(tmp, xi)
    phi_c = [float(np.mean(c)) for c in coeffs["b"]]
    m_tilde = _onsager_sum(tmp.b, phi_c, m_t)
    h_t = op.v @ m_t

    # U^T z_t = w~ - Sigma V^T q_t + (xi_{t-1}/delta) U^T z_{t-1}
    vq = b_t if t == 0 else b_t + xi[t - 1] * state.m[t - 1]
    z_rot = state.w_rot - op.sigma_apply(vq)
    if t >= 1:
        z_rot = z_rot + (xi[t - 1] / delta) * ex["z_rot"][t - 1]
    tau_sq = float(z_rot @ z_rot) / op.m
    value, deriv = denoiser(state.x + h_t, tau_sq)
    xi_t = float(np.mean(deriv))
    q_next = value - state.x

    ex["amp_coeffs"] = ex["amp_coeffs"] + [coeffs]
    ex["xi"] = xi + [xi_t]
    ex["tau_sq"] = ex["tau_sq"] + [tau_sq]
    ex["z_rot"] = ex["z_rot"] + [z_rot]
    q_tilde_next = q_next - xi_t * h_t
    qt = list(state.q_tilde)
    qt[t] = q_tilde
    new = replace(
        state, t=t + 1, b=tmp.b, h=state.h + [h_t],
        m=state.m + [m_t], m_tilde=state.m_tilde + [m_tilde],
        q=state.q + [q_next], q_tilde=qt + [q_tilde_next],
        phi_means=state.phi_means + [phi_c],
        psi_means=state.psi_means + [[0.0] * t + [xi_t]],
        extra=ex)
    _check(new, m_t, h_t, q_next)
    return new


def simulate_amp(inst: Instance, denoiser: Denoiser, T: int) -> ErrorState:
    state = initial_amp_state(inst)
    for _ in range(T):
        state = step_amp(state, denoiser)
    return state


def simulate_oamp(inst: Instance, denoiser: Denoiser, T: int):
    fns = OampFunctions(inst.op, inst.noise.variance, denoiser)
    state = initial_state(inst)
    for _ in range(T):
        state = step_general(state, fns.phi, fns.psi)
    return state, fns


# -- probes -------------------------------------------------------------------

@dataclass
class OrthogonalityReport:
    """Finite-N orthogonality and norm-consistency statistics of one run."""

    n: int
    m: int
    seeds: dict
    statistics: dict
    degenerate: bool = False

    def max_abs(self, kinds=None) -> float:
        vals = [abs(v) for k, d in self.statistics.items()
                if kinds is None or k in kinds for v in d.values()]
        return max(vals) if vals else 0.0

    def to_dict(self) -> dict:
        return {"N": self.n, "M": self.m, "seeds": self.seeds,
                "degenerate": self.degenerate, "statistics": self.statistics}


ORTHOGONALITY_STATS = ("b_mtilde", "h_qtilde")
NORM_GAP_STATS = ("b_gap", "h_gap")


def orthogonality_statistics(state: ErrorState, amp: bool = False) -> dict:
    """All pairwise statistics for ``0 <= tau' <= tau < state.t``."""
    n = state.n
    T = state.t
    h_source = state.m if amp else state.m_tilde
    stats = {k: {} for k in ORTHOGONALITY_STATS + NORM_GAP_STATS}
    for tau in range(T):
        for tp in range(tau + 1):
            key = f"{tp},{tau}"
            stats["b_mtilde"][key] = float(state.b[tp] @ state.m_tilde[tau]) / n
            stats["h_qtilde"][key] = float(state.h[tp] @ state.q_tilde[tau + 1]) / n
            stats["b_gap"][key] = float(
                state.b[tp] @ state.b[tau] - state.q_tilde[tp] @ state.q_tilde[tau]) / n
            stats["h_gap"][key] = float(
                state.h[tp] @ state.h[tau] - h_source[tp] @ h_source[tau]) / n
    if amp:
        xi = state.extra["xi"]
        a = onsager_weights(xi)
        ms = empirical_moments(state.op, T + 1)
        g0 = g_table(ms, T - 1).leading()
        stats["phi_mean"] = {}
        stats["phi_mean_analytic"] = {}
        for tau in range(T):
            for tp in range(tau + 1):
                key = f"{tp},{tau}"
                stats["phi_mean"][key] = state.phi_means[tau][tp]
                stats["phi_mean_analytic"][key] = float(
                    a[tau] / a[tp] * g0[tau - tp])
    return stats


def is_degenerate(state: ErrorState, tol: float = DEGENERATE_TOL) -> bool:
    """Smallest eigenvalue of the Q~ or M~ Gram matrix below ``tol * N``."""
    for name in ("q_tilde", "m_tilde"):
        g = state.gram(name)
        if g.size and np.linalg.eigvalsh(g).min() < tol * state.n:
            return True
    return False


def probe_orthogonality(spec, mode: str, T: int, n_list, seeds, prior: Prior,
                        noise: NoiseModel, denoiser: Denoiser | None = None,
                        operator_cache=None) -> dict:
    """Run the error model for each ``(N, seed)`` and collect statistics.

    ``mode`` is ``"oamp"`` (memory-one functions through
    :func:`step_general`) or ``"amp"`` (the AMP embedding).  ``seeds`` are
    ``(seed_u, seed_v, seed_instance)`` triples.  Returns
    ``{N: [OrthogonalityReport, ...]}``.
    """
    if T < 1:
        raise InvalidParameterError("T must be >= 1")
    if mode not in ("oamp", "amp"):
        raise InvalidParameterError(f"unknown probe mode {mode!r}")
    denoiser = denoiser or Denoiser.mmse_for(prior)
    out = {}
    for n in n_list:
        if n < 2 * T:
            raise InvalidParameterError(f"N={n} too small for T={T}")
        reports = []
        for su, sv, si in seeds:
            if operator_cache is not None:
                op = operator_cache(spec, n, su, sv)
            else:
                op = build_operator(spec, n, su, sv)
            inst = sample_instance(prior, noise, op, si)
            if mode == "oamp":
                state, _ = simulate_oamp(inst, denoiser, T)
            else:
                state = simulate_amp(inst, denoiser, T)
            reports.append(OrthogonalityReport(
                n, op.m, {"u": su, "v": sv, "instance": si},
                orthogonality_statistics(state, amp=(mode == "amp")),
                is_degenerate(state)))
        out[n] = reports
    return out


def sweep_to_csv(results: dict) -> str:
    """Long-format CSV: ``N, seed, statistic, value``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["N", "seed", "statistic", "value"])
    for n, reports in results.items():
        for rep in reports:
            seed = rep.seeds.get("label", rep.seeds["instance"])
            for kind, d in rep.statistics.items():
                for key, val in d.items():
                    writer.writerow([n, seed, f"{kind}[{key}]", f"{val:.17g}"])
    return buf.getvalue()


def fraction_within(results: dict, bound_fn, kinds) -> float:
    """Share of ``(seed, statistic)`` pairs with ``|s| < bound_fn(N)``."""
    total = inside = 0
    for n, reports in results.items():
        bound = bound_fn(n)
        for rep in reports:
            for kind in kinds:
                for val in rep.statistics[kind].values():
                    total += 1
                    inside += abs(val) < bound
    return inside / total if total else math.nan


def median_magnitude(reports, kinds) -> float:
    vals = [abs(v) for rep in reports for k in kinds
            for v in rep.statistics[k].values()]
    return float(np.median(vals))
