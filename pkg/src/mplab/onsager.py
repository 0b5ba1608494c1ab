"""Onsager-coefficient tables for the AMP error model.

``g[tau][k]`` is the stationarised value of ``<Lambda^k d_{tau'} phi_{tau'+tau}>``
for the linear map that AMP's error recursion defines.  AMP fits inside the
general (orthogonalised) error model exactly when ``g[tau][0]`` vanishes for
every ``tau`` that the iteration budget reaches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .errors import InsufficientMomentsError, InvalidParameterError
from .moments import MomentSequence, _eta_root, as_fraction, mp_eta, mp_moments


@dataclass(frozen=True)
class GTable:
    """Triangular table ``g[tau][k]``; row ``tau`` holds ``k = 0..K-tau-1``."""

    delta: float
    rows: tuple
    moments: MomentSequence

    @property
    def depth(self) -> int:
        return len(self.rows) - 1

    def __getitem__(self, tau):
        return self.rows[tau]

    def leading(self) -> np.ndarray:
        """The ``k = 0`` column, ``g[tau][0]`` for ``tau = 0..T``."""
        return np.array([float(row[0]) for row in self.rows])

    def to_dict(self) -> dict:
        return {
            "delta": float(self.delta),
            "g": [[float(v) for v in row] for row in self.rows],
            "moments": self.moments.to_dict(),
        }


def _constants(ms: MomentSequence):
    if ms.exact:
        d = as_fraction(ms.delta)
        return ms.mu, d, 1 / d, Fraction(1)
    return ms.mu, float(ms.delta), 1.0 / float(ms.delta), 1.0


def g_table(ms: MomentSequence, T: int) -> GTable:
    """Stationarised g-recursion through ``tau = T``.

    ``g[0][k] = mu_k - mu_{k+1}``,
    ``g[1][k] = -mu_{k+1}/delta + g[0][k] - g[0][k+1]`` and, for ``tau >= 2``,
    ``g[tau][k] = (1 + 1/delta) g[tau-1][k] - g[tau-1][k+1] - g[tau-2][k]/delta``.

    ``g[tau][k]`` uses moments up to order ``tau + k + 1``, so each row is as
    long as the available moments allow; ``g[T][0]`` needs order ``T + 1``.
    """
    if T < 0:
        raise InvalidParameterError("T must be nonnegative")
    K = ms.max_order
    if K < T + 1:
        raise InsufficientMomentsError(T + 1, K)
    mu, d, inv_d, one = _constants(ms)
    rows = [[mu[k] - mu[k + 1] for k in range(K)]]
    if T >= 1:
        g0 = rows[0]
        rows.append([-mu[k + 1] * inv_d + g0[k] - g0[k + 1]
                     for k in range(K - 1)])
    for tau in range(2, T + 1):
        prev, prev2 = rows[tau - 1], rows[tau - 2]
        rows.append([(one + inv_d) * prev[k] - prev[k + 1] - prev2[k] * inv_d
                     for k in range(K - tau)])
    return GTable(float(ms.delta), tuple(tuple(r) for r in rows), ms)


def g_table_two_index(ms: MomentSequence, T: int, xi=None) -> dict:
    """Two-index recursion for ``g_{tau', tau}^{(k)}`` with Onsager weights.

    This follows AMP's error recursion literally: the diagonal is
    ``mu_k - mu_{k+1}``, the first off-diagonal is
    ``xi_{tau-1} (-mu_k/delta + (1 + 1/delta) g_{tau-1,tau-1}^{(k)}
    - g_{tau-1,tau-1}^{(k+1)})`` and deeper entries obey the three-term
    recursion with ``xi_{tau-1}`` and ``xi_{tau-2}``.  With ``xi`` omitted
    (all ones) the result must coincide with :func:`g_table` shifted by
    ``tau'``.  Returns ``{(tau', tau): [g^(0), g^(1), ...]}``.
    """
    K = ms.max_order
    if K < T + 1:
        raise InsufficientMomentsError(T + 1, K)
    mu, d, inv_d, one = _constants(ms)
    if xi is None:
        xi = [one] * T
    else:
        xi = [as_fraction(v) if ms.exact else float(v) for v in xi]
        if len(xi) < T:
            raise InvalidParameterError(f"need {T} xi values, got {len(xi)}")
    table = {}
    for tau in range(T + 1):
        table[(tau, tau)] = [mu[k] - mu[k + 1] for k in range(K)]
        if tau >= 1:
            prev = table[(tau - 1, tau - 1)]
            table[(tau - 1, tau)] = [
                xi[tau - 1] * (-mu[k] * inv_d + (one + inv_d) * prev[k]
                               - prev[k + 1])
                for k in range(K - 1)]
        for tp in range(tau - 1):
            a, b = table[(tp, tau - 1)], table[(tp, tau - 2)]
            n = min(len(a) - 1, len(b))
            table[(tp, tau)] = [
                xi[tau - 1] * ((one + inv_d) * a[k] - a[k + 1]
                               - xi[tau - 2] * inv_d * b[k])
                for k in range(n)]
    return table


def onsager_weights(xi) -> list:
    """Normalisation ``a_0 = 1``, ``a_tau = xi_{tau-1} a_{tau-1}``."""
    a = [1.0]
    for v in xi:
        a.append(a[-1] * v)
    return a


@dataclass(frozen=True)
class Verdict:
    """Outcome of the convergence check.

    ``matched`` is True for MPMatchedThrough(T); otherwise ``tau`` and
    ``magnitude`` describe the first deviating row.
    """

    matched: bool
    T: int
    tau: int | None = None
    magnitude: float | None = None
    values: tuple = field(default=(), compare=False)

    def __str__(self):
        if self.matched:
            return f"MPMatchedThrough({self.T})"
        return f"DeviatesAt({self.tau}, {self.magnitude:.17g})"

    def to_dict(self) -> dict:
        out = {"verdict": "mp_matched_through" if self.matched else "deviates_at",
               "T": self.T, "g0": [float(v) for v in self.values]}
        if not self.matched:
            out.update(tau=self.tau, magnitude=self.magnitude)
        return out


def amp_convergence_verdict(ms: MomentSequence, T: int, tol: float) -> Verdict:
    """MPMatchedThrough(T) iff ``max_{tau <= T} |g[tau][0]| <= tol``."""
    if not tol > 0:
        raise InvalidParameterError("tol must be positive")
    g0 = g_table(ms, T).leading()
    for tau, v in enumerate(g0):
        if abs(v) > tol:
            return Verdict(False, T, tau, float(abs(v)), tuple(g0))
    return Verdict(True, T, values=tuple(g0))


def default_tolerance(n: int) -> float:
    """Verdict tolerance for moments estimated from an ``n``-dimensional trace."""
    return 10.0 / np.sqrt(n)


# -- generating function --------------------------------------------------

def critical_point(delta: float, y: float) -> float:
    """Root ``x* = delta y / ((y - delta)(y - 1))`` of ``Q(-x, y)``."""
    return delta * y / ((y - delta) * (y - 1.0))


def numerator_p(x: float, y: float, delta: float) -> float:
    """``P(x, y) = (delta x - delta - x y) eta(-x) + delta``."""
    return (delta * x - delta - x * y) * _eta_root(-x, delta) + delta


def denominator_q(x: float, y: float, delta: float) -> float:
    return delta * y + (y - delta) * (y - 1.0) * x


@lru_cache(maxsize=16)
def _exact_mp_table(delta: float, order: int) -> GTable:
    return g_table(mp_moments(delta, 2 * order + 2, exact=True), order)


def series_g(delta, x: float, y: float, order: int) -> float:
    """Truncated double series ``sum_tau G_tau(x) y^tau`` from exact g-rows.

    ``G_tau(x) = sum_k g[tau][k] x^k - g[tau-1][0] / x``; both sums are cut
    at ``order`` terms.
    """
    table = _exact_mp_table(float(delta), order)
    xf, yf = as_fraction(x), as_fraction(y)
    total = Fraction(0)
    prev_lead = Fraction(0)
    for tau in range(order + 1):
        row = table[tau]
        gt = sum(row[k] * xf ** k for k in range(min(order + 1, len(row))))
        gt -= prev_lead / xf
        total += gt * yf ** tau
        prev_lead = row[0]
    return float(total)


@dataclass(frozen=True)
class GeneratingFunctionPoint:
    y: float
    x_star: float
    q_residual: float
    p_residual: float
    eta_residual: float
    series_error: float


@dataclass(frozen=True)
class GeneratingFunctionCheck:
    delta: float
    points: tuple
    x_series: float

    def max_residuals(self) -> dict:
        return {
            name: max(getattr(p, name) for p in self.points)
            for name in ("q_residual", "p_residual", "eta_residual",
                         "series_error")
        }


def generating_function_check(delta: float, y_grid, series_order: int = 40,
                              x_series: float = 0.01
                              ) -> GeneratingFunctionCheck:
    """Check the closed form ``G = P/Q`` and the root identity on a y grid."""
    if series_order < 4:
        raise InvalidParameterError("series_order must be >= 4")
    hi = min(1.0, delta)
    pts = []
    for y in y_grid:
        y = float(y)
        if not 0.0 < y < hi:
            raise InvalidParameterError(f"y={y} outside (0, {hi})")
        xs = critical_point(delta, y)
        closed = numerator_p(x_series, y, delta) / denominator_q(x_series, y, delta)
        series = series_g(delta, x_series, y, series_order)
        pts.append(GeneratingFunctionPoint(
            y=y,
            x_star=xs,
            q_residual=abs(denominator_q(-xs, y, delta)),
            p_residual=abs(numerator_p(-xs, y, delta)),
            eta_residual=abs(mp_eta(xs, delta) - (1.0 - y)),
            series_error=abs(series - closed),
        ))
    return GeneratingFunctionCheck(float(delta), tuple(pts), float(x_series))
