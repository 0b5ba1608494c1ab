"""Marchenko-Pastur moments, eta-transforms and quadrature from moments.

All moments here are moments of the eigenvalue law of ``A^T A`` (an
``N x N`` matrix, zero eigenvalues included), normalised so that
``mu_k = N^{-1} Tr(Lambda^k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Rational

import numpy as np

from .errors import (
    InsufficientMomentsError,
    InvalidParameterError,
    MomentSequenceInvalidError,
    NumericalFailureError,
)

ANALYTIC_MP = "analytic_mp"
EMPIRICAL_TRACE = "empirical_trace"
USER_SUPPLIED = "user_supplied"
PROVENANCES = (ANALYTIC_MP, EMPIRICAL_TRACE, USER_SUPPLIED)

# exact rational recursion is the default up to this order
EXACT_ORDER_LIMIT = 32
# Chebyshev's algorithm loses accuracy quickly in floating point
FLOAT_ATOM_LIMIT = 10


def as_fraction(value) -> Fraction:
    """Rational view of ``value``; floats go through their shortest repr."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, Rational):
        return Fraction(value)
    if isinstance(value, str):
        return Fraction(value)
    value = float(value)
    if not math.isfinite(value):
        raise InvalidParameterError(f"non-finite value {value!r}")
    return Fraction(repr(value))


@dataclass(frozen=True)
class MomentSequence:
    """Moments ``mu_0..mu_K`` of an eigenvalue law of ``A^T A``.

    ``mu`` holds :class:`fractions.Fraction` entries when the sequence is
    exact and floats otherwise.
    """

    delta: float
    mu: tuple
    provenance: str = USER_SUPPLIED
    exact: bool = field(default=False)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise InvalidParameterError(f"unknown provenance {self.provenance!r}")
        if not self.delta > 0:
            raise InvalidParameterError("delta must be positive")
        if len(self.mu) == 0:
            raise InvalidParameterError("empty moment sequence")
        mu = tuple(self.mu)
        if self.exact:
            mu = tuple(as_fraction(m) for m in mu)
        else:
            mu = tuple(float(m) for m in mu)
        object.__setattr__(self, "mu", mu)
        if abs(float(mu[0]) - 1.0) > 1e-12:
            raise InvalidParameterError("mu_0 must equal 1")

    @property
    def max_order(self) -> int:
        return len(self.mu) - 1

    def as_array(self) -> np.ndarray:
        return np.array([float(m) for m in self.mu])

    def truncated(self, order: int) -> "MomentSequence":
        if order > self.max_order:
            raise InsufficientMomentsError(order, self.max_order)
        return MomentSequence(self.delta, self.mu[:order + 1],
                              self.provenance, self.exact)

    def hankel(self, size: int | None = None) -> np.ndarray:
        """Hankel matrix ``[mu_{i+j}]`` of the largest (or given) size."""
        if size is None:
            size = self.max_order // 2 + 1
        if 2 * (size - 1) > self.max_order:
            raise InsufficientMomentsError(2 * (size - 1), self.max_order)
        mu = self.as_array()
        idx = np.add.outer(np.arange(size), np.arange(size))
        return mu[idx]

    def hankel_is_psd(self, tol: float = 1e-9) -> bool:
        """Check the Hankel matrix is positive semidefinite.

        The matrix is rescaled to unit diagonal first so that the tolerance
        is meaningful for fast-growing moments.
        """
        h = self.hankel()
        d = np.sqrt(np.abs(np.diag(h)))
        d[d == 0] = 1.0
        eig = np.linalg.eigvalsh(h / np.outer(d, d))
        return bool(eig.min() >= -tol)

    def to_dict(self) -> dict:
        return {
            "delta": float(self.delta),
            "mu": [_json_number(m) for m in self.mu],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MomentSequence":
        mu = data["mu"]
        exact = all(isinstance(m, int) or isinstance(m, str) for m in mu)
        return cls(float(data["delta"]), tuple(mu),
                   data.get("provenance", USER_SUPPLIED), exact)


def _json_number(m):
    if isinstance(m, Fraction):
        if m.denominator == 1:
            return m.numerator
        return str(m)
    return float(m)


def _eta_root(x, delta):
    # positive root of x*eta^2 + (delta + x*(delta-1))*eta - delta = 0,
    # picking the branch with eta(0) = 1; valid for small negative x too
    b = delta + x * (delta - 1.0)
    disc = b * b + 4.0 * x * delta
    if disc < 0:
        raise NumericalFailureError(f"no real root at x={x}, delta={delta}")
    s = math.sqrt(disc)
    if b >= 0:
        return 2.0 * delta / (b + s)
    return (s - b) / (2.0 * x)


def mp_eta(x: float, delta: float) -> float:
    """Eta-transform of the Marchenko-Pastur law of ``A^T A``.

    Solves ``eta = delta / (delta + x (eta + delta - 1))`` in closed form,
    using the cancellation-free form of the quadratic root.
    """
    if not delta > 0:
        raise InvalidParameterError("delta must be positive")
    if not x >= 0:
        raise InvalidParameterError("x must be nonnegative")
    eta = _eta_root(float(x), float(delta))
    if not 0 < eta <= 1 + 1e-15:
        raise NumericalFailureError(f"eta={eta} outside (0, 1]")
    return min(eta, 1.0)


def eta_transform(eigenvalues, x) -> float | np.ndarray:
    """Eta-transform ``mean(1 / (1 + x lambda))`` of a discrete spectrum."""
    lam = np.asarray(eigenvalues, dtype=float)
    x = np.asarray(x, dtype=float)
    out = np.mean(1.0 / (1.0 + np.multiply.outer(x, lam)), axis=-1)
    return float(out) if out.ndim == 0 else out


def mp_moments(delta, max_order: int, exact: bool | None = None
               ) -> MomentSequence:
    """Moments of the Marchenko-Pastur law via the quadratic recursion.

    ``delta mu_k = sum_{i+j=k-1} mu_i mu_j + (delta - 1) mu_{k-1}``, which is
    what the fixed-point equation of :func:`mp_eta` becomes once the power
    series ``sum (-x)^k mu_k`` is substituted.  Exact rational arithmetic is
    used by default for ``max_order <= 32``.
    """
    if max_order < 1:
        raise InvalidParameterError("max_order must be >= 1")
    if exact is None:
        exact = max_order <= EXACT_ORDER_LIMIT
    if exact:
        d = as_fraction(delta)
        one = Fraction(1)
    else:
        d = float(delta)
        one = 1.0
    if not d > 0:
        raise InvalidParameterError("delta must be positive")
    mu = [one]
    for k in range(1, max_order + 1):
        conv = sum(mu[i] * mu[k - 1 - i] for i in range(k))
        mu.append((conv + (d - 1) * mu[k - 1]) / d)
    return MomentSequence(float(d), tuple(mu), ANALYTIC_MP, exact)


def mp_support(delta: float) -> tuple[float, float]:
    """Edges of the continuous part of the Marchenko-Pastur law of A^T A."""
    r = 1.0 / math.sqrt(delta)
    return (1.0 - r) ** 2, (1.0 + r) ** 2


def recurrence_from_moments(mu, n: int):
    """Chebyshev's algorithm: moments -> three-term recurrence coefficients.

    Returns ``(alpha, beta)`` of length ``n`` for the monic orthogonal
    polynomials of the measure with moments ``mu[0..2n-1]``.  Works on
    Fractions or floats, whichever ``mu`` holds.
    """
    if len(mu) < 2 * n:
        raise InsufficientMomentsError(2 * n - 1, len(mu) - 1)
    zero = mu[0] * 0
    sigma_prev = [zero] * (2 * n)
    sigma = list(mu[:2 * n])
    if not sigma[0] > 0:
        raise MomentSequenceInvalidError("mu_0 must be positive")
    alpha = [sigma[1] / sigma[0]]
    beta = [sigma[0]]
    for k in range(1, n):
        nxt = [zero] * (2 * n)
        for l in range(k, 2 * n - k):
            nxt[l] = (sigma[l + 1] - alpha[k - 1] * sigma[l]
                      - beta[k - 1] * sigma_prev[l])
        if not nxt[k] > 0:
            raise MomentSequenceInvalidError(
                f"Hankel matrix not positive definite at size {k + 1}")
        alpha.append(nxt[k + 1] / nxt[k] - sigma[k] / sigma[k - 1])
        beta.append(nxt[k] / sigma[k - 1])
        sigma_prev, sigma = sigma, nxt
    return alpha, beta


def quadrature_from_moments(ms: MomentSequence, n_atoms: int):
    """Discrete measure with ``n_atoms`` atoms matching ``mu_0..mu_{2n-1}``.

    Moments go to recurrence coefficients (Chebyshev's algorithm), the
    coefficients fill a symmetric tridiagonal Jacobi matrix, and its
    eigen-decomposition gives nodes (eigenvalues) and weights (squared first
    components).  Returns ``(values, weights)`` sorted by value.
    """
    if n_atoms < 1:
        raise InvalidParameterError("n_atoms must be >= 1")
    if not ms.exact and n_atoms > FLOAT_ATOM_LIMIT:
        raise InvalidParameterError(
            f"at most {FLOAT_ATOM_LIMIT} atoms in floating point")
    if ms.max_order < 2 * n_atoms - 1:
        raise InsufficientMomentsError(2 * n_atoms - 1, ms.max_order)
    alpha, beta = recurrence_from_moments(ms.mu, n_atoms)
    a = np.array([float(v) for v in alpha])
    off = np.sqrt(np.array([float(v) for v in beta[1:]]))
    jac = np.diag(a) + np.diag(off, 1) + np.diag(off, -1)
    values, vecs = np.linalg.eigh(jac)
    weights = float(beta[0]) * vecs[0] ** 2
    weights = weights / weights.sum()
    order = np.argsort(values)
    return values[order], weights[order]


def discrete_moments(values, weights, max_order: int) -> np.ndarray:
    """Moments ``sum_i w_i v_i^k`` for ``k = 0..max_order``."""
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    return np.array([np.sum(w * v ** k) for k in range(max_order + 1)])
