"""Orthogonally invariant sensing operators in factored SVD form."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidDimensionError,
    InvalidParameterError,
    InvalidSpectrumError,
)
from .moments import (
    EMPIRICAL_TRACE,
    MomentSequence,
    as_fraction,
    mp_moments,
    quadrature_from_moments,
)

MP_SAMPLED = "mp_sampled"
DISCRETE_ATOMS = "discrete_atoms"
GEOMETRIC = "geometric"
MOMENT_MATCHED = "moment_matched"
SPECTRUM_KINDS = (MP_SAMPLED, DISCRETE_ATOMS, GEOMETRIC, MOMENT_MATCHED)


def measurement_count(delta: float, n: int) -> int:
    """``round(delta * n)`` with ties rounded up."""
    return int(math.floor(delta * n + 0.5))


@dataclass(frozen=True)
class SpectrumSpec:
    """Recipe for the singular-value spectrum of a sensing matrix.

    For ``discrete_atoms`` the atoms describe the law of the squared
    singular values ``sigma_i^2`` over the ``min(M, N)`` nonzero-block slots;
    ``A^T A`` additionally carries ``N - M`` zeros when ``M < N``.
    """

    kind: str
    delta: float
    values: tuple = ()
    weights: tuple = ()
    condition_number: float = 1.0
    order: int = 1

    def __post_init__(self):
        if self.kind not in SPECTRUM_KINDS:
            raise InvalidSpectrumError(f"unknown spectrum kind {self.kind!r}")
        if not self.delta > 0:
            raise InvalidParameterError("delta must be positive")
        if self.kind == DISCRETE_ATOMS:
            v = np.asarray(self.values, dtype=float)
            w = np.asarray(self.weights, dtype=float)
            if v.shape != w.shape or v.size == 0:
                raise InvalidSpectrumError("values and weights must match")
            if np.any(v < 0):
                raise InvalidSpectrumError("atom values must be nonnegative")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise InvalidSpectrumError("weights must be >= 0 and sum to 1")
            object.__setattr__(self, "values", tuple(map(float, v)))
            object.__setattr__(self, "weights", tuple(map(float, w)))
        if self.kind == GEOMETRIC and not self.condition_number >= 1:
            raise InvalidSpectrumError("condition_number must be >= 1")
        if self.kind == MOMENT_MATCHED and self.order < 1:
            raise InvalidSpectrumError("order must be >= 1")

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "delta": self.delta}
        if self.kind == DISCRETE_ATOMS:
            out.update(values=list(self.values), weights=list(self.weights))
        elif self.kind == GEOMETRIC:
            out["condition_number"] = self.condition_number
        elif self.kind == MOMENT_MATCHED:
            out["order"] = self.order
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SpectrumSpec":
        data = dict(data)
        kind = data.pop("kind")
        delta = float(data.pop("delta"))
        if "values" in data:
            data["values"] = tuple(data["values"])
            data["weights"] = tuple(data["weights"])
        return cls(kind, delta, **data)


@dataclass(frozen=True, eq=False)
class SensingOperator:
    """``A = U diag(sigma) V^T`` with ``U`` (M x M) and ``V`` (N x N) orthogonal.

    Products are applied factor by factor; the dense matrix is never formed
    unless :meth:`dense` is called.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    spec: SpectrumSpec | None = None
    seeds: tuple = ()
    lam: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        m, n = self.u.shape[0], self.v.shape[0]
        if self.u.shape != (m, m) or self.v.shape != (n, n):
            raise InvalidDimensionError("U and V must be square")
        r = min(m, n)
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.shape != (r,):
            raise InvalidDimensionError(f"need {r} singular values")
        if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
            raise InvalidSpectrumError("singular values must be finite and >= 0")
        if np.any(np.diff(sigma) > 0):
            raise InvalidSpectrumError("singular values must be descending")
        lam = np.zeros(n)
        lam[:r] = sigma ** 2
        for name, arr in (("u", self.u), ("v", self.v), ("sigma", sigma),
                          ("lam", lam)):
            arr = np.asarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def m(self) -> int:
        return self.u.shape[0]

    @property
    def n(self) -> int:
        return self.v.shape[0]

    @property
    def rank_slots(self) -> int:
        return self.sigma.shape[0]

    @property
    def delta(self) -> float:
        return self.m / self.n

    def sigma_t(self, w_rot):
        """``Sigma^T`` applied to an M-vector; returns an N-vector."""
        out = np.zeros(self.n)
        r = self.rank_slots
        out[:r] = self.sigma * w_rot[:r]
        return out

    def sigma_apply(self, b):
        """``Sigma`` applied to an N-vector; returns an M-vector."""
        out = np.zeros(self.m)
        r = self.rank_slots
        out[:r] = self.sigma * b[:r]
        return out

    def matvec(self, x):
        return self.u @ self.sigma_apply(self.v.T @ x)

    def rmatvec(self, z):
        return self.v @ self.sigma_t(self.u.T @ z)

    def dense(self) -> np.ndarray:
        r = self.rank_slots
        return (self.u[:, :r] * self.sigma) @ self.v[:, :r].T


def sample_haar_orthogonal(n: int, seed) -> np.ndarray:
    """Haar-distributed orthogonal ``n x n`` matrix.

    QR of an i.i.d. standard Gaussian matrix, with the signs of ``diag(R)``
    folded into ``Q``; without that correction the result is not Haar.
    """
    if n < 1:
        raise InvalidDimensionError("n must be >= 1")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d


def _multiplicities(weights, slots: int) -> np.ndarray:
    # largest-remainder rounding so counts sum exactly to slots
    w = np.asarray(weights, dtype=float)
    raw = w * slots
    counts = np.floor(raw).astype(int)
    short = slots - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def squared_singular_moments(delta: float, order: int) -> MomentSequence:
    """Marchenko-Pastur moments of ``sigma_i^2`` over the nonzero block.

    For ``delta < 1`` this is the law of ``A A^T`` (``mu_k / delta`` for
    ``k >= 1``); for ``delta >= 1`` it is the law of ``A^T A`` itself.
    """
    ms = mp_moments(delta, order)
    if delta >= 1:
        return ms
    inv = 1 / as_fraction(delta) if ms.exact else 1.0 / delta
    mu = (ms.mu[0],) + tuple(m * inv for m in ms.mu[1:])
    return MomentSequence(delta, mu, ms.provenance, ms.exact)


def spectrum_singular_values(spec: SpectrumSpec, n: int, seed=None) -> np.ndarray:
    """Descending singular values realising ``spec`` for dimension ``n``."""
    m = measurement_count(spec.delta, n)
    if m < 1:
        raise InvalidDimensionError(f"round(delta * n) = {m}")
    r = min(m, n)
    if spec.kind == MP_SAMPLED:
        rng = np.random.default_rng(seed)
        g = rng.standard_normal((m, n)) / math.sqrt(m)
        gram = g @ g.T if m <= n else g.T @ g
        lam = np.clip(np.linalg.eigvalsh(gram), 0.0, None)
        s = np.sqrt(lam)
    elif spec.kind == DISCRETE_ATOMS:
        counts = _multiplicities(spec.weights, r)
        s = np.sqrt(np.repeat(np.asarray(spec.values), counts))
    elif spec.kind == GEOMETRIC:
        s = spec.condition_number ** (-np.arange(r) / max(r - 1, 1))
        # normalise so that N^{-1} Tr(Lambda) = 1
        s = s * math.sqrt(n / np.sum(s ** 2))
    else:
        n_atoms = (spec.order + 2) // 2
        values, weights = quadrature_from_moments(
            squared_singular_moments(spec.delta, 2 * n_atoms - 1), n_atoms)
        counts = _multiplicities(weights, r)
        s = np.sqrt(np.clip(np.repeat(values, counts), 0.0, None))
    return np.sort(s)[::-1].copy()


def build_operator(spec: SpectrumSpec, n: int, seed_u, seed_v,
                   seed_sigma=None) -> SensingOperator:
    """Orthogonally invariant operator with Haar ``U``, ``V`` and a spectrum
    drawn or placed according to ``spec``.

    ``seed_sigma`` only matters for the sampled Marchenko-Pastur spectrum;
    by default it is derived from ``(seed_u, seed_v)``.
    """
    if n < 1:
        raise InvalidDimensionError("n must be >= 1")
    m = measurement_count(spec.delta, n)
    if m < 1:
        raise InvalidDimensionError(f"round(delta * n) = {m}")
    if seed_sigma is None:
        seed_sigma = np.random.SeedSequence([int(seed_u), int(seed_v), 0x51])
    sigma = spectrum_singular_values(spec, n, seed_sigma)
    u = sample_haar_orthogonal(m, seed_u)
    v = sample_haar_orthogonal(n, seed_v)
    return SensingOperator(u, sigma, v, spec, (int(seed_u), int(seed_v)))


def empirical_moments(op: SensingOperator, max_order: int) -> MomentSequence:
    """``mu_k = N^{-1} sum_i lambda_i^k`` over all N eigenvalues of ``A^T A``."""
    if max_order < 1:
        raise InvalidParameterError("max_order must be >= 1")
    lam = op.lam
    mu = [1.0] + [float(np.mean(lam ** k)) for k in range(1, max_order + 1)]
    return MomentSequence(op.delta, tuple(mu), EMPIRICAL_TRACE, exact=False)
