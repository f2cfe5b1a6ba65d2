"""Finite-population statistics, covariate preprocessing and small dense linear algebra.

Everything here uses the finite-population divisor ``M - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


class DegeneratePopulationError(ValueError):
    """Raised when a variance is requested for fewer than two units."""


class RankDeficiencyError(np.linalg.LinAlgError):
    """Raised when a covariance or design matrix is (numerically) singular."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


# ---------------------------------------------------------------------------
# finite-population moments


def _as_2d(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return a


def finite_pop_cov(a, b=None):
    """Finite-population covariance ``(M-1)^{-1} sum_i (a_i - abar)(b_i - bbar)^T``.

    Vectors are treated as single columns, so the result is always a 2-D array.
    """
    a = _as_2d(a)
    b = a if b is None else _as_2d(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"row mismatch: {a.shape[0]} vs {b.shape[0]}")
    m = a.shape[0]
    if m < 2:
        raise DegeneratePopulationError(f"need at least 2 rows, got {m}")
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    return ac.T @ bc / (m - 1)


def finite_pop_var(a):
    """Finite-population variance of a vector."""
    return float(finite_pop_cov(a)[0, 0])


# ---------------------------------------------------------------------------
# experiment container


@dataclass
class ClusterExperiment:
    """Units grouped into ``M`` clusters.

    ``cluster`` maps each of the ``N`` unit rows to a cluster index in
    ``0..M-1``. Individual covariates ``x`` are ``N x K_x`` and cluster
    covariates ``c`` are ``M x K_c``. ``y_pot`` (``N x 2``, columns for
    control then treatment) is only available in simulation mode.
    """

    cluster: np.ndarray
    x: np.ndarray | None = None
    c: np.ndarray | None = None
    y_obs: np.ndarray | None = None
    y_pot: np.ndarray | None = None
    z: np.ndarray | None = None
    cluster_labels: np.ndarray | None = None
    x_names: list[str] = field(default_factory=list)
    c_names: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        cl = np.asarray(self.cluster)
        if cl.ndim != 1 or cl.size == 0:
            raise ValueError("cluster must be a non-empty 1-D array")
        if not np.issubdtype(cl.dtype, np.integer):
            raise ValueError("cluster indices must be integers; use from_units for labels")
        self.cluster = cl.astype(np.intp)
        m = int(self.cluster.max()) + 1
        sizes = np.bincount(self.cluster, minlength=m)
        if self.cluster.min() < 0 or np.any(sizes == 0):
            raise ValueError("cluster indices must cover 0..M-1 with every cluster non-empty")
        self.sizes = sizes
        n = self.cluster.size
        if self.x is not None:
            self.x = _as_2d(self.x)
            if self.x.shape[0] != n:
                raise ValueError(f"x has {self.x.shape[0]} rows, expected {n}")
        if self.c is not None:
            self.c = _as_2d(self.c)
            if self.c.shape[0] != m:
                raise ValueError(f"c has {self.c.shape[0]} rows, expected {m}")
        if self.y_obs is not None:
            self.y_obs = np.asarray(self.y_obs, dtype=float).reshape(-1)
            if self.y_obs.size != n:
                raise ValueError("y_obs length does not match number of units")
        if self.y_pot is not None:
            self.y_pot = np.asarray(self.y_pot, dtype=float)
            if self.y_pot.shape != (n, 2):
                raise ValueError(f"y_pot must be {n} x 2")
        if self.z is not None:
            self.z = np.asarray(self.z).astype(np.int8).reshape(-1)
            if self.z.size != m:
                raise ValueError("z must have one entry per cluster")
        for arr in (self.x, self.c, self.y_obs, self.y_pot):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError("all entries must be finite")

    @classmethod
    def from_units(cls, cluster_ids, **kwargs):
        """Build from arbitrary per-unit cluster labels (kept in ``cluster_labels``)."""
        labels, idx = np.unique(np.asarray(cluster_ids), return_inverse=True)
        return cls(cluster=idx.astype(np.intp), cluster_labels=labels, **kwargs)

    @property
    def M(self):
        return self.sizes.size

    @property
    def N(self):
        return self.cluster.size

    @property
    def omega(self):
        """Normalized cluster sizes ``n_i M / N`` (mean one)."""
        return self.sizes * self.M / self.N

    def cluster_sums(self, values):
        """Raw per-cluster sums of unit-level values (vector or matrix)."""
        values = np.asarray(values, dtype=float)
        if values.shape[0] != self.N:
            raise ValueError(f"expected {self.N} unit rows, got {values.shape[0]}")
        if values.ndim == 1:
            return np.bincount(self.cluster, weights=values, minlength=self.M)
        out = np.zeros((self.M,) + values.shape[1:])
        np.add.at(out, self.cluster, values)
        return out

    def scaled_totals(self, values):
        return scaled_cluster_totals(self, values)

    def x_tilde(self):
        if self.x is None:
            raise ValueError("experiment has no individual-level covariates")
        # built from x centered over all units, whether or not self.x already is
        return self.scaled_totals(self.x - self.x.mean(axis=0))

    def centered(self):
        """Copy with ``x`` centered over all units and ``c`` centered over clusters."""
        x = None if self.x is None else self.x - self.x.mean(axis=0)
        c = None if self.c is None else self.c - self.c.mean(axis=0)
        return replace(self, x=x, c=c)

    def with_assignment(self, z):
        """Copy carrying assignment ``z`` and, when potential outcomes exist, the revealed outcomes."""
        z = np.asarray(z).astype(np.int8)
        y = self.y_obs
        if self.y_pot is not None:
            zu = z[self.cluster]
            y = np.where(zu == 1, self.y_pot[:, 1], self.y_pot[:, 0])
        return replace(self, z=z, y_obs=y)

    @property
    def tau(self):
        """True average treatment effect (simulation mode only)."""
        if self.y_pot is None:
            raise ValueError("potential outcomes unavailable")
        return float(np.mean(self.y_pot[:, 1] - self.y_pot[:, 0]))


def scaled_cluster_totals(exp, unit_values):
    """Per-cluster totals scaled by ``M/N`` so that cluster means match unit means."""
    unit_values = np.asarray(unit_values, dtype=float)
    if unit_values.shape[0] != exp.N:
        raise ValueError(f"length mismatch: {unit_values.shape[0]} values for {exp.N} units")
    return exp.cluster_sums(unit_values) * exp.M / exp.N


def size_and_totals(exp):
    """Cluster-level covariates ``(n_i, x~_i.)``; ``c`` itself is not re-centered."""
    return np.column_stack([exp.sizes.astype(float), exp.x_tilde()])


# ---------------------------------------------------------------------------
# orthogonalization


@dataclass(frozen=True)
class OrthoTransform:
    """Upper-triangular ``U`` (unit diagonal) with ``cov_f(X U)`` diagonal.

    Column ``k`` of ``X U`` is column ``k`` of ``X`` minus its projection onto
    the earlier columns, so earlier columns are kept as-is.
    """

    U: np.ndarray

    def apply(self, values):
        return _as_2d(values) @ self.U


def gram_schmidt_upper(xt, tol=1e-10):
    """Element-wise Gram-Schmidt on the columns of ``xt`` (ordered by importance)."""
    xt = _as_2d(xt)
    m, k = xt.shape
    if m < 2:
        raise DegeneratePopulationError("need at least 2 rows")
    xc = xt - xt.mean(axis=0)
    U = np.eye(k)
    basis = []
    for j in range(k):
        col = xc[:, j].copy()
        coef = np.zeros(k)
        coef[j] = 1.0
        # modified Gram-Schmidt: project against already-orthogonal columns
        for i, (b, bcoef) in enumerate(basis):
            proj = (b @ col) / (b @ b)
            col -= proj * b
            coef -= proj * bcoef
        scale = np.sqrt(xc[:, j] @ xc[:, j])
        if scale == 0 or np.sqrt(col @ col) <= tol * max(scale, 1.0):
            raise RankDeficiencyError(
                f"covariate column {j} is (numerically) a linear combination of earlier columns",
                column=j,
            )
        basis.append((col, coef))
        U[:, j] = coef
    return OrthoTransform(U=U)


# ---------------------------------------------------------------------------
# dense linear algebra helpers


def spd_inverse(a, what="matrix"):
    """Inverse of a symmetric positive-definite matrix via Cholesky; never regularized."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as err:
        raise RankDeficiencyError(f"{what} is not positive definite") from err
    eye = np.eye(a.shape[0])
    linv = np.linalg.solve(chol, eye)
    return linv.T @ linv


def sym_eig(a):
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    return np.linalg.eigh((a + a.T) / 2)


def sym_sqrt(a):
    w, q = sym_eig(a)
    if w.min() < 0:
        raise RankDeficiencyError("matrix has negative eigenvalues")
    return (q * np.sqrt(w)) @ q.T


def sym_inv_sqrt(a):
    w, q = sym_eig(a)
    if w.min() <= 0:
        raise RankDeficiencyError("matrix is not positive definite")
    return (q / np.sqrt(w)) @ q.T


# ---------------------------------------------------------------------------
# chi-square distribution

_EPS = 1e-16
_TINY = 1e-300


def _gamma_series(s, x):
    # P(s, x) by the power series; converges quickly for x < s + 1
    term = 1.0 / s
    total = term
    ap = s
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + s * math.log(x) - math.lgamma(s))


def _gamma_cf(s, x):
    # Q(s, x) by the modified Lentz continued fraction; used for x >= s + 1
    b = x + 1.0 - s
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + s * math.log(x) - math.lgamma(s)) * h


def regularized_gamma_p(s, x):
    """Regularized lower incomplete gamma ``P(s, x)``.

    Series for ``x < s + 1``, continued fraction for the upper tail otherwise.
    """
    if s <= 0:
        raise ValueError("shape must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 0.0
    if math.isinf(x):
        return 1.0
    if x < s + 1.0:
        return _gamma_series(s, x)
    return 1.0 - _gamma_cf(s, x)


def _check_df(k):
    if int(k) != k or k < 1:
        raise ValueError(f"degrees of freedom must be a positive integer, got {k}")


def chisq_cdf(a, k):
    """CDF of the chi-square distribution with ``k`` degrees of freedom."""
    _check_df(k)
    if a < 0:
        raise ValueError("a must be non-negative")
    return regularized_gamma_p(k / 2.0, a / 2.0)


def _chisq_logpdf(a, k):
    s = k / 2.0
    return (s - 1.0) * math.log(a) - a / 2.0 - s * math.log(2.0) - math.lgamma(s)


def chisq_quantile(p, k, rtol=1e-12):
    """Inverse chi-square CDF by bracketing and safeguarded Newton steps."""
    _check_df(k)
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    lo, hi = 0.0, max(float(k), 1.0)
    while chisq_cdf(hi, k) < p:
        lo, hi = hi, hi * 2.0
    # small-a start from the leading term P ~ (a/2)^{k/2} / Gamma(k/2 + 1)
    x = 2.0 * math.exp((math.log(p) + math.lgamma(k / 2.0 + 1.0)) / (k / 2.0))
    if not lo < x < hi:
        x = 0.5 * (lo + hi)
    for _ in range(500):
        f = chisq_cdf(x, k) - p
        if f > 0:
            hi = x
        else:
            lo = x
        step = f / math.exp(_chisq_logpdf(x, k))
        x_new = x - step
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= rtol * x_new or hi - lo <= rtol * hi:
            return x_new
        x = x_new
    return x
