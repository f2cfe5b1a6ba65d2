"""Complete randomization of clusters and rerandomization against balance criteria."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize, special

from .fpstats import (
    RankDeficiencyError,
    chisq_quantile,
    finite_pop_cov,
    spd_inverse,
    sym_eig,
    sym_sqrt,
)

log = logging.getLogger(__name__)

LEVELS = ("cluster", "individual")
KINDS = ("mahalanobis", "weighted_euclidean", "general_quadratic")

DEFAULT_MAX_DRAWS = 1_000_000
BATCH = 4096
FIRST_BATCH = 32


class MaxDrawsExceeded(RuntimeError):
    """No acceptable assignment within the draw budget."""

    def __init__(self, draws, best_statistic, threshold):
        super().__init__(
            f"no assignment accepted after {draws} draws "
            f"(best statistic {best_statistic:.6g}, threshold {threshold:.6g})"
        )
        self.draws = draws
        self.best_statistic = best_statistic
        self.threshold = threshold


class InfeasibleRatesError(ValueError):
    pass


@dataclass(frozen=True)
class Assignment:
    z: np.ndarray

    @property
    def m1(self):
        return int(self.z.sum())

    @property
    def m0(self):
        return int(self.z.size - self.z.sum())


@dataclass(frozen=True)
class Tier:
    columns: tuple[int, ...]
    threshold: float | None = None
    target_rate: float | None = None


@dataclass(frozen=True)
class BalanceCriterion:
    """Quadratic-form acceptance rule ``M d^T A d <= a`` on the covariate mean difference ``d``.

    ``columns`` selects design covariates (of ``c`` for the cluster level, of
    ``x`` for the individual level); ``None`` means all. For ``mahalanobis``
    the matrix is derived from the covariates; for ``weighted_euclidean``
    ``matrix`` holds the diagonal weights; for ``general_quadratic`` it is a
    full SPD matrix. When ``tiers`` is given, each tier is a separate
    Mahalanobis rule on its columns and all must pass.
    """

    level: str = "cluster"
    kind: str = "mahalanobis"
    columns: tuple[int, ...] | None = None
    matrix: np.ndarray | None = None
    threshold: float | None = None
    target_rate: float | None = None
    tiers: tuple[Tier, ...] = ()

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.threshold is not None and self.threshold < 0:
            raise ValueError("threshold must be non-negative")
        if self.target_rate is not None and not 0 < self.target_rate < 1:
            raise ValueError("target_rate must lie in (0, 1)")
        if self.kind == "weighted_euclidean":
            w = np.asarray(self.matrix, dtype=float)
            if w.ndim == 2:
                if not np.allclose(w, np.diag(np.diag(w))):
                    raise ValueError("weighted_euclidean needs a diagonal matrix")
                w = np.diag(w)
            if w.ndim != 1 or np.any(w <= 0):
                raise ValueError("weighted_euclidean weights must be positive")
            object.__setattr__(self, "matrix", w)
        elif self.kind == "general_quadratic":
            a = np.atleast_2d(np.asarray(self.matrix, dtype=float))
            if a.shape[0] != a.shape[1] or not np.allclose(a, a.T):
                raise ValueError("general_quadratic matrix must be symmetric")
            if sym_eig(a)[0].min() <= 0:
                raise ValueError("general_quadratic matrix must be positive definite")
            object.__setattr__(self, "matrix", a)
        if self.tiers and self.kind != "mahalanobis":
            raise ValueError("tiers are Mahalanobis rules; use kind='mahalanobis'")

    def quad_matrix(self):
        if self.kind == "weighted_euclidean":
            return np.diag(self.matrix)
        return self.matrix

    def with_threshold(self, a):
        return replace(self, threshold=float(a))

    # --- JSON ----------------------------------------------------------------

    def to_dict(self):
        out = {"level": self.level, "kind": self.kind}
        if self.columns is not None:
            out["columns"] = list(self.columns)
        if self.kind == "weighted_euclidean":
            out["weights"] = np.asarray(self.matrix).tolist()
        elif self.kind == "general_quadratic":
            out["matrix"] = np.asarray(self.matrix).tolist()
        if self.threshold is not None:
            out["threshold"] = "inf" if math.isinf(self.threshold) else self.threshold
        if self.target_rate is not None:
            out["target_rate"] = self.target_rate
        if self.tiers:
            out["tiers"] = [
                {k: v for k, v in (("columns", list(t.columns)), ("threshold", t.threshold),
                                   ("target_rate", t.target_rate)) if v is not None}
                for t in self.tiers
            ]
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {"level", "kind", "columns", "weights", "matrix", "threshold",
                            "target_rate", "tiers"}
        if unknown:
            raise ValueError(f"unknown criterion fields: {sorted(unknown)}")
        matrix = d.get("weights", d.get("matrix"))
        tiers = tuple(
            Tier(tuple(t["columns"]), t.get("threshold"), t.get("target_rate"))
            for t in d.get("tiers", ())
        )
        threshold = d.get("threshold")
        if threshold is not None:
            threshold = math.inf if threshold in ("inf", "Infinity") else float(threshold)
        return cls(
            level=d.get("level", "cluster"),
            kind=d.get("kind", "mahalanobis"),
            columns=None if d.get("columns") is None else tuple(d["columns"]),
            matrix=None if matrix is None else np.asarray(matrix, dtype=float),
            threshold=threshold,
            target_rate=d.get("target_rate"),
            tiers=tiers,
        )

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class DesignSpec:
    criterion: BalanceCriterion | None
    m1: int
    max_draws: int = DEFAULT_MAX_DRAWS
    seed: int | None = None

    def __post_init__(self):
        if self.max_draws < 1:
            raise ValueError("max_draws must be >= 1")


# ---------------------------------------------------------------------------
# complete randomization


def draw_batch(m, m1, size, rng):
    """``size`` independent complete randomizations as an int8 array ``(size, m)``."""
    if not 0 < m1 < m:
        raise ValueError(f"need 0 < M1 < M, got M1={m1}, M={m}")
    keys = rng.random((size, m))
    treated = np.argpartition(keys, m1 - 1, axis=1)[:, :m1]
    z = np.zeros((size, m), dtype=np.int8)
    np.put_along_axis(z, treated, 1, axis=1)
    return z


def draw_complete(m, m1, rng):
    """Uniform draw over all ``C(M, M1)`` assignments."""
    return Assignment(draw_batch(m, m1, 1, rng)[0])


# ---------------------------------------------------------------------------
# imbalance measures


def design_matrix(exp, level, columns=None):
    """Centered design covariates: ``C`` (``M x K``) or raw cluster sums of centered ``x``."""
    if level == "cluster":
        if exp.c is None:
            raise ValueError("experiment has no cluster-level covariates")
        s = exp.c - exp.c.mean(axis=0)
    else:
        if exp.x is None:
            raise ValueError("experiment has no individual-level covariates")
        s = exp.cluster_sums(exp.x - exp.x.mean(axis=0))
    if columns is not None:
        s = s[:, list(columns)]
    return s


def covariate_diff(exp, z, level, columns=None):
    """Difference in covariate means between arms.

    Cluster level: Horvitz-Thompson contrast of ``c`` over clusters.
    Individual level: difference of unit-level means of ``x`` using the
    realized arm sizes ``N1`` and ``N0``.
    """
    z = np.asarray(z.z if isinstance(z, Assignment) else z, dtype=float)
    if level == "cluster":
        s = design_matrix(exp, level, columns)
        m1 = z.sum()
        m0 = z.size - m1
        if m1 == 0 or m0 == 0:
            raise ValueError("an arm has no clusters")
        return z @ s / m1 - (1 - z) @ s / m0
    x = exp.x - exp.x.mean(axis=0)
    if columns is not None:
        x = x[:, list(columns)]
    zu = z[exp.cluster]
    n1 = zu.sum()
    n0 = zu.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("an arm has no units")
    return zu @ x / n1 - (1 - zu) @ x / n0


class PreparedCriterion:
    """A criterion bound to one experiment and arm size, with covariances cached.

    ``cov`` is the asymptotic covariance of ``M^{1/2} d`` under complete
    randomization, ``(e1 e0)^{-1} cov_f(S)`` with ``S`` the cluster-level
    design covariates or scaled totals ``X~``.
    """

    def __init__(self, exp, crit, m1):
        self.crit = crit
        self.level = crit.level
        self.M = exp.M
        self.m1 = int(m1)
        if not 0 < self.m1 < self.M:
            raise ValueError("need 0 < M1 < M")
        self.e1 = self.m1 / self.M
        self.e0 = 1 - self.e1
        s = design_matrix(exp, crit.level, crit.columns)
        self.S = s
        self.K = s.shape[1]
        if self.level == "cluster":
            self.sizes = None
            cov_f = finite_pop_cov(s)
        else:
            self.sizes = exp.sizes.astype(float)
            self.N = float(exp.N)
            cov_f = finite_pop_cov(s * self.M / self.N)
        self.cov_f = cov_f
        self.cov = cov_f / (self.e1 * self.e0)
        if crit.tiers:
            self._init_tiers(crit)
            return
        if crit.kind == "mahalanobis":
            try:
                self.A = spd_inverse(self.cov, "design covariate covariance")
            except RankDeficiencyError as err:
                raise RankDeficiencyError(
                    "design covariate covariance is singular; orthogonalize the covariates "
                    "or drop a collinear column"
                ) from err
        else:
            self.A = np.asarray(crit.quad_matrix(), dtype=float)
            if self.A.shape != (self.K, self.K):
                raise ValueError(f"criterion matrix must be {self.K} x {self.K}")
        self.tiers = None
        self.threshold = crit.threshold
        self._blocks = None

    def _init_tiers(self, crit):
        cols = sorted(c for t in crit.tiers for c in t.columns)
        if cols != list(range(self.K)):
            raise ValueError("tier columns must partition the design covariates")
        self.tiers = crit.tiers
        self._blocks = []
        thresholds = []
        for t in crit.tiers:
            idx = list(t.columns)
            sub = self.cov[np.ix_(idx, idx)]
            self._blocks.append((idx, spd_inverse(sub, "tier covariance")))
            if t.threshold is not None:
                thresholds.append(t.threshold)
            elif t.target_rate is not None:
                thresholds.append(chisq_quantile(t.target_rate, len(idx)))
            else:
                thresholds.append(None)
        self.tier_thresholds = thresholds
        self.A = None
        self.threshold = None

    # scaled imbalance M^{1/2} d for a batch of assignments
    def scaled_diffs(self, zb):
        zb = np.atleast_2d(zb).astype(float)
        t1 = zb @ self.S
        if self.level == "cluster":
            # centered S: sum over control = -sum over treated
            d = t1 * (1.0 / self.m1 + 1.0 / (self.M - self.m1))
        else:
            n1 = zb @ self.sizes
            d = t1 * (1.0 / n1 + 1.0 / (self.N - n1))[:, None]
        return d * math.sqrt(self.M)

    def statistics(self, zb):
        """Balance statistic(s): shape ``(B,)``, or ``(B, L)`` for tiers."""
        d = self.scaled_diffs(zb)
        if self._blocks is not None:
            return np.column_stack(
                [np.einsum("ij,jk,ik->i", d[:, idx], ainv, d[:, idx]) for idx, ainv in self._blocks]
            )
        return np.einsum("ij,jk,ik->i", d, self.A, d)

    def accepts(self, stats):
        if self._blocks is not None:
            if any(t is None for t in self.tier_thresholds):
                raise ValueError("tier thresholds not set")
            return np.all(stats <= np.asarray(self.tier_thresholds), axis=1)
        if self.threshold is None:
            raise ValueError("threshold not set; calibrate first")
        return stats <= self.threshold

    def eigenvalues(self):
        """Eigenvalues of ``V^{1/2} A V^{1/2}`` governing the limiting statistic."""
        root = sym_sqrt(self.cov)
        return sym_eig(root @ self.A @ root)[0]

    def constraint_matrix(self):
        root = sym_sqrt(self.cov)
        return root @ self.A @ root


def balance_statistic(exp, z, crit, m1=None):
    z = np.asarray(z.z if isinstance(z, Assignment) else z)
    prep = PreparedCriterion(exp, crit, int(z.sum()) if m1 is None else m1)
    return prep.statistics(z[None, :])[0]


# ---------------------------------------------------------------------------
# thresholds


def direction_scales(lambdas, n_draws, rng, chunk=200_000):
    """``sum_k lambda_k u_k^2`` for ``n_draws`` directions ``u`` uniform on the sphere."""
    lambdas = np.asarray(lambdas, dtype=float)
    out = np.empty(n_draws)
    for i in range(0, n_draws, chunk):
        g = rng.standard_normal((min(chunk, n_draws - i), lambdas.size))
        out[i:i + g.shape[0]] = (g**2 @ lambdas) / np.einsum("ij,ij->i", g, g)
    return out


def quadratic_form_cdf(a, k, scales):
    """``P(sum_k lambda_k eta_k^2 <= a)`` estimated by conditioning on the direction of ``eta``.

    With ``eta = r u``, ``r^2 ~ chi2_K`` independent of ``u`` uniform on the
    sphere, so the CDF is ``E_u[F_K(a / sum_k lambda_k u_k^2)]``.
    """
    return float(np.mean(special.gammainc(k / 2.0, a / (2.0 * scales))))


def calibrate_threshold(crit, alpha, cov=None, rng=None, n_draws=2_000_000, rtol=1e-10):
    """Threshold ``a`` giving asymptotic acceptance rate ``alpha``.

    Mahalanobis rules use the chi-square quantile. General quadratic forms
    solve ``P(sum lambda_k eta_k^2 <= a) = alpha`` by bisection against a
    seeded Monte Carlo estimate of that CDF, where ``lambda`` are the
    eigenvalues of ``V^{1/2} A V^{1/2}``.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if isinstance(crit, PreparedCriterion):
        prep = crit
        crit, cov, matrix = prep.crit, prep.cov, prep.A
    else:
        prep = None
        matrix = None if crit.kind == "mahalanobis" else crit.quad_matrix()
    if crit.tiers:
        raise ValueError("calibrate tiers with tier target rates")
    if crit.kind == "mahalanobis":
        k = prep.K if prep is not None else np.atleast_2d(cov).shape[0]
        return chisq_quantile(alpha, k)
    if cov is None:
        raise ValueError("general quadratic calibration needs the imbalance covariance")
    root = sym_sqrt(cov)
    lambdas = sym_eig(root @ np.atleast_2d(matrix) @ root)[0]
    if lambdas.min() <= 0:
        raise ValueError("quadratic form has non-positive eigenvalues")
    return calibrate_from_eigenvalues(lambdas, alpha, rng, n_draws, rtol)


def calibrate_from_eigenvalues(lambdas, alpha, rng=None, n_draws=2_000_000, rtol=1e-10):
    lambdas = np.asarray(lambdas, dtype=float)
    rng = np.random.default_rng(0) if rng is None else rng
    k = lambdas.size
    # bracket: the CDF lies between the chi-square CDFs scaled by the extreme eigenvalues
    lo = lambdas.min() * chisq_quantile(alpha, k)
    hi = lambdas.max() * chisq_quantile(alpha, k)
    if np.isclose(lo, hi, rtol=1e-14):
        return float(lo)
    scales = direction_scales(lambdas, n_draws, rng)
    return float(optimize.brentq(
        lambda a: quadratic_form_cdf(a, k, scales) - alpha, lo * (1 - 1e-12), hi * (1 + 1e-12),
        rtol=rtol,
    ))


def empirical_threshold(prep, alpha, rng, draws=100_000):
    """Empirical ``alpha``-quantile of the statistic over ``draws`` complete randomizations."""
    stats = np.concatenate([
        prep.statistics(draw_batch(prep.M, prep.m1, min(BATCH, draws - i), rng))
        for i in range(0, draws, BATCH)
    ])
    return float(np.quantile(stats, alpha))


def prepare(exp, crit, m1, cov_rng=None):
    """Bind a criterion to an experiment, calibrating thresholds from target rates."""
    prep = PreparedCriterion(exp, crit, m1)
    if prep.tiers is None and prep.threshold is None:
        if crit.target_rate is None:
            raise ValueError("criterion needs a threshold or a target_rate")
        prep.threshold = calibrate_threshold(prep, crit.target_rate, rng=cov_rng)
    return prep


# ---------------------------------------------------------------------------
# rerandomization


def rerandomize(exp, spec, rng, prepared=None):
    """Draw complete randomizations until one satisfies the criterion.

    Returns ``(assignment, draws_used, statistic)``. Raises
    :class:`MaxDrawsExceeded` when the budget runs out.
    """
    m = exp.M
    if spec.criterion is None:
        return draw_complete(m, spec.m1, rng), 1, None
    prep = prepared if prepared is not None else prepare(exp, spec.criterion, spec.m1)
    if prep.tiers is None and math.isinf(prep.threshold):
        z = draw_complete(m, spec.m1, rng)
        return z, 1, prep.statistics(z.z[None, :])[0]
    used = 0
    best = math.inf
    batch = FIRST_BATCH
    while used < spec.max_draws:
        # batches double so high acceptance rates stay cheap
        size = min(batch, spec.max_draws - used)
        batch = min(2 * batch, BATCH)
        zb = draw_batch(m, spec.m1, size, rng)
        stats = prep.statistics(zb)
        ok = prep.accepts(stats)
        if ok.any():
            i = int(np.argmax(ok))
            return Assignment(zb[i]), used + i + 1, stats[i]
        flat = stats.max(axis=1) if stats.ndim == 2 else stats
        best = min(best, float(flat.min()))
        used += size
    thr = prep.threshold if prep.tiers is None else max(prep.tier_thresholds)
    raise MaxDrawsExceeded(used, best, thr)


# ---------------------------------------------------------------------------
# weights and tier rates


def optimal_weight_matrix(v_ts, v_ss):
    """Diagonal weights ``w_k = (V_ts V_ss^{-1} e_k)^2`` normalized to unit product."""
    coef = np.linalg.solve(np.atleast_2d(v_ss), np.asarray(v_ts, dtype=float).reshape(-1))
    if np.any(np.abs(coef) <= 1e-14 * max(np.abs(coef).max(), 1e-300)):
        raise ValueError(
            "optimal weights need every coordinate of V_ts V_ss^{-1} to be nonzero"
        )
    w = coef**2
    w = w / np.exp(np.mean(np.log(w)))
    return np.diag(w)


def optimal_tier_rates(r2, k_l, alpha):
    """Per-tier acceptance rates minimizing the tier variance expansion.

    Rates have the form ``(c0 R2_l p_{K_l} / K_l)^{-K_l/2}`` with ``c0`` fixed
    by ``prod_l rate_l = alpha``.
    """
    from .theory import p_k

    r2 = np.asarray(r2, dtype=float)
    k_l = np.asarray(k_l, dtype=int)
    if r2.shape != k_l.shape:
        raise ValueError("r2 and k_l must have equal length")
    if np.any(r2 <= 0):
        raise ValueError("tier R^2 values must be positive")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    b = np.log(r2 * np.array([p_k(int(k)) for k in k_l]) / k_l)
    # log rate_l = -(K_l/2)(log c0 + b_l); the product constraint is linear in log c0
    total_k = k_l.sum()
    log_c0 = -(2.0 / total_k) * (math.log(alpha) + 0.5 * np.sum(k_l * b))
    log_rates = -(k_l / 2.0) * (log_c0 + b)
    if np.any(log_rates >= 0):
        raise InfeasibleRatesError(
            "no constant c0 keeps every tier rate below one for these R^2 values"
        )
    return np.exp(log_rates)
