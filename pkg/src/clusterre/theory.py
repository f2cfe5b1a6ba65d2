"""Closed-form design comparisons from population moments (oracle mode).

All functions here need potential outcomes or supplied moments; none of them
look at observed data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fpstats import (
    finite_pop_cov,
    finite_pop_var,
    gram_schmidt_upper,
    spd_inverse,
)


def p_k(k):
    """Dimension constant ``2 pi/(K+2) * {2 pi^{K/2} / (K Gamma(K/2))}^{-2/K}``."""
    if int(k) != k or k < 1:
        raise ValueError(f"K must be a positive integer, got {k}")
    k = int(k)
    log_ball = math.log(2.0) + (k / 2.0) * math.log(math.pi) - math.log(k) - math.lgamma(k / 2.0)
    return 2.0 * math.pi / (k + 2.0) * math.exp(-2.0 / k * log_ball)


def nu(v_ts, v_ss, a):
    """Efficiency factor of the quadratic form ``A``; equals one at ``A = V_ss^{-1}``."""
    v_ts = np.asarray(v_ts, dtype=float).reshape(-1)
    v_ss = np.atleast_2d(np.asarray(v_ss, dtype=float))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    k = v_ts.size
    b = np.linalg.solve(v_ss, v_ts)
    denom = v_ts @ b
    if denom <= 0:
        raise ValueError("V_ts V_ss^{-1} V_st must be positive (R^2 = 0 direction)")
    _, logdet_a = np.linalg.slogdet(a)
    _, logdet_v = np.linalg.slogdet(v_ss)
    num = b @ np.linalg.solve(a, b) * math.exp((logdet_a + logdet_v) / k)
    return float(num / denom)


def leading_variance(v_tt, r2, k, alpha, nu_value=1.0):
    """``V {(1 - R^2) + R^2 p_K nu alpha^{2/K}}``."""
    return v_tt * ((1 - r2) + r2 * p_k(k) * nu_value * alpha ** (2.0 / k))


def orthogonal_optimal_expansion(r2_k, alpha):
    """Leading correction ``K (prod R2_k)^{1/K} p_K alpha^{2/K}`` of the optimal weighted rule."""
    r2_k = np.asarray(r2_k, dtype=float).reshape(-1)
    if np.any(r2_k <= 0):
        raise ValueError("every per-covariate R^2 must be positive")
    k = r2_k.size
    geo = math.exp(np.mean(np.log(r2_k)))
    return k * geo * p_k(k) * alpha ** (2.0 / k)


def tier_expansion(r2_tiers, k_l, alpha_l):
    """Leading correction ``sum_l R2_[l] p_{K_l} alpha_[l]^{2/K_l}`` of tiered Mahalanobis rules."""
    r2_tiers = np.asarray(r2_tiers, dtype=float).reshape(-1)
    k_l = np.asarray(k_l, dtype=int).reshape(-1)
    alpha_l = np.asarray(alpha_l, dtype=float).reshape(-1)
    if not r2_tiers.size == k_l.size == alpha_l.size:
        raise ValueError("r2, K_l and rates must have equal length")
    if np.any((alpha_l <= 0) | (alpha_l >= 1)):
        raise ValueError("tier rates must lie in (0, 1)")
    return float(sum(r * p_k(int(k)) * a ** (2.0 / k) for r, k, a in zip(r2_tiers, k_l, alpha_l)))


# ---------------------------------------------------------------------------
# population moments


@dataclass
class Moments:
    """Asymptotic joint covariance of ``M^{1/2}(tau_hat - tau, d)`` under complete randomization."""

    v_tt: float
    v_ts: np.ndarray
    v_ss: np.ndarray
    e1: float
    # the combination e1 * y(0) + e0 * y(1) whose projection on S drives R^2
    combo: np.ndarray = field(repr=False)
    s: np.ndarray = field(repr=False)

    @property
    def K(self):
        return self.v_ts.size

    @property
    def r2(self):
        return float(self.v_ts @ np.linalg.solve(self.v_ss, self.v_ts) / self.v_tt)

    def r2_regression(self):
        """R^2 through the residual variance of regressing the combination on ``S``."""
        e1, e0 = self.e1, 1 - self.e1
        design = np.column_stack([np.ones(len(self.combo)), self.s])
        coef, *_ = np.linalg.lstsq(design, self.combo, rcond=None)
        resid = self.combo - design @ coef
        return 1.0 - finite_pop_var(resid) / (e1 * e0 * self.v_tt)

    def residual_variance(self):
        """``V (1 - R^2)`` via the regression characterization."""
        return self.v_tt * (1.0 - self.r2_regression())

    def per_covariate_r2(self):
        d = np.diag(self.v_ss)
        return self.v_ts**2 / (self.v_tt * d)


def _adjust(outcomes, covariates):
    """Residualize each potential-outcome column on covariates (population least squares)."""
    if covariates is None or covariates.shape[1] == 0:
        return outcomes
    design = np.column_stack([np.ones(covariates.shape[0]), covariates - covariates.mean(axis=0)])
    out = np.empty_like(outcomes)
    for z in range(2):
        coef, *_ = np.linalg.lstsq(design, outcomes[:, z], rcond=None)
        out[:, z] = outcomes[:, z] - design[:, 1:] @ coef[1:]
    return out


def population_moments(exp, level, m1, design_s=None, adjust_cols=None, transform=None):
    """Moments for the HT estimator with cluster covariates (``level='cluster'``)
    or the Hajek estimator with individual covariates (``level='individual'``).

    ``design_s`` overrides the design covariates (``M x K`` cluster-level
    matrix, or scaled totals at the individual level). ``adjust_cols``
    residualizes the outcomes on those analysis covariates first (``c``
    columns for HT, ``x`` columns for Hajek). ``transform`` is an optional
    ``K x K`` matrix applied on the right of the design covariates.
    """
    if exp.y_pot is None:
        raise ValueError("oracle moments need potential outcomes")
    m = exp.M
    e1 = m1 / m
    e0 = 1 - e1
    if level == "cluster":
        y = np.column_stack([exp.scaled_totals(exp.y_pot[:, 0]), exp.scaled_totals(exp.y_pot[:, 1])])
        if adjust_cols is not None:
            y = _adjust(y, exp.c[:, list(adjust_cols)])
        s = exp.c if design_s is None else design_s
    elif level == "individual":
        eps = exp.y_pot - exp.y_pot.mean(axis=0)
        if adjust_cols is not None:
            eps = _adjust(eps, exp.x[:, list(adjust_cols)])
        y = np.column_stack([exp.scaled_totals(eps[:, 0]), exp.scaled_totals(eps[:, 1])])
        s = exp.x_tilde() if design_s is None else design_s
    else:
        raise ValueError(f"unknown level {level!r}")
    s = np.asarray(s, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if transform is not None:
        s = s @ transform
    v_tt = (finite_pop_var(y[:, 1]) / e1 + finite_pop_var(y[:, 0]) / e0
            - finite_pop_var(y[:, 1] - y[:, 0]))
    v_ts = (finite_pop_cov(y[:, 1], s) / e1 + finite_pop_cov(y[:, 0], s) / e0).reshape(-1)
    v_ss = finite_pop_cov(s) / (e1 * e0)
    combo = e1 * y[:, 0] + e0 * y[:, 1]
    return Moments(v_tt=float(v_tt), v_ts=v_ts, v_ss=v_ss, e1=e1, combo=combo, s=s)


# ---------------------------------------------------------------------------
# design comparison


@dataclass
class EfficiencySummary:
    name: str
    level: str
    v_tt: float
    r2: float
    nu: float
    K: int
    leading_variance: float
    per_covariate_r2: list | None = None
    tier_r2: list | None = None
    tier_rates: list | None = None

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}


def _summary_for(name, mom, level, kind, alpha, weights=None, tiers=None, rates=None):
    from .design import optimal_tier_rates, optimal_weight_matrix

    k = mom.K
    r2 = mom.r2
    if tiers is not None:
        # tiered rules act on orthogonalized covariates, taken in tier order
        order = [c for t in tiers for c in t]
        if sorted(order) != list(range(k)):
            raise ValueError("tiers must partition the design covariates")
        k_l = [len(t) for t in tiers]
        r2_k = mom.per_covariate_r2()
        bounds = np.cumsum([0] + k_l)
        r2_l = np.array([r2_k[bounds[i]:bounds[i + 1]].sum() for i in range(len(k_l))])
        if rates is None or rates == "optimal":
            rates = optimal_tier_rates(r2_l, k_l, alpha)
        rates = np.asarray(rates, dtype=float)
        corr = tier_expansion(r2_l, k_l, rates)
        return EfficiencySummary(
            name=name, level=level, v_tt=mom.v_tt, r2=r2, nu=float("nan"), K=k,
            leading_variance=mom.v_tt * ((1 - r2) + corr),
            per_covariate_r2=r2_k.tolist(), tier_r2=r2_l.tolist(), tier_rates=rates.tolist(),
        )
    if kind == "mahalanobis":
        a = spd_inverse(mom.v_ss)
    elif kind == "optimal_weighted":
        a = optimal_weight_matrix(mom.v_ts, mom.v_ss)
    elif kind == "weighted_euclidean":
        a = np.diag(np.asarray(weights, dtype=float))
    elif kind == "general_quadratic":
        a = np.asarray(weights, dtype=float)
    else:
        raise ValueError(f"unknown criterion kind {kind!r}")
    nu_value = nu(mom.v_ts, mom.v_ss, a)
    return EfficiencySummary(
        name=name, level=level, v_tt=mom.v_tt, r2=r2, nu=nu_value, K=k,
        leading_variance=leading_variance(mom.v_tt, r2, k, alpha, nu_value),
        per_covariate_r2=mom.per_covariate_r2().tolist(),
    )


def compare_designs(exp, criteria, alpha, m1=None):
    """Leading asymptotic variances of several criteria at acceptance rate ``alpha``.

    Each criterion is a dict with ``name``, ``level`` (cluster/individual),
    ``kind`` (mahalanobis, optimal_weighted, weighted_euclidean,
    general_quadratic) and optionally ``columns``, ``weights``,
    ``orthogonalize``, ``tiers`` (list of column lists) and ``rates``.
    """
    if exp.y_pot is None:
        raise ValueError("compare_designs needs potential outcomes")
    m1 = exp.M // 2 if m1 is None else m1
    rows = []
    for spec in criteria:
        level = spec.get("level", "cluster")
        base = exp.c if level == "cluster" else exp.x_tilde()
        if base is None:
            raise ValueError(f"criterion {spec.get('name')} needs {level}-level covariates")
        cols = spec.get("columns")
        s = base if cols is None else base[:, list(cols)]
        tiers = spec.get("tiers")
        transform = None
        if tiers is not None or spec.get("orthogonalize"):
            order = [c for t in tiers for c in t] if tiers is not None else list(range(s.shape[1]))
            s = s[:, order]
            transform = gram_schmidt_upper(s).U
            if tiers is not None:
                sizes = [len(t) for t in tiers]
                bounds = np.cumsum([0] + sizes)
                tiers = [list(range(bounds[i], bounds[i + 1])) for i in range(len(sizes))]
        mom = population_moments(exp, level, m1, design_s=s, transform=transform)
        rows.append(_summary_for(spec.get("name", spec.get("kind", "criterion")), mom, level,
                                 spec.get("kind", "mahalanobis"), alpha, spec.get("weights"),
                                 tiers, spec.get("rates")))
    return rows


def individual_dominance_check(exp, m1=None):
    """Compare ``V_haj (1 - R2_x)`` with ``V_ht (1 - R2_c)`` for ``c = (n, x~)``.

    Returns ``(haj_residual, ht_residual, holds)``; both sides come from the
    regression-residual characterization.
    """
    from .fpstats import size_and_totals

    m1 = exp.M // 2 if m1 is None else m1
    haj = population_moments(exp, "individual", m1)
    ht = population_moments(exp, "cluster", m1, design_s=size_and_totals(exp))
    left = haj.residual_variance()
    right = ht.residual_variance()
    slack = 1e-10 * max(abs(left), abs(right), 1.0)
    return left, right, bool(left >= right - slack)


def two_covariate_weight_ratio(delta):
    """``nu(A_opt) / nu(V^{-1})`` for ``V_ss = [[4, delta], [delta, 4]]``, ``V_ts = (1, 1)``."""
    from .design import optimal_weight_matrix

    v_ss = np.array([[4.0, delta], [delta, 4.0]])
    v_ts = np.array([1.0, 1.0])
    a_opt = optimal_weight_matrix(v_ts, v_ss)
    return nu(v_ts, v_ss, a_opt) / nu(v_ts, v_ss, np.linalg.inv(v_ss))
