"""Normal plus truncated-normal limit laws and the intervals built from them."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np
from scipy import special

from .estimate import fit_ols_interacted
from .fpstats import finite_pop_cov, spd_inverse, sym_eig, sym_inv_sqrt, sym_sqrt

log = logging.getLogger(__name__)

MIN_MC = 10_000
DEFAULT_MC = 100_000
BURN_IN = 1000
MAX_CHAINS = 10_000


# ---------------------------------------------------------------------------
# samplers


def _truncnorm_symmetric(bound, rng):
    """Standard normal restricted to ``[-bound, bound]`` (elementwise) by inverse CDF."""
    v = rng.uniform(-1.0, 1.0, size=np.shape(bound))
    mass = special.erf(bound / math.sqrt(2.0))
    # keep away from erfinv(+-1) = inf
    w = np.clip(v * mass, -1 + 1e-16, 1 - 1e-16)
    return math.sqrt(2.0) * special.erfinv(w)


def _is_scalar_identity(a):
    s = a[0, 0]
    return s > 0 and np.allclose(a, s * np.eye(a.shape[0]), rtol=1e-12, atol=0)


def sample_radial(k, a, count, rng):
    """Exact draws of ``eta ~ N(0, I_K)`` given ``|eta|^2 <= a``."""
    g = rng.standard_normal((count, k))
    u = g / np.linalg.norm(g, axis=1, keepdims=True)
    top = special.gammainc(k / 2.0, a / 2.0)
    r2 = 2.0 * special.gammaincinv(k / 2.0, rng.uniform(0.0, 1.0, count) * top)
    return u * np.sqrt(r2)[:, None]


def sample_gibbs(lambdas, a, count, rng, burn_in=BURN_IN, chains=None):
    """Gibbs draws of ``zeta ~ N(0, I)`` given ``sum_k lambda_k zeta_k^2 <= a``.

    Many chains run in parallel from the origin; every coordinate update is
    a symmetric truncated normal.
    """
    lambdas = np.asarray(lambdas, dtype=float)
    k = lambdas.size
    chains = min(count, MAX_CHAINS) if chains is None else chains
    per_chain = -(-count // chains)
    zeta = np.zeros((chains, k))
    used = np.zeros(chains)  # running sum_k lambda_k zeta_k^2
    out = np.empty((chains * per_chain, k))
    for sweep in range(burn_in + per_chain):
        for j in range(k):
            used -= lambdas[j] * zeta[:, j] ** 2
            room = np.maximum(a - used, 0.0)
            zeta[:, j] = _truncnorm_symmetric(np.sqrt(room / lambdas[j]), rng)
            used += lambdas[j] * zeta[:, j] ** 2
        if sweep >= burn_in:
            s = sweep - burn_in
            out[s * chains:(s + 1) * chains] = zeta
    return out[:count]


def sample_constrained_gaussian(a_mat, a, count, rng, burn_in=BURN_IN):
    """Draws of ``eta ~ N(0, I_K)`` conditioned on ``eta^T A eta <= a``."""
    if not a > 0:
        raise ValueError("threshold must be positive")
    a_mat = np.atleast_2d(np.asarray(a_mat, dtype=float))
    k = a_mat.shape[0]
    if _is_scalar_identity(a_mat):
        return sample_radial(k, a / a_mat[0, 0], count, rng)
    lambdas, q = sym_eig(a_mat)
    if lambdas.min() <= 0:
        raise ValueError("constraint matrix must be positive definite")
    zeta = sample_gibbs(lambdas, a, count, rng, burn_in)
    return zeta @ q.T


def sample_L(k, a, count, rng):
    """Draws of ``L_{K,a}``: first coordinate of a standard normal given ``|D|^2 <= a``."""
    return sample_constrained_gaussian(np.eye(k), a, count, rng)[:, 0]


# ---------------------------------------------------------------------------
# limit law


@dataclass
class LawPool:
    """Common random numbers for repeated quantile evaluations of one constraint."""

    eps: np.ndarray
    eta: np.ndarray

    @classmethod
    def draw(cls, a_mat, a, mc_size, rng):
        if mc_size < MIN_MC:
            raise ValueError(f"mc_size must be at least {MIN_MC}")
        eta = sample_constrained_gaussian(a_mat, a, mc_size, rng)
        return cls(eps=rng.standard_normal(mc_size), eta=eta)


@dataclass
class AsymptoticLaw:
    """``V^{1/2} {(1 - R^2)^{1/2} eps + R mu^T eta | eta^T A eta <= a}``."""

    V: float
    r2: float
    mu: np.ndarray
    A: np.ndarray
    a: float

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(-1)
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if self.V < 0:
            raise ValueError("V must be non-negative")
        if not 0 <= self.r2 <= 1:
            raise ValueError("R^2 must lie in [0, 1]")
        if abs(np.linalg.norm(self.mu) - 1) > 1e-10:
            raise ValueError("mu must have unit norm")
        if self.A.shape != (self.mu.size, self.mu.size):
            raise ValueError("A must be K x K with K = len(mu)")

    @property
    def K(self):
        return self.mu.size

    def pool(self, mc_size, rng):
        return LawPool.draw(self.A, self.a, mc_size, rng)

    def draws(self, pool):
        return math.sqrt(self.V) * (math.sqrt(1 - self.r2) * pool.eps
                                    + math.sqrt(self.r2) * (pool.eta @ self.mu))

    def sample(self, count, rng):
        return self.draws(LawPool.draw(self.A, self.a, count, rng))


def law_quantile(law, zeta, mc_size=DEFAULT_MC, rng=None, pool=None):
    """Monte Carlo quantile(s) of the law; ``pool`` reuses earlier draws."""
    z = np.asarray(zeta, dtype=float)
    if np.any((z <= 0) | (z >= 1)):
        raise ValueError("quantile level must lie in (0, 1)")
    if pool is None:
        if rng is None:
            raise ValueError("need an rng or a pool")
        pool = law.pool(mc_size, rng)
    elif pool.eps.size < MIN_MC:
        raise ValueError(f"mc_size must be at least {MIN_MC}")
    q = np.quantile(law.draws(pool), z)
    return float(q) if q.ndim == 0 else q


# ---------------------------------------------------------------------------
# improved variance and R^2 estimates


@dataclass
class ImprovedEstimates:
    v_hat: float
    r2_hat: float
    mu_hat: np.ndarray
    v_ss: np.ndarray  # asymptotic covariance of the design imbalance, (e1 e0)^{-1} cov_f(S)
    components: dict = field(default_factory=dict, repr=False)
    v_clipped: bool = False
    r2_clipped: bool = False


def _arm_cov(a, b, mask):
    return finite_pop_cov(a[mask], b[mask])


def _improved(resid, design, diff_basis, z):
    """Shared arithmetic of the improved estimators.

    ``resid`` holds residual scaled totals (``D`` or ``U~``), ``design`` the
    design covariates (``C`` or ``X~``), ``diff_basis`` the covariates
    used for the lower bound of the variance of the individual effects.
    """
    z = np.asarray(z).astype(bool)
    m = z.size
    e1 = z.sum() / m
    e0 = 1 - e1
    arms = (~z, z)
    var_z = [finite_pop_cov(resid[mask])[0, 0] for mask in arms]
    # difference term against the full-population covariance of the basis
    cb = [_arm_cov(resid, diff_basis, mask).reshape(-1) for mask in arms]
    delta = cb[1] - cb[0]
    diff_proj = float(delta @ spd_inverse(finite_pop_cov(diff_basis), "cov_f(G)") @ delta)
    v_hat = var_z[1] / e1 + var_z[0] / e0 - diff_proj
    # R^2 numerator: arm-wise projections on the design covariates
    cs = [_arm_cov(resid, design, mask).reshape(-1) for mask in arms]
    proj = [float(cs[t] @ spd_inverse(finite_pop_cov(design[arms[t]]), "arm-wise cov_f(S)")
                  @ cs[t]) for t in (0, 1)]
    ds = cs[1] - cs[0]
    cov_s = finite_pop_cov(design)
    diff_s = float(ds @ spd_inverse(cov_s, "cov_f(S)") @ ds)
    numer = proj[1] / e1 + proj[0] / e0 - diff_s
    v_clipped = v_hat < 0
    v_hat = max(v_hat, 0.0)
    r2 = numer / v_hat if v_hat > 0 else 0.0
    r2_clipped = not 0 <= r2 <= 1
    r2 = min(max(r2, 0.0), 1.0)
    v_ss = cov_s / (e1 * e0)
    v_st = cs[1] / e1 + cs[0] / e0
    direction = sym_inv_sqrt(v_ss) @ v_st
    norm = np.linalg.norm(direction)
    mu = direction / norm if norm > 0 else np.eye(design.shape[1])[0]
    if v_clipped or r2_clipped:
        log.debug("improved estimates clipped (V %s, R2 %s)", v_clipped, r2_clipped)
    comps = {"var_arm": var_z, "proj_arm": proj, "diff_var": diff_proj, "diff_proj_design": diff_s,
             "numerator": numer, "v_st": v_st}
    return ImprovedEstimates(v_hat=v_hat, r2_hat=r2, mu_hat=mu, v_ss=v_ss, components=comps,
                             v_clipped=v_clipped, r2_clipped=r2_clipped)


def _observed_y(exp, z):
    if exp.y_pot is not None:
        return exp.with_assignment(z).y_obs
    if exp.y_obs is None:
        raise ValueError("observed outcomes missing")
    return exp.y_obs


def improved_variance_ht(exp, z, analysis_cols=None, design_cols=None):
    """Improved ``V`` and ``R^2`` for the (adjusted) Horvitz-Thompson estimator
    under a cluster-level criterion on ``c[:, design_cols]``."""
    z = np.asarray(getattr(z, "z", z)).astype(np.int8)
    yt = exp.scaled_totals(_observed_y(exp, z))
    v = None if not analysis_cols else exp.c[:, list(analysis_cols)]
    resid = fit_ols_interacted(yt, z, v).resid
    c = exp.c if design_cols is None else exp.c[:, list(design_cols)]
    c = c - c.mean(axis=0)
    return _improved(resid, c, c, z)


def improved_variance_haj(exp, z, analysis_cols=None, design_cols=None):
    """Improved ``V`` and ``R^2`` for the (adjusted) Hajek estimator under an
    individual-level criterion on ``x[:, design_cols]``."""
    z = np.asarray(getattr(z, "z", z)).astype(np.int8)
    y = _observed_y(exp, z)
    w = None if not analysis_cols else exp.x[:, list(analysis_cols)]
    u = fit_ols_interacted(y, z[exp.cluster], w).resid
    ut = exp.scaled_totals(u)
    xc = exp.x - exp.x.mean(axis=0)
    dcols = list(range(exp.x.shape[1])) if design_cols is None else list(design_cols)
    xt = exp.scaled_totals(xc[:, dcols])
    # union of design and analysis covariates; shared columns enter once
    gcols = dcols + [k for k in (analysis_cols or []) if k not in dcols]
    g = exp.scaled_totals(xc[:, gcols])
    return _improved(ut, xt, g, z)


# ---------------------------------------------------------------------------
# intervals


def normal_interval(report, level=0.95):
    alpha = _check_level(level)
    q = NormalDist().inv_cdf(1 - alpha / 2)
    half = q * math.sqrt(report.variance_hat)
    return report.tau_hat - half, report.tau_hat + half


def _check_level(level):
    alpha = 1 - level
    if not 0 < alpha < 1:
        raise ValueError("confidence level must lie strictly between 0 and 1")
    return alpha


def improved_law(improved, kind, threshold, quad_matrix=None):
    """Standardized limit law used by the improved interval.

    Mahalanobis rules use ``(xi_1, I_K)``; other quadratic rules use
    ``(mu_hat, V_ss^{1/2} A V_ss^{1/2})``.
    """
    k = improved.mu_hat.size
    if kind == "mahalanobis":
        mu = np.eye(k)[0]
        a_mat = np.eye(k)
    else:
        root = sym_sqrt(improved.v_ss)
        a_mat = root @ np.atleast_2d(quad_matrix) @ root
        a_mat = (a_mat + a_mat.T) / 2
        mu = improved.mu_hat
    return AsymptoticLaw(V=1.0, r2=improved.r2_hat, mu=mu, A=a_mat, a=threshold)


def confidence_interval(report, level=0.95, improved=None, kind="mahalanobis", threshold=None,
                        quad_matrix=None, mc_size=DEFAULT_MC, rng=None, pool=None):
    """Normal-based interval, or the improved interval when ``improved`` is given.

    The improved interval is ``tau_hat + (V_hat/M)^{1/2} q`` with ``q`` the
    quantiles of the standardized limit law.
    """
    alpha = _check_level(level)
    if improved is None:
        return normal_interval(report, level)
    if threshold is None:
        raise ValueError("improved interval needs the design threshold")
    law = improved_law(improved, kind, threshold, quad_matrix)
    lo, hi = law_quantile(law, [alpha / 2, 1 - alpha / 2], mc_size, rng, pool)
    scale = math.sqrt(improved.v_hat / report.M)
    return report.tau_hat + scale * lo, report.tau_hat + scale * hi
