"""Point estimates of the average treatment effect with robust variances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fpstats import RankDeficiencyError

METHODS = ("ht", "haj", "ht_adj", "haj_adj")


def _assignment(exp, z):
    if z is None:
        z = exp.z
    if z is None:
        raise ValueError("no assignment given")
    z = np.asarray(getattr(z, "z", z)).astype(np.int8).reshape(-1)
    if z.size != exp.M:
        raise ValueError("assignment length must equal the number of clusters")
    return z


def _observed(exp, z):
    # simulation mode reveals outcomes from the potential outcomes
    if exp.y_pot is not None:
        return exp.with_assignment(z).y_obs
    if exp.y_obs is None:
        raise ValueError("observed outcomes missing")
    if exp.z is not None and not np.array_equal(exp.z, z):
        raise ValueError("assignment differs from the one that produced y_obs")
    return exp.y_obs


def tau_ht(exp, z=None):
    """Horvitz-Thompson contrast of scaled cluster totals."""
    z = _assignment(exp, z)
    yt = exp.scaled_totals(_observed(exp, z))
    m1 = z.sum()
    m0 = z.size - m1
    if m1 == 0 or m0 == 0:
        raise ValueError("an arm has no clusters")
    return float(yt[z == 1].mean() - yt[z == 0].mean())


def tau_haj(exp, z=None):
    """Difference in unit-level outcome means between arms."""
    z = _assignment(exp, z)
    y = _observed(exp, z)
    zu = z[exp.cluster]
    if zu.all() or not zu.any():
        raise ValueError("an arm has no units")
    return float(y[zu == 1].mean() - y[zu == 0].mean())


# ---------------------------------------------------------------------------
# regression


@dataclass
class RegressionFit:
    design: np.ndarray
    names: list
    coef: np.ndarray
    resid: np.ndarray
    xtx_inv: np.ndarray

    @property
    def n_obs(self):
        return self.design.shape[0]

    @property
    def n_par(self):
        return self.design.shape[1]

    def coefficient(self, name):
        return float(self.coef[self.names.index(name)])


def _first_dependent_column(x):
    for j in range(1, x.shape[1] + 1):
        if np.linalg.matrix_rank(x[:, :j]) < j:
            return j - 1
    return None


def fit_ols_interacted(responses, treatment, covariates=None, names=None):
    """Least squares of the response on ``(1, Z, x, Z x)`` with ``x`` centered.

    The ``Z`` coefficient then estimates the average effect.
    """
    y = np.asarray(responses, dtype=float).reshape(-1)
    t = np.asarray(treatment, dtype=float).reshape(-1)
    if t.size != y.size:
        raise ValueError("treatment and responses differ in length")
    cols = [np.ones_like(y), t]
    labels = ["intercept", "treatment"]
    if covariates is not None:
        x = np.asarray(covariates, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] != y.size:
            raise ValueError("covariates and responses differ in length")
        if x.shape[1]:
            x = x - x.mean(axis=0)
            names = list(names) if names is not None else [f"x{k + 1}" for k in range(x.shape[1])]
            cols += [x, t[:, None] * x]
            labels += names + [f"treatment:{n}" for n in names]
    design = np.column_stack(cols)
    xtx = design.T @ design
    try:
        chol = np.linalg.cholesky(xtx)
        ok = np.all(np.diag(chol) > 1e-10 * np.sqrt(np.max(np.diag(xtx))))
    except np.linalg.LinAlgError:
        ok = False
    if not ok:
        j = _first_dependent_column(design)
        label = labels[j] if j is not None else "?"
        raise RankDeficiencyError(f"design matrix is rank deficient at column '{label}'", column=label)
    eye = np.eye(design.shape[1])
    xtx_inv = np.linalg.solve(chol.T, np.linalg.solve(chol, eye))
    coef = xtx_inv @ (design.T @ y)
    resid = y - design @ coef
    return RegressionFit(design=design, names=labels, coef=coef, resid=resid, xtx_inv=xtx_inv)


def sandwich_hw(fit, flavor="HC0"):
    """Heteroskedasticity-robust coefficient covariance."""
    x, e = fit.design, fit.resid
    meat = (x * (e**2)[:, None]).T @ x
    out = fit.xtx_inv @ meat @ fit.xtx_inv
    if flavor == "HC1":
        out = out * fit.n_obs / (fit.n_obs - fit.n_par)
    elif flavor != "HC0":
        raise ValueError(f"unknown flavor {flavor!r}")
    return out


def sandwich_lz(fit, cluster_ids, flavor="CR0"):
    """Cluster-robust coefficient covariance with score sums over clusters."""
    _, g = np.unique(np.asarray(cluster_ids), return_inverse=True)
    if g.size != fit.n_obs:
        raise ValueError("cluster ids must label every regression row")
    scores = fit.design * fit.resid[:, None]
    n_g = int(g.max()) + 1
    sums = np.zeros((n_g, scores.shape[1]))
    np.add.at(sums, g, scores)
    out = fit.xtx_inv @ (sums.T @ sums) @ fit.xtx_inv
    if flavor == "CR1":
        n, p = fit.n_obs, fit.n_par
        out = out * n_g / (n_g - 1) * (n - 1) / (n - p)
    elif flavor != "CR0":
        raise ValueError(f"unknown flavor {flavor!r}")
    return out


# ---------------------------------------------------------------------------


@dataclass
class EstimateReport:
    tau_hat: float
    variance_hat: float  # of tau_hat itself, already divided by M
    se_flavor: str
    estimator: str
    M: int
    fit: RegressionFit | None = None

    @property
    def se(self):
        return float(np.sqrt(self.variance_hat))

    def to_dict(self):
        return {"estimator": self.estimator, "tau_hat": self.tau_hat,
                "variance_hat": self.variance_hat, "se": self.se, "se_flavor": self.se_flavor}


def estimate(exp, z=None, method="haj", analysis_cols=None, small_sample=False):
    """Regression-based estimate with the matching robust variance.

    Cluster-level fits (``ht``, ``ht_adj``) regress scaled totals on
    ``(1, Z, c, Z c)`` and use the HW sandwich; unit-level fits (``haj``,
    ``haj_adj``) regress outcomes on ``(1, Z, x, Z x)`` and use the LZ sandwich.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    z = _assignment(exp, z)
    y = _observed(exp, z)
    adjusted = method.endswith("_adj")
    if method.startswith("ht"):
        cov = None
        names = None
        if adjusted:
            if exp.c is None:
                raise ValueError("ht_adj needs cluster-level covariates")
            cols = list(range(exp.c.shape[1])) if analysis_cols is None else list(analysis_cols)
            cov = exp.c[:, cols]
            names = [exp.c_names[k] for k in cols] if exp.c_names else None
        fit = fit_ols_interacted(exp.scaled_totals(y), z, cov, names)
        flavor = "HC1" if small_sample else "HC0"
        var = sandwich_hw(fit, flavor)[1, 1]
    else:
        cov = None
        names = None
        if adjusted:
            if exp.x is None:
                raise ValueError("haj_adj needs individual-level covariates")
            cols = list(range(exp.x.shape[1])) if analysis_cols is None else list(analysis_cols)
            cov = exp.x[:, cols]
            names = [exp.x_names[k] for k in cols] if exp.x_names else None
        fit = fit_ols_interacted(y, z[exp.cluster], cov, names)
        flavor = "CR1" if small_sample else "CR0"
        var = sandwich_lz(fit, exp.cluster, flavor)[1, 1]
    return EstimateReport(tau_hat=float(fit.coef[1]), variance_hat=float(max(var, 0.0)),
                          se_flavor="HW" if method.startswith("ht") else "LZ",
                          estimator=method, M=exp.M, fit=fit)
