"""Monte Carlo studies of rerandomized cluster experiments on fixed finite populations."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from statistics import NormalDist

import numpy as np
from scipy import optimize

from .design import (
    BalanceCriterion,
    DesignSpec,
    MaxDrawsExceeded,
    PreparedCriterion,
    calibrate_from_eigenvalues,
    empirical_threshold,
    optimal_weight_matrix,
    rerandomize,
)
from .estimate import estimate
from .fpstats import ClusterExperiment, chisq_quantile, finite_pop_var, size_and_totals
from .inference import (
    DEFAULT_MC,
    LawPool,
    confidence_interval,
    improved_variance_haj,
    improved_variance_ht,
    normal_interval,
)
from .theory import population_moments

log = logging.getLogger(__name__)

ALL_METHODS = ("ReMC", "ReWC", "ReMX", "ReWX", "Haj", "HT",
               "ReMC.adj", "ReWC.adj", "ReMX.adj", "ReWX.adj")

# method -> (design, estimator, improved interval flavour or None)
METHOD_TABLE = {
    "ReMC": ("MC", "ht", "ht"),
    "ReWC": ("WC", "ht", "ht"),
    "ReMX": ("MX", "haj", "haj"),
    "ReWX": ("WX", "haj", "haj"),
    "Haj": ("CR", "haj", None),
    "HT": ("CR", "ht", None),
    "ReMC.adj": ("MC", "ht_adj", None),
    "ReWC.adj": ("WC", "ht_adj", None),
    "ReMX.adj": ("MX", "haj_adj", "haj"),
    "ReWX.adj": ("WX", "haj_adj", "haj"),
}
DESIGNS = ("MC", "WC", "MX", "WX", "CR")


@dataclass
class ScenarioConfig:
    name: str = "custom"
    M: int = 100
    M1: int = 50
    size_lo: int = 4
    size_hi: int = 10
    K: int = 7
    rho: float = 0.0
    gamma: float = 1.0
    # "calibrate" solves for gamma so covariates explain `share` of the pooled variance
    gamma_mode: str = "calibrate"
    share: float = 0.5
    g: str = "linear"  # linear: (n - 7)/2, constant: 6
    noise_var: float = 16.0
    replications: int = 1000
    alpha: float = 0.001
    seed: int = 0
    level: float = 0.95
    mc_size: int = DEFAULT_MC
    methods: tuple = ALL_METHODS

    def __post_init__(self):
        if not 0 < self.M1 < self.M:
            raise ValueError("need 0 < M1 < M")
        if not 1 <= self.size_lo <= self.size_hi:
            raise ValueError("cluster sizes need 1 <= lo <= hi")
        if self.g not in ("linear", "constant"):
            raise ValueError("g must be 'linear' or 'constant'")
        if self.gamma_mode not in ("calibrate", "fixed"):
            raise ValueError("gamma_mode must be 'calibrate' or 'fixed'")
        unknown = set(self.methods) - set(METHOD_TABLE)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        self.methods = tuple(self.methods)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ValueError(f"unknown scenario fields {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        out = asdict(self)
        out["methods"] = list(self.methods)
        return out


SCENARIOS = {
    1: dict(K=7, rho=0.8, gamma=1.0, g="linear"),
    2: dict(K=7, rho=-0.15, gamma=5.0, g="linear"),
    3: dict(K=12, rho=0.4, gamma=0.5, g="constant"),
    4: dict(K=12, rho=-0.09, gamma=12.0, g="constant"),
}


def scenario(number, **overrides):
    params = dict(SCENARIOS[number], name=f"scenario{number}")
    params.update(overrides)
    return ScenarioConfig(**params)


def exchangeable_cov(k, rho):
    sigma = (1 - rho) * np.eye(k) + rho * np.ones((k, k))
    if np.linalg.eigvalsh(sigma).min() <= 0:
        raise ValueError(f"exchangeable correlation {rho} is not positive definite for K={k}")
    return sigma


def _cluster_effect(kind, n):
    return (n - 7.0) / 2.0 if kind == "linear" else np.full(n.shape, 6.0)


def generate_population(cfg, rng):
    """Fixed population with covariates and both potential outcomes."""
    sigma = exchangeable_cov(cfg.K, cfg.rho)
    sizes = rng.integers(cfg.size_lo, cfg.size_hi + 1, size=cfg.M)
    cluster = np.repeat(np.arange(cfg.M), sizes)
    n_units = cluster.size
    x = rng.multivariate_normal(np.zeros(cfg.K), sigma, size=n_units, method="cholesky")
    pattern1 = rng.choice([0.5, 1.0, 1.5], size=cfg.K)
    pattern = np.stack([2.0 - pattern1, pattern1])  # beta_z / gamma for z = 0, 1
    jitter = rng.uniform(-0.1, 0.1, size=(2, cfg.M, cfg.K))
    noise = rng.normal(0.0, math.sqrt(cfg.noise_var), size=(n_units, 2))
    g = _cluster_effect(cfg.g, sizes[cluster].astype(float))

    def covariate_part(gamma):
        return np.column_stack([
            np.einsum("ij,ij->i", x, gamma * pattern[z] + jitter[z][cluster]) for z in (0, 1)
        ])

    def share(gamma):
        part = covariate_part(gamma)
        y = g[:, None] + part + noise
        return finite_pop_var(part.reshape(-1)) / finite_pop_var(y.reshape(-1))

    gamma = cfg.gamma
    if cfg.gamma_mode == "calibrate":
        hi = max(cfg.gamma, 1.0)
        while share(hi) < cfg.share:
            hi *= 2
            if hi > 1e6:
                raise ValueError("covariates cannot reach the requested variance share")
        lo = 0.0
        if share(lo) > cfg.share:
            raise ValueError("variance share already exceeded at gamma = 0")
        gamma = optimize.brentq(lambda t: share(t) - cfg.share, lo, hi, xtol=1e-12)
    y_pot = g[:, None] + covariate_part(gamma) + noise
    exp = ClusterExperiment(cluster=cluster, x=x, y_pot=y_pot,
                            x_names=[f"x{k + 1}" for k in range(cfg.K)])
    exp.c = size_and_totals(exp)
    exp.c_names = ["n"] + [f"xt{k + 1}" for k in range(cfg.K)]
    exp.meta.update(gamma=float(gamma), share=float(share(gamma)))
    return exp


# ---------------------------------------------------------------------------
# designs


@dataclass
class PreparedDesign:
    name: str
    prepared: PreparedCriterion | None
    kind: str = "none"
    quad_matrix: np.ndarray | None = None
    threshold: float | None = None
    pool: LawPool | None = None


def build_design(exp, name, m1, alpha, rng, mc_size=DEFAULT_MC, threshold_mode="asymptotic",
                 design_cols=None, need_pool=True):
    """Criterion for one design label, with threshold and a shared law pool."""
    if name == "CR":
        return PreparedDesign(name, None)
    level = "cluster" if name.endswith("C") else "individual"
    cols = None if design_cols is None else tuple(design_cols[level])
    if name.startswith("M"):
        crit = BalanceCriterion(level=level, kind="mahalanobis", columns=cols)
    else:
        base = exp.c if level == "cluster" else exp.x_tilde()
        s = base if cols is None else base[:, list(cols)]
        mom = population_moments(exp, level, m1, design_s=s)
        w = np.diag(optimal_weight_matrix(mom.v_ts, mom.v_ss))
        crit = BalanceCriterion(level=level, kind="weighted_euclidean", columns=cols, matrix=w)
    prep = PreparedCriterion(exp, crit, m1)
    if threshold_mode == "empirical":
        prep.threshold = empirical_threshold(prep, alpha, rng)
    elif crit.kind == "mahalanobis":
        prep.threshold = chisq_quantile(alpha, prep.K)
    else:
        prep.threshold = calibrate_from_eigenvalues(prep.eigenvalues(), alpha, rng)
    out = PreparedDesign(name, prep, crit.kind, prep.A, prep.threshold)
    if need_pool:
        if crit.kind == "mahalanobis":
            a_mat = np.eye(prep.K)
        else:
            a_mat = prep.constraint_matrix()
            a_mat = (a_mat + a_mat.T) / 2
        out.pool = LawPool.draw(a_mat, prep.threshold, mc_size, rng)
    return out


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRow:
    method: str
    bias: float
    sd: float
    rmse: float
    cp_normal: float
    len_normal: float
    cp_improved: float | None = None
    len_improved: float | None = None
    replications: int = 0
    failures: int = 0
    acceptance_rate: float | None = None

    def to_dict(self):
        return asdict(self)


def summarize(method, tau, estimates, normal, improved=None, failures=0, acceptance=None):
    est = np.asarray(estimates, dtype=float)
    normal = np.asarray(normal, dtype=float)
    bias = float(est.mean() - tau)
    sd = float(est.std())
    rmse = math.sqrt(bias**2 + sd**2)

    def cover(iv):
        return float(np.mean((iv[:, 0] <= tau) & (tau <= iv[:, 1]))), float(np.mean(iv[:, 1] - iv[:, 0]))

    cp_n, len_n = cover(normal)
    cp_i = len_i = None
    if improved is not None:
        cp_i, len_i = cover(np.asarray(improved, dtype=float))
    return MetricsRow(method, bias, sd, rmse, cp_n, len_n, cp_i, len_i, est.size, failures, acceptance)


def _rep_rng(seed, cell, rep, stream):
    return np.random.default_rng([seed, cell, rep, stream])


def _one_replication(exp, designs, methods, m1, level, seed, cell, rep, analysis_cols, design_cols):
    """All methods on one replication; returns ``{method: (est, lo, hi, ilo, ihi)}`` and draws."""
    out = {}
    draws = {}
    assignments = {}
    for d_idx, name in enumerate(DESIGNS):
        if name not in designs:
            continue
        des = designs[name]
        rng = _rep_rng(seed, cell, rep, d_idx)
        spec = DesignSpec(criterion=None if des.prepared is None else des.prepared.crit, m1=m1)
        try:
            z, used, _ = rerandomize(exp, spec, rng, prepared=des.prepared)
        except MaxDrawsExceeded as err:
            log.warning("design %s failed: %s", name, err)
            continue
        assignments[name] = z.z
        draws[name] = used
    for method in methods:
        dname, est_name, imp = METHOD_TABLE[method]
        if dname not in assignments:
            out[method] = None
            continue
        z = assignments[dname]
        cols = None
        if est_name.endswith("_adj"):
            cols = analysis_cols.get("cluster" if est_name.startswith("ht") else "individual")
        try:
            rep_ = estimate(exp, z, est_name, cols)
            lo, hi = normal_interval(rep_, level)
            ilo = ihi = math.nan
            if imp is not None:
                des = designs[dname]
                lev = "cluster" if imp == "ht" else "individual"
                dcols = None if design_cols is None else design_cols[lev]
                if imp == "ht":
                    ie = improved_variance_ht(exp, z, cols, dcols)
                else:
                    ie = improved_variance_haj(exp, z, cols, dcols)
                ilo, ihi = confidence_interval(rep_, level, ie, des.kind, des.threshold,
                                               des.quad_matrix, pool=des.pool)
            out[method] = (rep_.tau_hat, lo, hi, ilo, ihi)
        except (ValueError, np.linalg.LinAlgError) as err:
            log.warning("%s failed on replication %d: %s", method, rep, err)
            out[method] = None
    return out, draws


def _run_chunk(args):
    exp, designs, methods, m1, level, seed, cell, reps, analysis_cols, design_cols = args
    return [_one_replication(exp, designs, methods, m1, level, seed, cell, r, analysis_cols, design_cols)
            for r in reps]


def resolve_threads(threads=None):
    if threads is None:
        threads = int(os.environ.get("CLUSTERRE_THREADS", "1") or 1)
    return max(1, int(threads))


def run_study(exp, methods=ALL_METHODS, replications=1000, alpha=0.001, seed=0, m1=None,
              level=0.95, mc_size=DEFAULT_MC, threads=None, cell=0, threshold_mode="asymptotic",
              analysis_cols=None, design_cols=None, return_raw=False):
    """Repeated (re)randomization on a fixed population; one MetricsRow per method.

    ``analysis_cols`` maps ``cluster``/``individual`` to the covariate columns
    of adjusted estimators; ``design_cols`` does the same for design criteria.
    """
    m1 = exp.M // 2 if m1 is None else m1
    tau = exp.tau
    analysis_cols = dict(analysis_cols or {})
    if exp.c is not None:
        analysis_cols.setdefault("cluster", list(range(exp.c.shape[1])))
    if exp.x is not None:
        analysis_cols.setdefault("individual", list(range(exp.x.shape[1])))
    needed = sorted({METHOD_TABLE[m][0] for m in methods}, key=DESIGNS.index)
    pooled = {METHOD_TABLE[m][0] for m in methods if METHOD_TABLE[m][2] is not None}
    designs = {}
    for d_idx, name in enumerate(needed):
        rng = np.random.default_rng([seed, cell, 2**31 - 1, DESIGNS.index(name)])
        designs[name] = build_design(exp, name, m1, alpha, rng, mc_size, threshold_mode,
                                     design_cols, need_pool=name in pooled)
    threads = resolve_threads(threads)
    reps = list(range(replications))
    if threads == 1:
        results = _run_chunk((exp, designs, methods, m1, level, seed, cell, reps, analysis_cols, design_cols))
    else:
        chunks = [reps[i::threads] for i in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_run_chunk, [
                (exp, designs, methods, m1, level, seed, cell, ch, analysis_cols, design_cols)
                for ch in chunks]))
        by_rep = {}
        for ch, part in zip(chunks, parts):
            by_rep.update(zip(ch, part))
        results = [by_rep[r] for r in reps]
    rows = []
    raw = {}
    for method in methods:
        vals = [res[method] for res, _ in results if res.get(method) is not None]
        failures = replications - len(vals)
        arr = np.array(vals, dtype=float).reshape(-1, 5)
        raw[method] = arr
        dname, _, imp = METHOD_TABLE[method]
        draws = [d[dname] for _, d in results if dname in d]
        acc = None
        if dname != "CR" and draws:
            acc = len(draws) / float(np.sum(draws))
        if arr.shape[0] == 0:
            rows.append(MetricsRow(method, *([math.nan] * 5), replications=0, failures=failures))
            continue
        rows.append(summarize(method, tau, arr[:, 0], arr[:, 1:3],
                              arr[:, 3:5] if imp is not None else None, failures, acc))
    return (rows, raw) if return_raw else rows


def run_scenario(cfg, threads=None, return_raw=False):
    pop_rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
    exp = generate_population(cfg, pop_rng)
    out = run_study(exp, cfg.methods, cfg.replications, cfg.alpha, cfg.seed, cfg.M1, cfg.level,
                    cfg.mc_size, threads, return_raw=return_raw)
    return exp, out


# ---------------------------------------------------------------------------
# factorial study


@dataclass
class FactorialConfig:
    Ms: tuple = tuple(20 + 4 * k for k in range(16))
    vns: tuple = ("H", "L")
    fns: tuple = ("linear", "cubic")
    Ks: tuple = (1, 5)
    alphas: tuple = (0.001, 0.1)
    seeds: tuple = tuple(range(100))
    replications: int = 1000
    level: float = 0.95
    probe_draws: int = 100_000
    # small M: the chi-square threshold can fall below every attainable statistic
    threshold_mode: str = "empirical"

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ValueError(f"unknown factorial fields {sorted(extra)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


SIZE_RANGES = {"H": (2, 16), "L": (4, 10)}


def _outcome_fn(fn):
    if fn == "linear":
        return lambda t: t
    if fn in ("cubic", "nonlinear"):
        return lambda t: t**3
    raise ValueError(f"unknown outcome function {fn!r}")


def generate_factorial_population(M, vn, fn, K, rng, probe_draws=100_000):
    """Population for one factorial cell.

    Outcomes are ``f(2 + e_iz + x^T beta_iz) + noise`` with ``beta_z ~ t_3``,
    ``beta_iz = beta_z + N(0, I)``; the noise variance per arm is matched by
    Monte Carlo so the systematic part is half of the outcome variance.
    """
    f = _outcome_fn(fn)
    lo, hi = SIZE_RANGES[vn]
    sizes = rng.integers(lo, hi + 1, size=M)
    cluster = np.repeat(np.arange(M), sizes)
    n_units = cluster.size
    x = rng.standard_normal((n_units, K))
    beta = rng.standard_t(3, size=(2, K))
    beta_i = beta[:, None, :] + rng.standard_normal((2, M, K))
    e_i = rng.standard_normal((2, M))
    y = np.empty((n_units, 2))
    for z in (0, 1):
        sys_part = f(2.0 + e_i[z][cluster] + np.einsum("ij,ij->i", x, beta_i[z][cluster]))
        # probe the systematic component's variance under its generating law
        px = rng.standard_normal((probe_draws, K))
        pb = beta[z] + rng.standard_normal((probe_draws, K))
        probe = f(2.0 + rng.standard_normal(probe_draws) + np.einsum("ij,ij->i", px, pb))
        sigma2 = float(np.var(probe, ddof=1))
        y[:, z] = sys_part + rng.normal(0.0, math.sqrt(sigma2), n_units)
    exp = ClusterExperiment(cluster=cluster, x=x, y_pot=y)
    # design and adjustment covariates (x~, n)
    exp.c = np.column_stack([exp.x_tilde(), sizes.astype(float)])
    return exp


def factorial_study(cfg, threads=None):
    """Long-format rows: one per (cell, seed) with coverage and RMSE reductions."""
    rows = []
    cell = 0
    for M in cfg.Ms:
        for vn in cfg.vns:
            for fn in cfg.fns:
                for K in cfg.Ks:
                    for alpha in cfg.alphas:
                        cell += 1
                        for seed in cfg.seeds:
                            rows.append(_factorial_cell(cfg, M, vn, fn, K, alpha, seed, cell, threads))
    return rows


def _factorial_cell(cfg, M, vn, fn, K, alpha, seed, cell, threads):
    rng = np.random.default_rng([seed, cell, 0xFAC])
    exp = generate_factorial_population(M, vn, fn, K, rng, cfg.probe_draws)
    m1 = M // 2
    tau = exp.tau
    designs = {"MC": build_design(exp, "MC", m1, alpha, rng, threshold_mode=cfg.threshold_mode,
                                  need_pool=False),
               "CR": PreparedDesign("CR", None)}
    est = {"adj": [], "ht": [], "haj": []}
    cover = []
    failures = 0
    q = NormalDist().inv_cdf(1 - (1 - cfg.level) / 2)
    for r in range(cfg.replications):
        try:
            z, _, _ = rerandomize(exp, DesignSpec(designs["MC"].prepared.crit, m1),
                                  _rep_rng(seed, cell, r, 0), prepared=designs["MC"].prepared)
            rep_ = estimate(exp, z.z, "ht_adj")
            ie = improved_variance_ht(exp, z.z, list(range(exp.c.shape[1])))
            half = q * math.sqrt(ie.v_hat / M)
            est["adj"].append(rep_.tau_hat)
            cover.append(abs(rep_.tau_hat - tau) <= half)
            z0 = rerandomize(exp, DesignSpec(None, m1), _rep_rng(seed, cell, r, 4))[0].z
            est["ht"].append(estimate(exp, z0, "ht").tau_hat)
            est["haj"].append(estimate(exp, z0, "haj").tau_hat)
        except MaxDrawsExceeded as err:
            # the threshold is fixed per cell, so later replications would fail the same way
            log.warning("factorial cell %d seed %d: %s", cell, seed, err)
            failures += cfg.replications - r
            break
        except (ValueError, np.linalg.LinAlgError) as err:
            log.warning("factorial cell %d seed %d rep %d failed: %s", cell, seed, r, err)
            failures += 1

    def rmse(v):
        v = np.asarray(v)
        return float(np.sqrt(np.mean((v - tau) ** 2))) if v.size else math.nan

    r_adj, r_ht, r_haj = rmse(est["adj"]), rmse(est["ht"]), rmse(est["haj"])
    return {
        "M": M, "vn": vn, "fn": fn, "K": K, "alpha": alpha, "seed": seed,
        "cp": float(np.mean(cover)) if cover else math.nan,
        "rmse_adj": r_adj, "rmse_ht": r_ht, "rmse_haj": r_haj,
        "reduction_vs_ht": 100.0 * (1 - r_adj / r_ht),
        "reduction_vs_haj": 100.0 * (1 - r_adj / r_haj),
        "replications": cfg.replications - failures, "failures": failures,
    }


# ---------------------------------------------------------------------------
# real-data imputation


def impute_potential_outcomes(exp):
    """Fill the unobserved arm of every unit with a linear fit on that arm's units."""
    if exp.y_obs is None or exp.z is None:
        raise ValueError("imputation needs observed outcomes and the realized assignment")
    zu = exp.z[exp.cluster].astype(bool)
    design = np.ones((exp.N, 1)) if exp.x is None else np.column_stack([np.ones(exp.N), exp.x])
    y_pot = np.empty((exp.N, 2))
    for arm, mask in ((0, ~zu), (1, zu)):
        coef, *_ = np.linalg.lstsq(design[mask], exp.y_obs[mask], rcond=None)
        y_pot[:, arm] = np.where(mask, exp.y_obs, design @ coef)
    return replace(exp, y_pot=y_pot)


# ---------------------------------------------------------------------------
# output


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows_csv(rows, path):
    dicts = [r.to_dict() if hasattr(r, "to_dict") else dict(r) for r in rows]
    if not dicts:
        raise ValueError("nothing to write")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = list(dicts[0])
        w.writerow(keys)
        for d in dicts:
            w.writerow([_fmt(d[k]) for k in keys])
