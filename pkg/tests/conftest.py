import numpy as np
import pytest

from clusterre.fpstats import ClusterExperiment, size_and_totals


def make_population(rng, m=40, k=3, lo=2, hi=8, effect=1.0, beta_scale=1.0):
    """Small synthetic population with correlated covariates and both potential outcomes."""
    sizes = rng.integers(lo, hi + 1, size=m)
    cluster = np.repeat(np.arange(m), sizes)
    n = cluster.size
    x = rng.standard_normal((n, k)) + 0.5 * rng.standard_normal((m, k))[cluster]
    b0 = beta_scale * rng.normal(1.0, 0.5, size=k)
    b1 = b0 + beta_scale * rng.normal(0.0, 0.5, size=k)
    u = rng.standard_normal(m)[cluster]
    y0 = x @ b0 + u + rng.standard_normal(n) + 0.3 * sizes[cluster]
    y1 = x @ b1 + u + effect + 1.5 * rng.standard_normal(n)
    exp = ClusterExperiment(cluster=cluster, x=x, y_pot=np.column_stack([y0, y1]))
    exp.c = size_and_totals(exp)
    return exp


@pytest.fixture
def population():
    return make_population(np.random.default_rng(20240601))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
