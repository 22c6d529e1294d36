import numpy as np
import pytest

from mlsae.frame import LongFrame


def make_frame(domain, unit, period, x, y=None, in_sample=None, aux_names=None):
    n = len(domain)
    x = np.asarray(x, dtype=float).reshape(n, -1)
    y = np.full(n, np.nan) if y is None else np.asarray(y, dtype=float)
    in_sample = np.isfinite(y) if in_sample is None else np.asarray(in_sample, dtype=bool)
    names = aux_names or [f"x{j + 1}" for j in range(x.shape[1])]
    return LongFrame(domain, unit, period, x, y, in_sample, names)


def panel(n_domains, units, periods, rng, p=1, beta=None, sd_u=1.0, sd_e=1.0, sampled=None):
    """Balanced panel with y = x beta + u_d + e; ``sampled`` is a set of (domain index, unit index)."""
    domain, unit, period, xs = [], [], [], []
    for t in range(1, periods + 1):
        for d in range(n_domains):
            for i in range(units):
                domain.append(f"d{d}")
                unit.append(f"u{i}")
                period.append(t)
    n = len(domain)
    x = rng.uniform(1.0, 3.0, size=(n, p))
    beta = np.ones(p) if beta is None else np.asarray(beta, float)
    codes = np.array([int(d[1:]) for d in domain])
    y = x @ beta + sd_u * rng.standard_normal(n_domains)[codes] + sd_e * rng.standard_normal(n)
    if sampled is None:
        flags = np.ones(n, bool)
    else:
        flags = np.array([(int(d[1:]), int(u[1:])) in sampled for d, u in zip(domain, unit)])
    return make_frame(domain, unit, period, x, y, flags)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
