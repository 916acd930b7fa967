from __future__ import annotations

import sys
import warnings

import numpy as np
import pytest

from misalloc.gmm import estimate_model
from misalloc.simulate import DgpSpec, simulate

TRANSLOG = dict(bk=0.3, bl=0.3, bm=0.4, bkk=0.005, bll=0.005, bmm=0.01, bkl=-0.01, bkm=-0.01, blm=0.005)


@pytest.fixture(scope="session")
def cd_small():
    """Cobb-Douglas panel, 200 firms x 8 years, with its fitted model."""
    panel, truth = simulate(DgpSpec(n_firms=200, n_years=8, seed=11))
    return panel, truth, estimate_model(panel)


@pytest.fixture(scope="session")
def cd_exact():
    """Noise-free Cobb-Douglas panel; cross-firm spread comes from the initial omega draw."""
    spec = DgpSpec(sd_eta=0.0, sd_eps=0.0, omega0_sd=0.5, sd_rho=0.1, n_firms=150, n_years=6, seed=5)
    panel, truth = simulate(spec)
    return spec, panel, truth, estimate_model(panel)


@pytest.fixture(scope="session")
def translog_panel():
    spec = DgpSpec(technology="translog", translog=TRANSLOG, n_firms=300, n_years=8, seed=2)
    panel, truth = simulate(spec)
    return spec, panel, truth


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    warnings.filterwarnings("ignore", message="non-positive estimated marginal products")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, text = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}")
