from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from misalloc.functionals import FirmFunctionals
from misalloc.inference import (
    BootstrapError,
    BootstrapPlan,
    TestResult,
    bootstrap_pipeline,
    ci_from,
    firm_gap_sums,
    flexible_labor_T,
    replicate_rng,
    resample_firms,
    two_stage_test_bootstrap,
)
from misalloc.panel import COLUMNS, FirmPanel
from misalloc.report import labor_test_table
from misalloc.share import fit_share_regression


def make_panel(n_firms, n_years=1, seed=0, gap=None):
    """Synthetic panel whose labour gap P*Y*0.5 - wage_bill is iid across records (or fixed)."""
    rng = np.random.default_rng(seed)
    n = n_firms * n_years
    Y = np.exp(rng.normal(2, 0.3, n))
    wage = 0.5 * Y - (rng.normal(0.0, 1.0, n) if gap is None else gap)
    df = pd.DataFrame({
        "firm_id": np.repeat([f"f{i:05d}" for i in range(n_firms)], n_years),
        "year": np.tile(np.arange(2000, 2000 + n_years), n_firms),
        "sector": np.repeat(np.where(np.arange(n_firms) % 2 == 0, "3111", "3822"), n_years),
        "country": "XX", "Y": Y, "K": 1.0, "L": 1.0, "M": 1.0,
        "wage_bill": wage, "materials_cost": 1.0, "output_price_level": 1.0,
    })
    return FirmPanel(df[list(COLUMNS)])


def half_elasticity(panel):
    """Stand-in estimator: labour elasticity fixed at one half."""
    d = panel.data
    return FirmFunctionals(pd.DataFrame({
        "firm_id": d["firm_id"], "sector": d["sector"], "revenue": panel.revenue(),
        "elas_L": 0.5, "wage_bill": d["wage_bill"]}))


def mean_y(panel):
    return {"mean_y": float(panel.data["Y"].mean())}


# ---------------------------------------------------------------- resampling

def test_resample_keeps_firm_series(cd_small):
    panel = cd_small[0]
    out = resample_firms(panel, replicate_rng(3, 0))
    assert out.data["firm_id"].nunique() == panel.data["firm_id"].nunique()
    orig = {fid: g["Y"].to_numpy() for fid, g in panel.data.groupby("firm_id")}
    by_first = {v[0]: v for v in orig.values()}
    for _, g in out.data.groupby("firm_id"):
        assert np.all(np.diff(g["year"]) == 1)
        np.testing.assert_array_equal(g["Y"].to_numpy(), by_first[g["Y"].iloc[0]])


def test_plan_needs_two_replicates():
    with pytest.raises(ValueError):
        BootstrapPlan(n_replicates=1)


def test_two_replicates_reproducible():
    panel = make_panel(50)
    a = bootstrap_pipeline(panel, BootstrapPlan(n_replicates=2, seed=7), mean_y)
    b = bootstrap_pipeline(panel, BootstrapPlan(n_replicates=2, seed=7), mean_y)
    assert a.replicates == b.replicates
    assert a.replicates[0] != a.replicates[1]


def test_mean_se_matches_analytic():
    panel = make_panel(400, seed=1)
    res = bootstrap_pipeline(panel, BootstrapPlan(n_replicates=400, seed=2), mean_y)
    y = panel.data["Y"].to_numpy()
    analytic = y.std(ddof=1) / np.sqrt(len(y))
    assert res.se()["mean_y"] == pytest.approx(analytic, rel=0.15)


def test_noise_free_replicates_identical(cd_exact):
    panel = cd_exact[1]
    res = bootstrap_pipeline(panel, BootstrapPlan(n_replicates=4, seed=0),
                             lambda p: {"g0": fit_share_regression(p).gamma.g0})
    assert res.se()["g0"] < 1e-6


def test_serial_equals_threaded():
    panel = make_panel(80)
    plan = BootstrapPlan(n_replicates=12, seed=5)
    a = bootstrap_pipeline(panel, plan, mean_y, threads=1)
    b = bootstrap_pipeline(panel, plan, mean_y, threads=4)
    np.testing.assert_array_equal(a.distribution("mean_y"), b.distribution("mean_y"))


def _failing_on(bad):
    calls = []

    def pipe(p):
        calls.append(None)
        if len(calls) - 1 in bad:
            raise RuntimeError("replicate exploded")
        return mean_y(p)
    return pipe


def test_failure_bookkeeping(tmp_path):
    res = bootstrap_pipeline(make_panel(30), BootstrapPlan(n_replicates=10), _failing_on({0, 3}))
    assert (res.planned, res.succeeded, res.dropped) == (10, 8, 2)
    assert set(res.failures) == {0, 3}
    assert len(res.distribution("mean_y")) == 8
    res.to_csv(tmp_path / "b.csv")
    assert len(pd.read_csv(tmp_path / "b.csv")) == 8


def test_too_many_failures():
    with pytest.raises(BootstrapError, match="3 of 10"):
        bootstrap_pipeline(make_panel(30), BootstrapPlan(n_replicates=10), _failing_on({1, 2, 5}))


# ---------------------------------------------------------------- labour statistic

def test_T_arithmetic():
    f = FirmFunctionals(pd.DataFrame({"revenue": [10.0, 20.0], "elas_L": [0.5, 0.25], "wage_bill": [4.0, 3.0]}))
    assert flexible_labor_T(f) == pytest.approx((1.0 + 2.0) / 2)


def test_T_empty_sample():
    f = FirmFunctionals(pd.DataFrame({"revenue": [1.0], "elas_L": [0.5], "wage_bill": [np.nan]}))
    with pytest.raises(ValueError):
        flexible_labor_T(f)


def test_constant_gap_gives_point_intervals():
    res = two_stage_test_bootstrap(make_panel(40, 3, gap=0.7), BootstrapPlan(n_replicates=3),
                                   half_elasticity, stage2_draws=200)
    assert res.T == pytest.approx(0.7)
    for ci in (res.ci90, res.ci95, res.ci99):
        assert ci == pytest.approx((0.7, 0.7))
    assert res.reject_at == (0.10, 0.05, 0.01)


def test_stage_two_count_and_nesting():
    plan = BootstrapPlan(n_replicates=6, seed=1)
    res = two_stage_test_bootstrap(make_panel(60, 2), plan, half_elasticity, stage2_draws=250)
    assert res.n_draws == 6 * 250
    assert res.meta["stage1_succeeded"] + res.meta["stage1_dropped"] == 6
    assert res.ci99[0] <= res.ci95[0] <= res.ci90[0] <= res.ci90[1] <= res.ci95[1] <= res.ci99[1]


def test_default_stage_two_sizes():
    plan = BootstrapPlan(n_replicates=2)
    assert two_stage_test_bootstrap(make_panel(20), plan, half_elasticity).n_draws == 2 * 15000
    assert two_stage_test_bootstrap(make_panel(20), plan, half_elasticity, subset=["31"]).n_draws == 2 * 5000


def test_same_seed_same_intervals():
    args = (make_panel(60, 2), BootstrapPlan(n_replicates=4, seed=9), half_elasticity)
    a = two_stage_test_bootstrap(*args, stage2_draws=300)
    b = two_stage_test_bootstrap(*args, stage2_draws=300, threads=3)
    assert a.to_dict() == b.to_dict()


def test_interval_narrows_with_more_firms():
    plan = BootstrapPlan(n_replicates=20, seed=0)
    widths = []
    for n in (100, 400):
        r = two_stage_test_bootstrap(make_panel(n, seed=n), plan, half_elasticity, stage2_draws=500)
        widths.append(r.ci95[1] - r.ci95[0])
    assert widths[1] < widths[0]
    assert widths[0] / widths[1] == pytest.approx(2.0, rel=0.35)  # roughly sqrt(400 / 100)


def test_sector_subset():
    panel = make_panel(40, 2)
    f = half_elasticity(panel)
    sums, ns = firm_gap_sums(f, ["3111"])
    assert ns.sum() == 40
    with pytest.raises(ValueError):
        firm_gap_sums(f, ["99"])


def test_quantiles_are_type_seven():
    assert ci_from(np.arange(11.0), 0.80) == pytest.approx((1.0, 9.0))
    assert ci_from(np.array([0.0, 1.0]), 0.5) == pytest.approx((0.25, 0.75))


def test_not_rejected_decision_path():
    res = TestResult(T=0.66, ci90=(-0.19, 0.50), ci95=(-0.35, 0.62), ci99=(-0.66, 0.91), n=1000, n_draws=1)
    assert res.reject_at == ()
    table = labor_test_table([{"label": "Portugal", **res.to_dict()}])
    assert "| 0.660 |" in table and "[-0.190; 0.500]" in table
    assert table.rstrip().endswith("cannot be rejected |")
