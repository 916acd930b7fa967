from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from misalloc.functionals import (
    CHANNELS,
    INPUTS,
    ChannelInputs,
    FirmFunctionals,
    SingularityError,
    aggregate_channel,
    channel_effect,
    compute_functionals,
    elasticities,
    elasticity_partials,
    elasticity_summary,
    g_prime,
)
from misalloc.gmm import AlphaVector, DeltaVector
from misalloc.share import GammaVector
from misalloc.simulate import DgpSpec, log_output, solve_materials, true_elasticities

from conftest import TRANSLOG


def model_of(gamma=None, alpha=None, delta=None):
    return SimpleNamespace(gamma=gamma or GammaVector(), alpha=alpha or AlphaVector(),
                           delta=delta or DeltaVector(0.0, 0.9, 0.0, 0.0))


def translog_model(c=TRANSLOG):
    """The translog technology written in (gamma, alpha) form."""
    gamma = GammaVector(g0=c["bm"], gk=c["bkm"], gl=c["blm"], gm=2 * c["bmm"])
    alpha = AlphaVector(ak=-c["bk"], al=-c["bl"], akk=-c["bkk"], all=-c["bll"], akl=-c["bkl"])
    return model_of(gamma, alpha)


CD = model_of(GammaVector(g0=0.4), AlphaVector(ak=-0.3, al=-0.3))


# ---------------------------------------------------------------- marginal products

def test_marginal_product_arithmetic():
    assert 100 / 50 * 0.5 == 1.0


def test_mp_identity_on_panel(cd_small):
    panel, _, model = cd_small
    f = compute_functionals(panel, model).frame
    for X in INPUTS:
        expected = panel.data["Y"].to_numpy() / panel.data[X].to_numpy() * f[f"elas_{X}"].to_numpy()
        np.testing.assert_allclose(f[f"mp_{X}_level"], expected, rtol=1e-12)
        ok = f[f"mp_{X}_level"] > 0
        np.testing.assert_allclose(f.loc[ok, f"mp_{X}"], np.log(f.loc[ok, f"mp_{X}_level"]), rtol=1e-12)


def test_tfp_identities(cd_small):
    panel, _, model = cd_small
    f = compute_functionals(panel, model).frame
    np.testing.assert_array_equal(f["nu"], f["omega"] + f["eps"])
    ok = f["dnu"].notna()
    assert ok.sum() == (panel.lag_index() >= 0).sum()
    np.testing.assert_allclose(f.loc[ok, "dnu"], (f["g_lag"] + f["eta"] + f["d_eps"])[ok], atol=1e-12)


def test_materials_mp_at_first_order_condition(cd_small):
    panel, truth, model = cd_small
    f = compute_functionals(panel, model).frame
    t = truth.frame
    # with the true elasticity the FOC holds exactly; the estimate is close
    rhs = t["log_rho"] + t["eps"] - np.log(np.exp(0.005))
    np.testing.assert_allclose(t["mp_M"], rhs, atol=1e-10)
    assert np.sqrt(np.mean((f["mp_M"] - t["mp_M"]) ** 2)) < 0.02


def test_missing_coverage_rejected(cd_small):
    panel, _, model = cd_small
    short = panel.with_data(panel.data.iloc[:-5])
    with pytest.raises(ValueError):
        compute_functionals(short, model)


def test_nonpositive_mp_gets_missing_log(cd_small):
    panel, _, model = cd_small
    bad = SimpleNamespace(**{**vars(model), "alpha": AlphaVector(ak=5.0)})
    with pytest.warns(RuntimeWarning):
        out = compute_functionals(panel, bad)
    assert out.n_nonpositive["K"] > 0
    assert out.frame["mp_K"].isna().sum() == out.n_nonpositive["K"]


def test_csv_round_trip(tmp_path, cd_small):
    panel, _, model = cd_small
    f = compute_functionals(panel, model)
    f.to_csv(tmp_path / "f.csv")
    back = FirmFunctionals.read_csv(tmp_path / "f.csv")
    pd.testing.assert_frame_equal(back.frame[f.frame.columns], f.frame, check_dtype=False)


def test_returns_to_scale_noise_free(cd_exact):
    _, panel, _, model = cd_exact
    s = elasticity_summary(compute_functionals(panel, model))
    assert s["returns_to_scale"] == pytest.approx(1.0, abs=0.03)


def test_capital_labour_ratio_display():
    frame = pd.DataFrame({"elas_K": [0.201, 0.221], "elas_L": [0.203, 0.223], "elas_M": [0.6, 0.6]})
    s = elasticity_summary(FirmFunctionals(frame))
    assert s["K_over_L"] == pytest.approx(0.211 / 0.213)
    assert round(s["K_over_L"], 2) == 0.99


# ---------------------------------------------------------------- partials

def test_zero_model_partials():
    assert all(v == 0 for v in elasticity_partials(model_of(), 1.3, -0.2, 2.0))


def test_single_quadratic_coefficient():
    p = elasticity_partials(model_of(GammaVector(gkk=1.0)), 0.7, 0.2, 1.5)
    assert p.M_k == pytest.approx(2 * 0.7)
    assert p.K_k == pytest.approx(2 * 1.5)
    assert p.K_m == pytest.approx(2 * 0.7)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=15, max_size=15), st.tuples(*[st.floats(-2, 2)] * 3))
def test_partials_match_finite_differences(coefs, point):
    model = model_of(GammaVector.from_array(coefs[:10]), AlphaVector.from_array(coefs[10:]))
    p = elasticity_partials(model, *point)
    h = 1e-5
    for j, x in enumerate("klm"):
        up, dn = list(point), list(point)
        up[j] += h
        dn[j] -= h
        fd = (np.array(elasticities(model, *up)) - np.array(elasticities(model, *dn))) / (2 * h)
        for X, v in zip("KLM", fd):
            got = getattr(p, f"{X}_{x}")
            assert got == pytest.approx(v, rel=1e-6, abs=1e-8)


# ---------------------------------------------------------------- g'

@pytest.mark.parametrize("delta,expected", [((0, 1, 0, 0), 0.0), ((0, 0.9, 0, 0), -0.1)])
def test_g_prime_examples(delta, expected):
    assert g_prime(DeltaVector(*delta), np.array([-1.0, 0.0, 2.0])) == pytest.approx(expected)


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.floats(-1, 1)] * 4), st.floats(-2, 2))
def test_g_prime_finite_difference(d, w):
    delta = DeltaVector(*d)
    h = 1e-6
    g = lambda x: delta.mean(x) - x
    assert g_prime(delta, w) == pytest.approx((g(w + h) - g(w - h)) / (2 * h), abs=1e-8)


# ---------------------------------------------------------------- channel effects

@pytest.mark.parametrize("input", INPUTS)
def test_eps_channel_is_one(input):
    resp = ChannelInputs(dk={"eps": 0.3}, dlogprice={"eps": 2.0})
    assert channel_effect(input, "eps", translog_model(), 1.0, 2.0, 3.0, responses=resp) == 1.0


def test_cobb_douglas_capital_eta():
    assert channel_effect("K", "eta", CD, 1.0, 2.0, 3.0) == pytest.approx(5 / 3)


def test_materials_eta_is_price_response():
    assert channel_effect("M", "eta", CD, 1.0, 2.0, 3.0) == 0.0
    resp = ChannelInputs(dlogprice={"eta": 0.25})
    assert channel_effect("M", "eta", CD, 1.0, 2.0, 3.0, responses=resp) == 0.25


def test_lagged_channel_scales_by_markov_slope():
    got = channel_effect("K", "omega_lag", CD, 1.0, 2.0, 3.0, omega_lag=0.5)
    assert got == pytest.approx(0.9 * 5 / 3)
    with pytest.raises(ValueError):
        channel_effect("K", "omega_lag", CD, 1.0, 2.0, 3.0)


def test_singular_denominator():
    model = model_of(GammaVector(g0=0.5, gm=0.25))  # 1 - 0.5 - 0.25 / 0.5 = 0 at m = 0
    with pytest.raises(SingularityError, match="singularity of the materials fixed-point"):
        channel_effect("K", "eta", model, np.zeros(3), np.zeros(3), np.zeros(3))


def _structural_mp(spec, k, l, omega, lp, X):
    m = solve_materials(spec, k, l, omega, lp)
    y = log_output(spec, k, l, m) + omega
    e = dict(zip("KLM", true_elasticities(spec, k, l, m)))[X]
    x = {"K": k, "L": l, "M": m}[X]
    return np.log(e) + y - x


@pytest.mark.parametrize("technology", ["cobb_douglas", "translog"])
@pytest.mark.parametrize("input", ["K", "L"])
def test_eta_channel_matches_structural_experiment(technology, input):
    spec = DgpSpec(technology=technology, translog=TRANSLOG)
    model = CD if technology == "cobb_douglas" else translog_model()
    rng = np.random.default_rng(3)
    k, l = rng.normal(3, 0.5, 20), rng.normal(2, 0.5, 20)
    omega, lp = rng.normal(0, 0.3, 20), rng.normal(0, 0.1, 20)
    h = 1e-4
    fd = (_structural_mp(spec, k, l, omega + h, lp, input)
          - _structural_mp(spec, k, l, omega - h, lp, input)) / (2 * h)
    m = solve_materials(spec, k, l, omega, lp)
    np.testing.assert_allclose(channel_effect(input, "eta", model, k, l, m), fd, rtol=1e-5)


def test_price_response_matches_structural_experiment():
    spec = DgpSpec(technology="translog", translog=TRANSLOG)
    k, l, omega, lp = 3.0, 2.0, 0.1, 0.05
    h = 1e-4
    # a unit price response to eta: omega and the log price move together
    fd = (_structural_mp(spec, k, l, omega + h, lp + h, "K")
          - _structural_mp(spec, k, l, omega - h, lp - h, "K")) / (2 * h)
    m = float(solve_materials(spec, k, l, omega, lp))
    got = channel_effect("K", "eta", translog_model(), k, l, m, responses=ChannelInputs(dlogprice={"eta": 1.0}))
    assert got == pytest.approx(float(fd), rel=1e-5)


def test_unknown_names_rejected():
    with pytest.raises(ValueError):
        channel_effect("Q", "eta", CD, 1, 1, 1)
    with pytest.raises(ValueError):
        channel_effect("K", "nu", CD, 1, 1, 1)


# ---------------------------------------------------------------- aggregation

def test_aggregate_unit_components():
    assert aggregate_channel(1, 1, 1) == pytest.approx(1 / 3)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0.1, 10))
def test_aggregate_symmetry(a, b, c):
    assert aggregate_channel(a, b, c) == pytest.approx(aggregate_channel(a, c, b))


def test_small_component_dominates():
    # 1 / (1/1 + 1/1 + 1/1e-3) = 1 / 1002
    assert aggregate_channel(1.0, 1.0, 1e-3) == pytest.approx(1 / 1002)
    assert aggregate_channel(1.0, 1.0, 1e-3) < 1e-3


def test_aggregate_uses_g_prime():
    assert aggregate_channel(2.0, 1.0, 1.0, gprime=0.5) == pytest.approx(1 / (0.25 + 2))


@pytest.mark.parametrize("args", [(0, 1, 1), (1, 0, 1), (1, 1, 0)])
def test_aggregate_zero_component(args):
    with pytest.raises(ZeroDivisionError):
        aggregate_channel(*args)


def test_channel_names():
    assert CHANNELS == ("omega_lag", "eta", "eps")
