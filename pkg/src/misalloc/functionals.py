"""Firm-year elasticities, marginal products, TFP pieces and channel effects.

With the fitted gamma (materials elasticity polynomial) and alpha (integration
constant) the capital and labour elasticities follow by differentiating
f = int elas_M dm - C(k, l). Channel effects give the total derivative of a log
marginal product with respect to lagged productivity, the ex-ante innovation
and the ex-post shock, allowing for the materials re-optimisation.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd

from .panel import FirmPanel
from .share import elasticity_at

CHANNELS = ("omega_lag", "eta", "eps")
INPUTS = ("K", "L", "M")

FUNCTIONAL_COLUMNS = (
    "firm_id", "year", "sector", "country", "industry",
    "k", "l", "m", "y", "revenue", "wage_bill",
    "elas_K", "elas_L", "elas_M", "mp_K_level", "mp_L_level", "mp_M_level",
    "mp_K", "mp_L", "mp_M", "omega", "eps", "eta", "omega_lag", "nu", "dnu", "d_eps", "g_lag",
)


class SingularityError(ArithmeticError):
    """Raised when the materials fixed-point denominator vanishes."""


def elasticities(model, k, l, m):
    """(elas_K, elas_L, elas_M) implied by ``model.gamma`` and ``model.alpha``."""
    g, a = model.gamma, model.alpha
    eK = m * (g.gk + 2 * g.gkk * k + g.gkl * l + g.gkm / 2 * m) - a.ak - 2 * a.akk * k - a.akl * l
    eL = m * (g.gl + 2 * g.gll * l + g.gkl * k + g.glm / 2 * m) - a.al - 2 * a.all * l - a.akl * k
    eM = elasticity_at(g, k, l, m)
    return eK, eL, eM


class ElasticityPartials(NamedTuple):
    """d elas^X / d x for X in (K, L, M), x in (k, l, m)."""

    K_k: object
    K_l: object
    K_m: object
    L_k: object
    L_l: object
    L_m: object
    M_k: object
    M_l: object
    M_m: object


def elasticity_partials(model, k, l, m) -> ElasticityPartials:
    g, a = model.gamma, model.alpha
    M_k = g.gk + 2 * g.gkk * k + g.gkl * l + g.gkm * m
    M_l = g.gl + 2 * g.gll * l + g.gkl * k + g.glm * m
    M_m = g.gm + 2 * g.gmm * m + g.gkm * k + g.glm * l
    K_k = 2 * g.gkk * m - 2 * a.akk
    L_l = 2 * g.gll * m - 2 * a.all
    K_l = g.gkl * m - a.akl
    return ElasticityPartials(K_k=K_k, K_l=K_l, K_m=M_k, L_k=K_l, L_l=L_l, L_m=M_l,
                             M_k=M_k, M_l=M_l, M_m=M_m)


def g_prime(delta, omega_lag):
    """Derivative of g(w) = m(w) - w, the expected change in persistent productivity."""
    w = np.asarray(omega_lag, float)
    return delta.d1 - 1 + 2 * delta.d2 * w + 3 * delta.d3 * w * w


def markov_slope(delta, omega_lag):
    w = np.asarray(omega_lag, float)
    return delta.d1 + 2 * delta.d2 * w + 3 * delta.d3 * w * w


@dataclass
class ChannelInputs:
    """Responses of capital, labour and the log relative materials price to each channel.

    Each mapping is keyed by channel name (``omega_lag``, ``eta``, ``eps``);
    missing keys mean a zero response.
    """

    dk: dict = field(default_factory=dict)
    dl: dict = field(default_factory=dict)
    dlogprice: dict = field(default_factory=dict)

    def get(self, which: str, channel: str):
        return getattr(self, which).get(channel, 0.0)


def channel_effect(input: str, theta: str, model, k, l, m, omega_lag=None,
                   responses: ChannelInputs | None = None):
    """Total derivative d mp^X / d theta at the given log inputs.

    Parameters
    ----------
    input : {"K", "L", "M"}
    theta : {"omega_lag", "eta", "eps"}
    model : object with ``gamma``, ``alpha`` and ``delta``
    k, l, m : array-like
        Log inputs at the evaluation points.
    omega_lag : array-like, optional
        Needed for the ``omega_lag`` channel (slope of the Markov law).
    responses : ChannelInputs, optional
        Input and price responses; zero by default.
    """
    if input not in INPUTS:
        raise ValueError(f"input must be one of {INPUTS}")
    if theta not in CHANNELS:
        raise ValueError(f"theta must be one of {CHANNELS}")
    responses = responses or ChannelInputs()
    k, l, m = (np.asarray(v, float) for v in (k, l, m))
    shape = np.broadcast(k, l, m).shape
    if theta == "eps":
        return np.ones(shape) if shape else 1.0
    dprice = responses.get("dlogprice", theta)
    if input == "M":
        out = np.broadcast_to(np.asarray(dprice, float), shape).astype(float)
        return out if shape else float(out)

    eK, eL, eM = elasticities(model, k, l, m)
    p = elasticity_partials(model, k, l, m)
    if input == "K":
        eX, dX_k, dX_l, dX_m = eK, p.K_k, p.K_l, p.K_m
    else:
        eX, dX_k, dX_l, dX_m = eL, p.L_k, p.L_l, p.L_m
    D = 1 - eM - p.M_m / eM
    bad = np.abs(np.atleast_1d(D)) < 1e-12
    if bad.any():
        raise SingularityError(
            f"singularity of the materials fixed-point at record(s) {np.flatnonzero(bad)[:10].tolist()}")
    R = (eM + dX_m / eX) / D
    if theta == "omega_lag":
        if omega_lag is None:
            raise ValueError("omega_lag is required for the lagged-productivity channel")
        dmean = markov_slope(model.delta, omega_lag)
    else:
        dmean = 1.0  # d eta / d eta
    dk = responses.get("dk", theta)
    dl = responses.get("dl", theta)
    out = ((R * (eK + p.M_k / eM) + eK + dX_k / eX - (input == "K")) * dk
           + (R * (eL + p.M_l / eM) + eL + dX_l / eX - (input == "L")) * dl
           - R * dprice + (1 + R) * dmean)
    out = np.broadcast_to(out, shape).astype(float)
    return out if shape else float(out)


def aggregate_channel(d_omega_lag, d_eta, d_eps, gprime=1.0):
    """Compose the three channel derivatives into d mp / d dnu.

    The lagged-productivity channel is rescaled by the slope of g before the
    harmonic-style composition.
    """
    comps = [np.asarray(v, float) for v in (d_omega_lag, d_eta, d_eps, gprime)]
    if any(np.any(c == 0) for c in comps):
        raise ZeroDivisionError("channel components and g' must be non-zero")
    a, b, c, gp = comps
    out = 1.0 / (gp / a + 1.0 / b + 1.0 / c)
    return float(out) if out.ndim == 0 else out


@dataclass
class FirmFunctionals:
    """Per firm-year estimated functionals, one row per panel record."""

    frame: pd.DataFrame
    n_nonpositive: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frame)

    def __getitem__(self, key):
        return self.frame[key]

    def to_csv(self, path) -> None:
        self.frame.loc[:, list(FUNCTIONAL_COLUMNS)].to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, path) -> "FirmFunctionals":
        df = pd.read_csv(path, dtype={"firm_id": str, "sector": str, "country": str, "industry": str})
        return cls(df)


def compute_functionals(panel: FirmPanel, model) -> FirmFunctionals:
    """Elasticities, marginal products and TFP pieces for every panel record."""
    n = len(panel)
    for name in ("eps_hat", "omega_hat", "eta_hat"):
        if len(getattr(model, name)) != n:
            raise ValueError(f"model.{name} does not cover the panel ({len(getattr(model, name))} vs {n})")
    d = panel.data
    lg = panel.logs()
    k, l, m, y = (lg[c].to_numpy() for c in "klmy")
    eK, eL, eM = elasticities(model, k, l, m)
    Y = d["Y"].to_numpy(float)
    out = {
        "firm_id": d["firm_id"].to_numpy(), "year": d["year"].to_numpy(),
        "sector": d["sector"].to_numpy(), "country": d["country"].to_numpy(),
        "industry": panel.industry.to_numpy(),
        "k": k, "l": l, "m": m, "y": y, "revenue": panel.revenue(),
        "wage_bill": d["wage_bill"].to_numpy(float),
        "elas_K": eK, "elas_L": eL, "elas_M": eM,
    }
    counts = {}
    for X, e in (("K", eK), ("L", eL), ("M", eM)):
        mp = Y / d[X].to_numpy(float) * e
        out[f"mp_{X}_level"] = mp
        pos = mp > 0
        counts[X] = int((~pos).sum())
        with np.errstate(invalid="ignore", divide="ignore"):
            out[f"mp_{X}"] = np.where(pos, np.log(np.where(pos, mp, 1.0)), np.nan)
    if any(counts.values()):
        warnings.warn(f"non-positive estimated marginal products set to missing in logs: {counts}",
                      RuntimeWarning, stacklevel=2)

    omega = np.asarray(model.omega_hat, float)
    eps = np.asarray(model.eps_hat, float)
    lag = panel.lag_index()
    has = lag >= 0
    olag = np.full(n, np.nan)
    olag[has] = omega[lag[has]]
    nu = omega + eps
    dnu = np.full(n, np.nan)
    deps = np.full(n, np.nan)
    dnu[has] = nu[has] - nu[lag[has]]
    deps[has] = eps[has] - eps[lag[has]]
    out.update({"omega": omega, "eps": eps, "eta": np.asarray(model.eta_hat, float),
                "omega_lag": olag, "nu": nu, "dnu": dnu, "d_eps": deps,
                "g_lag": model.delta.mean(olag) - olag})
    return FirmFunctionals(pd.DataFrame(out), n_nonpositive=counts)


def elasticity_summary(func: FirmFunctionals) -> dict:
    """Average output elasticities, returns to scale and the capital/labour ratio."""
    f = func.frame
    mK, mL, mM = (float(np.nanmean(f[c])) for c in ("elas_K", "elas_L", "elas_M"))
    return {"elas_K": mK, "elas_L": mL, "elas_M": mM, "returns_to_scale": mK + mL + mM,
            "K_over_L": mK / mL if mL != 0 else np.nan, "n": int(len(f))}
