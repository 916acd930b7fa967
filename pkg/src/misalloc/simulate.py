"""Synthetic firm panels from the gross-output model with known truth.

Timing per firm-year: capital and labour are set from end-of-(t-1)
information, the persistent productivity innovation eta arrives, materials
solve the static expected-profit first-order condition, then the ex-post
shock eps realises output.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .panel import FirmPanel

TRANSLOG_TERMS = ("b0", "bk", "bl", "bm", "bkk", "bll", "bmm", "bkl", "bkm", "blm")


def closed_form_constants(sd: float) -> float:
    """E[exp(x)] for x ~ N(0, sd**2)."""
    if sd < 0:
        raise ValueError("sd must be non-negative")
    return float(np.exp(0.5 * sd * sd))


@dataclass
class DgpSpec:
    """Parameters of the structural data-generating process.

    ``technology`` is ``"cobb_douglas"`` (exponents ``cd``) or ``"translog"``
    (``translog`` maps the names in ``TRANSLOG_TERMS`` to coefficients of
    f = b0 + bk k + bl l + bm m + bkk k^2 + bll l^2 + bmm m^2 + bkl kl + bkm km + blm lm).
    ``labor`` is ``"policy"`` (log-linear rule in lagged omega) or
    ``"flexible"`` (static expected-profit FOC chosen before eta; Cobb-Douglas only).
    """

    technology: str = "cobb_douglas"
    cd: tuple = (0.3, 0.3, 0.4)
    translog: dict = field(default_factory=dict)
    log_tfp_const: float = 0.0
    markov: tuple = (0.02, 0.9, 0.0, 0.0)
    sd_eta: float = 0.1
    sd_eps: float = 0.1
    # log(rho/P) = rho_const + rho_trend * (t - t0) + rho_omega * omega_{t-1} + sd_rho * u
    rho_const: float = 0.0
    rho_trend: float = 0.0
    rho_omega: float = 0.0
    sd_rho: float = 0.0
    # log real wage, known before labour is chosen
    wage_const: float = 0.0
    sd_wage: float = 0.2
    # predetermined-input rules
    k_const: float = 2.0
    k_omega: float = 0.5
    sd_k: float = 0.5
    l_const: float = 1.5
    l_omega: float = 0.5
    sd_l: float = 0.5
    tau_K: float = 0.0
    tau_L: float = 0.0
    labor: str = "policy"
    omega0_sd: float | None = None
    n_firms: int = 500
    n_years: int = 10
    burn_in: int = 20
    start_year: int = 2000
    n_sectors: int = 5
    countries: tuple = ("SIM",)
    treated_countries: tuple = ()
    treatment_year: int | None = None
    treatment_sd_eta_scale: float = 1.0
    treatment_sd_k_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        d0, d1, d2, d3 = self.markov
        # a unit root is admissible only in the noiseless degenerate design
        if d2 == 0 and d3 == 0 and abs(d1) >= 1 and self.sd_eta > 0:
            raise ValueError("markov process is not stationary: |delta1| >= 1")
        if self.sd_eta < 0 or self.sd_eps < 0:
            raise ValueError("shock standard deviations must be non-negative")
        if self.technology == "cobb_douglas":
            aK, aL, aM = self.cd
            if not 0 < aM < 1:
                raise ValueError("materials exponent must lie in (0, 1)")
            if self.labor == "flexible" and not aL + aM < 1:
                raise ValueError("flexible labour needs aL + aM < 1")
        elif self.technology == "translog":
            unknown = set(self.translog) - set(TRANSLOG_TERMS)
            if unknown:
                raise ValueError(f"unknown translog terms {sorted(unknown)}")
            if self.labor == "flexible":
                raise ValueError("flexible labour is only implemented for Cobb-Douglas")
        else:
            raise ValueError(f"unknown technology {self.technology!r}")
        if self.labor not in ("policy", "flexible"):
            raise ValueError(f"unknown labour mode {self.labor!r}")
        if self.n_firms < 1 or self.n_years < 1 or self.burn_in < 0:
            raise ValueError("n_firms, n_years must be positive and burn_in non-negative")
        if self.treated_countries and self.treatment_year is None:
            raise ValueError("treated_countries requires treatment_year")

    @property
    def E(self) -> float:
        return closed_form_constants(self.sd_eps)

    @property
    def M(self) -> float:
        return closed_form_constants(self.sd_eta)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# technology helpers (vectorised over records)
# ---------------------------------------------------------------------------

def _tl(spec: DgpSpec) -> dict:
    return {t: float(spec.translog.get(t, 0.0)) for t in TRANSLOG_TERMS}


def log_output(spec: DgpSpec, k, l, m):
    """f(k, l, m) of the true technology."""
    if spec.technology == "cobb_douglas":
        aK, aL, aM = spec.cd
        return spec.log_tfp_const + aK * k + aL * l + aM * m
    c = _tl(spec)
    return (spec.log_tfp_const + c["b0"] + c["bk"] * k + c["bl"] * l + c["bm"] * m
            + c["bkk"] * k * k + c["bll"] * l * l + c["bmm"] * m * m
            + c["bkl"] * k * l + c["bkm"] * k * m + c["blm"] * l * m)


def true_elasticities(spec: DgpSpec, k, l, m):
    """(elas_K, elas_L, elas_M) of the true technology."""
    if spec.technology == "cobb_douglas":
        aK, aL, aM = spec.cd
        one = np.ones_like(np.asarray(k, float))
        return aK * one, aL * one, aM * one
    c = _tl(spec)
    eK = c["bk"] + 2 * c["bkk"] * k + c["bkl"] * l + c["bkm"] * m
    eL = c["bl"] + 2 * c["bll"] * l + c["bkl"] * k + c["blm"] * m
    eM = c["bm"] + 2 * c["bmm"] * m + c["bkm"] * k + c["blm"] * l
    return eK, eL, eM


def solve_materials(spec: DgpSpec, k, l, omega, log_rel_price, E=None, tol=1e-10,
                    max_iter=200, labels=None):
    """Log materials solving the static FOC  elas_M * F * e^omega * E / M = rho / P.

    Cobb-Douglas has a closed form; translog uses vectorised safeguarded
    Newton-bisection on log M with bracket expansion.
    """
    E = spec.E if E is None else E
    k, l, omega, lp = np.broadcast_arrays(*(np.asarray(a, float) for a in (k, l, omega, log_rel_price)))
    if spec.technology == "cobb_douglas":
        aK, aL, aM = spec.cd
        return (np.log(aM * E) + spec.log_tfp_const + aK * k + aL * l + omega - lp) / (1 - aM)

    def h(m):
        eM = true_elasticities(spec, k, l, m)[2]
        with np.errstate(invalid="ignore", divide="ignore"):
            val = np.log(eM) + log_output(spec, k, l, m) + omega + np.log(E) - m - lp
        return np.where(eM > 0, val, -np.inf), eM

    def dh(m, eM):
        c = _tl(spec)
        return 2 * c["bmm"] / eM + eM - 1.0

    # start from the Cobb-Douglas solution at the elasticity evaluated at (k, l, k)
    c = _tl(spec)
    a_m = np.clip(c["bm"] + c["bkm"] * k + c["blm"] * l, 0.05, 0.95)
    m0 = (np.log(a_m * E) + omega - lp + c["b0"] + c["bk"] * k + c["bl"] * l) / (1 - a_m)
    lo, hi = m0 - 1.0, m0 + 1.0
    hlo, _ = h(lo)
    hhi, _ = h(hi)
    for _ in range(60):
        need_lo = hlo <= 0
        need_hi = hhi >= 0
        if not (need_lo.any() or need_hi.any()):
            break
        width = hi - lo
        lo = np.where(need_lo, lo - width, lo)
        hi = np.where(need_hi, hi + width, hi)
        hlo, _ = h(lo)
        hhi, _ = h(hi)
    bad = (hlo <= 0) | (hhi >= 0)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        who = labels[i] if labels is not None else i
        raise RuntimeError(f"materials FOC: no sign-changing bracket for record {who}")
    m = 0.5 * (lo + hi)
    for _ in range(max_iter):
        hm, eM = h(m)
        lo = np.where(hm > 0, m, lo)
        hi = np.where(hm > 0, hi, m)
        step = hm / np.where(np.isfinite(hm), dh(m, eM), 1.0)
        newton = m - step
        inside = np.isfinite(newton) & (newton > lo) & (newton < hi)
        m_new = np.where(inside, newton, 0.5 * (lo + hi))
        done = np.abs(m_new - m) < tol
        m = m_new
        if done.all():
            break
    else:
        i = int(np.flatnonzero(~done)[0])
        who = labels[i] if labels is not None else i
        raise RuntimeError(f"materials FOC did not converge for record {who}")
    return m


def _markov_mean(spec: DgpSpec, omega_lag):
    d = spec.markov
    return d[0] + d[1] * omega_lag + d[2] * omega_lag ** 2 + d[3] * omega_lag ** 3


def _stationary_omega(spec: DgpSpec):
    d0, d1 = spec.markov[0], spec.markov[1]
    if abs(d1) < 1:
        mu = d0 / (1 - d1)
        sd = spec.sd_eta / np.sqrt(1 - d1 * d1)
    else:
        mu, sd = 0.0, 0.0
    if spec.omega0_sd is not None:
        sd = spec.omega0_sd
    return mu, sd


def _flexible_labor(spec: DgpSpec, k, omega_lag, log_wage, mu_rho, tau_L):
    """Log labour solving E[P * elas_L * Y | end of t-1] = w (1 + tau_L) L (Cobb-Douglas)."""
    aK, aL, aM = spec.cd
    E = spec.E
    var = (spec.sd_eta ** 2 + aM ** 2 * spec.sd_rho ** 2) / (2 * (1 - aM) ** 2)
    rest = (np.log(aL) - log_wage - np.log1p(tau_L) + np.log(E) + var
            + (spec.log_tfp_const + aK * k + _markov_mean(spec, omega_lag)
               + aM * np.log(aM * E) - aM * mu_rho) / (1 - aM))
    return rest / (1 - aL / (1 - aM))


@dataclass
class Truth:
    """Per-record latent quantities aligned with the panel rows."""

    frame: pd.DataFrame

    @property
    def nu(self) -> np.ndarray:
        return self.frame["omega"].to_numpy() + self.frame["eps"].to_numpy()


def _firm_draws(spec: DgpSpec):
    """Independent normal draws per firm from child seed streams of the master seed."""
    T = spec.burn_in + spec.n_years
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_firms)
    names = ("eta", "eps", "k", "l", "rho", "wage")
    out = {n: np.empty((spec.n_firms, T)) for n in names}
    out["omega0"] = np.empty(spec.n_firms)
    out["sector"] = np.empty(spec.n_firms, dtype=np.int64)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        z = rng.standard_normal((len(names), T))
        for j, n in enumerate(names):
            out[n][i] = z[j]
        out["omega0"][i] = rng.standard_normal()
        out["sector"][i] = rng.integers(spec.n_sectors)
    return out


def simulate(spec: DgpSpec):
    """Simulate a panel and its latent truth.

    Returns
    -------
    panel : FirmPanel
    truth : Truth
        Columns omega, eta, eps, omega_lag, elas_K/L/M, mp_K/L/M (logs of true
        marginal products) and log_rho (log relative materials price).
    """
    spec.validate()
    draws = _firm_draws(spec)
    N, T = spec.n_firms, spec.burn_in + spec.n_years
    E = spec.E
    years = spec.start_year - spec.burn_in + np.arange(T)

    firm_country = np.array([spec.countries[i % len(spec.countries)] for i in range(N)])
    treated = np.isin(firm_country, list(spec.treated_countries))

    mu0, sd0 = _stationary_omega(spec)
    omega_prev = mu0 + sd0 * draws["omega0"]
    cols = {n: np.empty((N, T)) for n in ("omega", "eta", "eps", "k", "l", "m", "lrho", "lw", "olag")}
    for t in range(T):
        post = treated & (spec.treatment_year is not None and years[t] >= spec.treatment_year)
        sd_eta = spec.sd_eta * np.where(post, spec.treatment_sd_eta_scale, 1.0)
        sd_k = spec.sd_k * np.where(post, spec.treatment_sd_k_scale, 1.0)
        eta = sd_eta * draws["eta"][:, t]
        eps = spec.sd_eps * draws["eps"][:, t]
        mu_rho = spec.rho_const + spec.rho_trend * (t - spec.burn_in) + spec.rho_omega * omega_prev
        lrho = mu_rho + spec.sd_rho * draws["rho"][:, t]
        lw = spec.wage_const + spec.sd_wage * draws["wage"][:, t]
        k = spec.k_const + spec.k_omega * omega_prev + sd_k * draws["k"][:, t] - np.log1p(spec.tau_K)
        if spec.labor == "flexible":
            l = _flexible_labor(spec, k, omega_prev, lw, mu_rho, spec.tau_L)
        else:
            l = spec.l_const + spec.l_omega * omega_prev + spec.sd_l * draws["l"][:, t] - np.log1p(spec.tau_L)
        omega = _markov_mean(spec, omega_prev) + eta
        m = solve_materials(spec, k, l, omega, lrho, E=E, labels=[(i, int(years[t])) for i in range(N)])
        for n, v in (("omega", omega), ("eta", eta), ("eps", eps), ("k", k), ("l", l), ("m", m),
                     ("lrho", lrho), ("lw", lw), ("olag", omega_prev)):
            cols[n][:, t] = v
        omega_prev = omega

    sl = slice(spec.burn_in, T)
    flat = {n: v[:, sl].ravel() for n, v in cols.items()}
    yrs = np.tile(years[sl], N)
    fid = np.repeat(np.arange(N), spec.n_years)
    k, l, m = flat["k"], flat["l"], flat["m"]
    y = log_output(spec, k, l, m) + flat["omega"] + flat["eps"]
    Y, K, L, Mm = np.exp(y), np.exp(k), np.exp(l), np.exp(m)
    sector_codes = np.array([f"{311 + s}" for s in range(spec.n_sectors)])
    data = pd.DataFrame({
        "firm_id": [f"f{i:05d}" for i in fid],
        "year": yrs.astype(np.int64),
        "sector": sector_codes[draws["sector"][fid]],
        "country": firm_country[fid],
        "Y": Y, "K": K, "L": L, "M": Mm,
        "wage_bill": np.exp(flat["lw"]) * L,
        "materials_cost": np.exp(flat["lrho"]) * Mm,
        "output_price_level": 1.0,
    })
    eK, eL, eM = true_elasticities(spec, k, l, m)
    truth = pd.DataFrame({
        "firm_id": data["firm_id"], "year": data["year"],
        "omega": flat["omega"], "eta": flat["eta"], "eps": flat["eps"], "omega_lag": flat["olag"],
        "elas_K": eK, "elas_L": eL, "elas_M": eM,
        "mp_K": np.log(eK) + y - k, "mp_L": np.log(eL) + y - l, "mp_M": np.log(eM) + y - m,
        "log_rho": flat["lrho"], "log_wage": flat["lw"],
    })
    panel = FirmPanel(data)
    # FirmPanel sorts by (firm_id, year); simulated rows are already in that order
    return panel, Truth(truth.reset_index(drop=True))


def write_truth_csv(truth: Truth, path) -> None:
    truth.frame.to_csv(path, index=False, float_format="%.17g")
