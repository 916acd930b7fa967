"""Fixed-effects regressions, dispersion tables, S^2 statistics, GEV fits and HHI."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize
from scipy.special import gamma as gamma_fn

CELL = ("country", "industry", "year")


# ---------------------------------------------------------------------------
# fixed-effects regression

class CollinearityError(ValueError):
    pass


@dataclass
class FeRegressionResult:
    coef: pd.Series
    se: pd.Series
    r2: float
    r2_adj: float
    r2_within: float
    n: int
    n_cells: int
    n_clusters: int
    n_singletons: int
    n_missing: int
    fe_spec: str = ""
    se_correction: str = "G/(G-1) * (N-1)/(N-K), K = regressors + cells"

    @property
    def tstat(self) -> pd.Series:
        return self.coef / self.se

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"coef": self.coef, "se": self.se, "t": self.tstat})


def _cell_codes(fe) -> np.ndarray:
    if isinstance(fe, pd.DataFrame):
        return fe.groupby(list(fe.columns), sort=True, dropna=False).ngroup().to_numpy()
    return pd.factorize(pd.Series(fe), sort=True)[0]


def _demean(a: np.ndarray, codes: np.ndarray, n_cells: int) -> np.ndarray:
    cnt = np.bincount(codes, minlength=n_cells).astype(float)
    if a.ndim == 1:
        return a - (np.bincount(codes, weights=a, minlength=n_cells) / cnt)[codes]
    out = np.empty_like(a)
    for j in range(a.shape[1]):
        out[:, j] = a[:, j] - (np.bincount(codes, weights=a[:, j], minlength=n_cells) / cnt)[codes]
    return out


def fe_regress(y, x, fe, cluster, fe_spec: str = "") -> FeRegressionResult:
    """Least squares with absorbed cell effects and firm-clustered standard errors.

    Parameters
    ----------
    y : array-like
    x : DataFrame or mapping of name -> array
    fe : array-like of cell labels, or DataFrame whose rows define cells
    cluster : array-like of cluster labels
    """
    X = pd.DataFrame(x)
    names = list(X.columns)
    yv = np.asarray(y, float)
    Xv = X.to_numpy(float)
    cl = np.asarray(cluster)
    codes = _cell_codes(fe)
    ok = np.isfinite(yv) & np.isfinite(Xv).all(axis=1) & (codes >= 0)
    n_missing = int((~ok).sum())
    yv, Xv, cl, codes = yv[ok], Xv[ok], cl[ok], codes[ok]
    codes = pd.factorize(codes, sort=True)[0]
    cnt = np.bincount(codes)
    single = cnt[codes] < 2
    n_single = int(single.sum())
    if single.all():
        raise ValueError("every fixed-effect cell is a singleton")
    yv, Xv, cl = yv[~single], Xv[~single], cl[~single]
    codes = pd.factorize(codes[~single], sort=True)[0]
    G_cells = int(codes.max()) + 1

    yt = _demean(yv, codes, G_cells)
    Xt = _demean(Xv, codes, G_cells)
    scale = np.sqrt((Xt ** 2).sum(axis=0))
    flat = scale <= 1e-10 * np.maximum(np.sqrt((Xv ** 2).sum(axis=0)), 1.0)
    if flat.any():
        raise CollinearityError(f"no within-cell variation in {[names[i] for i in np.flatnonzero(flat)]}")
    if np.linalg.matrix_rank(Xt / scale) < Xt.shape[1]:
        raise CollinearityError(f"collinear regressors among {names}")

    N, p = Xt.shape
    K = p + G_cells
    if N <= K:
        raise ValueError("not enough observations for the number of parameters")
    XtX_inv = np.linalg.inv(Xt.T @ Xt)
    beta = XtX_inv @ (Xt.T @ yt)
    u = yt - Xt @ beta
    cl_codes, cl_uniq = pd.factorize(cl)
    G = len(cl_uniq)
    score = np.zeros((G, p))
    np.add.at(score, cl_codes, Xt * u[:, None])
    meat = score.T @ score
    corr = (G / (G - 1)) * ((N - 1) / (N - K)) if G > 1 else np.nan
    V = corr * XtX_inv @ meat @ XtX_inv

    ssr = float(u @ u)
    tss = float(((yv - yv.mean()) ** 2).sum())
    wss = float(yt @ yt)
    r2 = 1 - ssr / tss if tss > 0 else 1.0
    r2w = 1 - ssr / wss if wss > 0 else 1.0
    r2a = 1 - (1 - r2) * (N - 1) / (N - K)
    return FeRegressionResult(coef=pd.Series(beta, index=names), se=pd.Series(np.sqrt(np.diag(V)), index=names),
                              r2=r2, r2_adj=r2a, r2_within=r2w, n=N, n_cells=G_cells, n_clusters=G,
                              n_singletons=n_single, n_missing=n_missing, fe_spec=fe_spec)


def _frame(func) -> pd.DataFrame:
    return func.frame if hasattr(func, "frame") else func


def sector_betas(func, input: str, regressors=("dnu",), fe=CELL, sector="industry") -> dict:
    """Per-sector FE regressions of mp^input on ``regressors``; returns sector -> coefficient(s)."""
    f = _frame(func)
    out = {}
    for s, g in f.groupby(sector, sort=True):
        try:
            r = fe_regress(g[f"mp_{input}"], g.loc[:, list(regressors)], g.loc[:, list(fe)],
                           g["firm_id"], fe_spec=" x ".join(fe))
        except (ValueError, np.linalg.LinAlgError):
            continue
        out[s] = float(r.coef.iloc[0]) if len(regressors) == 1 else tuple(float(v) for v in r.coef)
    return out


# ---------------------------------------------------------------------------
# dispersion table and S^2

VAR_COLS = ("var_mp_K", "var_mp_L", "var_mp_M", "vol_nu", "var_omega_lag", "var_eta", "var_d_eps",
            "cov_omega_eta", "cov_omega_eps", "cov_eta_eps")


@dataclass
class DispersionTable:
    frame: pd.DataFrame
    n_cells_dropped: int = 0

    def to_csv(self, path) -> None:
        self.frame.to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, path) -> "DispersionTable":
        return cls(pd.read_csv(path, dtype={"country": str, "industry": str}))


def hhi(revenues) -> float:
    """Herfindahl index of revenue shares."""
    r = np.asarray(revenues, float)
    tot = r.sum()
    if not tot > 0:
        raise ValueError("HHI needs at least one positive revenue")
    s = r / tot
    return float(s @ s)


def _var(a):
    a = a[np.isfinite(a)]
    return float(np.var(a, ddof=1)) if a.size >= 2 else np.nan


def _cov(a, b):
    ok = np.isfinite(a) & np.isfinite(b)
    return float(np.cov(a[ok], b[ok], ddof=1)[0, 1]) if ok.sum() >= 2 else np.nan


def build_dispersion_table(func, by=CELL) -> DispersionTable:
    """Cell moments of marginal products and TFP components.

    Cells with fewer than two firms are dropped and counted. Lagged omega is
    taken for the records observed in the cell, so its variance refers to
    the previous-period values of the cell's current members.
    """
    f = _frame(func)
    rows = []
    dropped = 0
    for key, g in f.groupby(list(by), sort=True):
        if g["firm_id"].nunique() < 2:
            dropped += 1
            continue
        col = lambda c: g[c].to_numpy(float)
        ol, et, de = col("omega_lag"), col("eta"), col("d_eps")
        rows.append(dict(zip(by, key), n=len(g),
                         var_mp_K=_var(col("mp_K")), var_mp_L=_var(col("mp_L")), var_mp_M=_var(col("mp_M")),
                         vol_nu=_var(col("dnu")), var_omega_lag=_var(ol), var_eta=_var(et),
                         var_d_eps=_var(de), cov_omega_eta=_cov(ol, et), cov_omega_eps=_cov(ol, de),
                         cov_eta_eps=_cov(et, de), hhi=hhi(col("revenue")),
                         revenue=float(np.nansum(col("revenue")))))
    t = pd.DataFrame(rows)
    if len(t):
        grp = [c for c in ("country", "year") if c in by]
        tot = t.groupby(grp)["revenue"].transform("sum") if grp else t["revenue"].sum()
        t["weight"] = t["revenue"] / tot
    return DispersionTable(t, n_cells_dropped=dropped)


def _beta_col(t: pd.DataFrame, betas: dict, idx=None, sector="industry") -> np.ndarray:
    def get(s):
        b = betas.get(s, np.nan)
        if idx is not None:
            b = b[idx] if isinstance(b, (tuple, list, np.ndarray)) else np.nan
        return b
    return np.array([get(s) for s in t[sector]], dtype=float)


def _s2(target: np.ndarray, proj: np.ndarray) -> float:
    ok = np.isfinite(target) & np.isfinite(proj)
    if not ok.any():
        raise ValueError("no cells with both a marginal-product variance and a projection")
    den = float(np.sum(target[ok] ** 2))
    if den == 0:
        raise ValueError("marginal-product variances are all zero")
    return float(1 - np.sum((target[ok] - proj[ok]) ** 2) / den)


def _table(table) -> pd.DataFrame:
    return table.frame if hasattr(table, "frame") else table


def s2_total(table, beta_dev_by_sector: dict, input: str = "K") -> float:
    """Share of cell marginal-product variance matched by beta_dev^2 * Vol(nu).

    Can be negative; negative values carry no information.
    """
    t = _table(table)
    b = _beta_col(t, beta_dev_by_sector)
    return _s2(t[f"var_mp_{input}"].to_numpy(float), b ** 2 * t["vol_nu"].to_numpy(float))


_CH = (("omega", "var_omega_lag"), ("eta", "var_eta"), ("eps", "var_d_eps"))
_COV = {("omega", "eta"): "cov_omega_eta", ("omega", "eps"): "cov_omega_eps",
        ("eta", "eps"): "cov_eta_eps"}


def _cov_name(a, b):
    return _COV.get((a, b)) or _COV[(b, a)]


def s2_channels(table, betas: dict, input: str = "K") -> tuple:
    """(S2_omega_lag, S2_eta, S2_d_eps), each projecting on its own variance only.

    ``betas`` maps sector -> (beta_omega, beta_eta, beta_eps).
    """
    t = _table(table)
    y = t[f"var_mp_{input}"].to_numpy(float)
    out = []
    for i, (_, vc) in enumerate(_CH):
        b = _beta_col(t, betas, i)
        out.append(_s2(y, b ** 2 * t[vc].to_numpy(float)))
    return tuple(out)


def s2_channels_cov(table, betas: dict, input: str = "K") -> tuple:
    """Channel S^2 with each projection augmented by its two covariance terms."""
    t = _table(table)
    y = t[f"var_mp_{input}"].to_numpy(float)
    bs = [_beta_col(t, betas, i) for i in range(3)]
    out = []
    for i, (name, vc) in enumerate(_CH):
        proj = bs[i] ** 2 * t[vc].to_numpy(float)
        for j, (other, _) in enumerate(_CH):
            if j != i:
                proj = proj + bs[i] * bs[j] * t[_cov_name(name, other)].to_numpy(float)
        out.append(_s2(y, proj))
    return tuple(out)


def dispersion_series(func, weights=None, normalize_base: int | None = None,
                      variables=("mp_K", "mp_L", "mp_M", "nu", "dnu")) -> pd.DataFrame:
    """Revenue-weighted average across industries of within-cell standard deviations.

    ``weights`` (optional) is a Series indexed by (country, industry, year);
    by default each industry's revenue share within its (country, year).
    """
    f = _frame(func)
    rows = []
    for (c, s, y), g in f.groupby(list(CELL), sort=True):
        if g["firm_id"].nunique() < 2:
            continue
        r = {"country": c, "industry": s, "year": y, "revenue": float(np.nansum(g["revenue"]))}
        for v in variables:
            a = g[v].to_numpy(float)
            a = a[np.isfinite(a)]
            r[v] = float(np.std(a, ddof=1)) if a.size >= 2 else np.nan
        rows.append(r)
    cells = pd.DataFrame(rows)
    if cells.empty:
        raise ValueError("no cell with at least two firms")
    if weights is None:
        cells["w"] = cells["revenue"] / cells.groupby(["country", "year"])["revenue"].transform("sum")
    else:
        cells["w"] = [weights.get((c, s, y), np.nan) for c, s, y in
                      zip(cells["country"], cells["industry"], cells["year"])]
    out = {}
    for (c, y), g in cells.groupby(["country", "year"], sort=True):
        rec = {}
        for v in variables:
            ok = np.isfinite(g[v]) & np.isfinite(g["w"])
            w = g["w"][ok]
            rec[v] = float(np.sum(w * g[v][ok]) / np.sum(w)) if w.sum() > 0 else np.nan
        out[(c, y)] = rec
    res = pd.DataFrame.from_dict(out, orient="index")
    res.index = pd.MultiIndex.from_tuples(res.index, names=["country", "year"])
    if normalize_base is not None:
        parts = []
        for c, g in res.groupby(level="country"):
            if (c, normalize_base) not in g.index:
                raise KeyError(f"base year {normalize_base} missing for country {c}")
            parts.append(g / g.loc[(c, normalize_base)])
        res = pd.concat(parts)
    return res


# ---------------------------------------------------------------------------
# generalized extreme value

GUMBEL_EPS = 1e-6


@dataclass
class GevFit:
    xi: float
    sigma: float
    mu: float
    loglik: float
    se: dict = field(default_factory=dict)
    n: int = 0
    converged: bool = True

    @property
    def mean(self) -> float:
        return gev_mean(self.xi, self.sigma, self.mu)


def gev_mean(xi: float, sigma: float, mu: float) -> float:
    """mu + sigma (Gamma(1 - xi) - 1) / xi, defined here for 0 < xi < 1 only."""
    if not 0 < xi < 1:
        return float("nan")
    return float(mu + sigma * (gamma_fn(1 - xi) - 1) / xi)


def gev_nll(params, x) -> float:
    """Negative log-likelihood with F(x) = exp(-(1 + xi z)^(-1/xi)), z = (x - mu) / sigma."""
    xi, sigma, mu = params
    if sigma <= 0:
        return np.inf
    z = (x - mu) / sigma
    n = x.size
    if abs(xi) < GUMBEL_EPS:
        return float(n * np.log(sigma) + z.sum() + np.exp(-z).sum())
    t = 1 + xi * z
    if np.any(t <= 0):
        return np.inf
    lt = np.log(t)
    return float(n * np.log(sigma) + (1 + 1 / xi) * lt.sum() + np.exp(-lt / xi).sum())


def _pwm_start(x):
    """Probability-weighted-moment estimates (xi, sigma, mu)."""
    xs = np.sort(x)
    n = xs.size
    i = np.arange(n)
    b0 = xs.mean()
    b1 = np.sum(i / (n - 1) * xs) / n
    b2 = np.sum(i * (i - 1) / ((n - 1) * (n - 2)) * xs) / n
    c = (2 * b1 - b0) / (3 * b2 - b0) - np.log(2) / np.log(3)
    k = 7.8590 * c + 2.9554 * c * c
    if abs(k) < 1e-6:
        sigma = (2 * b1 - b0) / np.log(2)
        return 0.0, sigma, b0 - 0.5772156649 * sigma
    g = gamma_fn(1 + k)
    sigma = (2 * b1 - b0) * k / (g * (1 - 2 ** (-k)))
    mu = b0 + sigma * (g - 1) / k
    return -k, sigma, mu


def _num_hessian(f, p, h=None):
    p = np.asarray(p, float)
    h = h if h is not None else 1e-4 * np.maximum(np.abs(p), 1e-2)
    n = p.size
    H = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            e_i = np.zeros(n); e_i[i] = h[i]
            e_j = np.zeros(n); e_j[j] = h[j]
            v = (f(p + e_i + e_j) - f(p + e_i - e_j) - f(p - e_i + e_j) + f(p - e_i - e_j)) / (4 * h[i] * h[j])
            H[i, j] = H[j, i] = v
    return H


def fit_gev(samples) -> GevFit:
    """Maximum-likelihood GEV fit by bounded quasi-Newton from a PWM start."""
    x = np.asarray(samples, float)
    x = x[np.isfinite(x)]
    if x.size < 50:
        raise ValueError("GEV fit needs at least 50 observations")
    if np.std(x) == 0:
        raise ValueError("degenerate sample: zero variance")
    xi0, s0, m0 = _pwm_start(x)
    xi0 = float(np.clip(xi0, -0.9, 0.9))
    for _ in range(60):
        if np.isfinite(gev_nll((xi0, s0, m0), x)):
            break
        s0 *= 1.5
    else:
        xi0, s0, m0 = 0.0, np.std(x) * np.sqrt(6) / np.pi, np.mean(x) - 0.5772 * np.std(x) * np.sqrt(6) / np.pi

    scale = np.array([1.0, s0, s0])

    def obj(q):
        v = gev_nll(q * scale, x)
        return v / x.size if np.isfinite(v) else 1e10

    res = optimize.minimize(obj, np.array([xi0, s0, m0]) / scale, method="L-BFGS-B",
                            bounds=[(-0.99, 0.99), (1e-8, None), (None, None)],
                            options={"ftol": 1e-14, "gtol": 1e-10, "maxiter": 2000})
    p = res.x * scale
    nll = gev_nll(p, x)
    se = {"xi": np.nan, "sigma": np.nan, "mu": np.nan}
    try:
        H = _num_hessian(lambda q: gev_nll(q, x), p)
        cov = np.linalg.inv(H)
        se = dict(zip(("xi", "sigma", "mu"), np.sqrt(np.abs(np.diag(cov)))))
    except np.linalg.LinAlgError:
        pass
    return GevFit(xi=float(p[0]), sigma=float(p[1]), mu=float(p[2]), loglik=-float(nll),
                  se={k: float(v) for k, v in se.items()}, n=int(x.size), converged=bool(res.success))
