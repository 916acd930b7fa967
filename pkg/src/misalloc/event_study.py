"""Difference-in-differences with a single adoption date and never-treated controls.

Post-period effects are anchored at the last pre-treatment year. Pre-period
placebos use the previous year as base. Units are the clusters for inference.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats


class DidError(ValueError):
    pass


@dataclass
class DidPanel:
    """Long unit-time panel: columns ``unit``, ``time``, ``outcome``, ``treated`` plus covariates."""

    frame: pd.DataFrame
    treatment_year: int
    covariates: tuple = ()
    n_missing: int = 0

    def __post_init__(self):
        f = self.frame
        for c in ("unit", "time", "outcome", "treated", *self.covariates):
            if c not in f.columns:
                raise DidError(f"DiD panel lacks column {c!r}")
        if f.duplicated(["unit", "time"]).any():
            raise DidError("(unit, time) must be unique")
        if (f.groupby("unit")["treated"].nunique() > 1).any():
            raise DidError("treatment status must be constant within a unit")
        miss = ~np.isfinite(f["outcome"].to_numpy(float))
        self.n_missing = int(miss.sum())
        f = f.loc[~miss].sort_values(["unit", "time"], kind="mergesort").reset_index(drop=True)
        self.frame = f

    @property
    def units(self) -> np.ndarray:
        return np.sort(self.frame["unit"].unique())

    @property
    def times(self) -> np.ndarray:
        return np.sort(self.frame["time"].unique())

    def wide(self, col: str = "outcome") -> pd.DataFrame:
        return self.frame.pivot(index="unit", columns="time", values=col).reindex(self.units)

    def treated_units(self) -> np.ndarray:
        t = self.frame.groupby("unit")["treated"].first().reindex(self.units)
        return t.to_numpy(bool)


def did_panel_from_table(table, treated_countries, treatment_year: int, outcome: str = "var_mp_K",
                         covariates=(), log: bool = True) -> DidPanel:
    """Industry-cell DiD panel from a dispersion table; covariates are logged too when ``log``."""
    t = table.frame if hasattr(table, "frame") else table
    f = pd.DataFrame({
        "unit": t["country"].astype(str) + ":" + t["industry"].astype(str),
        "time": t["year"].astype(int),
        "treated": t["country"].isin(list(treated_countries)).to_numpy(),
    })
    tr = (lambda a: np.log(np.where(a > 0, a, np.nan))) if log else (lambda a: a)
    f["outcome"] = tr(t[outcome].to_numpy(float))
    for c in covariates:
        f[c] = tr(t[c].to_numpy(float))
    return DidPanel(f, treatment_year=treatment_year, covariates=tuple(covariates))


@dataclass
class AttResult:
    overall: float
    overall_se: float
    by_time: pd.DataFrame
    pre_att: float
    pre_se: float
    n_units: int
    n_treated: int
    n_control: int
    dropped_times: list = field(default_factory=list)
    treatment_year: int = 0
    level: float = 0.95

    def to_csv(self, path) -> None:
        self.by_time.loc[:, ["event_time", "att", "se", "ci_lo", "ci_hi"]].to_csv(
            path, index=False, float_format="%.17g")


@dataclass
class _Pair:
    time: int
    base: int
    idx: np.ndarray       # positions into the unit array
    treated: np.ndarray   # bool over idx
    dy: np.ndarray
    X: np.ndarray | None  # base-period covariates incl. intercept, or None


def _pairs(panel: DidPanel):
    Y = panel.wide()
    D = panel.treated_units()
    if not (~D).any():
        raise DidError("no never-treated units")
    if not D.any():
        raise DidError("no treated units")
    times = panel.times
    T0 = panel.treatment_year
    covs = {c: panel.wide(c).to_numpy(float) for c in panel.covariates}
    pairs, dropped = [], []
    for t in times:
        if t == T0 - 1 or t == times[0]:  # the anchor year and the first year have no placebo
            continue
        b = T0 - 1 if t >= T0 else t - 1
        if b not in Y.columns:
            dropped.append(int(t))
            continue
        dy = Y[t].to_numpy() - Y[b].to_numpy()
        ok = np.isfinite(dy)
        X = None
        if covs:
            jb = list(Y.columns).index(b)
            Xb = np.column_stack([np.ones(len(D))] + [covs[c][:, jb] for c in panel.covariates])
            ok &= np.isfinite(Xb).all(axis=1)
        idx = np.flatnonzero(ok)
        tr = D[idx]
        if not tr.any() or tr.all():
            dropped.append(int(t))
            continue
        if covs:
            X = Xb[idx]
            if np.linalg.matrix_rank(X[~tr]) < X.shape[1]:
                dropped.append(int(t))
                continue
        pairs.append(_Pair(int(t), int(b), idx, tr, dy[idx], X))
    return pairs, dropped, len(D), D


def _estimate(pr: _Pair, dy: np.ndarray):
    """ATT, fitted values and per-unit influence contributions for one (base, t) pair."""
    tr = pr.treated
    nT, nC = tr.sum(), (~tr).sum()
    if pr.X is None:
        mT, mC = dy[tr].mean(), dy[~tr].mean()
        fitted = np.where(tr, mT, mC)
        inf = np.where(tr, (dy - mT) / nT, -(dy - mC) / nC)
        return mT - mC, fitted, inf
    Xc = pr.X[~tr]
    XtX_inv = np.linalg.inv(Xc.T @ Xc)
    coef = XtX_inv @ (Xc.T @ dy[~tr])
    pred = pr.X @ coef
    gap = dy - pred
    att = gap[tr].mean()
    xbar = pr.X[tr].mean(axis=0)
    inf = np.where(tr, (gap - att) / nT, -(pr.X @ (XtX_inv @ xbar)) * gap)
    fitted = np.where(tr, pred + att, pred)
    return att, fitted, inf


def _run(pairs, n_units, dys):
    atts, infs = [], []
    for pr, dy in zip(pairs, dys):
        att, _, inf = _estimate(pr, dy)
        full = np.zeros(n_units)
        full[pr.idx] = inf
        atts.append(att)
        infs.append(full)
    return np.array(atts), np.array(infs)


def _aggregate(atts, infs, mask):
    if not mask.any():
        return np.nan, np.nan
    return float(atts[mask].mean()), float(np.sqrt(np.sum(infs[mask].mean(axis=0) ** 2)))


def att_group_time(panel: DidPanel, level: float = 0.95) -> AttResult:
    """Per-year ATTs against never-treated units, with influence-function SEs clustered by unit.

    Regression adjustment on base-period covariates is used when the panel
    carries covariates.
    """
    pairs, dropped, n_units, D = _pairs(panel)
    if not pairs:
        raise DidError("no estimable (base, time) pair")
    atts, infs = _run(pairs, n_units, [p.dy for p in pairs])
    se = np.sqrt((infs ** 2).sum(axis=1))
    z = stats.norm.ppf(0.5 + level / 2)
    times = np.array([p.time for p in pairs])
    post = times >= panel.treatment_year
    by = pd.DataFrame({
        "time": times, "event_time": times - panel.treatment_year, "base": [p.base for p in pairs],
        "att": atts, "se": se, "ci_lo": atts - z * se, "ci_hi": atts + z * se,
        "n_treated": [int(p.treated.sum()) for p in pairs],
        "n_control": [int((~p.treated).sum()) for p in pairs],
    })
    overall, overall_se = _aggregate(atts, infs, post)
    pre, pre_se = _aggregate(atts, infs, ~post)
    return AttResult(overall=overall, overall_se=overall_se, by_time=by, pre_att=pre, pre_se=pre_se,
                     n_units=n_units, n_treated=int(D.sum()), n_control=int((~D).sum()),
                     dropped_times=dropped, treatment_year=panel.treatment_year, level=level)


@dataclass
class WildBootstrapResult:
    se: pd.Series
    ci_lo: pd.Series
    ci_hi: pd.Series
    overall_se: float
    overall_ci: tuple
    n_boot: int
    seed: int

    def apply(self, res: AttResult) -> AttResult:
        """Copy of ``res`` with bootstrap SEs and percentile-t bands."""
        by = res.by_time.copy()
        by["se"] = self.se.to_numpy()
        by["ci_lo"] = self.ci_lo.to_numpy()
        by["ci_hi"] = self.ci_hi.to_numpy()
        return AttResult(**{**res.__dict__, "by_time": by, "overall_se": self.overall_se})


def wild_cluster_bootstrap(panel: DidPanel, n_boot: int = 999, seed: int = 0,
                           level: float = 0.95) -> WildBootstrapResult:
    """Rademacher wild bootstrap over units with percentile-t intervals."""
    pairs, _, n_units, D = _pairs(panel)
    if n_units < 5:
        raise DidError("wild cluster bootstrap needs at least 5 clusters")
    atts, infs = _run(pairs, n_units, [p.dy for p in pairs])
    se0 = np.sqrt((infs ** 2).sum(axis=1))
    times = np.array([p.time for p in pairs])
    post = times >= panel.treatment_year
    ov0, ov_se0 = _aggregate(atts, infs, post)
    fits, resid = [], []
    for p in pairs:
        _, fitted, _ = _estimate(p, p.dy)
        fits.append(fitted)
        resid.append(p.dy - fitted)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    A = np.empty((n_boot, len(pairs)))
    S = np.empty((n_boot, len(pairs)))
    O = np.empty(n_boot)
    OS = np.empty(n_boot)
    for r in range(n_boot):
        w = rng.choice(np.array([-1.0, 1.0]), size=n_units)
        dys = [f + w[p.idx] * e for p, f, e in zip(pairs, fits, resid)]
        a, inf = _run(pairs, n_units, dys)
        A[r] = a
        S[r] = np.sqrt((inf ** 2).sum(axis=1))
        O[r], OS[r] = _aggregate(a, inf, post)

    alpha = 1 - level

    def pct_t(est, se, boot, boot_se):
        with np.errstate(invalid="ignore", divide="ignore"):
            t = (boot - est) / boot_se
        t = t[np.isfinite(t)]
        if se == 0 or t.size == 0:
            return est, est
        qlo, qhi = np.quantile(t, [alpha / 2, 1 - alpha / 2])
        return est - qhi * se, est - qlo * se

    bse = A.std(axis=0, ddof=1)
    lo, hi = zip(*(pct_t(atts[j], se0[j], A[:, j], S[:, j]) for j in range(len(pairs))))
    idx = pd.Index(times, name="time")
    ov_ci = pct_t(ov0, ov_se0, O, OS) if post.any() else (np.nan, np.nan)
    return WildBootstrapResult(se=pd.Series(bse, index=idx), ci_lo=pd.Series(lo, index=idx),
                               ci_hi=pd.Series(hi, index=idx),
                               overall_se=float(O.std(ddof=1)) if post.any() else np.nan,
                               overall_ci=tuple(float(v) for v in ov_ci), n_boot=n_boot, seed=seed)
