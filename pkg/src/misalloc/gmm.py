"""Second stage: integrate the material elasticity, build the output residual
net of materials, and recover the integration constant and productivity process.

Given the share fit, define per record

    Y_script = y - eps_hat - int_0^m elas_M(k, l, mu) dmu = omega - C(k, l),
    C(k, l) = a_k k + a_l l + a_kk k^2 + a_ll l^2 + a_kl k l.

For a trial alpha, omega(alpha) = Y_script + C_alpha. Least squares of omega on
powers of its own lag gives delta(alpha) and the innovation eta(alpha); alpha
is pinned down by E[eta k^a l^b] = 0 for 0 < a + b <= 2.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import optimize

from .panel import FirmPanel
from .share import GammaVector, ShareFit, ShareOptions, elasticity_at, fit_share_regression

ALPHA_NAMES = ("ak", "al", "akk", "all", "akl")
DELTA_NAMES = ("d0", "d1", "d2", "d3")


@dataclass(frozen=True)
class AlphaVector:
    """Coefficients of the integration constant C(k, l); no intercept."""

    ak: float = 0.0
    al: float = 0.0
    akk: float = 0.0
    all: float = 0.0
    akl: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in ALPHA_NAMES], dtype=float)

    @classmethod
    def from_array(cls, a) -> "AlphaVector":
        return cls(*(float(x) for x in a))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class DeltaVector:
    """Cubic Markov law omega = d0 + d1 w + d2 w^2 + d3 w^3 + eta, w = lagged omega."""

    d0: float = 0.0
    d1: float = 0.0
    d2: float = 0.0
    d3: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in DELTA_NAMES], dtype=float)

    @classmethod
    def from_array(cls, a) -> "DeltaVector":
        a = list(a) + [0.0] * (4 - len(a))
        return cls(*(float(x) for x in a))

    def mean(self, omega_lag):
        """Conditional mean m(omega_lag)."""
        w = np.asarray(omega_lag, float)
        return self.d0 + w * (self.d1 + w * (self.d2 + w * self.d3))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class GmmError(RuntimeError):
    pass


def integrate_elasticity(gamma: GammaVector, k, l, m):
    """Antiderivative in m of the material elasticity, vanishing at m = 0."""
    g = gamma
    return (g.g0 + g.gk * k + g.gl * l + g.gm / 2 * m + g.gkk * k * k + g.gll * l * l
            + g.gmm / 3 * m * m + g.gkl * k * l + g.gkm / 2 * k * m + g.glm / 2 * l * m) * m


def constant_terms(k, l) -> np.ndarray:
    """Columns (k, l, k^2, l^2, kl) multiplying the alpha coefficients."""
    k, l = np.asarray(k, float), np.asarray(l, float)
    return np.column_stack([k, l, k * k, l * l, k * l])


def integration_constant(alpha: AlphaVector, k, l):
    a = alpha
    return a.ak * k + a.al * l + a.akk * k * k + a.all * l * l + a.akl * k * l


def build_script_y(panel: FirmPanel, share_fit: ShareFit) -> np.ndarray:
    """Output net of the ex-post shock and the integrated material elasticity."""
    if len(share_fit.residuals) != len(panel):
        raise GmmError("share fit does not cover every panel record")
    lg = panel.logs()
    k, l, m = lg["k"].to_numpy(), lg["l"].to_numpy(), lg["m"].to_numpy()
    return lg["y"].to_numpy() - share_fit.residuals - integrate_elasticity(share_fit.gamma, k, l, m)


def m_hat(eta_hat) -> float:
    """Sample mean of exp(eta_hat), ignoring missing entries."""
    e = np.asarray(eta_hat, float)
    e = e[~np.isnan(e)]
    if e.size == 0:
        raise ValueError("eta_hat has no observed values")
    return float(np.mean(np.exp(e)))


@dataclass
class GmmOptions:
    degree: int = 3
    markov_instruments: str = "omega_lag"   # or "script_y_lag"
    max_outer: int = 200
    xtol: float = 1e-8
    moment_tol: float = 1e-6
    simplex: bool = True
    # linear (ak, al) restart values, tried only if the first solve misses moment_tol
    start_grid: tuple = (0.0, -0.2, -0.4, -0.6)


@dataclass
class GmmFit:
    alpha: AlphaVector
    delta: DeltaVector
    eta_hat: np.ndarray
    omega_hat: np.ndarray
    converged: bool
    moment_norm: float
    moments: np.ndarray
    markov_moments: np.ndarray
    outer_iterations: int
    fixed_point_step: float
    options: dict = field(default_factory=dict)


class _Problem:
    """Arrays shared by every moment evaluation."""

    def __init__(self, panel: FirmPanel, script_y, degree: int):
        if not 1 <= degree <= 3:
            raise ValueError("Markov polynomial degree must be 1, 2 or 3")
        lag = panel.lag_index()
        self.cur = np.flatnonzero(lag >= 0)
        self.prev = lag[self.cur]
        if self.cur.size < 10 * (degree + 1):
            raise GmmError("too few records with a lagged observation")
        lg = panel.logs()
        self.T = constant_terms(lg["k"].to_numpy(), lg["l"].to_numpy())
        self.Y = np.asarray(script_y, float)
        self.degree = degree
        self.Zc = self.T[self.cur]
        self.zscale = np.maximum(self.Zc.std(axis=0), 1e-12)

    def omega(self, a):
        return self.Y + self.T @ a

    def lag_design(self, w):
        return np.column_stack([w ** p for p in range(self.degree + 1)])

    def inner(self, a):
        om = self.omega(a)
        X = self.lag_design(om[self.prev])
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise GmmError("rank-deficient inner regression of omega on its lag polynomial")
        d, *_ = np.linalg.lstsq(X, om[self.cur], rcond=None)
        eta = om[self.cur] - X @ d
        return d, eta, om, X

    def moments(self, a):
        _, eta, _, _ = self.inner(a)
        return (self.Zc * eta[:, None]).mean(axis=0)

    def scaled(self, a):
        return self.moments(a) / self.zscale

    def iv_moments(self, theta):
        """Joint (alpha, delta) moments with powers of lagged Y_script as Markov instruments."""
        a, d = theta[:5], theta[5:]
        om = self.omega(a)
        X = self.lag_design(om[self.prev])
        eta = om[self.cur] - X @ d
        W = self.lag_design(self.Y[self.prev])
        g = np.concatenate([(self.Zc * eta[:, None]).mean(axis=0), (W * eta[:, None]).mean(axis=0)])
        return g / np.concatenate([self.zscale, np.maximum(W.std(axis=0), 1.0)])


def _norm(prob: _Problem, a) -> float:
    try:
        v = prob.scaled(a)
    except GmmError:
        return np.inf
    return float(np.max(np.abs(v))) if np.all(np.isfinite(v)) else np.inf


def _solve_alpha(prob: _Problem, a0, opts: GmmOptions):
    """Solve from ``a0``; if that misses the tolerance, retry from a grid of linear starts."""
    a, n_outer = _solve_from(prob, a0, opts)
    best, best_norm = a, _norm(prob, a)
    if best_norm <= opts.moment_tol:
        return best, n_outer
    # direct root solves first; the simplex only if none of them lands
    passes = (replace(opts, simplex=False), opts) if opts.simplex else (opts,)
    for o in passes:
        for ak, al in itertools.product(opts.start_grid, repeat=2):
            try:
                cand, n = _solve_from(prob, np.array([ak, al, 0.0, 0.0, 0.0]), o)
            except GmmError:
                continue
            n_outer += n
            c_norm = _norm(prob, cand)
            if c_norm < best_norm:
                best, best_norm = cand, c_norm
            if best_norm <= opts.moment_tol:
                return best, n_outer
    return best, n_outer


def _solve_from(prob: _Problem, a0, opts: GmmOptions):
    a = np.asarray(a0, float)
    n_outer = 0
    if opts.simplex:
        obj = lambda x: float(np.sum(prob.scaled(x) ** 2))
        best = a
        for _ in range(3):  # simplex with restarts
            r = optimize.minimize(obj, best, method="Nelder-Mead",
                                  options={"xatol": 1e-10, "fatol": 1e-24, "maxiter": 4000,
                                           "adaptive": True})
            n_outer += 1
            moved = np.max(np.abs(r.x - best))
            best = r.x
            if moved < opts.xtol:
                break
        a = best
    sol = optimize.root(prob.scaled, a, method="hybr", options={"xtol": 1e-13})
    if np.all(np.isfinite(sol.x)) and np.sum(prob.scaled(sol.x) ** 2) <= np.sum(prob.scaled(a) ** 2):
        a = sol.x
    return a, n_outer


def _fixed_point_step(prob: _Problem, a):
    """Size of one outer update: re-solve the alpha moments with delta held at delta(a)."""
    d, _, _, _ = prob.inner(a)

    def g_fixed(x):
        om = prob.omega(x)
        eta = om[prob.cur] - prob.lag_design(om[prob.prev]) @ d
        return (prob.Zc * eta[:, None]).mean(axis=0) / prob.zscale

    sol = optimize.root(g_fixed, a, method="hybr", options={"xtol": 1e-13})
    return float(np.max(np.abs(sol.x - a)))


def fit_gmm(panel: FirmPanel, script_y, init_alpha: AlphaVector | None = None,
            opts: GmmOptions | None = None) -> GmmFit:
    """Recover alpha (integration constant) and delta (Markov law) by exactly identified GMM.

    Records without a consecutive-year lag enter no moment. With the default
    ``markov_instruments="omega_lag"`` delta solves the least-squares normal
    equations in powers of lagged omega. ``"script_y_lag"`` instead
    instruments the Markov equation with powers of lagged Y_script and solves
    the joint nine-equation system.
    """
    opts = opts or GmmOptions()
    prob = _Problem(panel, script_y, opts.degree)
    a0 = init_alpha.as_array() if init_alpha is not None else np.zeros(5)
    a, n_outer = _solve_alpha(prob, a0, opts)
    d, eta, om, _ = prob.inner(a)

    if opts.markov_instruments == "script_y_lag":
        theta0 = np.concatenate([a, d])
        sol = optimize.root(prob.iv_moments, theta0, method="hybr", options={"xtol": 1e-13})
        if not np.all(np.isfinite(sol.x)):
            raise GmmError("instrumented Markov system diverged")
        a, d = sol.x[:5], sol.x[5:]
        om = prob.omega(a)
        eta = om[prob.cur] - prob.lag_design(om[prob.prev]) @ d
        step = 0.0
    elif opts.markov_instruments == "omega_lag":
        step = _fixed_point_step(prob, a)
    else:
        raise ValueError(f"unknown markov_instruments {opts.markov_instruments!r}")

    g = (prob.Zc * eta[:, None]).mean(axis=0)
    W = prob.lag_design(prob.Y[prob.prev])
    gm = (W * eta[:, None]).mean(axis=0)
    scaled = g / prob.zscale
    norm = float(np.max(np.abs(scaled)))
    eta_full = np.full(len(panel), np.nan)
    eta_full[prob.cur] = eta
    converged = norm < opts.moment_tol and step < max(opts.xtol, 1e-6)
    return GmmFit(alpha=AlphaVector.from_array(a), delta=DeltaVector.from_array(d), eta_hat=eta_full,
                  omega_hat=om, converged=bool(converged), moment_norm=norm, moments=g,
                  markov_moments=gm, outer_iterations=n_outer, fixed_point_step=step,
                  options={"degree": opts.degree, "markov_instruments": opts.markov_instruments,
                           "xtol": opts.xtol, "moment_tol": opts.moment_tol})


@dataclass
class ProductionModel:
    """Fitted production technology and productivity process for one panel."""

    gamma: GammaVector
    alpha: AlphaVector
    delta: DeltaVector
    E_hat: float
    M_hat: float
    eps_hat: np.ndarray
    omega_hat: np.ndarray
    eta_hat: np.ndarray
    script_y: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def elasticity_M(self, k, l, m):
        return elasticity_at(self.gamma, k, l, m)

    def log_output(self, k, l, m):
        """Estimated f(k, l, m) = int elas_M dm - C(k, l)."""
        return integrate_elasticity(self.gamma, k, l, m) - integration_constant(self.alpha, k, l)

    def omega_lag(self, panel: FirmPanel) -> np.ndarray:
        lag = panel.lag_index()
        out = np.full(len(lag), np.nan)
        ok = lag >= 0
        out[ok] = self.omega_hat[lag[ok]]
        return out

    def params_dict(self) -> dict:
        return {"gamma": self.gamma.to_dict(), "alpha": self.alpha.to_dict(),
                "delta": self.delta.to_dict(), "E_hat": self.E_hat, "M_hat": self.M_hat,
                "meta": self.meta}

    def to_json(self, path=None) -> str:
        txt = json.dumps(self.params_dict(), indent=2, sort_keys=True, default=float)
        if path is not None:
            Path(path).write_text(txt)
        return txt


def estimate_model(panel: FirmPanel, share_opts: ShareOptions | None = None,
                   gmm_opts: GmmOptions | None = None, init_gamma: GammaVector | None = None,
                   init_alpha: AlphaVector | None = None) -> ProductionModel:
    """Run both estimation stages on ``panel``."""
    sf = fit_share_regression(panel, init=init_gamma, opts=share_opts)
    sy = build_script_y(panel, sf)
    gf = fit_gmm(panel, sy, init_alpha=init_alpha, opts=gmm_opts)
    meta = {"share": {"converged": sf.converged, "iterations": sf.iterations,
                      "objective": sf.objective, "grad_norm": sf.grad_norm, **sf.options},
            "gmm": {"converged": gf.converged, "moment_norm": gf.moment_norm,
                    "outer_iterations": gf.outer_iterations,
                    "fixed_point_step": gf.fixed_point_step, **gf.options},
            "n_records": len(panel), "n_moment_records": int(np.sum(~np.isnan(gf.eta_hat)))}
    return ProductionModel(gamma=sf.gamma, alpha=gf.alpha, delta=gf.delta, E_hat=sf.E_hat,
                           M_hat=m_hat(gf.eta_hat), eps_hat=sf.residuals, omega_hat=gf.omega_hat,
                           eta_hat=gf.eta_hat, script_y=sy, meta=meta)


def warm_start_estimator(base: ProductionModel, share_opts: ShareOptions | None = None,
                         gmm_opts: GmmOptions | None = None):
    """Estimator for resampled panels, started from the full-sample estimates.

    Bootstrap replicates are small perturbations of the original sample, so a
    single share-regression start and a direct root solve from ``base`` suffice.
    """
    so = replace(share_opts or ShareOptions(), n_starts=1, training_firms=None)
    go = replace(gmm_opts or GmmOptions(), simplex=False)
    g0 = GammaVector.from_array(base.gamma.as_array() * base.E_hat)

    def estimate(panel: FirmPanel) -> ProductionModel:
        return estimate_model(panel, share_opts=so, gmm_opts=go, init_gamma=g0, init_alpha=base.alpha)
    return estimate
