"""First stage: nonlinear least squares on the log materials-share equation.

    s = log(gamma' . b(k, l, m)) - eps,    gamma' = gamma * E

with b the complete second-degree basis. The solver is a Levenberg-Marquardt
trust region that rejects any step making the elasticity non-positive at a
sample point.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .panel import FirmPanel

GAMMA_NAMES = ("g0", "gk", "gl", "gm", "gkk", "gll", "gmm", "gkl", "gkm", "glm")


@dataclass(frozen=True)
class GammaVector:
    """Coefficients of the material-elasticity polynomial."""

    g0: float = 0.0
    gk: float = 0.0
    gl: float = 0.0
    gm: float = 0.0
    gkk: float = 0.0
    gll: float = 0.0
    gmm: float = 0.0
    gkl: float = 0.0
    gkm: float = 0.0
    glm: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in GAMMA_NAMES], dtype=float)

    @classmethod
    def from_array(cls, a) -> "GammaVector":
        return cls(*(float(x) for x in a))

    def __truediv__(self, c: float) -> "GammaVector":
        return GammaVector.from_array(self.as_array() / c)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def basis(k, l, m) -> np.ndarray:
    """Design matrix with columns (1, k, l, m, k^2, l^2, m^2, kl, km, lm)."""
    k, l, m = (np.atleast_1d(np.asarray(a, float)) for a in (k, l, m))
    return np.column_stack([np.ones_like(k), k, l, m, k * k, l * l, m * m, k * l, k * m, l * m])


def elasticity_at(gamma: GammaVector, k, l, m):
    """Material output elasticity implied by ``gamma`` at log inputs (k, l, m)."""
    g = gamma
    return (g.g0 + g.gk * k + g.gl * l + g.gm * m + g.gkk * k * k + g.gll * l * l
            + g.gmm * m * m + g.gkl * k * l + g.gkm * k * m + g.glm * l * m)


@dataclass
class ShareOptions:
    rtol: float = 1e-10
    gtol: float = 1e-8
    max_iter: int = 500
    n_starts: int = 5
    seed: int = 0
    training_firms: int | None = None


@dataclass
class ShareFit:
    gamma: GammaVector
    gamma_raw: GammaVector
    E_hat: float
    residuals: np.ndarray
    objective: float
    converged: bool
    iterations: int
    history: list = field(default_factory=list, repr=False)
    grad_norm: float = np.nan
    options: dict = field(default_factory=dict, repr=False)

    def elasticity(self, k, l, m):
        return elasticity_at(self.gamma, k, l, m)


class ShareRegressionError(RuntimeError):
    pass


def _lm(B, s, theta0, opts: ShareOptions):
    """Positivity-constrained Levenberg-Marquardt on r = s - log(B theta)."""
    theta = theta0.astype(float).copy()
    u = B @ theta
    if not (u > 0).all():
        raise ShareRegressionError(f"initial log argument non-positive at {(u <= 0).sum()} records")
    r = s - np.log(u)
    f = float(r @ r)
    history = [f]
    lam = 1e-3
    converged = False
    it = 0
    g = np.inf
    for it in range(1, opts.max_iter + 1):
        J = -B / u[:, None]
        g = J.T @ r
        if np.max(np.abs(g)) < opts.gtol:
            converged = True
            break
        d = np.maximum(np.einsum("ij,ij->j", J, J), 1e-12)
        accepted = False
        while lam < 1e16:
            A = np.vstack([J, np.diag(np.sqrt(lam * d))])
            rhs = np.concatenate([-r, np.zeros(len(theta))])
            step = np.linalg.lstsq(A, rhs, rcond=None)[0]
            cand = theta + step
            u_new = B @ cand
            if (u_new > 0).all():
                r_new = s - np.log(u_new)
                f_new = float(r_new @ r_new)
                if f_new <= f:
                    accepted = True
                    break
            lam *= 4.0
        if not accepted:
            # no admissible descent step left: we sit at a constrained stationary point
            converged = np.max(np.abs(g)) < 1e3 * opts.gtol or f < 1e-24
            break
        rel = (f - f_new) / max(f, 1e-300)
        theta, u, r, f = cand, u_new, r_new, f_new
        history.append(f)
        lam = max(lam / 3.0, 1e-12)
        if rel < opts.rtol or f < 1e-26:
            converged = True
            J = -B / u[:, None]
            g = J.T @ r
            break
    return theta, f, converged, it, history, float(np.max(np.abs(g)))


def default_start(B, s) -> np.ndarray:
    """Constant term exp(mean s), diagonal quadratics 0.1, doubled until the log argument is positive."""
    theta = np.zeros(10)
    theta[0] = np.exp(np.mean(s))
    theta[4:7] = 0.1
    return make_positive(B, theta)


def make_positive(B, theta) -> np.ndarray:
    theta = theta.copy()
    for _ in range(60):
        if (B @ theta > 0).all():
            return theta
        theta[4:7] = np.where(theta[4:7] > 0, theta[4:7] * 2.0, 0.1)
    raise ShareRegressionError("could not find a start with a positive log argument")


def _fit_arrays(B, s, init, opts: ShareOptions):
    rng = np.random.default_rng(opts.seed)
    starts = [init if init is not None else default_start(B, s)]
    scale = np.maximum(np.abs(B).mean(axis=0), 1e-8)
    for _ in range(max(opts.n_starts, 1) - 1):
        base = starts[0]
        pert = base * (1 + 0.25 * rng.standard_normal(10)) + 0.01 * rng.standard_normal(10) / scale
        starts.append(make_positive(B, pert))
    best = None
    for th0 in starts:
        res = _lm(B, s, th0, opts)
        if best is None or res[1] < best[1]:
            best = res
    return best


def fit_share_regression(panel: FirmPanel, init: GammaVector | None = None,
                         opts: ShareOptions | None = None) -> ShareFit:
    """Fit the share equation and recover gamma, eps-hat and E-hat.

    ``init`` is a start for the *raw* (E-scaled) coefficients. Residuals are
    returned with the sign of the structural shock, eps_hat = log(gamma'.b) - s.
    """
    opts = opts or ShareOptions()
    lg = panel.logs()
    k, l, m = lg["k"].to_numpy(), lg["l"].to_numpy(), lg["m"].to_numpy()
    s = panel.log_share()
    if not np.isfinite(np.column_stack([k, l, m, s])).all():
        raise ShareRegressionError("non-finite k, l, m or log share")
    if len(s) < 20:
        raise ShareRegressionError("share regression needs at least 20 records")
    B = basis(k, l, m)
    theta0 = init.as_array() if init is not None else None
    if theta0 is not None:
        theta0 = make_positive(B, theta0)

    if opts.training_firms and theta0 is None and len(panel.firm_ids) > opts.training_firms:
        rng = np.random.default_rng(opts.seed)
        ids = rng.choice(panel.firm_ids, size=opts.training_firms, replace=False)
        sub = np.isin(panel.data["firm_id"].to_numpy(), ids)
        theta0 = _fit_arrays(B[sub], s[sub], None, opts)[0]
        theta0 = make_positive(B, theta0)

    theta, f, converged, it, history, gnorm = _fit_arrays(B, s, theta0, opts)
    u = B @ theta
    if not (u > 0).all():
        raise ShareRegressionError(f"log argument non-positive at {(u <= 0).sum()} records")
    eps = np.log(u) - s
    E_hat = float(np.mean(np.exp(eps)))
    raw = GammaVector.from_array(theta)
    return ShareFit(gamma=raw / E_hat, gamma_raw=raw, E_hat=E_hat, residuals=eps, objective=f,
                    converged=bool(converged), iterations=it, history=history, grad_norm=gnorm,
                    options={"rtol": opts.rtol, "gtol": opts.gtol, "max_iter": opts.max_iter,
                             "n_starts": opts.n_starts, "seed": opts.seed})
