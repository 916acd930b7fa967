"""Firm-level cluster bootstrap and the flexible-labour test.

Replicate seeds come from ``SeedSequence(seed, spawn_key=(stage, r))``. Each
replicate's draws therefore depend only on the master seed and the replicate
counter, and serial and threaded runs give identical output.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd

from .panel import FirmPanel

QUANTILE_METHOD = "linear"  # Hyndman-Fan type 7
STAGE1, STAGE2 = 0, 1


class BootstrapError(RuntimeError):
    pass


@dataclass
class BootstrapPlan:
    n_replicates: int = 150
    seed: int = 0
    statistics: tuple | None = None
    max_failure_share: float = 0.2

    def __post_init__(self):
        if self.n_replicates < 2:
            raise ValueError("n_replicates must be at least 2")


def replicate_rng(seed: int, r: int, stage: int = STAGE1) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stage, r)))


def _firm_blocks(panel: FirmPanel):
    ids = panel.data["firm_id"].to_numpy()
    starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
    stops = np.r_[starts[1:], len(ids)]
    return starts, stops


def resample_firms(panel: FirmPanel, rng: np.random.Generator) -> FirmPanel:
    """Draw firms with replacement; each draw brings its whole time series under a fresh id."""
    starts, stops = _firm_blocks(panel)
    G = len(starts)
    pick = rng.integers(0, G, size=G)
    lens = stops[pick] - starts[pick]
    rows = np.concatenate([np.arange(starts[p], stops[p]) for p in pick])
    df = panel.data.iloc[rows].copy()
    df["firm_id"] = np.repeat([f"b{j:07d}" for j in range(G)], lens)
    return panel.with_data(df.reset_index(drop=True))


@dataclass
class BootstrapResult:
    planned: int
    replicates: list
    failures: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def succeeded(self) -> int:
        return sum(r is not None for r in self.replicates)

    @property
    def dropped(self) -> int:
        return self.planned - self.succeeded

    def ok(self) -> list:
        return [r for r in self.replicates if r is not None]

    def distribution(self, stat: str) -> np.ndarray:
        return np.array([np.asarray(r[stat], float) for r in self.ok()])

    def se(self, stats=None) -> dict:
        keys = stats or [k for k, v in self.ok()[0].items() if np.ndim(v) == 0]
        return {k: float(np.std(self.distribution(k), ddof=1)) for k in keys}

    def to_frame(self) -> pd.DataFrame:
        recs = []
        for i, r in enumerate(self.replicates):
            if r is None:
                continue
            for k, v in r.items():
                if np.ndim(v) == 0:
                    recs.append((i, k, float(v)))
        return pd.DataFrame(recs, columns=["replicate", "statistic", "value"])

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def bootstrap_pipeline(panel: FirmPanel, plan: BootstrapPlan,
                       pipeline: Callable[[FirmPanel], dict], threads: int = 1) -> BootstrapResult:
    """Run ``pipeline`` on ``plan.n_replicates`` firm-cluster resamples of ``panel``.

    ``pipeline`` maps a panel to a dict of statistics. A replicate raising an
    exception is dropped and its message kept in ``failures``. More than
    ``plan.max_failure_share`` dropped replicates raise ``BootstrapError``.
    """
    def one(r):
        try:
            out = pipeline(resample_firms(panel, replicate_rng(plan.seed, r)))
        except Exception as exc:  # replicate-level failure is tolerated
            return None, f"{type(exc).__name__}: {exc}"
        if plan.statistics is not None:
            out = {k: out[k] for k in plan.statistics}
        return out, None

    res = _map(one, range(plan.n_replicates), threads)
    reps = [r for r, _ in res]
    failures = {i: msg for i, (_, msg) in enumerate(res) if msg is not None}
    result = BootstrapResult(planned=plan.n_replicates, replicates=reps, failures=failures,
                             seed=plan.seed)
    if result.dropped > plan.max_failure_share * plan.n_replicates:
        raise BootstrapError(f"{result.dropped} of {plan.n_replicates} bootstrap replicates failed; "
                             f"first error: {next(iter(failures.values()))}")
    return result


def labor_gap(func) -> np.ndarray:
    """Per-record P*Y*elas_L - wage bill."""
    f = func.frame if hasattr(func, "frame") else func
    return f["revenue"].to_numpy(float) * f["elas_L"].to_numpy(float) - f["wage_bill"].to_numpy(float)


def flexible_labor_T(func, panel: FirmPanel | None = None) -> float:
    """Average gap between the value of labour's marginal product and the wage bill."""
    gap = labor_gap(func)
    if panel is not None:
        d = panel.data
        gap = panel.revenue() * func.frame["elas_L"].to_numpy(float) - d["wage_bill"].to_numpy(float)
    gap = gap[np.isfinite(gap)]
    if gap.size == 0:
        raise ValueError("flexible-labour statistic needs at least one record with a wage bill")
    return float(gap.mean())


@dataclass
class TestResult:
    T: float
    ci90: tuple
    ci95: tuple
    ci99: tuple
    n: int
    n_draws: int
    meta: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    @property
    def reject_at(self) -> tuple:
        out = []
        for lev, ci in ((0.10, self.ci90), (0.05, self.ci95), (0.01, self.ci99)):
            if not ci[0] <= 0.0 <= ci[1]:
                out.append(lev)
        return tuple(out)

    def to_dict(self) -> dict:
        return {"T": self.T, "ci90": list(self.ci90), "ci95": list(self.ci95),
                "ci99": list(self.ci99), "n": self.n, "n_draws": self.n_draws,
                "reject_at": list(self.reject_at), **self.meta}


def _subset_mask(func, subset) -> np.ndarray:
    f = func.frame
    if subset is None:
        return np.ones(len(f), dtype=bool)
    if callable(subset):
        return np.asarray(subset(f), dtype=bool)
    sec = f["sector"].astype(str)
    return np.asarray(sec.map(lambda s: any(s.startswith(str(p)) for p in subset)), dtype=bool)


def firm_gap_sums(func, subset=None):
    """Per-firm sum and count of finite labour gaps within ``subset``."""
    gap = labor_gap(func)
    keep = _subset_mask(func, subset) & np.isfinite(gap)
    if not keep.any():
        raise ValueError("subset leaves no records for the flexible-labour test")
    ids = func.frame["firm_id"].to_numpy()[keep]
    codes, uniq = pd.factorize(ids, sort=False)
    sums = np.bincount(codes, weights=gap[keep])
    ns = np.bincount(codes).astype(float)
    return sums, ns


def ci_from(draws, level: float) -> tuple:
    a = (1 - level) / 2
    lo, hi = np.quantile(draws, [a, 1 - a], method=QUANTILE_METHOD)
    return float(lo), float(hi)


def stage_two_draws(sums, ns, n_draws: int, rng: np.random.Generator, chunk: int = 2000):
    """Average gap over ``n_draws`` firm resamples given per-firm sums and counts."""
    G = len(sums)
    p = np.full(G, 1.0 / G)
    out = np.empty(n_draws)
    for s in range(0, n_draws, chunk):
        c = rng.multinomial(G, p, size=min(chunk, n_draws - s)).astype(float)
        out[s:s + len(c)] = (c @ sums) / (c @ ns)
    return out


def two_stage_test_bootstrap(panel: FirmPanel, plan: BootstrapPlan, estimator: Callable,
                             subset=None, stage2_draws: int | None = None, threads: int = 1,
                             stage1: BootstrapResult | None = None) -> TestResult:
    """Flexible-labour test with estimation and sampling uncertainty.

    Parameters
    ----------
    estimator : callable
        Maps a panel to its ``FirmFunctionals``; run on the full panel and on
        every stage-one resample.
    subset : sequence of sector prefixes or callable on the functionals frame, optional
        Restricts the records entering T (the model is still estimated on all records).
    stage2_draws : int, optional
        Firm resamples per stage-one replicate; 15,000 by default, 5,000 with a subset.
    stage1 : BootstrapResult, optional
        Reuse replicates holding ``firm_sums`` and ``firm_ns`` entries.
    """
    if stage2_draws is None:
        stage2_draws = 5000 if subset is not None else 15000
    func = estimator(panel)
    sums, ns = firm_gap_sums(func, subset)
    T = float(sums.sum() / ns.sum())

    if stage1 is None:
        def pipe(p):
            s, n = firm_gap_sums(estimator(p), subset)
            return {"T": float(s.sum() / n.sum()), "firm_sums": s, "firm_ns": n}
        stage1 = bootstrap_pipeline(panel, plan, pipe, threads=threads)

    def stage2(r):
        rep = stage1.replicates[r]
        if rep is None:
            return np.empty(0)
        return stage_two_draws(rep["firm_sums"], rep["firm_ns"], stage2_draws,
                               replicate_rng(plan.seed, r, STAGE2))

    pooled = np.concatenate(_map(stage2, range(stage1.planned), threads))
    return TestResult(T=T, ci90=ci_from(pooled, 0.90), ci95=ci_from(pooled, 0.95),
                      ci99=ci_from(pooled, 0.99), n=int(ns.sum()), n_draws=int(pooled.size),
                      meta={"stage1_planned": stage1.planned, "stage1_succeeded": stage1.succeeded,
                            "stage1_dropped": stage1.dropped, "stage2_draws": stage2_draws,
                            "quantile_method": "type7", "pooling": "uncentered",
                            "seed": plan.seed})
