"""Firm-year panel container, CSV ingestion and sample-construction rules.

Missing observations are carried as NaN in float columns. Level variables
(Y, K, L, M) must be strictly positive wherever they are observed.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

LEVEL_VARS = ("Y", "K", "L", "M")
NUMERIC_VARS = ("Y", "K", "L", "M", "wage_bill", "materials_cost", "output_price_level")
MANDATORY = ("firm_id", "year", "sector", "Y", "K", "L", "M", "materials_cost")
COLUMNS = ("firm_id", "year", "sector", "country") + NUMERIC_VARS

DEFAULTS = {"country": "XX", "wage_bill": np.nan, "output_price_level": 1.0}


class SchemaError(ValueError):
    """Raised when an input file lacks a mandatory column."""


@dataclass
class DropReport:
    """Counts of records removed during ingestion or cleaning, by reason."""

    counts: Counter = field(default_factory=Counter)
    n_read: int = 0

    def add(self, reason: str, n: int = 1) -> None:
        if n:
            self.counts[reason] += n

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {"n_read": self.n_read, "dropped": dict(sorted(self.counts.items())),
                "total_dropped": self.total}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


@dataclass(frozen=True)
class FirmPanel:
    """Long firm-year panel sorted by (firm_id, year).

    ``data`` holds one row per firm-year with the columns in ``COLUMNS``.
    Treat it as read-only; every transformation returns a new panel.
    """

    data: pd.DataFrame
    sector_level: int = 3
    drop_report: DropReport | None = None

    def __post_init__(self):
        df = self.data
        missing = [c for c in COLUMNS if c not in df.columns]
        if missing:
            raise SchemaError(f"panel is missing columns {missing}")
        df = df.sort_values(["firm_id", "year"], kind="mergesort").reset_index(drop=True)
        if df.duplicated(["firm_id", "year"]).any():
            raise ValueError("(firm_id, year) must be unique")
        object.__setattr__(self, "data", df)

    def __len__(self) -> int:
        return len(self.data)

    @property
    def year_range(self) -> tuple[int, int]:
        return int(self.data["year"].min()), int(self.data["year"].max())

    @property
    def firm_ids(self) -> np.ndarray:
        return self.data["firm_id"].unique()

    @property
    def industry(self) -> pd.Series:
        """Sector code truncated to ``sector_level`` digits."""
        return self.data["sector"].astype(str).str[: self.sector_level]

    def logs(self) -> pd.DataFrame:
        """Natural logs y, k, l, m."""
        return pd.DataFrame({v.lower(): np.log(self.data[v].to_numpy(float)) for v in LEVEL_VARS})

    def log_share(self) -> np.ndarray:
        """s = ln(materials_cost / (P * Y)), the log intermediate-input share of output."""
        d = self.data
        return np.log(d["materials_cost"].to_numpy(float)
                      / (d["output_price_level"].to_numpy(float) * d["Y"].to_numpy(float)))

    def revenue(self) -> np.ndarray:
        return self.data["output_price_level"].to_numpy(float) * self.data["Y"].to_numpy(float)

    def lag_index(self) -> np.ndarray:
        """Row position of each record's previous-year record in the same firm, -1 if none."""
        d = self.data
        same_firm = d["firm_id"].to_numpy()[1:] == d["firm_id"].to_numpy()[:-1]
        consecutive = np.diff(d["year"].to_numpy()) == 1
        lag = np.full(len(d), -1, dtype=np.int64)
        ok = np.flatnonzero(same_firm & consecutive) + 1
        lag[ok] = ok - 1
        return lag

    def with_data(self, data: pd.DataFrame) -> "FirmPanel":
        return FirmPanel(data, sector_level=self.sector_level, drop_report=self.drop_report)

    def subset_firms(self, firm_ids) -> "FirmPanel":
        keep = self.data["firm_id"].isin(set(firm_ids))
        return self.with_data(self.data.loc[keep])

    def to_csv(self, path) -> None:
        self.data.loc[:, list(COLUMNS)].to_csv(path, index=False, float_format="%.17g")

    def equals(self, other: "FirmPanel") -> bool:
        a = self.data.loc[:, list(COLUMNS)].reset_index(drop=True)
        b = other.data.loc[:, list(COLUMNS)].reset_index(drop=True)
        return a.shape == b.shape and a.equals(b)


def _validate(df: pd.DataFrame, report: DropReport) -> pd.DataFrame:
    """Drop rows violating the firm-year invariants, recording why."""
    keep = np.ones(len(df), dtype=bool)

    bad_key = df["firm_id"].isna() | df["year"].isna() | df["sector"].isna()
    report.add("missing_key", int(bad_key.sum()))
    keep &= ~bad_key.to_numpy()

    for v in NUMERIC_VARS:
        x = df[v].to_numpy(float)
        inf = np.isinf(x) & keep
        report.add(f"nonfinite_{v}", int(inf.sum()))
        keep &= ~inf
    for v in LEVEL_VARS:
        x = df[v].to_numpy(float)
        bad = (x <= 0) & keep
        report.add(f"nonpositive_{v}", int(bad.sum()))
        keep &= ~bad
    for v in ("wage_bill", "materials_cost"):
        x = df[v].to_numpy(float)
        bad = (x < 0) & keep
        report.add(f"negative_{v}", int(bad.sum()))
        keep &= ~bad
    p = df["output_price_level"].to_numpy(float)
    bad = ~(p > 0) & keep
    report.add("nonpositive_output_price_level", int(bad.sum()))
    keep &= ~bad

    df = df.loc[keep]
    dup = df.duplicated(["firm_id", "year"], keep="first")
    report.add("duplicate_key", int(dup.sum()))
    return df.loc[~dup.to_numpy()]


def ingest_csv(path, schema: dict | None = None, sector_level: int = 3) -> FirmPanel:
    """Read a firm-year CSV into a validated panel.

    Parameters
    ----------
    path : path-like
        UTF-8 CSV with a header row.
    schema : dict, optional
        Maps canonical column names (``firm_id``, ``Y``, ...) to the file's
        header names. Unmapped canonical names are looked up verbatim.
    sector_level : int
        Digits of the sector code defining an industry cell.

    Rows with unparseable numbers or invariant violations are dropped and
    counted in ``panel.drop_report``; a missing mandatory column raises
    ``SchemaError``.
    """
    schema = dict(schema or {})
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    report = DropReport(n_read=len(raw))

    cols = {}
    for name in COLUMNS:
        src = schema.get(name, name)
        if src in raw.columns:
            cols[name] = raw[src]
        elif name in MANDATORY:
            raise SchemaError(f"mandatory column {name!r} (source {src!r}) not found in {path}")
    df = pd.DataFrame(cols, index=raw.index)

    unparseable = np.zeros(len(df), dtype=bool)
    for name in NUMERIC_VARS + ("year",):
        if name not in df:
            continue
        txt = df[name].str.strip()
        num = pd.to_numeric(txt.where(txt != ""), errors="coerce")
        unparseable |= (num.isna() & (txt != "")).to_numpy()
        ok = num.notna()
        # pandas' fast parser can be off by an ulp; re-parse valid entries exactly
        num = num.astype(float)
        num[ok] = [float(v) for v in txt[ok]]
        df[name] = num
    report.add("unparseable", int(unparseable.sum()))
    df = df.loc[~unparseable]

    for name, default in DEFAULTS.items():
        if name not in df:
            df[name] = default
    if "country" in cols:
        df["country"] = df["country"].replace("", DEFAULTS["country"])
    df["output_price_level"] = df["output_price_level"].fillna(1.0)
    df["firm_id"] = df["firm_id"].mask(df["firm_id"] == "")
    df["sector"] = df["sector"].mask(df["sector"] == "")

    df = _validate(df, report)
    df = df.astype({"year": np.int64})
    for v in NUMERIC_VARS:
        df[v] = df[v].astype(float)
    return FirmPanel(df.loc[:, list(COLUMNS)], sector_level=sector_level, drop_report=report)


def construct_us_materials(cogs, xsga, wage_bill, depreciation):
    """Materials cost as COGS + SG&A - wage bill - depreciation.

    Non-positive results become NaN. Works on scalars and arrays.
    """
    res = (np.asarray(cogs, float) + np.asarray(xsga, float)
           - np.asarray(wage_bill, float) - np.asarray(depreciation, float))
    out = np.where(res > 0, res, np.nan)
    return float(out) if out.ndim == 0 else out


def productivity_sample(panel: FirmPanel, key_var: str) -> FirmPanel:
    """Keep firms with >= 2 observed ``key_var`` values covering >= 50% of their records."""
    if key_var not in panel.data.columns or key_var in ("firm_id", "year", "sector", "country"):
        raise KeyError(f"unknown panel variable {key_var!r}")
    d = panel.data
    g = d[key_var].notna().groupby(d["firm_id"], sort=False)
    n_obs = g.sum()
    share = g.mean()
    ok = n_obs[(n_obs >= 2) & (share >= 0.5)].index
    return panel.with_data(d.loc[d["firm_id"].isin(ok)])


def interpolate_gaps(series, max_gap: int = 3):
    """Linearly fill internal gaps of at most ``max_gap`` missing points.

    If any internal gap is longer than ``max_gap`` the whole series becomes
    missing. Leading and trailing gaps are never extrapolated. The index (if
    any) supplies the x-coordinates; otherwise positions are used.
    """
    s = pd.Series(series, dtype=float)
    x = np.asarray(s.index, dtype=float) if not isinstance(s.index, pd.RangeIndex) \
        else np.arange(len(s), dtype=float)
    v = s.to_numpy(copy=True)
    obs = np.flatnonzero(~np.isnan(v))
    if len(obs) < 2:
        out = v
    else:
        gaps = np.diff(obs) - 1
        if (gaps > max_gap).any():
            out = np.full_like(v, np.nan)
        else:
            out = v.copy()
            inner = np.arange(obs[0], obs[-1] + 1)
            out[inner] = np.interp(x[inner], x[obs], v[obs])
    if isinstance(series, pd.Series):
        return pd.Series(out, index=series.index, name=series.name)
    return out


def interpolate_panel(panel: FirmPanel, variables=("Y", "K", "L", "M", "materials_cost", "wage_bill"),
                      max_gap: int = 3) -> FirmPanel:
    """Apply :func:`interpolate_gaps` to each firm's series of each variable."""
    d = panel.data.copy()
    for v in variables:
        d[v] = (d.set_index("year").groupby("firm_id", sort=False)[v]
                .transform(lambda s: interpolate_gaps(s, max_gap)).to_numpy())
    return panel.with_data(d)


def clean_panel(panel: FirmPanel, key_var: str = "materials_cost",
                required=("Y", "K", "L", "M", "materials_cost")) -> FirmPanel:
    """Productivity sample on ``key_var``, gap interpolation, then drop incomplete records."""
    report = DropReport(n_read=len(panel))
    if panel.drop_report is not None:
        report.counts.update(panel.drop_report.counts)
        report.n_read = panel.drop_report.n_read
    n0 = len(panel)
    out = productivity_sample(panel, key_var)
    report.add("productivity_sample", n0 - len(out))
    out = interpolate_panel(out)
    d = out.data
    incomplete = d.loc[:, list(required)].isna().any(axis=1)
    report.add("incomplete_after_interpolation", int(incomplete.sum()))
    d = d.loc[~incomplete]
    return FirmPanel(d, sector_level=panel.sector_level, drop_report=report)
