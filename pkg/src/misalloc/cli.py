"""Command-line pipeline: simulate or ingest, estimate, analyze, test, event study, report.

Usage::

    misalloc run-all --config run.yaml --out results/ --seed 1 --threads 4

Exit codes: 0 success, 1 configuration or input validation error, 2 runtime error.
"""
from __future__ import annotations

import os

for _v in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_v, "1")  # single-threaded BLAS keeps results independent of --threads

import argparse
import copy
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .analytics import build_dispersion_table, dispersion_series, fe_regress, fit_gev, s2_channels, \
    s2_channels_cov, s2_total, sector_betas
from .event_study import att_group_time, did_panel_from_table, wild_cluster_bootstrap
from .functionals import FirmFunctionals, compute_functionals, elasticity_summary
from .gmm import GmmOptions, estimate_model, warm_start_estimator
from .inference import BootstrapPlan, bootstrap_pipeline, two_stage_test_bootstrap
from .panel import FirmPanel, clean_panel, ingest_csv
from .report import did_table, elasticity_table, labor_test_table, productivity_table, \
    regression_table, s2_table
from .share import ShareOptions
from .simulate import DgpSpec, simulate, write_truth_csv

log = logging.getLogger("misalloc")

STAGES = ("simulate", "estimate", "analyze", "test_labor", "event_study", "report")
REQUIRES = {"estimate": (), "analyze": ("estimate",), "test_labor": ("estimate",),
            "event_study": ("analyze",), "report": ("estimate",)}
VERB_STAGE = {"simulate": "simulate", "estimate": "estimate", "analyze": "analyze",
              "test-labor": "test_labor", "event-study": "event_study"}

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "out": "misalloc-out",
    "data": {"input": None, "schema": None, "sector_level": 3, "clean": False, "simulate": None},
    "stages": {"simulate": True, "estimate": True, "analyze": True, "test_labor": False,
               "event_study": False, "report": True},
    "share": {"rtol": 1e-10, "gtol": 1e-8, "max_iter": 500, "n_starts": 5, "training_firms": None},
    "gmm": {"degree": 3, "markov_instruments": "omega_lag", "max_outer": 200, "xtol": 1e-8,
            "moment_tol": 1e-6},
    "bootstrap": {"n_replicates": 150, "stage2_draws": None, "subsets": None},
    "event_study": {"treated_countries": [], "treatment_year": None, "outcome": "var_mp_K",
                    "covariates": [], "n_boot": 999},
}
DGP_KEYS = {f.name for f in fields(DgpSpec)}


class ConfigError(ValueError):
    """Raised with every validation problem found in a configuration."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _merge(base: dict, over: dict, path: str, problems: list) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in base:
            problems.append(f"unknown key {path}{k}")
        elif isinstance(base[k], dict) and k != "schema":
            if not isinstance(v, dict):
                problems.append(f"{path}{k} must be a mapping")
            else:
                out[k] = _merge(base[k], v, f"{path}{k}.", problems)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Read YAML, merge onto defaults, apply overrides and validate; raise ConfigError listing all problems."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"])
        if not isinstance(raw, dict):
            raise ConfigError(["config root must be a mapping"])
    problems: list = []
    cfg = _merge(DEFAULTS, raw, "", problems)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    problems += validate_config(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def validate_config(cfg: dict) -> list:
    p = []
    d = cfg["data"]
    if (d["input"] is None) == (d["simulate"] is None):
        p.append("exactly one of data.input and data.simulate must be given")
    if d["simulate"] is not None:
        if not isinstance(d["simulate"], dict):
            p.append("data.simulate must be a mapping of simulator parameters")
        else:
            bad = sorted(set(d["simulate"]) - DGP_KEYS - {"seed"})
            p += [f"unknown key data.simulate.{k}" for k in bad]
            if not bad:
                try:
                    _dgp(cfg).validate()
                except (TypeError, ValueError) as exc:
                    p.append(f"data.simulate: {exc}")
    if d["input"] is not None and not Path(d["input"]).is_file():
        p.append(f"data.input {d['input']} does not exist")
    st = cfg["stages"]
    for s, v in st.items():
        if not isinstance(v, bool):
            p.append(f"stages.{s} must be true or false")
    for s, reqs in REQUIRES.items():
        for r in reqs:
            if st.get(s) and not st.get(r):
                p.append(f"stage {s} requires stage {r}")
    if d["simulate"] is not None and not st["simulate"] and any(st[s] for s in REQUIRES):
        p.append("stages.simulate is disabled but the data source is the simulator")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        p.append("seed must be a non-negative integer")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        p.append("threads must be a positive integer")
    if cfg["gmm"]["degree"] not in (1, 2, 3):
        p.append("gmm.degree must be 1, 2 or 3")
    if cfg["gmm"]["markov_instruments"] not in ("omega_lag", "script_y_lag"):
        p.append("gmm.markov_instruments must be omega_lag or script_y_lag")
    n = cfg["bootstrap"]["n_replicates"]
    if not isinstance(n, int) or (n != 0 and n < 2):
        p.append("bootstrap.n_replicates must be 0 (off) or at least 2")
    if st["test_labor"] and (not isinstance(n, int) or n < 2):
        p.append("stage test_labor needs bootstrap.n_replicates >= 2")
    ev = cfg["event_study"]
    if st["event_study"]:
        if not ev["treated_countries"]:
            p.append("event_study.treated_countries is empty")
        if not isinstance(ev["treatment_year"], int):
            p.append("event_study.treatment_year must be an integer year")
    try:
        out = Path(cfg["out"])
        if out.exists() and not out.is_dir():
            p.append(f"output path {out} is not a directory")
    except TypeError:
        p.append("out must be a path")
    return p


def _dgp(cfg: dict) -> DgpSpec:
    kw = dict(cfg["data"]["simulate"])
    kw.setdefault("seed", cfg["seed"])
    for k in ("cd", "markov", "countries", "treated_countries"):
        if k in kw and kw[k] is not None:
            kw[k] = tuple(kw[k])
    return DgpSpec(**kw)


# ---------------------------------------------------------------------------
# artifacts

class Artifacts:
    def __init__(self, out: Path):
        self.out = out
        self.files: dict = {}

    def path(self, name: str) -> Path:
        self.files[name] = name
        return self.out / name

    def write_json(self, name: str, obj) -> None:
        self.path(name).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def manifest(self, cfg: dict) -> dict:
        arts = {}
        for name in sorted(self.files):
            b = (self.out / name).read_bytes()
            arts[name] = {"sha256": hashlib.sha256(b).hexdigest(), "bytes": len(b)}
        shown = {k: v for k, v in cfg.items() if k not in ("threads", "out")}
        return {"version": __version__, "seed": cfg["seed"], "config": shown,
                "config_sha256": hashlib.sha256(json.dumps(shown, sort_keys=True, default=_jsonable)
                                                .encode()).hexdigest(),
                "artifacts": arts}


def _jsonable(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.ndarray, tuple)):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _r(x, digits=12):
    """Round floats for JSON artifacts so tiny platform noise does not leak into hashes."""
    if isinstance(x, dict):
        return {k: _r(v, digits) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_r(v, digits) for v in x]
    if isinstance(x, (float, np.floating)):
        return None if not np.isfinite(x) else float(f"{float(x):.{digits}g}")
    return x


# ---------------------------------------------------------------------------
# stages

def _share_opts(cfg):
    s = cfg["share"]
    return ShareOptions(rtol=s["rtol"], gtol=s["gtol"], max_iter=s["max_iter"], n_starts=s["n_starts"],
                        seed=cfg["seed"], training_firms=s["training_firms"])


def _gmm_opts(cfg, simplex=True):
    g = cfg["gmm"]
    return GmmOptions(degree=g["degree"], markov_instruments=g["markov_instruments"],
                      max_outer=g["max_outer"], xtol=g["xtol"], moment_tol=g["moment_tol"], simplex=simplex)


def stage_data(cfg, art: Artifacts) -> FirmPanel:
    d = cfg["data"]
    if d["simulate"] is not None:
        panel, truth = simulate(_dgp(cfg))
        panel.to_csv(art.path("panel.csv"))
        write_truth_csv(truth, art.path("truth.csv"))
    else:
        panel = ingest_csv(d["input"], schema=d["schema"], sector_level=d["sector_level"])
        if d["clean"]:
            panel = clean_panel(panel)
        art.write_json("drop_report.json", panel.drop_report.to_dict())
    return panel


def _warm_estimator(cfg, base):
    return warm_start_estimator(base, _share_opts(cfg), _gmm_opts(cfg))


def _stats(model, panel) -> dict:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        s = elasticity_summary(compute_functionals(panel, model))
    return {**{k: v for k, v in model.delta.to_dict().items()}, "E_hat": model.E_hat, "M_hat": model.M_hat,
            "elas_K": s["elas_K"], "elas_L": s["elas_L"], "elas_M": s["elas_M"]}


def stage_estimate(cfg, panel: FirmPanel, art: Artifacts):
    models, funcs, params = {}, [], {}
    for c in sorted(panel.data["country"].unique()):
        sub = panel.with_data(panel.data.loc[panel.data["country"] == c])
        model = estimate_model(sub, share_opts=_share_opts(cfg), gmm_opts=_gmm_opts(cfg))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            func = compute_functionals(sub, model)
        models[c] = (sub, model)
        funcs.append(func.frame)
        p = model.params_dict()
        p["summary"] = elasticity_summary(func)
        n = cfg["bootstrap"]["n_replicates"]
        if n:
            est = _warm_estimator(cfg, model)
            res = bootstrap_pipeline(sub, BootstrapPlan(n, cfg["seed"]), lambda q: _stats(est(q), q),
                                     threads=cfg["threads"])
            p["se"] = res.se()
            p["bootstrap"] = {"planned": res.planned, "succeeded": res.succeeded, "dropped": res.dropped}
            res.to_frame().assign(country=c).to_csv(art.path(f"bootstrap_{c}.csv"), index=False,
                                                    float_format="%.12g")
        params[c] = p
    art.write_json("model.json", _r(params))
    func = FirmFunctionals(pd.concat(funcs, ignore_index=True))
    func.to_csv(art.path("functionals.csv"))
    return models, func


def stage_analyze(cfg, func: FirmFunctionals, art: Artifacts):
    f = func.frame
    table = build_dispersion_table(func)
    table.to_csv(art.path("dispersion.csv"))
    regs, s2, gev = [], {}, {}
    for c in sorted(f["country"].unique()):
        fc = f.loc[f["country"] == c]
        tc = table.frame.loc[table.frame["country"] == c]
        s2[c] = {}
        for X in ("K", "L", "M"):
            try:
                r = fe_regress(fc[f"mp_{X}"], fc[["dnu"]], fc[["country", "industry", "year"]], fc["firm_id"],
                               fe_spec="country x industry x year")
                regs.append({"country": c, "input": X, "beta": r.coef["dnu"], "se": r.se["dnu"],
                             "r2": r.r2, "r2_adj": r.r2_adj, "r2_within": r.r2_within, "n": r.n})
            except ValueError as exc:
                log.warning("regression %s/%s skipped: %s", c, X, exc)
            b_dev = sector_betas(fc, X)
            b_ch = sector_betas(fc, X, regressors=("omega_lag", "eta", "d_eps"))
            entry = {}
            for key, fn, b in (("total", s2_total, b_dev), ("channels", s2_channels, b_ch),
                               ("channels_cov", s2_channels_cov, b_ch)):
                try:
                    v = fn(tc, b, X)
                    entry[key] = list(v) if isinstance(v, tuple) else v
                except ValueError:
                    entry[key] = float("nan") if key == "total" else [float("nan")] * 3
            s2[c][X] = entry
        lv = np.exp(fc["nu"].to_numpy(float))
        try:
            g = fit_gev(lv)
            gev[c] = {"xi": g.xi, "sigma": g.sigma, "mu": g.mu, "mean": g.mean, "loglik": g.loglik,
                      "se": g.se, "n": g.n}
        except ValueError as exc:
            log.warning("GEV fit for %s skipped: %s", c, exc)
    pd.DataFrame(regs).to_csv(art.path("regressions.csv"), index=False, float_format="%.12g")
    art.write_json("s2.json", _r(s2))
    art.write_json("gev.json", _r(gev))
    dispersion_series(func).reset_index().to_csv(art.path("dispersion_series.csv"), index=False,
                                                 float_format="%.12g")
    return table


def stage_test_labor(cfg, models: dict, art: Artifacts):
    b = cfg["bootstrap"]
    out = []
    for c, (sub, model) in sorted(models.items()):
        est0 = _warm_estimator(cfg, model)

        def est(p):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                return compute_functionals(p, est0(p))

        plan = BootstrapPlan(b["n_replicates"], cfg["seed"])
        groups = [("All", None)] + [(str(s), list(s) if isinstance(s, list) else [s]) for s in (b["subsets"] or [])]
        for label, subset in groups:
            r = two_stage_test_bootstrap(sub, plan, est, subset=subset, stage2_draws=b["stage2_draws"],
                                         threads=cfg["threads"])
            out.append({"country": c, "label": f"{c} {label}", **r.to_dict()})
    art.write_json("labor_test.json", _r(out))
    return out


def stage_event_study(cfg, table, art: Artifacts):
    ev = cfg["event_study"]
    columns = []
    specs = [("unconditional", ())]
    if ev["covariates"]:
        specs.append(("covariates", tuple(ev["covariates"])))
    first = None
    for label, covs in specs:
        dp = did_panel_from_table(table, ev["treated_countries"], ev["treatment_year"], outcome=ev["outcome"],
                                  covariates=covs)
        res = att_group_time(dp)
        if ev["n_boot"]:
            res = wild_cluster_bootstrap(dp, n_boot=ev["n_boot"], seed=cfg["seed"]).apply(res)
        first = first or res
        columns.append({"label": label, "overall": res.overall, "overall_se": res.overall_se, "pre_att": res.pre_att,
                          "pre_se": res.pre_se, "treatment_year": res.treatment_year,
                          "n_treated": res.n_treated, "n_control": res.n_control,
                          "dropped_times": res.dropped_times,
                          "by_time": res.by_time.to_dict(orient="records")})
    first.to_csv(art.path("event_study.csv"))
    art.write_json("did.json", _r({"columns": columns}))


# ---------------------------------------------------------------------------
# report

class MissingArtifactError(FileNotFoundError):
    pass


def render_report(out: Path) -> str:
    """Markdown summary of the artifacts listed in ``out/manifest.json``."""
    out = Path(out)
    mpath = out / "manifest.json"
    if not mpath.is_file():
        raise MissingArtifactError(f"manifest.json not found in {out}")
    manifest = json.loads(mpath.read_text())
    arts = manifest["artifacts"]
    for name in arts:
        if not (out / name).is_file():
            raise MissingArtifactError(f"artifact {name} listed in the manifest is missing")
    load = lambda n: json.loads((out / n).read_text())
    parts = [f"# Misallocation pipeline report\n\nseed {manifest['seed']}, version {manifest['version']}"]
    if "model.json" in arts:
        model = load("model.json")
        parts.append("## Average output elasticities\n\n"
                     + elasticity_table({c: p["summary"] for c, p in model.items()}))
        parts.append("## Productivity estimates\n\n"
                     + productivity_table(model, load("gev.json") if "gev.json" in arts else None))
    if "regressions.csv" in arts:
        regs = pd.read_csv(out / "regressions.csv", dtype={"country": str}).to_dict(orient="records")
        parts.append("## Marginal products and TFP growth\n\n" + regression_table(regs))
    if "s2.json" in arts:
        s2 = load("s2.json")
        parts.append("## Dispersion explained by TFP volatility (S2)\n\n" + s2_table(s2, "total"))
        parts.append("## S2 by TFP component\n\n" + s2_table(s2, "channels"))
        parts.append("## S2 by TFP component with covariances\n\n" + s2_table(s2, "channels_cov"))
    if "labor_test.json" in arts:
        parts.append("## Flexible labor test\n\n" + labor_test_table(load("labor_test.json")))
    if "did.json" in arts:
        parts.append("## Difference-in-differences\n\n" + did_table(load("did.json")["columns"]))
    return "\n\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# driver

def run(cfg: dict, upto: str | None = None) -> dict:
    """Execute enabled stages (or the prerequisites of ``upto``) and write the manifest."""
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    art = Artifacts(out)
    st = dict(cfg["stages"])
    if upto is not None:
        order = ["simulate", "estimate", "analyze", "test_labor", "event_study"]
        need = {upto}
        for s in reversed(order):
            if s in need:
                need.update(REQUIRES.get(s, ()))
        if upto != "simulate":
            need.add("simulate")
        st = {s: s in need for s in STAGES}
        st["report"] = False
    panel = stage_data(cfg, art)
    models = func = table = None
    if st["estimate"]:
        models, func = stage_estimate(cfg, panel, art)
    if st["analyze"]:
        table = stage_analyze(cfg, func, art)
    if st["test_labor"]:
        stage_test_labor(cfg, models, art)
    if st["event_study"]:
        stage_event_study(cfg, table, art)
    manifest = art.manifest(cfg)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    if st["report"]:
        (out / "report.md").write_text(render_report(out))
        manifest["artifacts"]["report.md"] = {
            "sha256": hashlib.sha256((out / "report.md").read_bytes()).hexdigest(),
            "bytes": (out / "report.md").stat().st_size}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                      default=_jsonable) + "\n")
    return manifest


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="misalloc", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in ("simulate", "estimate", "analyze", "test-labor", "event-study", "report", "run-all"):
        p = sub.add_parser(verb)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--threads", type=int, help="worker threads for bootstrap replicates")
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
    try:
        if args.verb == "report":
            out = Path(args.out or (load_config(args.config)["out"] if args.config else DEFAULTS["out"]))
            text = render_report(out)
            (out / "report.md").write_text(text)
            sys.stdout.write(text)
            return 0
        if args.config is None:
            raise ConfigError(["--config is required"])
        cfg = load_config(args.config, {"seed": args.seed, "threads": args.threads, "out": args.out})
        manifest = run(cfg, upto=None if args.verb == "run-all" else VERB_STAGE[args.verb])
        print(json.dumps(sorted(manifest["artifacts"])))
        return 0
    except ConfigError as exc:
        for prob in exc.problems:
            print(f"config error: {prob}", file=sys.stderr)
        return 1
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure of a stage
        log.debug("stage failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
