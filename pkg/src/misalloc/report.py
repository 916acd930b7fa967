"""Markdown rendering of pipeline outputs.

Every renderer takes plain dicts or frames, so the same functions serve the
CLI report and hand-built fixtures.
"""
from __future__ import annotations

import math


def fmt(v, digits: int = 3) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    if isinstance(v, (int,)) and not isinstance(v, bool):
        return f"{v:d}"
    return f"{float(v):.{digits}f}"


def pct(v, digits: int = 2) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    return f"{100 * float(v):.{digits}f}%"


def md_table(header, rows, align=None) -> str:
    align = align or ["l"] + ["r"] * (len(header) - 1)
    sep = ["---" if a == "l" else "---:" for a in align]
    lines = ["| " + " | ".join(header) + " |", "| " + " | ".join(sep) + " |"]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines)


def elasticity_table(summaries: dict) -> str:
    """``summaries`` maps country -> dict with elas_K, elas_L, elas_M, returns_to_scale, K_over_L, n."""
    rows = [[c, fmt(s["elas_K"]), fmt(s["elas_L"]), fmt(s["elas_M"]), fmt(s["returns_to_scale"]),
             fmt(s["K_over_L"]), fmt(int(s["n"]))] for c, s in sorted(summaries.items())]
    return md_table(["Country", "Capital", "Labor", "Materials", "Returns to scale", "K/L", "N"], rows)


def productivity_table(params: dict, gev: dict | None = None) -> str:
    """Markov law coefficients (section I) and GEV fit of TFP levels (section II)."""
    rows = []
    for c, p in sorted(params.items()):
        d = p["delta"]
        se = p.get("se", {})
        cell = lambda k: fmt(d[k]) + (f" ({fmt(se[k])})" if k in se else "")
        rows.append([c, cell("d0"), cell("d1"), cell("d2"), cell("d3"), fmt(p["E_hat"]), fmt(p["M_hat"])])
    out = "**I. Productivity process**\n\n" + md_table(
        ["Country", "delta0", "delta1", "delta2", "delta3", "E", "M"], rows)
    if gev:
        g_rows = []
        for c, g in sorted(gev.items()):
            se = g.get("se", {})
            g_rows.append([c] + [fmt(g[k]) + (f" ({fmt(se[k])})" if k in se else "")
                                 for k in ("xi", "sigma", "mu")] + [fmt(g.get("mean"))])
        out += "\n\n**II. GEV fit of TFP levels**\n\n" + md_table(
            ["Country", "xi", "sigma", "mu", "Mean"], g_rows)
    return out


def regression_table(regs: list) -> str:
    """Rows with country, input, beta, se, r2, r2_adj, n."""
    rows = [[r["country"], r["input"], f"{fmt(r['beta'])} ({fmt(r['se'])})", fmt(r["r2"]),
             fmt(r["r2_adj"]), fmt(int(r["n"]))] for r in regs]
    return md_table(["Country", "Input", "beta_dev", "R2", "Adj R2", "N"], rows)


def s2_table(s2: dict, kind: str = "total") -> str:
    """``s2`` maps country -> input -> {"total": x, "channels": [..], "channels_cov": [..]}."""
    if kind == "total":
        header = ["Country", "Capital", "Labor", "Materials"]
        rows = [[c] + [pct(v[X]["total"]) for X in ("K", "L", "M")] for c, v in sorted(s2.items())]
    else:
        header = ["Country", "Input", "omega(-1)", "eta", "d eps"]
        rows = [[c, X] + [pct(x) for x in v[X][kind]] for c, v in sorted(s2.items())
                for X in ("K", "L", "M")]
    text = md_table(header, rows)
    neg = sorted({c for c, v in s2.items() for X in ("K", "L", "M")
                  for x in ([v[X]["total"]] if kind == "total" else v[X][kind])
                  if x is not None and not math.isnan(x) and x < 0})
    if neg:
        text += f"\n\nNegative values are uninformative ({', '.join(neg)})."
    return text


def labor_test_table(res: dict) -> str:
    rows = [[r.get("label", "All"), fmt(r["T"]), f"[{fmt(r['ci90'][0])}; {fmt(r['ci90'][1])}]",
             f"[{fmt(r['ci95'][0])}; {fmt(r['ci95'][1])}]", f"[{fmt(r['ci99'][0])}; {fmt(r['ci99'][1])}]",
             "rejected" if r["reject_at"] else "cannot be rejected"] for r in res]
    return md_table(["Sample", "T", "90% CI", "95% CI", "99% CI", "Flexible labor"], rows)


def stars(att: float, se: float) -> str:
    if not se or math.isnan(se):
        return ""
    z = abs(att / se)
    return "***" if z > 2.576 else "**" if z > 1.960 else "*" if z > 1.645 else ""


def did_table(columns: list) -> str:
    """One dict per column: label, overall, overall_se, pre_att, pre_se, treatment_year, by_time=[{time, att, se}]."""
    labels = [c["label"] for c in columns]
    times = sorted({int(r["time"]) for c in columns for r in c["by_time"] if r["time"] >= c["treatment_year"]})
    rows = [["ATT"] + [f"{fmt(c['overall'])}{stars(c['overall'], c['overall_se'])} ({fmt(c['overall_se'])})"
                       for c in columns],
            ["ATT Pre-treatment"] + [f"{fmt(c['pre_att'])}{stars(c['pre_att'], c['pre_se'])} ({fmt(c['pre_se'])})"
                                     for c in columns]]
    for t in times:
        row = [f"ATT {t}"]
        for c in columns:
            hit = [r for r in c["by_time"] if int(r["time"]) == t]
            row.append(f"{fmt(hit[0]['att'])}{stars(hit[0]['att'], hit[0]['se'])} ({fmt(hit[0]['se'])})"
                       if hit else "")
        rows.append(row)
    return md_table([""] + [f"({i + 1}) {l}" for i, l in enumerate(labels)], rows)
