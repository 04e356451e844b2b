"""Serialization and fixed-width table rendering.

JSON floats are written with 17 significant digits (non-finite values become
``null``). Tables round to three decimals, switching to two-digit scientific
notation below 0.001 in magnitude, and mark significance with strict cuts:
``***`` p < 0.01, ``**`` p < 0.05, ``*`` p < 0.1.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .fe_core import FitResult
from .mediation import MediationResult
from .robustness import PlaceboResult
from .threshold import GroupedResult, ThresholdResult, pvalue_trend

__all__ = [
    "dumps_json",
    "stars",
    "fmt_num",
    "render_table",
    "write_profile_csv",
    "write_pvalue_trend_csv",
    "write_placebo_csv",
    "STAR_NOTE",
]

STAR_NOTE = "Notes: Standard errors in parentheses. ***p<0.01, **p<0.05, *p<0.1."


def _plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        if hasattr(obj, "to_dict"):
            return _plain(obj.to_dict())
        return _plain(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, np.generic):
        return _plain(obj.item())
    return obj


def _encode(obj: Any, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None or obj is True or obj is False:
        return {None: "null", True: "true", False: "false"}[obj]
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return "null"
        s = format(obj, ".17g")
        if "." not in s and "e" not in s and "inf" not in s:
            s += ".0"
        return s
    if isinstance(obj, str):
        import json

        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_encode(str(k), indent, level + 1)}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float)) or v is None for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _encode(v, indent, level + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_json(obj: Any, indent: int = 2) -> str:
    """Deterministic JSON text with 17-significant-digit floats."""
    return _encode(_plain(obj), indent, 0) + "\n"


def stars(p: float) -> str:
    if p is None or not math.isfinite(p):
        return ""
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.1:
        return "*"
    return ""


def fmt_num(x: float) -> str:
    if x is None or not math.isfinite(x):
        return "n/a"
    if x == 0:
        return "0.000"
    if abs(x) < 0.001:
        return f"{x:.2e}"
    return f"{x:.3f}"


def _fmt_p(p: float) -> str:
    return "<0.001" if p < 0.001 else f"{p:.3f}"


def _grid(rows: list[list[str]], header_rows: int = 1) -> str:
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    width = max(len(l) for l in lines)
    lines.insert(header_rows, "-" * width)
    rule = "=" * width
    return "\n".join([rule, *lines, rule])


def _stepwise(fits: Sequence[FitResult], entity_label: str, time_label: str) -> str:
    names: list[str] = []
    for f in fits:
        for n in f.names:
            if n not in names:
                names.append(n)
    last = fits[-1]
    header = [""] + [f"({i + 1})" for i in range(len(fits))] + ["VIF"]
    dep = ["Dependent Var."] + [f.dependent for f in fits] + [""]
    rows = [header, dep]
    for n in names:
        coef_row, se_row = [n], [""]
        for f in fits:
            if n in f.names:
                coef_row.append(fmt_num(f.coef(n)) + stars(f.pvalue(n)))
                se_row.append(f"({fmt_num(f.std_err(n))})")
            else:
                coef_row.append("")
                se_row.append("")
        v = last.vif.get(n)
        coef_row.append("" if v is None else ("inf" if math.isinf(v) else f"{v:.2f}"))
        se_row.append("")
        rows += [coef_row, se_row]
    rows.append([time_label] + ["Yes" if f.time_fe else "No" for f in fits] + [""])
    rows.append([entity_label] + ["Yes" if f.entity_fe else "No" for f in fits] + [""])
    rows.append(["Constant"] + [fmt_num(f.intercept) for f in fits] + [""])
    rows.append(["N"] + [str(f.n_obs) for f in fits] + [""])
    rows.append(["R2 (within)"] + [f"{f.r_squared_within:.3f}" for f in fits] + [""])
    return _grid(rows, header_rows=2) + "\n" + STAR_NOTE + "\n"


def _grouped(results: Sequence[GroupedResult]) -> str:
    rows = [["Threshold", "Group", "Coefficient", "Std. Error", "p-value", "Observations", "Significance"]]
    for r in results:
        label = r.cutoff_definition
        if r.quantile is not None:
            label = f"{r.quantile * 100:g}% ({', '.join(f'{c:.2f}' for c in r.cutoffs)})"
        elif r.cutoffs:
            label = f"{r.cutoff_definition} ({', '.join(f'{c:.2f}' for c in r.cutoffs)})"
        for i, g in enumerate(r.groups):
            rows.append(
                [
                    label if i == 0 else "",
                    g.group,
                    fmt_num(g.coefficient),
                    fmt_num(g.std_err),
                    _fmt_p(g.p_value),
                    str(g.n_obs),
                    stars(g.p_value),
                ]
            )
    return _grid(rows) + "\n" + "Notes: High group is above the cutoff; Low group is at or below it.\n"


def _mediation(results: Sequence[MediationResult]) -> str:
    header = ["Variables"] + [f"{r.outcome} ({r.mediator} as mediator)" for r in results]
    rows = [header]

    def cell(pe) -> tuple[str, str]:
        return fmt_num(pe.coefficient) + stars(pe.p_value), f"({fmt_num(pe.std_err)})"

    for label, getter in (
        ("Path a: treatment -> mediator", lambda r: r.path_a),
        ("Path b: mediator -> outcome", lambda r: r.path_b),
        ("Direct effect", lambda r: r.direct_effect),
        ("Total effect", lambda r: r.total_effect),
    ):
        cs = [cell(getter(r)) for r in results]
        rows.append([label] + [c[0] for c in cs])
        rows.append([""] + [c[1] for c in cs])
    rows.append(["Indirect effect (a*b)"] + [fmt_num(r.indirect_effect) for r in results])
    rows.append(["Sobel z"] + [f"{r.sobel_z:.3f}" for r in results])
    rows.append(["Sobel p"] + [_fmt_p(r.sobel_p) for r in results])
    rows.append(
        ["Bootstrap CI"]
        + [
            "" if r.bootstrap_ci is None else f"[{fmt_num(r.bootstrap_ci[0])}, {fmt_num(r.bootstrap_ci[1])}]"
            for r in results
        ]
    )
    rows.append(["N"] + [str(r.n_obs) for r in results])
    return _grid(rows) + "\n" + STAR_NOTE + "\n"


def _threshold(results: Sequence[ThresholdResult]) -> str:
    rows = [["Group", "Coefficient", "t-value", "Significance", "95% Confidence Interval", "Threshold Value"]]
    for r in results:
        thr = f"{r.threshold_raw:,.0f}" if r.log_scale else fmt_num(r.threshold_hat)
        for side, est in (("Below threshold (<=", r.below), ("Above threshold (>", r.above)):
            rows.append(
                [
                    f"{side} {thr})",
                    fmt_num(est.coefficient),
                    f"{est.t_value:.2f}",
                    stars(est.p_value) or "Not significant",
                    f"[{fmt_num(est.ci95[0])}, {fmt_num(est.ci95[1])}]",
                    thr,
                ]
            )
    text = _grid(rows)
    extra = []
    for r in results:
        ci = r.confidence_interval
        if ci is not None:
            lo, hi = (r.to_raw(ci.low), r.to_raw(ci.high))
            fmt = (lambda v: f"{v:,.0f}") if r.log_scale else fmt_num
            extra.append(f"LR {ci.level:.0%} confidence set for the threshold: [{fmt(lo)}; {fmt(hi)}]")
        extra.append(f"LR statistic: {r.lr_statistic:.3f}")
        if r.bootstrap_p is not None:
            extra.append(f"Bootstrap p-value ({r.bootstrap_replications} draws): {r.bootstrap_p:.3f}")
    return text + "\n" + "\n".join(extra) + "\n"


def _placebo(results: Sequence[PlaceboResult]) -> str:
    rows = [["Coefficient", "Mode", "Observed", "Null mean", "Null 2.5%", "Null 97.5%", "p (two-sided)", "p (upper)", "Replications"]]
    for r in results:
        rows.append(
            [
                r.coefficient,
                r.mode,
                fmt_num(r.observed_coefficient),
                fmt_num(float(np.mean(r.null_distribution))),
                fmt_num(r.band[0]),
                fmt_num(r.band[1]),
                f"{r.empirical_p:.4f}",
                f"{r.empirical_p_upper:.4f}",
                str(r.replications - r.n_failed),
            ]
        )
    return _grid(rows) + "\n"


_LAYOUTS = {
    "stepwise": (FitResult, _stepwise),
    "grouped": (GroupedResult, _grouped),
    "mediation": (MediationResult, _mediation),
    "threshold": (ThresholdResult, _threshold),
    "placebo": (PlaceboResult, _placebo),
}


def render_table(
    results: Sequence[Any],
    layout: str = "stepwise",
    entity_label: str = "Municipality FE",
    time_label: str = "Year FE",
) -> str:
    """Fixed-width text table; identical input gives identical bytes."""
    if layout not in _LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}")
    results = list(results)
    if not results:
        raise ValueError("nothing to render")
    kind, fn = _LAYOUTS[layout]
    bad = [type(r).__name__ for r in results if not isinstance(r, kind)]
    if bad:
        raise TypeError(f"layout {layout!r} expects {kind.__name__}, got {bad[0]}")
    if layout == "stepwise":
        return fn(results, entity_label, time_label)
    return fn(results)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in r])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_profile_csv(result: ThresholdResult, path: str | Path) -> None:
    rows = [(c, result.to_raw(c), s, l) for c, s, l in result.profile_rows()]
    _write_csv(Path(path), ["candidate", "candidate_raw", "ssr", "lr"], rows)


def write_pvalue_trend_csv(results: Sequence[GroupedResult], path: str | Path, group: str = "Low") -> None:
    _write_csv(Path(path), ["quantile", f"{group.lower()}_group_p_value"], pvalue_trend(results, group))


def write_placebo_csv(result: PlaceboResult, path: str | Path) -> None:
    rows: list[tuple[str, Any]] = [("null", float(v)) for v in result.null_distribution]
    rows += [
        ("observed", result.observed_coefficient),
        ("band_low", result.band[0]),
        ("band_high", result.band[1]),
    ]
    _write_csv(Path(path), ["kind", "coefficient"], rows)
