"""Single-threshold panel regression and stepwise quantile grouping.

The threshold model splits the treatment slope by whether the threshold
variable ``q`` satisfies ``q <= c``. Fixed effects and (by default) control
slopes are shared across regimes. Because every candidate model nests the
linear model plus one extra column, the SSR profile is computed by partialling
each candidate's extra column(s) out of the linear design once and reusing
the residualized matrix for every outcome vector, including bootstrap draws.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence, Union

import numpy as np
from scipy import stats

from .fe_core import CollinearityError, Demeaner, FitResult, fit_fe
from .panel_data import DesignSample, ModelSpec, PanelError, inverted_cdf_quantile

__all__ = [
    "ThresholdError",
    "ThresholdResult",
    "RegimeEstimate",
    "IntervalResult",
    "GroupEstimate",
    "GroupedResult",
    "grid_candidates",
    "default_min_regime",
    "fit_threshold",
    "bootstrap_lr_test",
    "lr_critical_value",
    "lr_confidence_interval",
    "split_design",
    "grouped_fit",
    "parse_cutoff",
    "pvalue_trend",
]

CHUNK = 32


class ThresholdError(PanelError):
    """Empty grids, singular regime designs and bootstrap breakdowns."""


def default_min_regime(n_params: int) -> int:
    return max(30, n_params + 5)


def grid_candidates(
    design: DesignSample,
    threshold_variable: str,
    trim: float = 0.01,
    min_regime: int | None = None,
) -> np.ndarray:
    """Distinct observed threshold values between the ``trim`` and ``1 - trim``
    quantiles that leave at least ``min_regime`` rows on each side."""
    if not 0.0 <= trim < 0.5:
        raise ThresholdError(f"trim must lie in [0, 0.5), got {trim}")
    q = np.asarray(design.column(threshold_variable), dtype=float)
    if min_regime is None:
        min_regime = default_min_regime(len(design.x_names) + 1)
    lo = inverted_cdf_quantile(q, trim)
    hi = inverted_cdf_quantile(q, 1.0 - trim)
    srt = np.sort(q)
    uniq = np.unique(q)
    uniq = uniq[(uniq >= lo) & (uniq <= hi)]
    below = np.searchsorted(srt, uniq, side="right")
    above = q.size - below
    cand = uniq[(below >= min_regime) & (above >= min_regime)]
    if cand.size == 0:
        raise ThresholdError(f"no threshold candidates for {threshold_variable!r}")
    return cand


@dataclass(frozen=True)
class RegimeEstimate:
    coefficient: float
    std_err: float
    t_value: float
    p_value: float
    ci95: tuple[float, float]
    n_obs: int


@dataclass(frozen=True)
class IntervalResult:
    low: float
    high: float
    level: float
    critical_value: float
    contiguous: bool


@dataclass
class ThresholdResult:
    """Estimated single threshold with its SSR and LR profiles.

    ``threshold_hat`` is in the units of the threshold variable as it
    enters the design (log units for a log-transformed variable);
    ``threshold_raw`` maps it back through ``exp`` when applicable.
    """

    threshold_variable: str
    treatment: str
    threshold_hat: float
    threshold_raw: float
    below: RegimeEstimate
    above: RegimeEstimate
    grid: np.ndarray = field(repr=False)
    ssr: np.ndarray = field(repr=False)
    lr: np.ndarray = field(repr=False)
    ssr_linear: float = float("nan")
    lr_statistic: float = float("nan")
    n_obs: int = 0
    confidence_interval: IntervalResult | None = None
    bootstrap_p: float | None = None
    bootstrap_replications: int = 0
    switching: str = "treatment"
    regime_fit: FitResult | None = field(default=None, repr=False)
    log_scale: bool = False

    @property
    def index_hat(self) -> int:
        return int(np.searchsorted(self.grid, self.threshold_hat))

    def to_raw(self, value: float) -> float:
        return float(np.exp(value)) if self.log_scale else float(value)

    def to_dict(self) -> dict[str, Any]:
        ci = self.confidence_interval
        return {
            "threshold_variable": self.threshold_variable,
            "treatment": self.treatment,
            "threshold_hat": self.threshold_hat,
            "threshold_raw": self.threshold_raw,
            "switching": self.switching,
            "below": dataclasses.asdict(self.below),
            "above": dataclasses.asdict(self.above),
            "ssr_linear": self.ssr_linear,
            "ssr_min": float(self.ssr[self.index_hat]),
            "lr_statistic": self.lr_statistic,
            "n_obs": self.n_obs,
            "grid_size": int(self.grid.size),
            "confidence_interval": None
            if ci is None
            else {
                **dataclasses.asdict(ci),
                "low_raw": self.to_raw(ci.low),
                "high_raw": self.to_raw(ci.high),
            },
            "bootstrap_p": self.bootstrap_p,
            "bootstrap_replications": self.bootstrap_replications,
        }

    def profile_rows(self) -> list[tuple[float, float, float]]:
        return list(zip(self.grid.tolist(), self.ssr.tolist(), self.lr.tolist()))


class _Profile:
    """Linear design partialled out once; SSR over the grid for any outcome."""

    def __init__(self, design: DesignSample, treatment: str, threshold_variable: str, grid: np.ndarray, switching: str):
        if switching not in ("treatment", "all"):
            raise ThresholdError(f"unknown switching mode {switching!r}")
        self.n = design.n_obs
        self.grid = np.asarray(grid, dtype=float)
        self.dm = Demeaner(design.entity, design.period, design.entity_fe, design.time_fe)
        X = design.X
        Xw = self.dm(X)
        scale = np.linalg.norm(Xw, axis=0)
        if np.any(scale == 0):
            raise CollinearityError("regressor absorbed by fixed effects")
        self.Q, _ = np.linalg.qr(Xw / scale)
        q = design.column(threshold_variable)
        if switching == "treatment":
            cols = [design.x_names.index(treatment)]
        else:
            cols = list(range(X.shape[1]))
        self.k_extra = len(cols)
        # below-regime copies of the switching columns, shape (n, G, k_extra)
        ind = (q[:, None] <= self.grid[None, :]).astype(float)
        Zr = np.empty((self.n, self.grid.size, self.k_extra))
        for j, c in enumerate(cols):
            Z = self.dm(ind * X[:, [c]])
            Zr[:, :, j] = Z - self.Q @ (self.Q.T @ Z)
        self.Zr = Zr
        if self.k_extra == 1:
            zz = np.einsum("ng,ng->g", Zr[:, :, 0], Zr[:, :, 0])
            ref = np.einsum("ng,ng->g", ind * X[:, [cols[0]]], ind * X[:, [cols[0]]])
            if np.any(zz <= 1e-10 * np.maximum(ref, 1e-300)):
                bad = self.grid[zz <= 1e-10 * np.maximum(ref, 1e-300)]
                raise ThresholdError(f"singular regime design at candidates {bad[:5].tolist()}")
            self.zz = zz
        else:
            self.G = np.einsum("ngi,ngj->gij", Zr, Zr)
            try:
                self.Ginv = np.linalg.inv(self.G)
            except np.linalg.LinAlgError as exc:
                raise ThresholdError("singular regime design") from exc

    def linear_residuals(self, Yw: np.ndarray) -> np.ndarray:
        return Yw - self.Q @ (self.Q.T @ Yw)

    def ssr(self, y: np.ndarray, demeaned: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Linear SSR and SSR profile for outcome column(s) ``y``.

        ``y`` of shape (n,) gives shapes () and (G,); shape (n, B) gives
        (B,) and (G, B).
        """
        Y = y if y.ndim == 2 else y[:, None]
        Yw = Y if demeaned else self.dm(Y)
        E = self.linear_residuals(Yw)
        s0 = np.einsum("nb,nb->b", E, E)
        if self.k_extra == 1:
            proj = self.Zr[:, :, 0].T @ E
            prof = s0[None, :] - proj**2 / self.zz[:, None]
        else:
            P = np.einsum("ngj,nb->gjb", self.Zr, E)
            prof = s0[None, :] - np.einsum("gib,gij,gjb->gb", P, self.Ginv, P)
        prof = np.maximum(prof, 0.0)
        if y.ndim == 1:
            return s0[0], prof[:, 0]
        return s0, prof


def split_design(
    design: DesignSample, treatment: str, threshold_variable: str, threshold: float, switching: str = "treatment"
) -> DesignSample:
    """Design with regime-specific copies of the switching regressors."""
    q = design.column(threshold_variable)
    low = q <= threshold
    switch = [treatment] if switching == "treatment" else list(design.x_names)
    out = design
    names: list[str] = []
    for n in design.x_names:
        if n in switch:
            v = design.column(n)
            out = out.with_column(f"{n} [below]", np.where(low, v, 0.0))
            out = out.with_column(f"{n} [above]", np.where(low, 0.0, v))
            names += [f"{n} [below]", f"{n} [above]"]
        else:
            names.append(n)
    return out.select(x=names)


def _regime(fit: FitResult, name: str, n: int) -> RegimeEstimate:
    j = fit.names.index(name)
    ci = fit.conf_int[j]
    return RegimeEstimate(
        coefficient=float(fit.params[j]),
        std_err=float(fit.se[j]),
        t_value=float(fit.tvalues[j]),
        p_value=float(fit.pvalues[j]),
        ci95=(float(ci[0]), float(ci[1])),
        n_obs=int(n),
    )


def fit_threshold(
    design: DesignSample,
    spec: ModelSpec | None = None,
    threshold_variable: str | None = None,
    grid: np.ndarray | None = None,
    switching: str = "treatment",
    treatment: str | None = None,
    level: float = 0.95,
) -> ThresholdResult:
    """Least-squares threshold estimate over ``grid``.

    ``threshold_variable`` defaults to the treatment; ``grid`` defaults to
    :func:`grid_candidates` with 1% trimming. Ties in SSR resolve to the
    smallest candidate.
    """
    if treatment is None:
        treatment = spec.treatment_label if spec is not None else design.x_names[0]
    if threshold_variable is None:
        threshold_variable = treatment
    if grid is None:
        k = len(design.x_names)
        grid = grid_candidates(design, threshold_variable, 0.01, default_min_regime(k + (1 if switching == "treatment" else k)))
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ThresholdError("empty candidate grid")
    prof = _Profile(design, treatment, threshold_variable, grid, switching)
    s0, ssr = prof.ssr(design.y)
    i_hat = int(np.argmin(ssr))
    s_min = ssr[i_hat]
    lr = design.n_obs * (ssr - s_min) / s_min
    lr[i_hat] = 0.0
    lr = np.maximum(lr, 0.0)
    theta = float(grid[i_hat])

    sd = split_design(design, treatment, threshold_variable, theta, switching)
    try:
        rfit = fit_fe(sd, compute_vif=False)
    except CollinearityError as exc:
        raise ThresholdError(f"singular regime design at threshold {theta}: {exc}") from exc
    q = design.column(threshold_variable)
    n_low = int((q <= theta).sum())
    log_scale = design.transforms.get(threshold_variable) == "log"
    result = ThresholdResult(
        threshold_variable=threshold_variable,
        treatment=treatment,
        threshold_hat=theta,
        threshold_raw=float(np.exp(theta)) if log_scale else theta,
        below=_regime(rfit, f"{treatment} [below]", n_low),
        above=_regime(rfit, f"{treatment} [above]", design.n_obs - n_low),
        grid=grid,
        ssr=ssr,
        lr=lr,
        ssr_linear=float(s0),
        lr_statistic=float(design.n_obs * (s0 - s_min) / s_min),
        n_obs=design.n_obs,
        switching=switching,
        regime_fit=rfit,
        log_scale=log_scale,
    )
    result.confidence_interval = lr_confidence_interval(result, level)
    return result


def lr_critical_value(level: float) -> float:
    """Asymptotic critical value ``-2 ln(1 - sqrt(level))`` for the LR confidence set."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    return float(-2.0 * np.log(1.0 - np.sqrt(level)))


def lr_confidence_interval(result: ThresholdResult, level: float = 0.95) -> IntervalResult:
    crit = lr_critical_value(level)
    if result.lr is None or len(result.lr) == 0:
        raise ThresholdError("LR profile not populated")
    accept = result.lr <= crit
    if not accept.any():
        raise ThresholdError("empty LR acceptance region")
    idx = np.flatnonzero(accept)
    contiguous = bool(idx[-1] - idx[0] + 1 == idx.size)
    return IntervalResult(float(result.grid[idx[0]]), float(result.grid[idx[-1]]), level, crit, contiguous)


def _entity_blocks(design: DesignSample) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
    """Row-start offsets, entity pools sharing one period pattern, block lengths.

    Rows must be sorted by (entity, period), as build_design guarantees.
    """
    ent = design.entity
    starts = np.flatnonzero(np.r_[True, ent[1:] != ent[:-1]])
    lengths = np.diff(np.r_[starts, ent.size])
    patterns: dict[tuple, list[int]] = {}
    for i, (s, L) in enumerate(zip(starts, lengths)):
        patterns.setdefault(tuple(design.period[s : s + L].tolist()), []).append(i)
    return starts, [np.array(v) for v in patterns.values()], lengths


def _resample_blocks(resid: np.ndarray, starts: np.ndarray, pools: list[np.ndarray], lengths: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    donor = np.arange(starts.size)
    for pool in pools:
        donor[pool] = pool[rng.integers(0, pool.size, pool.size)]
    # row r at offset p within entity i takes the donor's row at offset p
    ent_of_row = np.repeat(np.arange(starts.size), lengths)
    offset = np.arange(resid.size) - starts[ent_of_row]
    return resid[starts[donor[ent_of_row]] + offset]


def bootstrap_lr_test(
    design: DesignSample,
    spec: ModelSpec | None = None,
    threshold_variable: str | None = None,
    replications: int = 300,
    seed: int = 0,
    grid: np.ndarray | None = None,
    switching: str = "treatment",
    treatment: str | None = None,
    n_jobs: int = 1,
    return_draws: bool = False,
):
    """Residual-block bootstrap of the linear-vs-threshold LR statistic.

    Under the null the outcome is the fitted linear model plus within
    residuals whose entity blocks are redrawn with replacement among
    entities observed in the same periods. Both models are refit on every
    draw over the same grid. Draw ``r`` uses ``default_rng([seed, r])``.

    Returns ``(lr_observed, bootstrap_p)``, plus the bootstrap LR draws when
    ``return_draws`` is set.
    """
    if replications < 100:
        raise ValueError(f"bootstrap needs at least 100 replications, got {replications}")
    if treatment is None:
        treatment = spec.treatment_label if spec is not None else design.x_names[0]
    if threshold_variable is None:
        threshold_variable = treatment
    if grid is None:
        k = len(design.x_names)
        grid = grid_candidates(design, threshold_variable, 0.01, default_min_regime(k + (1 if switching == "treatment" else k)))
    prof = _Profile(design, treatment, threshold_variable, np.asarray(grid, dtype=float), switching)
    n = design.n_obs
    Yw = prof.dm(design.y[:, None])
    s0, ssr = prof.ssr(Yw, demeaned=True)
    lr_obs = float(n * (s0[0] - ssr.min()) / ssr.min())
    resid = prof.linear_residuals(Yw)[:, 0]
    fitted_w = Yw[:, 0] - resid
    starts, pools, lengths = _entity_blocks(design)

    def run(chunk: range) -> np.ndarray:
        E = np.column_stack(
            [_resample_blocks(resid, starts, pools, lengths, np.random.default_rng([seed, r])) for r in chunk]
        )
        Ys = prof.dm(fitted_w[:, None] + E)
        b0, bp = prof.ssr(Ys, demeaned=True)
        b1 = bp.min(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return n * (b0 - b1) / b1

    chunks = [range(s, min(s + CHUNK, replications)) for s in range(0, replications, CHUNK)]
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            parts = list(ex.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    draws = np.concatenate(parts)
    ok = np.isfinite(draws)
    n_fail = int((~ok).sum())
    if n_fail > 0.05 * replications:
        raise ThresholdError(f"{n_fail} of {replications} bootstrap replications failed")
    p = float(np.mean(draws[ok] >= lr_obs))
    if return_draws:
        return lr_obs, p, draws
    return lr_obs, p


@dataclass(frozen=True)
class GroupEstimate:
    group: str
    coefficient: float
    std_err: float
    p_value: float
    n_obs: int
    bounds: tuple[float | None, float | None]


@dataclass(frozen=True)
class GroupedResult:
    """Separate fits on the groups induced by one cutoff rule.

    Low groups are ``q <= cutoff``; high groups are ``q > cutoff``.
    """

    cutoff_definition: str
    quantile: float | None
    cutoffs: tuple[float, ...]
    groups: tuple[GroupEstimate, ...]

    @property
    def n_obs(self) -> int:
        return sum(g.n_obs for g in self.groups)

    def group(self, name: str) -> GroupEstimate:
        for g in self.groups:
            if g.group == name:
                return g
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "cutoff_definition": self.cutoff_definition,
            "quantile": self.quantile,
            "cutoffs": list(self.cutoffs),
            "groups": [dataclasses.asdict(g) for g in self.groups],
        }


CutoffSpec = Union[str, float, dict]


def parse_cutoff(cut: CutoffSpec) -> list[tuple[str, float | None]]:
    """Normalize a cutoff rule to ``(kind, quantile)`` pairs.

    Accepts ``"median"``, ``"mean"``, ``"tertiles"``, ``"deciles"``, a float
    fraction, ``"q0.95"`` or ``{"quantile": 0.95}``.
    """
    if isinstance(cut, dict):
        if "quantile" not in cut:
            raise ValueError(f"cutoff mapping needs a 'quantile' key: {cut}")
        cut = float(cut["quantile"])
    if isinstance(cut, (int, float)) and not isinstance(cut, bool):
        q = float(cut)
        if not 0.0 < q < 1.0:
            raise ValueError(f"cutoff quantile must lie in (0, 1), got {q}")
        return [("quantile", q)]
    s = str(cut).strip().lower()
    if s in ("median", "mean", "tertiles"):
        return [(s, None)]
    if s == "deciles":
        return [("quantile", round(0.1 * i, 10)) for i in range(1, 10)]
    if s.startswith("q"):
        return parse_cutoff(float(s[1:]))
    raise ValueError(f"unknown cutoff rule {cut!r}")


def _fit_group(design: DesignSample, mask: np.ndarray, name: str, treatment: str, bounds) -> GroupEstimate:
    k = len(design.x_names)
    n = int(mask.sum())
    if n < k + 1:
        raise ThresholdError(f"group {name!r} has {n} rows, fewer than {k + 1} needed")
    fit = fit_fe(design.subset(mask), compute_vif=False)
    return GroupEstimate(name, fit.coef(treatment), fit.std_err(treatment), fit.pvalue(treatment), n, bounds)


def grouped_fit(
    design: DesignSample,
    spec: ModelSpec | None = None,
    threshold_variable: str | None = None,
    cutoffs: Sequence[CutoffSpec] = ("median",),
    treatment: str | None = None,
) -> list[GroupedResult]:
    """Fit the model separately below and above each cutoff (fully re-estimated)."""
    if treatment is None:
        treatment = spec.treatment_label if spec is not None else design.x_names[0]
    if threshold_variable is None:
        threshold_variable = treatment
    q = design.column(threshold_variable)
    out: list[GroupedResult] = []
    for cut in cutoffs:
        for kind, frac in parse_cutoff(cut):
            if kind == "tertiles":
                t1 = inverted_cdf_quantile(q, 1 / 3)
                t2 = inverted_cdf_quantile(q, 2 / 3)
                masks = [
                    ("Low", q <= t1, (None, t1)),
                    ("Middle", (q > t1) & (q <= t2), (t1, t2)),
                    ("High", q > t2, (t2, None)),
                ]
                label, cuts = "tertiles", (t1, t2)
            else:
                if kind == "mean":
                    c = float(np.mean(q))
                    label = "mean"
                elif kind == "median":
                    c = inverted_cdf_quantile(q, 0.5)
                    label = "median"
                else:
                    c = inverted_cdf_quantile(q, frac)
                    label = f"quantile({frac:g})"
                masks = [("Low", q <= c, (None, c)), ("High", q > c, (c, None))]
                cuts = (c,)
            for name, m, _ in masks:
                if not m.any():
                    raise ThresholdError(f"cutoff {label} leaves group {name!r} empty")
            groups = tuple(_fit_group(design, m, name, treatment, b) for name, m, b in masks)
            out.append(GroupedResult(label, frac if kind == "quantile" else (0.5 if kind == "median" else None), cuts, groups))
    return out


def pvalue_trend(results: Sequence[GroupedResult], group: str = "Low") -> list[tuple[float, float]]:
    """(quantile, p-value) series for one group across quantile cutoffs."""
    rows = [(r.quantile, r.group(group).p_value) for r in results if r.quantile is not None and r.cutoff_definition != "tertiles"]
    return sorted(rows)
