"""Product-of-coefficients mediation on a common fixed-effects sample.

Three regressions share one listwise-complete sample: the total-effect model
(outcome on treatment and controls), the mediator model (mediator on
treatment and controls) and the outcome model with the mediator added. In
this linear setting ``total - direct == a * b`` holds exactly.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import stats

from .fe_core import FitResult, fit_fe
from .panel_data import DesignSample, ModelSpec, PanelDataset, PanelError, VariableSpec, build_design

__all__ = [
    "MediationError",
    "PathEstimate",
    "MediationResult",
    "sobel_test",
    "fit_mediation",
    "fit_parallel_mediation",
]

CHUNK = 32


class MediationError(PanelError):
    pass


def sobel_test(a: float, se_a: float, b: float, se_b: float) -> tuple[float, float]:
    """Sobel z for the indirect effect ``a * b`` and its two-sided normal p-value."""
    if not (se_a > 0 and se_b > 0):
        raise ValueError("standard errors must be positive")
    num = a * b
    if num == 0.0:
        return 0.0, 1.0
    z = num / np.sqrt(b * b * se_a * se_a + a * a * se_b * se_b)
    return float(z), float(2.0 * stats.norm.sf(abs(z)))


@dataclass(frozen=True)
class PathEstimate:
    coefficient: float
    std_err: float
    p_value: float

    @classmethod
    def from_fit(cls, fit: FitResult, name: str) -> "PathEstimate":
        return cls(fit.coef(name), fit.std_err(name), fit.pvalue(name))


@dataclass
class MediationResult:
    treatment: str
    mediator: str
    outcome: str
    path_a: PathEstimate
    path_b: PathEstimate
    direct_effect: PathEstimate
    total_effect: PathEstimate
    indirect_effect: float
    sobel_z: float
    sobel_p: float
    n_obs: int
    bootstrap_ci: tuple[float, float] | None = None
    bootstrap_se: float | None = None
    bootstrap_replications: int = 0
    bootstrap_level: float | None = None
    fits: dict[str, FitResult] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict[str, Any]:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k != "fits"}
        d["fits"] = {k: f.to_dict() for k, f in self.fits.items()}
        return d


def _common_design(data: PanelDataset, spec: ModelSpec, mediators: Sequence[VariableSpec]) -> DesignSample:
    labels = {v.label for v in (spec.dependent, *spec.regressors)}
    for m in mediators:
        if m.label in labels:
            raise MediationError(f"mediator {m.label!r} duplicates the outcome, treatment or a control")
    try:
        return build_design(data, spec.replace(extras=tuple(spec.extras) + tuple(mediators)))
    except PanelError as exc:
        raise MediationError(f"empty common sample: {exc}") from exc


def _paths(design: DesignSample, spec: ModelSpec, mediator: str) -> tuple[FitResult, FitResult, FitResult]:
    xs = list(design.x_names)
    treat = spec.treatment_label
    total = fit_fe(design.select(y=spec.dependent.label, x=xs), compute_vif=False)
    step1 = fit_fe(design.select(y=mediator, x=xs), compute_vif=False)
    pos = xs.index(treat) + 1
    step2 = fit_fe(design.select(y=spec.dependent.label, x=xs[:pos] + [mediator] + xs[pos:]), compute_vif=False)
    return total, step1, step2


def _entity_resample(design: DesignSample, rng: np.random.Generator) -> DesignSample:
    ent = design.entity
    starts = np.flatnonzero(np.r_[True, ent[1:] != ent[:-1]])
    lengths = np.diff(np.r_[starts, ent.size])
    pick = rng.integers(0, starts.size, starts.size)
    rows = np.concatenate([np.arange(starts[i], starts[i] + lengths[i]) for i in pick])
    new_ent = np.repeat(np.arange(pick.size), lengths[pick])
    sub = design.subset(rows)
    return dataclasses.replace(sub, entity=new_ent, cluster=new_ent)


def fit_mediation(
    data: PanelDataset,
    spec: ModelSpec,
    mediator: VariableSpec | str,
    bootstrap: int | None = None,
    seed: int = 0,
    level: float = 0.95,
    n_jobs: int = 1,
) -> MediationResult:
    """Total, mediator and outcome regressions plus Sobel and bootstrap inference.

    ``bootstrap`` is the number of entity-level resamples (``None`` or 0
    skips it). Resample ``r`` uses ``default_rng([seed, r])``; the interval is
    the percentile interval of ``a * b`` at ``level``.
    """
    mediator = VariableSpec.coerce(mediator, role="mediator")
    design = _common_design(data, spec, [mediator])
    total, step1, step2 = _paths(design, spec, mediator.label)
    treat = spec.treatment_label
    a = PathEstimate.from_fit(step1, treat)
    b = PathEstimate.from_fit(step2, mediator.label)
    z, p = sobel_test(a.coefficient, a.std_err, b.coefficient, b.std_err)
    res = MediationResult(
        treatment=treat,
        mediator=mediator.label,
        outcome=spec.dependent.label,
        path_a=a,
        path_b=b,
        direct_effect=PathEstimate.from_fit(step2, treat),
        total_effect=PathEstimate.from_fit(total, treat),
        indirect_effect=a.coefficient * b.coefficient,
        sobel_z=z,
        sobel_p=p,
        n_obs=design.n_obs,
        fits={"total": total, "mediator": step1, "outcome": step2},
    )
    if bootstrap:
        xs = list(design.x_names)
        pos = xs.index(treat) + 1
        x2 = xs[:pos] + [mediator.label] + xs[pos:]

        def one(r: int) -> float:
            d = _entity_resample(design, np.random.default_rng([seed, r]))
            try:
                s1 = fit_fe(d.select(y=mediator.label, x=xs), compute_vif=False)
                s2 = fit_fe(d.select(y=spec.dependent.label, x=x2), compute_vif=False)
            except (np.linalg.LinAlgError, ValueError):
                return float("nan")
            return s1.coef(treat) * s2.coef(mediator.label)

        def run(chunk: range) -> list[float]:
            return [one(r) for r in chunk]

        chunks = [range(s, min(s + CHUNK, bootstrap)) for s in range(0, bootstrap, CHUNK)]
        if n_jobs > 1:
            with ThreadPoolExecutor(max_workers=n_jobs) as ex:
                draws = np.array([v for part in ex.map(run, chunks) for v in part])
        else:
            draws = np.array([v for c in chunks for v in run(c)])
        draws = draws[np.isfinite(draws)]
        if draws.size < 0.95 * bootstrap:
            raise MediationError(f"{bootstrap - draws.size} of {bootstrap} bootstrap fits failed")
        alpha = (1 - level) / 2
        lo, hi = np.quantile(np.sort(draws), [alpha, 1 - alpha])
        res.bootstrap_ci = (float(lo), float(hi))
        res.bootstrap_se = float(np.std(draws, ddof=1))
        res.bootstrap_replications = int(draws.size)
        res.bootstrap_level = level
    return res


def fit_parallel_mediation(data: PanelDataset, spec: ModelSpec, mediators: Sequence[VariableSpec | str]) -> dict[str, Any]:
    """Experimental: several mediators entered jointly in the outcome model.

    Returns per-mediator ``a``, ``b`` and ``a * b`` with the total and direct
    effects; ``total == direct + sum(a * b)`` on the common sample.
    """
    meds = [VariableSpec.coerce(m, role="mediator") for m in mediators]
    if len(meds) < 2:
        raise MediationError("parallel mediation needs at least two mediators")
    design = _common_design(data, spec, meds)
    xs = list(design.x_names)
    treat = spec.treatment_label
    total = fit_fe(design.select(y=spec.dependent.label, x=xs), compute_vif=False)
    step2 = fit_fe(design.select(y=spec.dependent.label, x=xs + [m.label for m in meds]), compute_vif=False)
    out: dict[str, Any] = {
        "experimental": True,
        "n_obs": design.n_obs,
        "total_effect": total.coef(treat),
        "direct_effect": step2.coef(treat),
        "mediators": {},
    }
    for m in meds:
        s1 = fit_fe(design.select(y=m.label, x=xs), compute_vif=False)
        a, b = s1.coef(treat), step2.coef(m.label)
        out["mediators"][m.label] = {"a": a, "b": b, "indirect": a * b}
    return out
