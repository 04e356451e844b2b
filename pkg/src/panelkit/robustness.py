"""Lagged-treatment specifications and residual-permutation placebo inference."""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .fe_core import Demeaner, FitResult, fit_fe
from .panel_data import DesignSample, ModelSpec, PanelDataset, PanelError, build_design

__all__ = [
    "PlaceboError",
    "PlaceboResult",
    "lagged_spec",
    "fit_lagged",
    "permute_within_entities",
    "sign_flip_entities",
    "residual_permutation_placebo",
]

CHUNK = 64
PLACEBO_MODES = ("permute", "signflip", "treatment_shuffle")


class PlaceboError(PanelError):
    pass


def lagged_spec(spec: ModelSpec, mode: str = "lag_only", lag: int = 1) -> ModelSpec:
    """Replace (``lag_only``) or augment (``current_and_lag``) the treatment with its lag."""
    lagged = tuple(t.lagged(lag) for t in spec.treatment)
    if mode == "lag_only":
        treat = lagged
    elif mode == "current_and_lag":
        treat = tuple(spec.treatment) + lagged
    else:
        raise ValueError(f"unknown lag mode {mode!r}")
    return spec.replace(treatment=treat, name=spec.name or mode)


def fit_lagged(data: PanelDataset, spec: ModelSpec, mode: str = "lag_only", lag: int = 1) -> FitResult:
    """Fit the lagged specification; rows without a consecutive-period lag drop out."""
    ls = lagged_spec(spec, mode, lag)
    try:
        design = build_design(data, ls)
    except PanelError as exc:
        raise PanelError(f"no entity with a valid lag pair: {exc}") from exc
    return fit_fe(design, ls)


def permute_within_entities(values: np.ndarray, entity: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation of ``values`` inside each entity."""
    codes = np.unique(entity, return_inverse=True)[1]
    order = np.lexsort((rng.random(values.size), codes))
    # order lists each entity's rows in random order; slot them back into the
    # entity's rows in index order
    slots = np.lexsort((np.arange(values.size), codes))
    out = np.empty_like(values)
    out[slots] = values[order]
    return out


def sign_flip_entities(values: np.ndarray, entity: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Flip each entity's whole residual vector with probability 1/2."""
    codes = np.unique(entity, return_inverse=True)[1]
    signs = np.where(rng.random(codes.max() + 1) < 0.5, -1.0, 1.0)
    return values * signs[codes]


@dataclass
class PlaceboResult:
    """Empirical null distribution of one coefficient.

    ``empirical_p`` is two-sided, ``(1 + #{|null| >= |obs|}) / (R + 1)``;
    ``empirical_p_upper`` counts ``null >= obs``. ``band`` holds the 2.5% and
    97.5% points of the sorted null.
    """

    coefficient: str
    observed_coefficient: float
    null_distribution: np.ndarray = field(repr=False)
    empirical_p: float = 1.0
    empirical_p_upper: float = 1.0
    replications: int = 0
    n_failed: int = 0
    mode: str = "permute"
    seed: int = 0
    band: tuple[float, float] = (float("nan"), float("nan"))

    def to_dict(self, include_null: bool = False) -> dict[str, Any]:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k != "null_distribution"}
        d["null_mean"] = float(np.mean(self.null_distribution)) if self.null_distribution.size else None
        d["null_sd"] = float(np.std(self.null_distribution, ddof=1)) if self.null_distribution.size > 1 else None
        if include_null:
            d["null_distribution"] = self.null_distribution.tolist()
        return d


def _restricted(design: DesignSample, drop: list[str], dm: Demeaner) -> tuple[np.ndarray, np.ndarray]:
    """Fitted values and residuals of the model without the ``drop`` columns."""
    keep = [n for n in design.x_names if n not in drop]
    yw = dm(design.y)
    if keep:
        Xw = dm(np.column_stack([design.column(n) for n in keep]))
        coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
        resid = yw - Xw @ coef
    else:
        resid = yw
    if not np.all(np.isfinite(resid)):
        raise PlaceboError("restricted model failed")
    return design.y - resid, resid


def residual_permutation_placebo(
    data: PanelDataset | DesignSample,
    spec: ModelSpec,
    replications: int = 1000,
    mode: str = "permute",
    seed: int = 0,
    coefficient: str | None = None,
    n_jobs: int = 1,
) -> PlaceboResult:
    """Placebo distribution for the treatment coefficient.

    The restricted model drops every treatment column but keeps the fixed
    effects and controls. Each replication adds within-entity permuted (or
    entity sign-flipped) restricted residuals to the restricted fitted
    values and refits the full model. ``treatment_shuffle`` instead permutes
    the treatment column across all rows and refits.

    Replication ``r`` draws from ``default_rng([seed, r])`` and replications
    are processed in fixed-size chunks, so the null is identical for any
    ``n_jobs``.
    """
    if replications < 100:
        raise ValueError(f"placebo needs at least 100 replications, got {replications}")
    if mode not in PLACEBO_MODES:
        raise ValueError(f"unknown placebo mode {mode!r}")
    design = data if isinstance(data, DesignSample) else build_design(data, spec)
    coefficient = coefficient or spec.treatment_label
    full = fit_fe(design, spec, compute_vif=False)
    observed = full.coef(coefficient)
    j = full.names.index(coefficient)

    dm = Demeaner(design.entity, design.period, design.entity_fe, design.time_fe)
    Xw = dm(design.X)
    Q, R = np.linalg.qr(Xw)
    fitted, resid = _restricted(design, [t.label for t in spec.treatment], dm)

    def coef_for(Y: np.ndarray) -> np.ndarray:
        return np.linalg.solve(R, Q.T @ dm(Y))[j]

    if mode == "permute":
        shuffle = permute_within_entities
    elif mode == "signflip":
        shuffle = sign_flip_entities

    def run(chunk: range) -> np.ndarray:
        if mode == "treatment_shuffle":
            x = design.column(coefficient)
            out = []
            for r in chunk:
                rng = np.random.default_rng([seed, r])
                d = design.with_column(coefficient, rng.permutation(x))
                try:
                    out.append(fit_fe(d, spec, compute_vif=False).coef(coefficient))
                except (np.linalg.LinAlgError, ValueError):
                    out.append(float("nan"))
            return np.array(out)
        Y = np.column_stack(
            [fitted + shuffle(resid, design.entity, np.random.default_rng([seed, r])) for r in chunk]
        )
        return coef_for(Y)

    chunks = [range(s, min(s + CHUNK, replications)) for s in range(0, replications, CHUNK)]
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            parts = list(ex.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    draws = np.concatenate(parts)
    ok = np.isfinite(draws)
    n_failed = int((~ok).sum())
    if n_failed > 0.05 * replications:
        raise PlaceboError(f"{n_failed} of {replications} placebo replications failed")
    null = draws[ok]
    R_ok = null.size
    p_two = (1 + int(np.sum(np.abs(null) >= abs(observed)))) / (R_ok + 1)
    p_up = (1 + int(np.sum(null >= observed))) / (R_ok + 1)
    srt = np.sort(null)
    band = (float(np.quantile(srt, 0.025)), float(np.quantile(srt, 0.975)))
    return PlaceboResult(
        coefficient=coefficient,
        observed_coefficient=float(observed),
        null_distribution=null,
        empirical_p=float(p_two),
        empirical_p_upper=float(p_up),
        replications=replications,
        n_failed=n_failed,
        mode=mode,
        seed=seed,
        band=band,
    )
