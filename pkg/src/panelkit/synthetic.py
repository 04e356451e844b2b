"""Synthetic panels with planted parameters.

The generated outcome, treatment and mediator live on the log scale; by
default they are written to the panel exponentiated, so fitting with a
``log`` transform recovers the planted elasticities. Controls are written in
levels.

Log outcome for entity i, period t::

    y = mu_i + lambda_t + f(x_it) + lag * x_i,t-1 + b * m_it + controls @ gamma + noise

where ``f`` is ``slope_below * x`` for ``x <= threshold`` and ``slope_above * x``
otherwise (one slope when no threshold is planted).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from .panel_data import PanelDataset, PanelError, inverted_cdf_quantile

__all__ = [
    "ControlSpec",
    "TreatmentProcess",
    "DgpConfig",
    "GroundTruth",
    "generate_panel",
    "default_fixture",
    "municipal_layout_panel",
    "write_panel",
    "MUNICIPAL_COLUMNS",
]


@dataclass(frozen=True)
class ControlSpec:
    name: str
    mean: float = 0.0
    sd: float = 1.0
    coefficient: float = 0.0
    treatment_loading: float = 0.0
    entity_sd: float = 0.0


@dataclass(frozen=True)
class TreatmentProcess:
    """Log-treatment ``mean + entity component + AR(1) idiosyncratic part``."""

    mean: float = 12.0
    entity_sd: float = 1.2
    within_sd: float = 0.8
    ar: float = 0.5


@dataclass(frozen=True)
class DgpConfig:
    n_entities: int = 300
    n_periods: int = 4
    entity_effect_sd: float = 1.0
    time_effect_sd: float = 0.1
    noise_sd: float = 0.1
    treatment_process: TreatmentProcess = TreatmentProcess()
    slopes: tuple[float, float] = (0.5, 0.5)
    threshold_quantile: float | None = None
    mediation: tuple[float, float, float] | None = None
    mediator_noise_sd: float = 0.2
    lag_coefficients: tuple[float, float] | None = None
    missing_rate: float = 0.0
    missing_columns: tuple[str, ...] = ("outcome",)
    control_specs: tuple[ControlSpec, ...] = ()
    outcome_name: str = "outcome"
    treatment_name: str = "treatment"
    mediator_name: str = "mediator"
    exponentiate: bool = True
    first_period: int = 2021

    def __post_init__(self) -> None:
        for name in ("entity_effect_sd", "time_effect_sd", "noise_sd", "mediator_noise_sd"):
            if getattr(self, name) < 0:
                raise PanelError(f"{name} must be nonnegative")
        tp = self.treatment_process
        if tp.entity_sd < 0 or tp.within_sd < 0 or not -1 < tp.ar < 1:
            raise PanelError("invalid treatment process")
        if self.n_entities < 2 or self.n_periods < 2:
            raise PanelError("need at least 2 entities and 2 periods")
        if not 0.0 <= self.missing_rate <= 1.0:
            raise PanelError("missing_rate must lie in [0, 1]")
        if self.threshold_quantile is not None and not 0.0 <= self.threshold_quantile <= 1.0:
            raise PanelError("threshold_quantile must lie in [0, 1]")
        object.__setattr__(self, "control_specs", tuple(self.control_specs))
        object.__setattr__(self, "missing_columns", tuple(self.missing_columns))
        object.__setattr__(self, "slopes", tuple(self.slopes))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DgpConfig":
        d = dict(d)
        if "treatment_process" in d and isinstance(d["treatment_process"], dict):
            d["treatment_process"] = TreatmentProcess(**d["treatment_process"])
        if "control_specs" in d:
            d["control_specs"] = tuple(c if isinstance(c, ControlSpec) else ControlSpec(**c) for c in d["control_specs"])
        for k in ("slopes", "mediation", "lag_coefficients", "missing_columns"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class GroundTruth:
    """Everything needed to rebuild the noiseless log outcome.

    ``components`` holds, per (entity, period) cell on the log scale, the
    treatment, its pre-sample-aware lag, the mediator, the controls and the
    drawn entity/time effects and noise, before any missingness.
    """

    config: DgpConfig
    seed: int
    threshold: float | None
    components: pd.DataFrame = field(repr=False)

    @property
    def slope_below(self) -> float:
        return self.config.slopes[0]

    @property
    def slope_above(self) -> float:
        return self.config.slopes[1]

    def treatment_effect(self) -> np.ndarray:
        cfg, c = self.config, self.components
        x = c["treatment"].to_numpy()
        if cfg.mediation is not None:
            return cfg.mediation[2] * x
        if cfg.lag_coefficients is not None:
            cur, lag = cfg.lag_coefficients
            return cur * x + lag * c["treatment_lag"].to_numpy()
        if self.threshold is None:
            return cfg.slopes[0] * x
        return np.where(x <= self.threshold, cfg.slopes[0] * x, cfg.slopes[1] * x)

    def noiseless_outcome(self) -> np.ndarray:
        cfg, c = self.config, self.components
        y = c["entity_effect"].to_numpy() + c["time_effect"].to_numpy() + self.treatment_effect()
        if cfg.mediation is not None:
            y = y + cfg.mediation[1] * c["mediator"].to_numpy()
        for cs in cfg.control_specs:
            y = y + cs.coefficient * c[cs.name].to_numpy()
        return y

    def to_dict(self) -> dict[str, Any]:
        comp = self.components
        first = comp.groupby("entity", sort=True).first()
        per = comp.groupby("period", sort=True).first()
        return {
            "seed": self.seed,
            "config": self.config.to_dict(),
            "threshold": self.threshold,
            "threshold_raw": None if self.threshold is None else float(np.exp(self.threshold)),
            "entity_effects": dict(zip(first.index.tolist(), first["entity_effect"].tolist())),
            "time_effects": {str(k): v for k, v in zip(per.index.tolist(), per["time_effect"].tolist())},
        }


def _treatment_paths(cfg: DgpConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(E, T) log treatment and its lag, with one pre-sample period drawn."""
    E, T = cfg.n_entities, cfg.n_periods
    tp = cfg.treatment_process
    base = tp.mean + tp.entity_sd * rng.standard_normal(E)
    innov_sd = tp.within_sd * np.sqrt(1 - tp.ar**2)
    u = np.empty((E, T + 1))
    u[:, 0] = tp.within_sd * rng.standard_normal(E)
    for t in range(1, T + 1):
        u[:, t] = tp.ar * u[:, t - 1] + innov_sd * rng.standard_normal(E)
    x = base[:, None] + u
    return x[:, 1:], x[:, :-1]


def generate_panel(config: DgpConfig, seed: int) -> tuple[PanelDataset, GroundTruth]:
    """Simulate one panel; equal (config, seed) give bit-identical output."""
    cfg = config
    rng = np.random.default_rng([seed, 0x5EED])
    E, T = cfg.n_entities, cfg.n_periods
    x, x_lag = _treatment_paths(cfg, rng)
    mu = cfg.entity_effect_sd * rng.standard_normal(E)
    lam = cfg.time_effect_sd * rng.standard_normal(T)
    noise = cfg.noise_sd * rng.standard_normal((E, T))

    threshold = None
    if cfg.threshold_quantile is not None:
        threshold = inverted_cdf_quantile(x.ravel(), cfg.threshold_quantile)

    comp = pd.DataFrame(
        {
            "entity": np.repeat([f"e{i:05d}" for i in range(E)], T),
            "period": np.tile(np.arange(cfg.first_period, cfg.first_period + T), E),
            "treatment": x.ravel(),
            "treatment_lag": x_lag.ravel(),
            "entity_effect": np.repeat(mu, T),
            "time_effect": np.tile(lam, E),
            "noise": noise.ravel(),
        }
    )
    if cfg.mediation is not None:
        a = cfg.mediation[0]
        med_fe = rng.standard_normal(E)
        comp["mediator"] = a * x.ravel() + np.repeat(med_fe, T) + cfg.mediator_noise_sd * rng.standard_normal(E * T)
    for cs in cfg.control_specs:
        ent = cs.entity_sd * rng.standard_normal(E)
        comp[cs.name] = (
            cs.mean
            + np.repeat(ent, T)
            + cs.treatment_loading * (x.ravel() - cfg.treatment_process.mean)
            + cs.sd * rng.standard_normal(E * T)
        )
    gt = GroundTruth(cfg, seed, threshold, comp)
    y = gt.noiseless_outcome() + comp["noise"].to_numpy()

    conv = np.exp if cfg.exponentiate else (lambda v: v)
    out = pd.DataFrame({"entity": comp["entity"], "period": comp["period"]})
    out[cfg.outcome_name] = conv(y)
    out[cfg.treatment_name] = conv(comp["treatment"].to_numpy())
    if cfg.mediation is not None:
        out[cfg.mediator_name] = conv(comp["mediator"].to_numpy())
    for cs in cfg.control_specs:
        out[cs.name] = comp[cs.name].to_numpy()

    if cfg.missing_rate > 0:
        mrng = np.random.default_rng([seed, 0x3155])
        targets = {"outcome": cfg.outcome_name, "treatment": cfg.treatment_name, "mediator": cfg.mediator_name}
        for col in cfg.missing_columns:
            name = targets.get(col, col)
            if name not in out.columns:
                raise PanelError(f"missing_columns names unknown column {col!r}")
            mask = mrng.random(len(out)) < cfg.missing_rate
            vals = out[name].to_numpy(dtype=float).copy()
            vals[mask] = np.nan
            out[name] = vals
    return PanelDataset(out), gt


def default_fixture() -> DgpConfig:
    """Default fixture: 1,724 entities x 4 years, ~37% of outcomes missing."""
    return DgpConfig(
        n_entities=1724,
        n_periods=4,
        slopes=(0.01, 0.06),
        threshold_quantile=0.94,
        missing_rate=0.37,
        control_specs=(
            ControlSpec("population", mean=66_000.0, sd=2_000.0, coefficient=2e-6, entity_sd=20_000.0),
            ControlSpec("labor_force_ratio", mean=0.546, sd=0.01, coefficient=1.2, entity_sd=0.06),
        ),
    )


# Municipal-statistics column names used by the layout fixture.
MUNICIPAL_COLUMNS = (
    "Tourist Arrivals",
    "Land Price",
    "Population",
    "Labor Force Ratio",
    "Housing Units",
    "Vacant Housing Units",
    "Primary Sector Employment",
    "Secondary Sector Employment",
    "Tertiary Sector Employment",
    "Accommodation & Food Establishments",
    "Accommodation & Food Employment",
)


def municipal_layout_panel(seed: int = 0, n_entities: int = 200, n_periods: int = 4) -> tuple[PanelDataset, GroundTruth]:
    """Small panel whose columns carry municipal-statistics variable names."""
    controls = (
        ControlSpec("Population", 66_000.0, 1_500.0, 2e-6, 0.0, 20_000.0),
        ControlSpec("Labor Force Ratio", 0.546, 0.01, 1.2, 0.0, 0.06),
        ControlSpec("Housing Units", 51_000.0, 800.0, 9e-6, 0.0, 15_000.0),
        ControlSpec("Vacant Housing Units", 7_000.0, 200.0, 1e-5, 0.0, 2_000.0),
        ControlSpec("Primary Sector Employment", 1_000.0, 60.0, -1e-4, 0.0, 300.0),
        ControlSpec("Secondary Sector Employment", 7_000.0, 300.0, -3e-5, 0.0, 2_000.0),
        ControlSpec("Tertiary Sector Employment", 21_000.0, 900.0, -7e-6, 0.0, 6_000.0),
    )
    cfg = DgpConfig(
        n_entities=n_entities,
        n_periods=n_periods,
        slopes=(0.04, 0.04),
        mediation=(0.11, 0.48, -0.015),
        control_specs=controls,
        outcome_name="Land Price",
        treatment_name="Tourist Arrivals",
        mediator_name="Accommodation & Food Establishments",
    )
    panel, gt = generate_panel(cfg, seed)
    mrng = np.random.default_rng([seed, 0xAF])
    emp = np.exp(np.log(panel.column("Accommodation & Food Establishments")) + 2.0 + 0.1 * mrng.standard_normal(len(panel)))
    return panel.with_columns(**{"Accommodation & Food Employment": emp}), gt


def write_panel(panel: PanelDataset, truth: GroundTruth | None, csv_path: str | Path, truth_path: str | Path | None = None) -> None:
    """Write the CSV panel and, optionally, the ground-truth JSON sidecar."""
    panel.to_csv(csv_path)
    if truth is not None:
        from .report import dumps_json

        truth_path = truth_path or Path(csv_path).with_suffix(".truth.json")
        Path(truth_path).write_text(dumps_json(truth.to_dict()), encoding="utf-8")
