"""Long-format panel storage, variable specifications and design construction.

A :class:`PanelDataset` is an immutable entity x period table of numeric
variables. :func:`build_design` turns it into a :class:`DesignSample` for one
model: transforms and lags are applied, and rows missing any required
variable are dropped for that model only (no imputation).
"""

from __future__ import annotations

import dataclasses
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import numpy as np
import pandas as pd
import yaml

__all__ = [
    "PanelError",
    "PanelDataset",
    "VariableSpec",
    "ModelSpec",
    "DesignSample",
    "SampleReport",
    "load_panel",
    "load_schema",
    "build_design",
    "quantile_of",
    "inverted_cdf_quantile",
]

TRANSFORMS = ("log", "identity")
ROLES = (
    "dependent",
    "treatment",
    "regressor",
    "control",
    "mediator",
    "threshold_variable",
    "grouping_variable",
    "cluster",
)


class PanelError(ValueError):
    """Raised for malformed panels, schemas or empty estimation samples."""


@dataclass(frozen=True)
class VariableSpec:
    """One variable as it enters a model.

    Parameters
    ----------
    name : str
        Source column in the panel.
    transform : {"log", "identity"}
        Applied cell-wise before any lag is taken.
    role : str
        Informational role tag (dependent, treatment, control, ...).
    lag : int
        Number of periods to lag; lags only bridge consecutive periods.
    """

    name: str
    transform: str = "identity"
    role: str = "regressor"
    lag: int = 0

    def __post_init__(self) -> None:
        if self.transform not in TRANSFORMS:
            raise PanelError(f"unknown transform {self.transform!r} for {self.name!r}")
        if self.role not in ROLES:
            raise PanelError(f"unknown role {self.role!r} for {self.name!r}")
        if self.lag < 0:
            raise PanelError(f"negative lag for {self.name!r}")

    @property
    def label(self) -> str:
        base = f"log ({self.name})" if self.transform == "log" else self.name
        if self.lag:
            base = f"{base} t-{self.lag}"
        return base

    def lagged(self, lag: int = 1) -> "VariableSpec":
        return dataclasses.replace(self, lag=lag)

    @classmethod
    def coerce(cls, value: Union[str, Mapping[str, Any], "VariableSpec"], role: str = "regressor") -> "VariableSpec":
        if isinstance(value, VariableSpec):
            return value
        if isinstance(value, str):
            return cls(value, role=role)
        kwargs = dict(value)
        kwargs.setdefault("role", role)
        return cls(**kwargs)


SampleFilter = Union[Callable[[pd.DataFrame], Any], str, None]


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of one fixed-effects regression.

    ``sample_filter`` is either a callable taking the raw panel frame and
    returning a boolean mask, or a :meth:`pandas.DataFrame.query` string.
    ``extras`` are carried into the design (for threshold or grouping
    variables) without entering the regression.
    """

    dependent: VariableSpec
    treatment: tuple[VariableSpec, ...]
    controls: tuple[VariableSpec, ...] = ()
    entity_fe: bool = True
    time_fe: bool = True
    cluster: str = "entity"
    sample_filter: SampleFilter = None
    extras: tuple[VariableSpec, ...] = ()
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "treatment", tuple(self.treatment))
        object.__setattr__(self, "controls", tuple(self.controls))
        object.__setattr__(self, "extras", tuple(self.extras))
        labels = [v.label for v in self.regressors]
        if len(set(labels)) != len(labels):
            raise PanelError(f"duplicate regressors in model: {labels}")
        if self.dependent.label in labels:
            raise PanelError(f"dependent {self.dependent.label!r} also listed as a regressor")

    @property
    def regressors(self) -> tuple[VariableSpec, ...]:
        return self.treatment + self.controls

    @property
    def regressor_labels(self) -> list[str]:
        return [v.label for v in self.regressors]

    @property
    def treatment_label(self) -> str:
        return self.treatment[0].label

    def required(self) -> list[VariableSpec]:
        seen: dict[str, VariableSpec] = {}
        for v in (self.dependent, *self.regressors, *self.extras):
            seen.setdefault(v.label, v)
        return list(seen.values())

    def replace(self, **changes: Any) -> "ModelSpec":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class SampleReport:
    """Bookkeeping of the rows removed while building a design."""

    n_panel: int
    n_filtered: int
    n_missing: dict[str, int]
    n_nonpositive: dict[str, int]
    n_dropped: int
    n_obs: int

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


class PanelDataset:
    """Immutable long-format panel sorted by (entity, period).

    Parameters
    ----------
    frame : DataFrame
        Must contain ``entity`` and ``period`` columns; every other column is
        treated as a numeric variable (NaN marks a missing cell).
    """

    def __init__(self, frame: pd.DataFrame):
        if "entity" not in frame.columns or "period" not in frame.columns:
            raise PanelError("panel frame needs 'entity' and 'period' columns")
        if len(frame) == 0:
            raise PanelError("panel is empty")
        df = frame.copy()
        df["entity"] = df["entity"].astype(str)
        try:
            df["period"] = df["period"].astype(np.int64)
        except (TypeError, ValueError) as exc:
            raise PanelError("period column must hold integers") from exc
        dup = df.duplicated(["entity", "period"], keep=False)
        if dup.any():
            first = df.loc[dup, ["entity", "period"]].iloc[0]
            raise PanelError(
                f"duplicate (entity, period) rows, e.g. ({first['entity']}, {first['period']})"
            )
        variables = [c for c in df.columns if c not in ("entity", "period")]
        for c in variables:
            df[c] = pd.to_numeric(df[c], errors="coerce").astype(float)
        df = df.sort_values(["entity", "period"], kind="mergesort").reset_index(drop=True)
        for c in df.columns:
            arr = df[c].to_numpy()
            if arr.flags.writeable:
                arr.flags.writeable = False
        self._frame = df
        self._variables = tuple(variables)

    @property
    def variables(self) -> tuple[str, ...]:
        return self._variables

    @property
    def frame(self) -> pd.DataFrame:
        """A copy of the underlying table."""
        return self._frame.copy()

    @property
    def entities(self) -> np.ndarray:
        return self._frame["entity"].to_numpy()

    @property
    def periods(self) -> np.ndarray:
        return self._frame["period"].to_numpy()

    def __len__(self) -> int:
        return len(self._frame)

    def __repr__(self) -> str:
        n_ent = self._frame["entity"].nunique()
        n_per = self._frame["period"].nunique()
        return f"PanelDataset({n_ent} entities x {n_per} periods, {len(self)} rows, {len(self._variables)} variables)"

    def column(self, name: str) -> np.ndarray:
        if name not in self._variables:
            raise PanelError(f"variable {name!r} not in panel")
        return self._frame[name].to_numpy()

    def present(self, name: str) -> np.ndarray:
        return ~np.isnan(self.column(name))

    def n_present(self, name: str) -> int:
        return int(self.present(name).sum())

    def with_columns(self, **columns: np.ndarray) -> "PanelDataset":
        df = self._frame.copy()
        for k, v in columns.items():
            df[k] = np.asarray(v, dtype=float)
        return PanelDataset(df)

    def subset(self, mask: np.ndarray) -> "PanelDataset":
        return PanelDataset(self._frame.loc[np.asarray(mask, dtype=bool)])

    def to_csv(self, path: Union[str, Path]) -> None:
        self._frame.to_csv(path, index=False, float_format="%.17g", na_rep="")


def load_schema(path: Union[str, Path]) -> dict[str, Any]:
    """Read a YAML sidecar mapping column names to roles and transforms."""
    with open(path, encoding="utf-8") as fh:
        schema = yaml.safe_load(fh) or {}
    if not isinstance(schema, dict):
        raise PanelError(f"schema {path} must be a mapping")
    return schema


def load_panel(source: Union[str, Path], schema: Mapping[str, Any] | None = None) -> PanelDataset:
    """Load a UTF-8 CSV panel.

    ``schema`` may name the entity and period columns (keys ``entity`` and
    ``period``) and restrict the variables kept (key ``variables``, a list or
    a mapping of names to role/transform entries). Non-numeric cells become
    missing; an empty string is missing.
    """
    schema = dict(schema or {})
    entity_col = schema.get("entity", "entity")
    period_col = schema.get("period", "period")
    try:
        df = pd.read_csv(source, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise PanelError(f"{source}: empty file") from exc
    if df.empty:
        raise PanelError(f"{source}: no data rows")
    for col in (entity_col, period_col):
        if col not in df.columns:
            raise PanelError(f"{source}: missing column {col!r}")
    wanted = schema.get("variables")
    if wanted is None:
        names = [c for c in df.columns if c not in (entity_col, period_col)]
    else:
        names = list(wanted.keys() if isinstance(wanted, Mapping) else wanted)
        absent = [n for n in names if n not in df.columns]
        if absent:
            raise PanelError(f"{source}: schema variables not in file: {absent}")
    out = pd.DataFrame({"entity": df[entity_col], "period": pd.to_numeric(df[period_col], errors="coerce")})
    if out["period"].isna().any():
        raise PanelError(f"{source}: non-integer period values")
    for n in names:
        out[n] = _parse_floats(df[n].to_numpy())
    return PanelDataset(out)


def _to_float(s: str) -> float:
    try:
        return float(s)
    except ValueError:
        return float("nan")


def _parse_floats(cells: np.ndarray) -> np.ndarray:
    """Correctly rounded string-to-float conversion; bad or empty cells become NaN.

    ``pd.to_numeric`` uses a fast parser that can be off by one ulp, which
    would break exact CSV round-trips.
    """
    try:
        return np.asarray(cells, dtype=str).astype(float)
    except ValueError:
        return np.array([_to_float(c) for c in cells], dtype=float)


@dataclass(frozen=True)
class DesignSample:
    """Aligned estimation sample for one model.

    ``columns`` holds every transformed variable of the sample keyed by its
    label; ``y_name`` and ``x_names`` select the regression from that pool,
    so the same sample can be refit with a different dependent variable or
    regressor set (see :meth:`select`).
    """

    columns: Mapping[str, np.ndarray]
    y_name: str
    x_names: tuple[str, ...]
    entity: np.ndarray
    period: np.ndarray
    cluster: np.ndarray
    entity_fe: bool = True
    time_fe: bool = True
    transforms: Mapping[str, str] = field(default_factory=dict)
    report: SampleReport | None = None

    @property
    def y(self) -> np.ndarray:
        return self.columns[self.y_name]

    @property
    def X(self) -> np.ndarray:
        if not self.x_names:
            return np.empty((self.n_obs, 0))
        return np.column_stack([self.columns[n] for n in self.x_names])

    @property
    def n_obs(self) -> int:
        return len(self.entity)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise PanelError(f"design has no column {name!r}; available: {sorted(self.columns)}") from None

    def select(self, y: str | None = None, x: Iterable[str] | None = None) -> "DesignSample":
        y = self.y_name if y is None else y
        x = self.x_names if x is None else tuple(x)
        for n in (y, *x):
            self.column(n)
        return dataclasses.replace(self, y_name=y, x_names=tuple(x))

    def with_column(self, name: str, values: np.ndarray, transform: str = "identity") -> "DesignSample":
        cols = dict(self.columns)
        cols[name] = np.asarray(values, dtype=float)
        tr = dict(self.transforms)
        tr[name] = transform
        return dataclasses.replace(self, columns=cols, transforms=tr)

    def subset(self, mask: np.ndarray) -> "DesignSample":
        mask = np.asarray(mask)
        return dataclasses.replace(
            self,
            columns={k: v[mask] for k, v in self.columns.items()},
            entity=self.entity[mask],
            period=self.period[mask],
            cluster=self.cluster[mask],
            report=None,
        )

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"entity": self.entity, "period": self.period})
        for k, v in self.columns.items():
            df[k] = v
        return df


def _lag_values(values: np.ndarray, entity: np.ndarray, period: np.ndarray, lag: int) -> np.ndarray:
    """Lag within entity; only an exactly ``lag``-periods-earlier cell qualifies."""
    if lag == 0:
        return values
    src = pd.DataFrame({"entity": entity, "period": period + lag, "v": values})
    dst = pd.DataFrame({"entity": entity, "period": period})
    return dst.merge(src, on=["entity", "period"], how="left")["v"].to_numpy()


def _apply_filter(frame: pd.DataFrame, sample_filter: SampleFilter) -> np.ndarray:
    if sample_filter is None:
        return np.ones(len(frame), dtype=bool)
    if isinstance(sample_filter, str):
        kept = frame.query(sample_filter)
        return frame.index.isin(kept.index)
    return np.asarray(sample_filter(frame), dtype=bool)


def build_design(data: PanelDataset, spec: ModelSpec, log_policy: str = "drop") -> DesignSample:
    """Construct the listwise-complete estimation sample for ``spec``.

    Parameters
    ----------
    log_policy : {"drop", "strict"}
        What to do with nonpositive values under a log transform: drop the
        row and count it, or raise.
    """
    if log_policy not in ("drop", "strict"):
        raise PanelError(f"unknown log_policy {log_policy!r}")
    frame = data._frame
    entity = frame["entity"].to_numpy()
    period = frame["period"].to_numpy()
    needed = spec.required()
    cluster_var = None if spec.cluster == "entity" else spec.cluster
    for v in needed:
        if v.name not in data.variables:
            raise PanelError(f"variable {v.name!r} not in panel")
    if cluster_var is not None and cluster_var not in data.variables:
        raise PanelError(f"cluster variable {cluster_var!r} not in panel")

    keep = _apply_filter(frame, spec.sample_filter)
    n_filtered = int((~keep).sum())
    n_missing: dict[str, int] = {}
    n_nonpos: dict[str, int] = {}
    columns: dict[str, np.ndarray] = {}
    transforms: dict[str, str] = {}
    with np.errstate(divide="ignore", invalid="ignore"):
        for v in needed:
            raw = frame[v.name].to_numpy(dtype=float)
            miss = np.isnan(raw)
            if v.transform == "log":
                bad = ~miss & (raw <= 0)
                if bad.any() and log_policy == "strict":
                    raise PanelError(f"log of nonpositive values in {v.name!r} ({int(bad.sum())} cells)")
                vals = np.where(bad, np.nan, np.log(np.where(bad | miss, 1.0, raw)))
                vals[miss] = np.nan
                n_nonpos[v.label] = int((bad & keep).sum())
            else:
                vals = raw.copy()
            vals = _lag_values(vals, entity, period, v.lag)
            columns[v.label] = vals
            transforms[v.label] = v.transform
            n_missing[v.label] = int((np.isnan(vals) & keep).sum())

    complete = keep.copy()
    for vals in columns.values():
        complete &= ~np.isnan(vals)
    if cluster_var is not None:
        cl_raw = frame[cluster_var].to_numpy(dtype=float)
        complete &= ~np.isnan(cl_raw)
    n_obs = int(complete.sum())
    if n_obs == 0:
        raise PanelError("empty estimation sample after listwise deletion")

    if cluster_var is None:
        cluster = entity[complete]
    else:
        cluster = cl_raw[complete]
        per_entity = pd.Series(cluster).groupby(entity[complete]).nunique()
        if (per_entity > 1).any():
            raise PanelError(f"cluster variable {cluster_var!r} varies within entity")

    report = SampleReport(
        n_panel=len(frame),
        n_filtered=n_filtered,
        n_missing=n_missing,
        n_nonpositive=n_nonpos,
        n_dropped=int(keep.sum()) - n_obs,
        n_obs=n_obs,
    )
    return DesignSample(
        columns={k: v[complete].copy() for k, v in columns.items()},
        y_name=spec.dependent.label,
        x_names=tuple(spec.regressor_labels),
        entity=entity[complete].copy(),
        period=period[complete].copy(),
        cluster=np.asarray(cluster).copy(),
        entity_fe=spec.entity_fe,
        time_fe=spec.time_fe,
        transforms=transforms,
        report=report,
    )


def inverted_cdf_quantile(values: np.ndarray, q: float) -> float:
    """Smallest observed value ``x`` with empirical CDF ``F(x) >= q``.

    ``q = 0`` returns the minimum. Missing values are ignored.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile fraction must lie in [0, 1], got {q}")
    v = np.asarray(values, dtype=float)
    v = np.sort(v[~np.isnan(v)])
    if v.size == 0:
        raise PanelError("quantile of an empty column")
    k = int(np.ceil(q * v.size - 1e-12 * v.size)) - 1
    return float(v[min(max(k, 0), v.size - 1)])


def quantile_of(data: PanelDataset | DesignSample | np.ndarray, variable: str | VariableSpec | None, q: float) -> float:
    """Order statistic at fraction ``q`` of one variable (inverted-CDF rule).

    With a :class:`PanelDataset` and a :class:`VariableSpec`, the transform is
    applied first, so ``quantile_of(panel, VariableSpec("x", "log"), .8)`` is
    the 80% quantile of ``log(x)``.
    """
    if isinstance(data, np.ndarray):
        values = data
    elif isinstance(data, DesignSample):
        name = variable.label if isinstance(variable, VariableSpec) else variable
        values = data.column(name)
    else:
        spec = variable if isinstance(variable, VariableSpec) else VariableSpec(variable)
        values = data.column(spec.name).astype(float)
        if spec.transform == "log":
            with np.errstate(divide="ignore", invalid="ignore"):
                values = np.where(values > 0, np.log(np.where(values > 0, values, 1.0)), np.nan)
    return inverted_cdf_quantile(values, q)
