"""Two-way fixed-effects least squares with entity-clustered inference.

The regression is run on within-transformed data. For balanced panels the
two-way transform is the closed-form double demeaning; for unbalanced panels
entity and period means are removed alternately until the largest change,
relative to each column's scale, falls below ``tol``.

Covariances are CR1 cluster-robust sandwiches and coefficient tests use a t
reference distribution with G - 1 degrees of freedom, G being the number of
clusters.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse as sp
from scipy import stats

from .panel_data import DesignSample, ModelSpec, PanelError

__all__ = [
    "ModelSpec",
    "CollinearityError",
    "ConvergenceError",
    "FitResult",
    "WaldResult",
    "Demeaner",
    "demean",
    "within_transform",
    "fit_fe",
    "cluster_robust_cov",
    "vif",
    "wald_equality",
]

DEMEAN_TOL = 1e-12
DEMEAN_MAX_SWEEPS = 10_000
RCOND_TOL = 1e-12
ABSORBED_TOL = 1e-10


class CollinearityError(np.linalg.LinAlgError):
    """Perfectly collinear (or FE-absorbed) regressors."""

    def __init__(self, message: str, columns: Sequence[str] = ()):
        super().__init__(message)
        self.columns = tuple(columns)


class ConvergenceError(RuntimeError):
    """Alternating demeaning did not reach tolerance within the sweep cap."""


def _codes(labels: np.ndarray) -> tuple[np.ndarray, int]:
    codes, uniques = pd.factorize(np.asarray(labels), sort=True)
    return codes.astype(np.int64), len(uniques)


class Demeaner:
    """Reusable within-transform for fixed entity/period labels.

    Building the indicator bookkeeping once lets the threshold search and
    the resampling loops demean many columns cheaply.
    """

    def __init__(
        self,
        entity: np.ndarray,
        period: np.ndarray,
        entity_fe: bool = True,
        time_fe: bool = True,
        tol: float = DEMEAN_TOL,
        max_sweeps: int = DEMEAN_MAX_SWEEPS,
    ):
        self.entity_fe = entity_fe
        self.time_fe = time_fe
        self.tol = tol
        self.max_sweeps = max_sweeps
        self.n = len(entity)
        self.e_codes, self.n_entities = _codes(entity)
        self.t_codes, self.n_periods = _codes(period)
        rows = np.arange(self.n)
        self._E = sp.csr_matrix((np.ones(self.n), (self.e_codes, rows)), shape=(self.n_entities, self.n))
        self._T = sp.csr_matrix((np.ones(self.n), (self.t_codes, rows)), shape=(self.n_periods, self.n))
        self._e_counts = np.bincount(self.e_codes, minlength=self.n_entities).astype(float)
        self._t_counts = np.bincount(self.t_codes, minlength=self.n_periods).astype(float)
        self.balanced = self.n == self.n_entities * self.n_periods
        self.last_sweeps = 0

    @property
    def n_fe_params(self) -> int:
        """Fixed-effect parameters absorbed (entity + period - 1 for two-way)."""
        if self.entity_fe and self.time_fe:
            return self.n_entities + self.n_periods - 1
        if self.entity_fe:
            return self.n_entities
        if self.time_fe:
            return self.n_periods
        return 0

    def _entity_means(self, A: np.ndarray) -> np.ndarray:
        return (self._E @ A) / self._e_counts.reshape((-1,) + (1,) * (A.ndim - 1))

    def _period_means(self, A: np.ndarray) -> np.ndarray:
        return (self._T @ A) / self._t_counts.reshape((-1,) + (1,) * (A.ndim - 1))

    def __call__(self, A: np.ndarray) -> np.ndarray:
        A = np.array(A, dtype=float, copy=True)
        if A.size == 0:
            return A
        if not self.entity_fe and not self.time_fe:
            return A - A.mean(axis=0)
        if self.entity_fe and not self.time_fe:
            return A - self._entity_means(A)[self.e_codes]
        if self.time_fe and not self.entity_fe:
            return A - self._period_means(A)[self.t_codes]
        if self.balanced:
            self.last_sweeps = 1
            return A - self._entity_means(A)[self.e_codes] - self._period_means(A)[self.t_codes] + A.mean(axis=0)
        scale = np.max(np.abs(A), axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        for sweep in range(1, self.max_sweeps + 1):
            me = self._entity_means(A)
            A -= me[self.e_codes]
            mt = self._period_means(A)
            A -= mt[self.t_codes]
            change = max(np.max(np.abs(me) / scale), np.max(np.abs(mt) / scale))
            if change <= self.tol:
                self.last_sweeps = sweep
                return A
        raise ConvergenceError(f"alternating demeaning did not converge in {self.max_sweeps} sweeps")


def demean(
    A: np.ndarray,
    entity: np.ndarray,
    period: np.ndarray,
    entity_fe: bool = True,
    time_fe: bool = True,
    tol: float = DEMEAN_TOL,
    max_sweeps: int = DEMEAN_MAX_SWEEPS,
) -> np.ndarray:
    return Demeaner(entity, period, entity_fe, time_fe, tol, max_sweeps)(A)


def _absorbed(raw: np.ndarray, transformed: np.ndarray) -> bool:
    ref = np.linalg.norm(raw)
    return bool(np.linalg.norm(transformed) <= ABSORBED_TOL * max(ref, 1e-300)) or ref == 0


def within_transform(
    design: DesignSample,
    entity_fe: bool | None = None,
    time_fe: bool | None = None,
) -> DesignSample:
    """Remove fixed effects from the dependent variable and regressors.

    Returns a design whose ``columns`` hold transformed ``y`` and ``X``
    columns and whose ``transforms`` maps every absorbed regressor to
    ``"absorbed"``. Extra columns are passed through untouched.
    """
    entity_fe = design.entity_fe if entity_fe is None else entity_fe
    time_fe = design.time_fe if time_fe is None else time_fe
    if design.n_obs == 0:
        raise PanelError("within_transform on an empty design")
    dm = Demeaner(design.entity, design.period, entity_fe, time_fe)
    names = [design.y_name, *design.x_names]
    raw = np.column_stack([design.columns[n] for n in names])
    out = dm(raw)
    cols = dict(design.columns)
    transforms = dict(design.transforms)
    for j, n in enumerate(names):
        cols[n] = out[:, j]
        if j > 0 and _absorbed(raw[:, j], out[:, j]):
            transforms[n] = "absorbed"
    return dataclasses.replace(design, columns=cols, transforms=transforms, entity_fe=entity_fe, time_fe=time_fe)


def _cluster_codes(clusters: np.ndarray) -> tuple[np.ndarray, int]:
    return _codes(clusters)


def cluster_robust_cov(
    X: np.ndarray | DesignSample,
    residuals: np.ndarray,
    clusters: np.ndarray | None = None,
    small_sample: bool = True,
    bread: np.ndarray | None = None,
) -> np.ndarray:
    """CR1 cluster-robust sandwich ``B (sum_g s_g s_g') B`` with ``s_g = X_g' e_g``.

    The small-sample factor is ``G/(G-1) * (N-1)/(N-K)``.
    """
    if isinstance(X, DesignSample):
        clusters = X.cluster if clusters is None else clusters
        X = X.X
    X = np.asarray(X, dtype=float)
    e = np.asarray(residuals, dtype=float)
    if clusters is None:
        raise ValueError("cluster labels required")
    n, k = X.shape
    if e.shape != (n,):
        raise ValueError("residuals not aligned with design rows")
    codes, G = _cluster_codes(clusters)
    if bread is None:
        xtx = X.T @ X
        try:
            bread = scipy.linalg.inv(xtx, check_finite=True)
        except np.linalg.LinAlgError as exc:
            raise CollinearityError("singular bread matrix X'X") from exc
        if np.linalg.cond(xtx) > 1 / np.finfo(float).eps:
            raise CollinearityError("singular bread matrix X'X")
    scores = X * e[:, None]
    S = sp.csr_matrix((np.ones(n), (codes, np.arange(n))), shape=(G, n)) @ scores
    meat = S.T @ S
    cov = bread @ meat @ bread
    if small_sample:
        if G < 2:
            raise ValueError("clustered covariance needs at least 2 clusters")
        factor = G / (G - 1) * (n - 1) / max(n - k, 1)
        cov = cov * factor
    return (cov + cov.T) / 2


def vif(design: DesignSample | np.ndarray, names: Sequence[str] | None = None) -> dict[str, float]:
    """Variance inflation factors from auxiliary regressions on the other columns.

    Columns are centered first, so each auxiliary regression has an
    intercept. Perfect collinearity yields ``inf`` and a warning.
    """
    if isinstance(design, DesignSample):
        names = list(design.x_names) if names is None else list(names)
        M = design.X
    else:
        M = np.asarray(design, dtype=float)
        names = [f"x{j}" for j in range(M.shape[1])] if names is None else list(names)
    if M.ndim != 2 or M.shape[1] < 2:
        raise ValueError("VIF needs at least two regressors")
    M = M - M.mean(axis=0)
    tss = np.einsum("ij,ij->j", M, M)
    zero = [names[j] for j in range(M.shape[1]) if tss[j] <= 1e-24 * max(1.0, np.max(tss))]
    if zero:
        raise ValueError(f"zero-variance columns: {zero}")
    out: dict[str, float] = {}
    flagged = []
    for j, n in enumerate(names):
        others = np.delete(M, j, axis=1)
        coef, *_ = np.linalg.lstsq(others, M[:, j], rcond=None)
        r = M[:, j] - others @ coef
        r2 = 1.0 - (r @ r) / tss[j]
        if r2 >= 1.0 - 1e-12:
            out[n] = float("inf")
            flagged.append(n)
        else:
            out[n] = float(1.0 / (1.0 - r2))
    if flagged:
        warnings.warn(f"perfect collinearity, infinite VIF for {flagged}", RuntimeWarning, stacklevel=2)
    return out


@dataclass
class FitResult:
    """One estimated fixed-effects model.

    ``residuals`` are within residuals and ``fitted`` is ``y - residuals`` on
    the original scale (fixed effects included), both aligned to the design
    rows. ``intercept`` uses the grand-mean normalization
    ``mean(y) - mean(X) @ beta``.
    """

    names: tuple[str, ...]
    params: np.ndarray
    covariance: np.ndarray
    dependent: str
    n_obs: int
    n_clusters: int
    df_resid: int
    r_squared_within: float
    r_squared_within_adj: float
    ssr: float
    intercept: float
    intercept_se: float
    residuals: np.ndarray = field(repr=False)
    fitted: np.ndarray = field(repr=False)
    vif: dict[str, float] = field(default_factory=dict)
    entity_fe: bool = True
    time_fe: bool = True
    n_fe_params: int = 0
    label: str = ""

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def tvalues(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.params / self.se

    @property
    def pvalues(self) -> np.ndarray:
        t = np.abs(self.tvalues)
        with np.errstate(invalid="ignore"):
            p = 2 * stats.t.sf(t, self.df_resid)
        # exact zero SE with nonzero estimate
        return np.where(np.isnan(p), np.where(self.params == 0, 1.0, 0.0), p)

    @property
    def conf_int(self) -> np.ndarray:
        q = stats.t.ppf(0.975, self.df_resid)
        return np.column_stack([self.params - q * self.se, self.params + q * self.se])

    @property
    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.names, self.params.tolist()))

    def _idx(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"coefficient {name!r} not in fit; have {list(self.names)}") from None

    def coef(self, name: str) -> float:
        return float(self.params[self._idx(name)])

    def std_err(self, name: str) -> float:
        return float(self.se[self._idx(name)])

    def tvalue(self, name: str) -> float:
        return float(self.tvalues[self._idx(name)])

    def pvalue(self, name: str) -> float:
        return float(self.pvalues[self._idx(name)])

    def summary_frame(self) -> pd.DataFrame:
        ci = self.conf_int
        return pd.DataFrame(
            {
                "coef": self.params,
                "std_err": self.se,
                "t": self.tvalues,
                "p_value": self.pvalues,
                "ci_low": ci[:, 0],
                "ci_high": ci[:, 1],
                "vif": [self.vif.get(n, np.nan) for n in self.names],
            },
            index=list(self.names),
        )

    def to_dict(self, include_vectors: bool = False) -> dict[str, Any]:
        ci = self.conf_int
        out: dict[str, Any] = {
            "label": self.label,
            "dependent": self.dependent,
            "coefficients": {
                n: {
                    "coef": float(self.params[j]),
                    "std_err": float(self.se[j]),
                    "t": float(self.tvalues[j]),
                    "p_value": float(self.pvalues[j]),
                    "ci95": [float(ci[j, 0]), float(ci[j, 1])],
                    "vif": self.vif.get(n),
                }
                for j, n in enumerate(self.names)
            },
            "covariance": self.covariance.tolist(),
            "intercept": {"coef": self.intercept, "std_err": self.intercept_se, "normalization": "grand_mean"},
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "df_resid": self.df_resid,
            "r_squared_within": self.r_squared_within,
            "r_squared_within_adj": self.r_squared_within_adj,
            "ssr": self.ssr,
            "entity_fe": self.entity_fe,
            "time_fe": self.time_fe,
        }
        if include_vectors:
            out["residuals"] = self.residuals.tolist()
            out["fitted"] = self.fitted.tolist()
        return out


def _check_rank(Xw: np.ndarray, names: Sequence[str]) -> None:
    norms = np.linalg.norm(Xw, axis=0)
    if np.any(norms == 0):
        bad = [n for n, v in zip(names, norms) if v == 0]
        raise CollinearityError(f"regressors with no within variation: {bad}", bad)
    Z = Xw / norms
    s = np.linalg.svd(Z, compute_uv=False)
    if s[-1] / s[0] >= RCOND_TOL:
        return
    _, R, piv = scipy.linalg.qr(Z, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    bad = [names[piv[j]] for j in range(len(d)) if d[j] < RCOND_TOL * d[0]] or [names[piv[-1]]]
    raise CollinearityError(f"perfectly collinear regressors: {bad}", bad)


def fit_fe(design: DesignSample, spec: ModelSpec | None = None, compute_vif: bool = True) -> FitResult:
    """OLS on the within-transformed design with CR1 clustered covariance."""
    entity_fe = design.entity_fe if spec is None else spec.entity_fe
    time_fe = design.time_fe if spec is None else spec.time_fe
    names = list(design.x_names)
    n, k = design.n_obs, len(names)
    if k == 0:
        raise ValueError("model has no regressors")
    if n < k + 1:
        raise ValueError(f"{n} rows cannot identify {k} coefficients")
    codes, G = _cluster_codes(design.cluster)
    if G < 2:
        raise ValueError("need at least 2 clusters")

    dm = Demeaner(design.entity, design.period, entity_fe, time_fe)
    y = design.y
    X = design.X
    both = dm(np.column_stack([y, X]))
    yw, Xw = both[:, 0], both[:, 1:]
    absorbed = [nm for j, nm in enumerate(names) if _absorbed(X[:, j], Xw[:, j])]
    if absorbed:
        raise CollinearityError(f"regressors absorbed by fixed effects: {absorbed}", absorbed)
    _check_rank(Xw, names)

    scale = np.linalg.norm(Xw, axis=0)
    Q, R = np.linalg.qr(Xw / scale)
    beta = scipy.linalg.solve_triangular(R, Q.T @ yw) / scale
    resid = yw - Xw @ beta
    Rinv = scipy.linalg.solve_triangular(R, np.eye(k))
    bread = (Rinv @ Rinv.T) / np.outer(scale, scale)
    cov = cluster_robust_cov(Xw, resid, design.cluster, bread=bread)

    ssr = float(resid @ resid)
    tss = float(yw @ yw)
    if tss > 0:
        r2 = 1.0 - ssr / tss
    else:
        r2 = 1.0
    n_fe = dm.n_fe_params
    dof_model = n - k - n_fe
    dof_total = n - n_fe - (0 if (entity_fe or time_fe) else 1)
    if tss > 0 and dof_model > 0 and dof_total > 0:
        r2_adj = 1.0 - (ssr / dof_model) / (tss / dof_total)
    else:
        r2_adj = float("nan")
    xbar = X.mean(axis=0)
    intercept = float(y.mean() - xbar @ beta)
    intercept_se = float(np.sqrt(max(xbar @ cov @ xbar, 0.0)))

    vifs: dict[str, float] = {}
    if compute_vif:
        if k >= 2:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                vifs = vif(Xw, names)
        else:
            vifs = {names[0]: 1.0}

    return FitResult(
        names=tuple(names),
        params=beta,
        covariance=cov,
        dependent=design.y_name,
        n_obs=n,
        n_clusters=G,
        df_resid=G - 1,
        r_squared_within=float(r2),
        r_squared_within_adj=float(r2_adj),
        ssr=ssr,
        intercept=intercept,
        intercept_se=intercept_se,
        residuals=resid,
        fitted=y - resid,
        vif=vifs,
        entity_fe=entity_fe,
        time_fe=time_fe,
        n_fe_params=n_fe,
        label=spec.name if spec is not None else "",
    )


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    dof: int
    p_value: float
    coefficient: str
    estimates: tuple[float, ...]
    std_errors: tuple[float, ...]

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def wald_equality(fits: Sequence[FitResult], coefficient: str) -> WaldResult:
    """Chi-square test that ``coefficient`` is equal across independent fits.

    Two fits give the pairwise test (1 dof); k fits give the joint test of
    all k - 1 contrasts against the first fit.
    """
    if len(fits) < 2:
        raise ValueError("need at least two fits")
    b = np.array([f.coef(coefficient) for f in fits])
    se = np.array([f.std_err(coefficient) for f in fits])
    k = len(fits)
    C = np.hstack([-np.ones((k - 1, 1)), np.eye(k - 1)])
    d = C @ b
    if np.all(d == 0):
        stat = 0.0
    else:
        V = C @ np.diag(se**2) @ C.T
        stat = float(d @ np.linalg.pinv(V) @ d)
    p = float(stats.chi2.sf(stat, k - 1))
    return WaldResult(stat, k - 1, p, coefficient, tuple(b.tolist()), tuple(se.tolist()))
