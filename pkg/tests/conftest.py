import numpy as np
import pandas as pd
import pytest

from panelkit import ModelSpec, PanelDataset, VariableSpec


def random_panel(rng, n_entities, n_periods, k=2, unbalanced=False, drop=0.3):
    """Panel with entity/period effects, ``k`` regressors and a noisy outcome."""
    ent = np.repeat(np.arange(n_entities), n_periods)
    per = np.tile(np.arange(n_periods), n_entities)
    mu = rng.standard_normal(n_entities)[ent]
    lam = rng.standard_normal(n_periods)[per]
    X = rng.standard_normal((ent.size, k)) + 0.5 * mu[:, None] + 0.3 * lam[:, None]
    beta = rng.uniform(-1, 1, k)
    y = X @ beta + mu + lam + 0.5 * rng.standard_normal(ent.size)
    df = pd.DataFrame({"entity": [f"u{i:04d}" for i in ent], "period": 2000 + per, "y": y})
    for j in range(k):
        df[f"x{j}"] = X[:, j]
    if unbalanced:
        keep = rng.random(len(df)) > drop
        # keep every entity and period represented
        keep[np.unique(ent, return_index=True)[1]] = True
        df = df[keep]
    return PanelDataset(df)


def simple_spec(k=2, **kw):
    return ModelSpec(
        VariableSpec("y", role="dependent"),
        (VariableSpec("x0", role="treatment"),),
        tuple(VariableSpec(f"x{j}", role="control") for j in range(1, k)),
        **kw,
    )


def dummy_ols(y, X, entity, period, entity_fe=True, time_fe=True):
    """Slopes from OLS with explicit entity and period indicator columns."""
    cols = [X]
    e_codes = pd.factorize(entity, sort=True)[0]
    t_codes = pd.factorize(period, sort=True)[0]
    if entity_fe:
        cols.append(np.eye(e_codes.max() + 1)[e_codes])
    if time_fe:
        D = np.eye(t_codes.max() + 1)[t_codes]
        cols.append(D[:, 1:] if entity_fe else D)
    if not entity_fe and not time_fe:
        cols.append(np.ones((len(y), 1)))
    Z = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(Z, y, rcond=None)
    return coef[: X.shape[1]], y - Z @ coef


def dummy_residualize(v, entity, period):
    """Residual of ``v`` regressed on full entity + period indicators."""
    _, r = dummy_ols(v, np.zeros((len(v), 0)), entity, period)
    return r


def cluster_sum_oracle(X, e, clusters):
    """CR1 sandwich by explicit loop over clusters."""
    n, k = X.shape
    bread = np.linalg.inv(X.T @ X)
    meat = np.zeros((k, k))
    labels = list(dict.fromkeys(clusters.tolist()))
    for g in labels:
        m = clusters == g
        s = X[m].T @ e[m]
        meat += np.outer(s, s)
    G = len(labels)
    return G / (G - 1) * (n - 1) / (n - k) * bread @ meat @ bread


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
