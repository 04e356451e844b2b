import json

import numpy as np
import pytest

from panelkit import DgpConfig, ModelSpec, PanelError, VariableSpec, build_design, fit_fe, generate_panel, load_panel
from panelkit.synthetic import ControlSpec, default_fixture, municipal_layout_panel, write_panel, MUNICIPAL_COLUMNS

SPEC = ModelSpec(VariableSpec("outcome", "log", "dependent"), (VariableSpec("treatment", "log", "treatment"),))


def test_same_seed_bit_identical():
    cfg = DgpConfig(n_entities=50, missing_rate=0.2, mediation=(0.2, 0.3, 0.1))
    a, _ = generate_panel(cfg, 7)
    b, _ = generate_panel(cfg, 7)
    assert a.frame.equals(b.frame)
    c, _ = generate_panel(cfg, 8)
    assert not a.frame.equals(c.frame)


def test_noiseless_exact_recovery():
    cfg = DgpConfig(n_entities=30, noise_sd=0.0, slopes=(0.37, 0.37))
    panel, _ = generate_panel(cfg, 1)
    res = fit_fe(build_design(panel, SPEC))
    assert res.coef("log (treatment)") == pytest.approx(0.37, abs=1e-10)


def test_moment_check_against_components():
    """Regressing the outcome on the stored components recovers the planted slope within 3 SEs."""
    cfg = DgpConfig(n_entities=300, n_periods=4, noise_sd=0.1, slopes=(0.5, 0.5))
    panel, truth = generate_panel(cfg, 2)
    res = fit_fe(build_design(panel, SPEC))
    assert abs(res.coef("log (treatment)") - 0.5) < 3 * res.std_err("log (treatment)")
    y = np.log(panel.column("outcome"))
    resid = y - truth.noiseless_outcome()
    np.testing.assert_allclose(resid, truth.components["noise"], atol=1e-12)


def test_ground_truth_reconstructs_outcome_with_everything():
    cfg = DgpConfig(
        n_entities=40,
        mediation=(0.2, 0.4, 0.05),
        control_specs=(ControlSpec("c1", 1.0, 0.5, 0.3, 0.2, 0.1),),
    )
    panel, truth = generate_panel(cfg, 3)
    y = np.log(panel.column("outcome"))
    np.testing.assert_allclose(y, truth.noiseless_outcome() + truth.components["noise"], rtol=1e-12)
    np.testing.assert_allclose(np.log(panel.column("mediator")), truth.components["mediator"], rtol=1e-12)


def test_threshold_planted_at_quantile():
    cfg = DgpConfig(n_entities=100, threshold_quantile=0.7, slopes=(0.0, 0.5))
    panel, truth = generate_panel(cfg, 4)
    x = truth.components["treatment"].to_numpy()
    assert truth.threshold == np.quantile(x, 0.7, method="inverted_cdf")
    eff = truth.treatment_effect()
    assert np.all(eff[x <= truth.threshold] == 0.0)


def test_lag_component_is_previous_period():
    cfg = DgpConfig(n_entities=20, n_periods=5, lag_coefficients=(0.0, 0.3))
    _, truth = generate_panel(cfg, 5)
    c = truth.components
    cur = c["treatment"].to_numpy().reshape(20, 5)
    lag = c["treatment_lag"].to_numpy().reshape(20, 5)
    np.testing.assert_array_equal(lag[:, 1:], cur[:, :-1])


def test_missingness_independent_of_values():
    cfg = DgpConfig(n_entities=2000, missing_rate=0.4)
    panel, truth = generate_panel(cfg, 6)
    y = np.log(panel.column("outcome"))
    full = truth.noiseless_outcome() + truth.components["noise"].to_numpy()
    miss = np.isnan(y)
    assert miss.mean() == pytest.approx(0.4, abs=0.02)
    a, b = full[miss], full[~miss]
    se = np.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    assert abs(a.mean() - b.mean()) < 3 * se


@pytest.mark.parametrize(
    "kw",
    [
        {"noise_sd": -1.0},
        {"n_entities": 1},
        {"n_periods": 1},
        {"missing_rate": 1.5},
        {"threshold_quantile": -0.1},
    ],
)
def test_invalid_config(kw):
    with pytest.raises(PanelError):
        DgpConfig(**kw)


def test_config_round_trip():
    cfg = default_fixture()
    again = DgpConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_default_fixture_shape():
    panel, truth = generate_panel(default_fixture(), 0)
    assert len(panel) == 1724 * 4
    miss = 1 - panel.n_present("outcome") / len(panel)
    assert miss == pytest.approx(0.37, abs=0.02)
    assert set(panel.variables) >= {"outcome", "treatment", "population", "labor_force_ratio"}


def test_municipal_layout_columns():
    panel, _ = municipal_layout_panel(0, n_entities=30)
    assert set(MUNICIPAL_COLUMNS) <= set(panel.variables)


def test_write_panel_sidecar(tmp_path):
    panel, truth = generate_panel(DgpConfig(n_entities=10), 9)
    write_panel(panel, truth, tmp_path / "p.csv")
    back = load_panel(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.column("outcome"), panel.column("outcome"))
    side = json.loads((tmp_path / "p.truth.json").read_text())
    assert side["seed"] == 9
