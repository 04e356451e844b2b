import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest
import yaml

from conftest import random_panel, simple_spec
from panelkit import build_design, fit_fe
from panelkit.cli import AnalysisConfig, ConfigError, load_config, main, run_pipeline
from panelkit.report import STAR_NOTE, dumps_json, fmt_num, render_table, stars


class TestFormatting:
    @pytest.mark.parametrize(
        "p, s",
        [(0.004, "***"), (0.0099999, "***"), (0.01, "**"), (0.049, "**"), (0.05, "*"), (0.0999, "*"), (0.1, ""), (float("nan"), "")],
    )
    def test_stars_strict(self, p, s):
        assert stars(p) == s

    def test_numbers(self):
        assert fmt_num(0.039) + stars(0.004) == "0.039***"
        assert fmt_num(0.0004) == "4.00e-04"
        assert fmt_num(-1.23456) == "-1.235"
        assert fmt_num(float("nan")) == "n/a"

    def test_json(self):
        s = dumps_json({"a": 0.1, "b": [1.0, float("nan")], "c": np.float64(1 / 3), "d": np.arange(2)})
        back = json.loads(s)
        assert back["a"] == 0.1 and back["b"] == [1.0, None]
        assert back["c"] == 1 / 3 and back["d"] == [0, 1]
        assert dumps_json({"x": 2.0}) == '{\n  "x": 2.0\n}\n'


class TestRender:
    def test_stepwise_layout(self, rng):
        d = build_design(random_panel(rng, 30, 4, k=3), simple_spec(3))
        fits = [fit_fe(d.select(x=d.x_names[:j])) for j in (1, 2, 3)]
        text = render_table(fits, "stepwise")
        assert text == render_table(fits, "stepwise")
        lines = text.splitlines()
        assert "(1)" in lines[1] and "(3)" in lines[1] and "VIF" in lines[1]
        for label in ("Year FE", "Municipality FE", "Constant", "N", "R2 (within)"):
            assert any(l.startswith(label) for l in lines)
        assert lines[-1] == STAR_NOTE
        assert "(" + fmt_num(fits[0].std_err("x0")) + ")" in text

    def test_layout_mismatch(self, rng):
        d = build_design(random_panel(rng, 10, 3), simple_spec())
        with pytest.raises(TypeError):
            render_table([fit_fe(d)], "threshold")
        with pytest.raises(ValueError):
            render_table([], "stepwise")
        with pytest.raises(ValueError):
            render_table([fit_fe(d)], "pie")


def write_cfg(tmp_path, cfg):
    p = tmp_path / "analysis.yaml"
    p.write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")
    return p


def tiny_csv(tmp_path):
    df = pd.DataFrame({"entity": ["a", "a", "b", "b"], "period": [2020, 2021, 2020, 2021],
                       "y": [1.0, 2.0, 3.0, 5.0], "x": [1.0, 2.0, 1.5, 4.0]})
    df.to_csv(tmp_path / "tiny.csv", index=False)
    return "tiny.csv"


class TestCli:
    def test_minimal_fit(self, tmp_path):
        cfg = write_cfg(tmp_path, {"data": tiny_csv(tmp_path), "model": {"dependent": "y", "treatment": "x"}, "stages": {"fit": {}}})
        out = tmp_path / "out"
        assert main(["fit", "--config", str(cfg), "--out", str(out)]) == 0
        rec = json.loads((out / "fit.json").read_text())
        assert rec["fit"]["n_obs"] == 4
        assert (out / "report.txt").exists()

    def test_missing_variable(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, {"data": tiny_csv(tmp_path), "model": {"dependent": "y", "treatment": "nope"}, "stages": ["fit"]})
        out = tmp_path / "out"
        status = main(["fit", "--config", str(cfg), "--out", str(out)])
        assert status != 0
        err = json.loads((out / "error.json").read_text())
        assert "nope" in err["message"] and err["stage"] == "validate"
        assert "nope" in capsys.readouterr().err

    def test_stochastic_stage_needs_seed(self, tmp_path):
        cfg = write_cfg(tmp_path, {"data": tiny_csv(tmp_path), "model": {"dependent": "y", "treatment": "x"},
                                   "stages": {"placebo": {"replications": 100}}})
        assert main(["placebo", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_stage_rejected(self):
        with pytest.raises(ConfigError):
            AnalysisConfig.from_dict({"data": "x.csv", "model": {"dependent": "y", "treatment": "x"}, "stages": ["magic"]})

    def test_bad_yaml(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("stages: [", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_stage_error_record(self, tmp_path):
        # x has no within variation after two-way FE on a 2x2 panel where x is a period dummy
        df = pd.DataFrame({"entity": ["a", "a", "b", "b"], "period": [1, 2, 1, 2], "y": [1.0, 2, 3, 5], "x": [0.0, 1, 0, 1]})
        df.to_csv(tmp_path / "d.csv", index=False)
        cfg = write_cfg(tmp_path, {"data": "d.csv", "model": {"dependent": "y", "treatment": {"name": "x", "transform": "identity"}}, "stages": ["fit"]})
        out = tmp_path / "out"
        assert main(["fit", "--config", str(cfg), "--out", str(out)]) == 1
        err = json.loads((out / "error.json").read_text())
        assert err["stage"] == "fit" and err["error_type"] == "CollinearityError"

    def test_simulate_and_stage_isolation(self, tmp_path):
        base = {
            "seed": 3,
            "model": {"dependent": "outcome", "treatment": "treatment", "controls": ["population"]},
            "stages": {
                "simulate": {"config": {"n_entities": 60, "control_specs": [{"name": "population", "sd": 1.0, "coefficient": 0.1}]}},
                "fit": {},
                "placebo": {"replications": 100},
                "lags": {},
            },
        }
        cfg = AnalysisConfig.from_dict(base, base_dir=tmp_path)
        assert run_pipeline(cfg, tmp_path / "all") == 0
        assert run_pipeline(cfg, tmp_path / "few", stages=["simulate", "fit"]) == 0
        assert (tmp_path / "all" / "fit.json").read_bytes() == (tmp_path / "few" / "fit.json").read_bytes()
        assert not (tmp_path / "few" / "placebo.json").exists()
        assert (tmp_path / "all" / "plots" / "placebo_null.csv").exists()

    def test_console_script(self, tmp_path):
        cfg = write_cfg(tmp_path, {"data": tiny_csv(tmp_path), "model": {"dependent": "y", "treatment": "x"}, "stages": ["fit"]})
        r = subprocess.run([sys.executable, "-m", "panelkit.cli", "fit", "--config", str(cfg), "--out", str(tmp_path / "o")],
                           capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
