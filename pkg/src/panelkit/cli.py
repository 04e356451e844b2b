"""Config-driven analysis pipeline.

Usage::

    panelkit report --config analysis.yaml --out results/
    panelkit threshold --config analysis.yaml --out results/ --seed 7 --threads 4

Each subcommand runs one stage; ``report`` runs every stage present in the
config (or those listed with ``--stages``). Every stage writes
``<stage>.json``; the run writes ``report.txt`` and plot data under
``plots/``. Failures write ``error.json`` and exit nonzero (2 for invalid
configs, 1 for stage errors).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import fe_core, mediation, report, robustness, synthetic, threshold
from .panel_data import ModelSpec, PanelDataset, PanelError, VariableSpec, build_design, load_panel

__all__ = ["ConfigError", "AnalysisConfig", "load_config", "run_pipeline", "main", "STAGES"]

STAGES = ("simulate", "fit", "stepwise", "mediate", "threshold", "grouped", "heterogeneity", "lags", "placebo")
DEFAULT_TRANSFORM = {"dependent": "log", "treatment": "log", "mediator": "log"}


class ConfigError(ValueError):
    pass


@dataclass
class AnalysisConfig:
    """Parsed analysis configuration (see README for the YAML layout)."""

    data: str | None
    schema: dict[str, Any]
    model: dict[str, Any]
    stages: dict[str, dict[str, Any]]
    output: str = "results"
    seed: int | None = None
    threads: int = 1
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, d: dict[str, Any], base_dir: Path | None = None) -> "AnalysisConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        stages = d.get("stages") or {}
        if isinstance(stages, list):
            stages = {s: {} for s in stages}
        unknown = [s for s in stages if s not in STAGES]
        if unknown:
            raise ConfigError(f"unknown stages: {unknown}")
        stages = {k: (v or {}) for k, v in stages.items()}
        if d.get("data") is None and "simulate" not in stages:
            raise ConfigError("config needs 'data' or a 'simulate' stage")
        if any(s != "simulate" for s in stages) and not d.get("model"):
            raise ConfigError("config needs a 'model' section")
        return cls(
            data=d.get("data"),
            schema=d.get("schema") or {},
            model=d.get("model") or {},
            stages=stages,
            output=d.get("output", "results"),
            seed=d.get("seed"),
            threads=int(d.get("threads", 1)),
            base_dir=base_dir or Path.cwd(),
        )


def load_config(path: str | Path) -> AnalysisConfig:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return AnalysisConfig.from_dict(raw, base_dir=path.parent)


class _Resolver:
    """Turns config variable references into VariableSpec objects."""

    def __init__(self, schema: dict[str, Any], columns: Sequence[str]):
        self.vars = schema.get("variables") or {}
        if isinstance(self.vars, list):
            self.vars = {v: {} for v in self.vars}
        self.columns = set(columns)

    def __call__(self, ref: Any, role: str) -> VariableSpec:
        if isinstance(ref, dict):
            name = ref.get("name")
            extra = {k: v for k, v in ref.items() if k != "name"}
        else:
            name, extra = ref, {}
        if name not in self.columns:
            raise ConfigError(f"variable {name!r} ({role}) not found in data")
        entry = dict(self.vars.get(name) or {})
        entry.update(extra)
        transform = entry.get("transform", DEFAULT_TRANSFORM.get(role, "identity"))
        return VariableSpec(name, transform=transform, role=role, lag=int(entry.get("lag", 0)))


def _as_list(v: Any) -> list:
    if v is None:
        return []
    return list(v) if isinstance(v, (list, tuple)) else [v]


def build_model(model: dict[str, Any], resolve: _Resolver, **overrides: Any) -> ModelSpec:
    if "dependent" not in model or "treatment" not in model:
        raise ConfigError("model needs 'dependent' and 'treatment'")
    spec = ModelSpec(
        dependent=resolve(model["dependent"], "dependent"),
        treatment=tuple(resolve(t, "treatment") for t in _as_list(model["treatment"])),
        controls=tuple(resolve(c, "control") for c in _as_list(model.get("controls"))),
        entity_fe=bool(model.get("entity_fe", True)),
        time_fe=bool(model.get("time_fe", True)),
        cluster=model.get("cluster", "entity"),
        sample_filter=model.get("sample_filter"),
        name=model.get("name", "baseline"),
    )
    if spec.cluster != "entity" and spec.cluster not in resolve.columns:
        raise ConfigError(f"cluster variable {spec.cluster!r} not found in data")
    return spec.replace(**overrides) if overrides else spec


class Pipeline:
    def __init__(self, cfg: AnalysisConfig, out: Path, threads: int, seed: int | None):
        self.cfg = cfg
        self.out = out
        self.threads = max(1, threads)
        self.seed = seed
        self.data: PanelDataset | None = None
        self.sections: list[tuple[str, str]] = []
        self.written: list[str] = []

    # -- helpers --------------------------------------------------------
    def _write(self, name: str, payload: Any) -> None:
        path = self.out / f"{name}.json"
        path.write_text(report.dumps_json(payload), encoding="utf-8")
        self.written.append(path.name)

    def _plots(self) -> Path:
        p = self.out / "plots"
        p.mkdir(parents=True, exist_ok=True)
        return p

    def _stage_seed(self, opts: dict[str, Any], stage: str) -> int:
        seed = opts.get("seed", self.seed)
        if seed is None:
            raise ConfigError(f"stage {stage!r} is stochastic and needs a seed")
        return int(seed)

    def _count(self, opts: dict[str, Any], key: str, stage: str) -> int:
        if opts.get(key) is None:
            raise ConfigError(f"stage {stage!r} needs {key!r}")
        return int(opts[key])

    def validate(self) -> None:
        assert self.data is not None
        self.resolve = _Resolver(self.cfg.schema, self.data.variables)
        stages = [s for s in self.cfg.stages if s != "simulate"]
        if not stages:
            return
        self.spec = build_model(self.cfg.model, self.resolve)
        st = self.cfg.stages
        for block in _as_list(st.get("stepwise", {}).get("blocks")):
            for v in _as_list(block):
                self.resolve(v, "control")
        for m in _as_list(st.get("mediate", {}).get("mediators")):
            self.resolve(m, "mediator")
        for key in ("threshold", "grouped"):
            if key in st and st[key].get("variable") is not None:
                self.resolve(st[key]["variable"], "threshold_variable")
        if "heterogeneity" in st:
            by = st["heterogeneity"].get("by")
            if by is None:
                raise ConfigError("heterogeneity stage needs 'by'")
            self.resolve(by, "grouping_variable")
        if "threshold" in st and st["threshold"].get("bootstrap"):
            self._stage_seed(st["threshold"], "threshold")
        if "placebo" in st:
            self._count(st["placebo"], "replications", "placebo")
            self._stage_seed(st["placebo"], "placebo")
        if "mediate" in st:
            if not _as_list(st["mediate"].get("mediators")):
                raise ConfigError("mediate stage needs 'mediators'")
            if st["mediate"].get("bootstrap"):
                self._stage_seed(st["mediate"], "mediate")

    # -- stages ---------------------------------------------------------
    def simulate(self, opts: dict[str, Any]) -> None:
        seed = self._stage_seed(opts, "simulate")
        if opts.get("fixture") == "municipal":
            panel, truth = synthetic.municipal_layout_panel(seed, **(opts.get("config") or {}))
        else:
            cfg = synthetic.DgpConfig.from_dict(opts["config"]) if opts.get("config") else synthetic.default_fixture()
            panel, truth = synthetic.generate_panel(cfg, seed)
        csv_path = self.out / opts.get("output", "simulated.csv")
        synthetic.write_panel(panel, truth, csv_path, csv_path.with_suffix(".truth.json"))
        if self.data is None:
            self.data = load_panel(csv_path)
        payload = truth.to_dict()
        payload["csv"] = csv_path.name
        self._write("simulate", payload)
        self.sections.append(("simulate", f"Simulated panel: {panel!r}\n"))

    def fit(self, opts: dict[str, Any]) -> None:
        design = build_design(self.data, self.spec)
        res = fe_core.fit_fe(design, self.spec)
        self._write("fit", {"fit": res.to_dict(), "sample": design.report.to_dict()})
        self.sections.append(("fit", report.render_table([res], "stepwise")))

    def stepwise(self, opts: dict[str, Any]) -> None:
        blocks = [_as_list(b) for b in _as_list(opts.get("blocks"))]
        base = self.spec.replace(controls=())
        specs = [base.replace(name="(1)")]
        controls: list[VariableSpec] = []
        for i, b in enumerate(blocks):
            controls += [self.resolve(v, "control") for v in b]
            specs.append(base.replace(controls=tuple(controls), name=f"({i + 2})"))
        if not blocks:
            specs = [self.spec]
        common = opts.get("common_sample", True)
        if common:
            full = specs[-1]
            design_full = build_design(self.data, full)
            fits = [fe_core.fit_fe(design_full.select(x=s.regressor_labels), s) for s in specs]
        else:
            fits = [fe_core.fit_fe(build_design(self.data, s), s) for s in specs]
        self._write("stepwise", {"columns": [f.to_dict() for f in fits], "common_sample": bool(common)})
        self.sections.append(("stepwise", report.render_table(fits, "stepwise")))

    def mediate(self, opts: dict[str, Any]) -> None:
        boot = int(opts.get("bootstrap") or 0)
        seed = self._stage_seed(opts, "mediate") if boot else 0
        results = []
        for m in _as_list(opts["mediators"]):
            mv = self.resolve(m, "mediator")
            results.append(
                mediation.fit_mediation(
                    self.data, self.spec, mv, bootstrap=boot or None, seed=seed,
                    level=float(opts.get("level", 0.95)), n_jobs=self.threads,
                )
            )
        payload: dict[str, Any] = {"mediators": {r.mediator: r.to_dict() for r in results}}
        if opts.get("parallel") and len(results) > 1:
            meds = [self.resolve(m, "mediator") for m in _as_list(opts["mediators"])]
            payload["parallel"] = mediation.fit_parallel_mediation(self.data, self.spec, meds)
        self._write("mediate", payload)
        self.sections.append(("mediate", report.render_table(results, "mediation")))

    def _threshold_design(self, opts: dict[str, Any]):
        tv = opts.get("variable")
        spec = self.spec
        if tv is not None:
            tvs = self.resolve(tv, "threshold_variable")
            if tvs.label not in spec.regressor_labels:
                spec = spec.replace(extras=(tvs,))
            tv_label = tvs.label
        else:
            tv_label = spec.treatment_label
        return spec, build_design(self.data, spec), tv_label

    def threshold(self, opts: dict[str, Any]) -> None:
        spec, design, tv = self._threshold_design(opts)
        switching = opts.get("switching", "treatment")
        k = len(design.x_names)
        min_regime = opts.get("min_regime")
        if min_regime is None:
            min_regime = threshold.default_min_regime(k + (1 if switching == "treatment" else k))
        grid = threshold.grid_candidates(design, tv, float(opts.get("trim", 0.01)), int(min_regime))
        res = threshold.fit_threshold(design, spec, tv, grid, switching=switching, level=float(opts.get("level", 0.95)))
        boot = int(opts.get("bootstrap") or 0)
        if boot:
            seed = self._stage_seed(opts, "threshold")
            _, p = threshold.bootstrap_lr_test(design, spec, tv, boot, seed, grid=grid, switching=switching, n_jobs=self.threads)
            res.bootstrap_p = p
            res.bootstrap_replications = boot
        self._write("threshold", res)
        report.write_profile_csv(res, self._plots() / "threshold_profile.csv")
        self.sections.append(("threshold", report.render_table([res], "threshold")))

    def grouped(self, opts: dict[str, Any]) -> None:
        spec, design, tv = self._threshold_design(opts)
        cutoffs = _as_list(opts.get("cutoffs")) or ["median", "mean", "tertiles"]
        results = threshold.grouped_fit(design, spec, tv, cutoffs)
        self._write("grouped", {"threshold_variable": tv, "results": [r.to_dict() for r in results]})
        report.write_pvalue_trend_csv(results, self._plots() / "grouped_pvalue_trend.csv")
        self.sections.append(("grouped", report.render_table(results, "grouped")))

    def heterogeneity(self, opts: dict[str, Any]) -> None:
        by = self.resolve(opts["by"], "grouping_variable")
        method = opts.get("method", "median")
        frame = self.data.frame
        ent_val = frame.groupby("entity")[by.name].mean()
        if method == "median":
            cut = float(np.median(ent_val.dropna()))
            labels = {"Small": ent_val[ent_val <= cut].index, "Large": ent_val[ent_val > cut].index}
            names = opts.get("labels", ["Small", "Large"])
            labels = dict(zip(names, labels.values()))
        elif method == "values":
            labels = {f"{by.name}={v:g}": ent_val[ent_val == v].index for v in sorted(ent_val.dropna().unique())}
        else:
            raise ConfigError(f"unknown heterogeneity method {method!r}")
        fits: dict[str, fe_core.FitResult] = {}
        grouped: dict[str, Any] = {}
        for name, members in labels.items():
            members = set(members)
            spec = self.spec.replace(sample_filter=lambda f, m=members: f["entity"].isin(m).to_numpy(), name=name)
            design = build_design(self.data, spec)
            fits[name] = fe_core.fit_fe(design, spec)
            if opts.get("cutoffs"):
                grouped[name] = [r.to_dict() for r in threshold.grouped_fit(design, spec, None, _as_list(opts["cutoffs"]))]
        coef = self.spec.treatment_label
        fl = list(fits.values())
        wald = fe_core.wald_equality(fl, coef)
        payload: dict[str, Any] = {
            "by": by.name,
            "method": method,
            "groups": {k: f.to_dict() for k, f in fits.items()},
            "wald_joint" if len(fl) > 2 else "wald": wald.to_dict(),
        }
        if len(fl) > 2:
            ref = list(fits)[0]
            payload["wald_vs_reference"] = {
                k: fe_core.wald_equality([fits[ref], f], coef).to_dict() for k, f in list(fits.items())[1:]
            }
        if grouped:
            payload["grouped"] = grouped
        self._write("heterogeneity", payload)
        text = report.render_table(fl, "stepwise") + f"Wald test of equal {coef}: chi2({wald.dof}) = {wald.statistic:.3f}, p = {wald.p_value:.3f}\n"
        self.sections.append(("heterogeneity", text))

    def lags(self, opts: dict[str, Any]) -> None:
        modes = _as_list(opts.get("modes")) or ["lag_only", "current_and_lag"]
        fits = [robustness.fit_lagged(self.data, self.spec, m, int(opts.get("lag", 1))) for m in modes]
        self._write("lags", {m: f.to_dict() for m, f in zip(modes, fits)})
        self.sections.append(("lags", report.render_table(fits, "stepwise")))

    def placebo(self, opts: dict[str, Any]) -> None:
        reps = self._count(opts, "replications", "placebo")
        seed = self._stage_seed(opts, "placebo")
        res = robustness.residual_permutation_placebo(
            self.data, self.spec, reps, opts.get("mode", "permute"), seed, n_jobs=self.threads
        )
        self._write("placebo", res)
        report.write_placebo_csv(res, self._plots() / "placebo_null.csv")
        self.sections.append(("placebo", report.render_table([res], "placebo")))


def _write_error(out: Path, stage: str, exc: BaseException) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rec = {"stage": stage, "error_type": type(exc).__name__, "message": str(exc)}
    (out / "error.json").write_text(report.dumps_json(rec), encoding="utf-8")


def run_pipeline(
    config: AnalysisConfig,
    out: str | Path | None = None,
    stages: Sequence[str] | None = None,
    seed: int | None = None,
    threads: int | None = None,
) -> int:
    """Run the requested stages in canonical order; return the exit status."""
    out = Path(out or config.output)
    out.mkdir(parents=True, exist_ok=True)
    requested = list(config.stages) if stages is None else list(stages)
    stage_opts = {k: dict(v) for k, v in config.stages.items()}
    for s in requested:
        stage_opts.setdefault(s, {})
    run_cfg = dataclasses.replace(config, stages=stage_opts)
    pipe = Pipeline(run_cfg, out, threads or config.threads, config.seed if seed is None else seed)
    try:
        bad = [s for s in requested if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stages: {bad}")
        if config.data is not None:
            data_path = Path(config.data)
            if not data_path.is_absolute():
                data_path = config.base_dir / data_path
            pipe.data = load_panel(data_path, config.schema)
        elif "simulate" not in config.stages:
            raise ConfigError("no data source: set 'data' or configure 'simulate'")
    except (ConfigError, PanelError, OSError) as exc:
        _write_error(out, "load", exc)
        return 2
    order = [s for s in STAGES if s in requested or (s == "simulate" and pipe.data is None)]
    if "simulate" in order:
        try:
            pipe.simulate(stage_opts["simulate"])
        except Exception as exc:  # noqa: BLE001 - every stage failure becomes an error record
            _write_error(out, "simulate", exc)
            return 1
        order.remove("simulate")
    run_cfg.stages = {k: v for k, v in stage_opts.items() if k in order}
    try:
        pipe.validate()
    except (ConfigError, PanelError) as exc:
        _write_error(out, "validate", exc)
        return 2
    for stage in order:
        try:
            getattr(pipe, stage)(run_cfg.stages[stage])
        except Exception as exc:  # noqa: BLE001
            _write_error(out, stage, exc)
            return 1
    text = "".join(f"== {name} ==\n{body}\n" for name, body in pipe.sections)
    (out / "report.txt").write_text(text, encoding="utf-8")
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="panelkit", description="Fixed-effects panel analysis pipeline")
    p.add_argument("command", choices=[*STAGES, "report"], help="stage to run, or 'report' for all configured stages")
    p.add_argument("--config", required=True, help="YAML analysis config")
    p.add_argument("--out", default=None, help="output directory (default: config 'output')")
    p.add_argument("--seed", type=int, default=None, help="seed for stochastic stages")
    p.add_argument("--stages", default=None, help="comma-separated stage list (with 'report')")
    p.add_argument("--threads", type=int, default=None, help="worker threads for resampling stages")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        out = Path(args.out or "results")
        _write_error(out, "config", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command == "report":
        stages = args.stages.split(",") if args.stages else None
    else:
        stages = [args.command]
    status = run_pipeline(cfg, args.out, stages, args.seed, args.threads)
    if status != 0:
        err = Path(args.out or cfg.output) / "error.json"
        rec = json.loads(err.read_text(encoding="utf-8"))
        print(f"error in stage {rec['stage']}: {rec['message']} (details in {err})", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
