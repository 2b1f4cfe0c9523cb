"""Benchmark harness: regret against the simulation oracle, four-cell
method comparisons, robustness sweeps, and dose-response surface grids.

Regret is computed exactly: the generator's optimal dosage is available in
closed form, so max-over-policies value is just the oracle evaluated at
its own optimum.  All heavy sections isolate per-cell failures (a diverged
training marks the cell as failed and the run continues) and write plain
CSV/JSON artifacts that external plotting tools can consume.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import autodiff as ad
from .dcnet import dose_evaluator, predict_mu, train_mu
from .errors import ConfigurationError, DimensionError, DoseoptError, StateError
from .gps_flow import GpsDensityEvaluator, density, train_gps
from .policy import PolicyConfig, PolicyModel, compute_threshold, policy_forward, train_policy
from .synthgen import SimConfig, generate
from .training import FitConfig

RESULT_COLUMNS = ("method", "mode", "alpha", "p", "d", "seed",
                  "selected_regret", "mean_regret", "std_regret", "constraint_rate")


def derive_seed(*parts: int) -> int:
    """Deterministic child seed from integer key parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _milli(v: float) -> int:
    return int(round(1000.0 * float(v)))


# ---------------------------------------------------------------------
# policy value and regret
# ---------------------------------------------------------------------


def policy_value(policy, oracle, x: np.ndarray) -> float:
    """Mean oracle outcome of the proposed dosages over covariates x.

    ``policy`` may be a trained model (anything with .predict), an (n, p)
    array of per-sample dosages, or a single length-p assignment applied
    to every sample.
    """
    if oracle is None:
        raise StateError("no simulation oracle available; value evaluation "
                         "needs generator metadata")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if hasattr(policy, "predict"):
        t = policy.predict(x)
    else:
        t = np.asarray(policy, dtype=np.float64)
        if t.ndim == 1:
            t = np.broadcast_to(t, (x.shape[0], t.size))
    if t.shape[0] != x.shape[0]:
        raise DimensionError(f"{t.shape[0]} dosage rows for {x.shape[0]} samples")
    return float(np.mean(oracle.mu(t, x)))


def regret(policy, oracle, x: np.ndarray) -> float:
    """Shortfall against the oracle's closed-form optimal assignment (>= 0)."""
    best = policy_value(oracle.optimal_policy(np.atleast_2d(x)), oracle, x)
    return best - policy_value(policy, oracle, x)


# ---------------------------------------------------------------------
# benchmark configuration and report container
# ---------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkConfig:
    n: int = 5000
    p: int = 2
    alpha: float = 2.0
    kappa: float = 1.0
    d_values: tuple = (10, 100)
    seeds: tuple = (1, 2, 3)
    quantile: float = 0.05
    restarts: int = 5
    alphas: tuple = (0.0, 1.0, 2.0, 4.0)      # robustness grid
    ps: tuple = (2, 3)
    quantiles: tuple = (0.01, 0.05, 0.1, 0.2)
    sweep_d: int = 10                          # sweeps fix one moderate width
    sweep_seed: int = 1
    mu_fit: FitConfig | None = None            # None -> module defaults
    gps_fit: FitConfig | None = None
    policy_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 10:
            raise ConfigurationError("benchmark needs at least a handful of samples")
        if not self.seeds or not self.d_values:
            raise ConfigurationError("need at least one seed and one width")

    def to_jsonable(self) -> dict:
        doc = asdict(self)
        doc["mu_fit"] = None if self.mu_fit is None else asdict(self.mu_fit)
        doc["gps_fit"] = None if self.gps_fit is None else asdict(self.gps_fit)
        return doc


@dataclass
class EvalReport:
    """Everything one benchmark run produced, ready to serialize.

    ``results`` holds the method-comparison rows, ``sweeps`` maps sweep
    name -> rows.  Wall-clock timings go to their own file so that report
    files proper are bit-identical across reruns of the same config.
    """

    config: dict
    results: list[dict]
    sweeps: dict[str, list[dict]] = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)
    runtimes: dict[str, float] = field(default_factory=dict)

    def results_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.results, columns=list(RESULT_COLUMNS))

    def cell_labels(self) -> list[str]:
        """Every attempted cell exactly once: each produced either a result
        row or a failure entry, never both."""
        labels = [f"table[seed={r['seed']},d={r['d']}]:{r['method']}:{r['mode']}"
                  for r in self.results if r.get("method") != "observed"]
        for name, rows in sorted(self.sweeps.items()):
            for r in rows:
                suffix = f":{r['mode']}" if "mode" in r and name != "quantile" else ""
                labels.append(f"{name}[{r[name]}]{suffix}")
        labels.extend(f["cell"] for f in self.failures)
        return labels

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.results_frame().to_csv(out / "results.csv", index=False)
        for name, rows in self.sweeps.items():
            pd.DataFrame(rows).to_csv(out / f"sweep_{name}.csv", index=False)
        manifest = {
            "config": self.config,
            "cells": self.cell_labels(),
            "failures": self.failures,
            "sweeps": sorted(self.sweeps),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        (out / "timings.json").write_text(json.dumps(self.runtimes, indent=2, sort_keys=True))

    @classmethod
    def load(cls, out_dir) -> "EvalReport":
        out = Path(out_dir)
        manifest = json.loads((out / "manifest.json").read_text())
        results = pd.read_csv(out / "results.csv",
                              float_precision="round_trip").to_dict("records")
        sweeps = {
            name: pd.read_csv(out / f"sweep_{name}.csv",
                              float_precision="round_trip").to_dict("records")
            for name in manifest["sweeps"]
        }
        timings_path = out / "timings.json"
        runtimes = json.loads(timings_path.read_text()) if timings_path.exists() else {}
        return cls(config=manifest["config"], results=results, sweeps=sweeps,
                   failures=manifest["failures"], runtimes=runtimes)


# ---------------------------------------------------------------------
# shared cell machinery
# ---------------------------------------------------------------------

_KIND_CODE = {"dcnet": 0, "mlp": 1}
_MODE_CODE = {"naive": 0, "reliable": 1}
# section codes for seed derivation
_TABLE, _ALPHA, _PSWEEP, _QUANTILE = 0, 1, 2, 3


def _train_nuisances(data, base: tuple, config: BenchmarkConfig, kinds) -> dict:
    models = {}
    for kind in kinds:
        models[kind] = train_mu(data, kind, seed=derive_seed(*base, 10 + _KIND_CODE[kind]),
                                fit_config=config.mu_fit)
    models["gps"] = train_gps(data, seed=derive_seed(*base, 12), fit_config=config.gps_fit)
    return models


def _reference_threshold(data, gps_model, quantile: float) -> float:
    x_tr, t_tr, _ = data.subset("train")
    return compute_threshold(density(gps_model, t_tr, x_tr), quantile)


def _policy_config(data, mode: str, config: BenchmarkConfig,
                   quantile: float | None = None) -> PolicyConfig:
    return PolicyConfig(d=data.d, p=data.p, mode=mode,
                        quantile=config.quantile if quantile is None else quantile,
                        restarts=config.restarts, **config.policy_overrides)


def policy_metrics(model: PolicyModel, oracle, x_test, gps_model, eps_ref) -> dict:
    """Selected / mean / std / range regret over restarts plus the share of
    test samples whose selected proposal clears the density threshold."""
    regrets = {}
    for i, r in enumerate(model.restarts):
        if r["diverged"] or r["params"] is None:
            continue
        with ad.no_grad():
            t = policy_forward(r["params"], x_test).value
        regrets[i] = regret(t, oracle, x_test)
    vals = np.array(list(regrets.values()))
    t_sel = model.predict(x_test)
    rate = float(np.mean(density(gps_model, t_sel, x_test) >= eps_ref))
    return {
        "selected_regret": regrets[model.selected],
        "mean_regret": float(vals.mean()),
        "std_regret": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
        "range_regret": float(vals.max() - vals.min()),
        "constraint_rate": rate,
    }


def _observed_row(data, oracle, gps_model, eps_ref, tags: dict) -> dict:
    x_te, t_te, _ = data.subset("test")
    r = regret(t_te, oracle, x_te)
    rate = float(np.mean(density(gps_model, t_te, x_te) >= eps_ref))
    return {"method": "observed", "mode": "logged", **tags,
            "selected_regret": r, "mean_regret": r, "std_regret": 0.0,
            "constraint_rate": rate}


def _train_cell(data, models, kind: str, mode: str, config: BenchmarkConfig,
                seed_parts: tuple, quantile: float | None = None) -> PolicyModel:
    gps_eval = GpsDensityEvaluator(models["gps"]) if mode == "reliable" else None
    pc = _policy_config(data, mode, config, quantile=quantile)
    seed = derive_seed(*seed_parts, 20 + _KIND_CODE[kind], _MODE_CODE[mode],
                       _milli(pc.quantile))
    return train_policy(data, dose_evaluator(models[kind]), gps_eval, pc, seed)


# ---------------------------------------------------------------------
# benchmark sections
# ---------------------------------------------------------------------


def run_table(config: BenchmarkConfig) -> tuple[list[dict], list[dict]]:
    """Method comparison: {dcnet, mlp} x {naive, reliable} per seed and width."""
    rows: list[dict] = []
    failures: list[dict] = []
    for seed in config.seeds:
        for d in config.d_values:
            base = (seed, _TABLE, d)
            tags = {"alpha": config.alpha, "p": config.p, "d": d, "seed": seed}
            cell = f"table[seed={seed},d={d}]"
            try:
                data, oracle = generate(
                    SimConfig(n=config.n, d=d, p=config.p, alpha=config.alpha,
                              kappa=config.kappa), derive_seed(*base))
                models = _train_nuisances(data, base, config, kinds=("dcnet", "mlp"))
                eps_ref = _reference_threshold(data, models["gps"], config.quantile)
            except DoseoptError as err:
                failures.append({"cell": cell, "error": repr(err)})
                continue
            x_te = data.subset("test")[0]
            rows.append(_observed_row(data, oracle, models["gps"], eps_ref, tags))
            for kind in ("dcnet", "mlp"):
                for mode in ("naive", "reliable"):
                    try:
                        model = _train_cell(data, models, kind, mode, config, base)
                        metrics = policy_metrics(model, oracle, x_te,
                                                  models["gps"], eps_ref)
                        metrics.pop("range_regret")
                        rows.append({"method": kind, "mode": mode, **tags, **metrics})
                    except DoseoptError as err:
                        failures.append({"cell": f"{cell}:{kind}:{mode}",
                                         "error": repr(err)})
    return rows, failures


def run_alpha_sweep(config: BenchmarkConfig) -> tuple[list[dict], list[dict]]:
    """Dosage-bias robustness: both modes at every alpha in the grid."""
    rows: list[dict] = []
    failures: list[dict] = []
    for alpha in config.alphas:
        base = (config.sweep_seed, _ALPHA, _milli(alpha))
        cell = f"alpha[{alpha}]"
        try:
            data, oracle = generate(
                SimConfig(n=config.n, d=config.sweep_d, p=config.p, alpha=alpha,
                          kappa=config.kappa), derive_seed(*base))
            models = _train_nuisances(data, base, config, kinds=("dcnet",))
            eps_ref = _reference_threshold(data, models["gps"], config.quantile)
        except DoseoptError as err:
            failures.append({"cell": cell, "error": repr(err)})
            continue
        x_te = data.subset("test")[0]
        for mode in ("naive", "reliable"):
            try:
                model = _train_cell(data, models, "dcnet", mode, config, base)
                metrics = policy_metrics(model, oracle, x_te, models["gps"], eps_ref)
                rows.append({"alpha": alpha, "mode": mode, "d": config.sweep_d,
                             "p": config.p, "seed": config.sweep_seed, **metrics})
            except DoseoptError as err:
                failures.append({"cell": f"{cell}:{mode}", "error": repr(err)})
    return rows, failures


def run_p_sweep(config: BenchmarkConfig) -> tuple[list[dict], list[dict]]:
    """Dosage-count robustness: both modes at every p in the grid."""
    rows: list[dict] = []
    failures: list[dict] = []
    for p in config.ps:
        base = (config.sweep_seed, _PSWEEP, int(p))
        cell = f"p[{p}]"
        try:
            data, oracle = generate(
                SimConfig(n=config.n, d=config.sweep_d, p=int(p), alpha=config.alpha,
                          kappa=config.kappa), derive_seed(*base))
            models = _train_nuisances(data, base, config, kinds=("dcnet",))
            eps_ref = _reference_threshold(data, models["gps"], config.quantile)
        except DoseoptError as err:
            failures.append({"cell": cell, "error": repr(err)})
            continue
        x_te = data.subset("test")[0]
        for mode in ("naive", "reliable"):
            try:
                model = _train_cell(data, models, "dcnet", mode, config, base)
                metrics = policy_metrics(model, oracle, x_te, models["gps"], eps_ref)
                rows.append({"p": int(p), "mode": mode, "d": config.sweep_d,
                             "alpha": config.alpha, "seed": config.sweep_seed,
                             **metrics})
            except DoseoptError as err:
                failures.append({"cell": f"{cell}:{mode}", "error": repr(err)})
    return rows, failures


def run_quantile_sweep(config: BenchmarkConfig) -> tuple[list[dict], list[dict]]:
    """Threshold sensitivity: reliable policies across eps-bar quantiles on
    one shared dataset and nuisance fit."""
    rows: list[dict] = []
    failures: list[dict] = []
    base = (config.sweep_seed, _QUANTILE, 0)
    try:
        data, oracle = generate(
            SimConfig(n=config.n, d=config.sweep_d, p=config.p, alpha=config.alpha,
                      kappa=config.kappa), derive_seed(*base))
        models = _train_nuisances(data, base, config, kinds=("dcnet",))
    except DoseoptError as err:
        return rows, [{"cell": "quantile[setup]", "error": repr(err)}]
    x_te = data.subset("test")[0]
    for q in config.quantiles:
        try:
            eps_ref = _reference_threshold(data, models["gps"], q)
            model = _train_cell(data, models, "dcnet", "reliable", config,
                                base, quantile=q)
            metrics = policy_metrics(model, oracle, x_te, models["gps"], eps_ref)
            rows.append({"quantile": q, "eps_bar": model.eps_bar, "mode": "reliable",
                         "d": config.sweep_d, "p": config.p, "alpha": config.alpha,
                         "seed": config.sweep_seed, **metrics})
        except DoseoptError as err:
            failures.append({"cell": f"quantile[{q}]", "error": repr(err)})
    return rows, failures


_SECTIONS = {
    "alpha": run_alpha_sweep,
    "p": run_p_sweep,
    "quantile": run_quantile_sweep,
}


def run_benchmark(config: BenchmarkConfig,
                  sections=("table", "alpha", "p", "quantile")) -> EvalReport:
    """Run the requested benchmark sections and assemble one report."""
    unknown = set(sections) - (set(_SECTIONS) | {"table"})
    if unknown:
        raise ConfigurationError(f"unknown benchmark sections: {sorted(unknown)}")
    report = EvalReport(config={"benchmark": config.to_jsonable(),
                                "sections": list(sections)}, results=[])
    for section in sections:
        start = time.perf_counter()
        if section == "table":
            rows, failed = run_table(config)
            report.results = rows
        else:
            rows, failed = _SECTIONS[section](config)
            report.sweeps[section] = rows
        report.failures.extend(failed)
        report.runtimes[section] = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------
# dose-response surfaces
# ---------------------------------------------------------------------


def surface_grid(oracle, mu_models: dict, gps_model, x_row: np.ndarray,
                 resolution: int = 101) -> pd.DataFrame:
    """Oracle / estimated outcome surfaces and the estimated density over a
    (t1, t2) grid for a single covariate vector, plus a marker row at the
    oracle optimum.  Only defined for two simultaneous dosages."""
    if oracle.p != 2:
        raise ConfigurationError(f"surface grids need p=2, oracle has p={oracle.p}")
    if resolution < 2:
        raise ConfigurationError("resolution must be at least 2")
    x_row = np.asarray(x_row, dtype=np.float64).ravel()
    axis = np.linspace(0.0, 1.0, resolution)
    g1, g2 = np.meshgrid(axis, axis, indexing="ij")
    t_opt = oracle.optimal_policy(x_row[None])[0]
    t = np.column_stack([g1.ravel(), g2.ravel()])
    t = np.vstack([t, t_opt[None]])
    x = np.broadcast_to(x_row, (t.shape[0], x_row.size))
    frame = pd.DataFrame({
        "t1": t[:, 0],
        "t2": t[:, 1],
        "gps_hat": density(gps_model, t, x),
        "mu_oracle": oracle.mu(t, x),
        "mu_dcnet": predict_mu(mu_models["dcnet"], t, x),
        "mu_mlp": predict_mu(mu_models["mlp"], t, x),
        "is_optimum": np.arange(t.shape[0]) == t.shape[0] - 1,
    })
    return frame
