"""Command-line pipeline driver.

Five subcommands tie the package together around a single JSON config and
an artifact directory:

    doseopt generate --config run.json            dataset.csv + dataset_meta.json
    doseopt train    --config run.json --stage mu|gps|policy
    doseopt evaluate --config run.json            evaluation.csv
    doseopt sweep    --config run.json            results.csv / sweep_*.csv / manifest.json
    doseopt surface  --config run.json            surface.csv

Every run rewrites ``resolved_config.json`` next to its outputs so a
directory is always reproducible from one file.  Unknown config keys are
rejected by name.  Exit codes: 0 success, 2 bad configuration, 3 missing
upstream artifact, 4 numerical failure.  The only environment variable
consulted is DOSEOPT_OUT (output-directory override, weaker than --out).
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from .dataset import Dataset
from .dcnet import MU_FIT, DoseResponseModel, dose_evaluator, predict_mu, train_mu
from .errors import (
    ArtifactMissingError,
    ConfigurationError,
    DataError,
    DimensionError,
    DomainError,
    NumericalError,
)
from .evaluation import (
    BenchmarkConfig,
    derive_seed,
    policy_metrics,
    regret,
    run_benchmark,
    surface_grid,
)
from .gps_flow import GPS_FIT, GpsDensityEvaluator, GpsModel, density, train_gps
from .policy import PolicyConfig, PolicyModel, compute_threshold, train_policy
from .synthgen import SimConfig, dataset_metadata, generate, oracle_from_metadata
from .training import FitConfig

log = logging.getLogger("doseopt")

_FIT_KEYS = ("batch_size", "max_epochs", "patience", "lr_grid")

# full schema with defaults; None means "fall back to the owning module"
_DEFAULTS = {
    "seed": 0,
    "out": None,
    "verbose": False,
    "sim": {
        "n": 5000, "d": 10, "p": 2, "alpha": 2.0, "kappa": 1.0,
        "noise_sd": 0.5, "covariates": "uniform",
    },
    "dcnet": {
        "kind": "dcnet", "repr_hidden": [50, 50], "head_hidden": [50, 50],
        "mlp_hidden": [50, 50, 50, 50],
        "batch_size": None, "max_epochs": None, "patience": None, "lr_grid": None,
    },
    "gps": {
        "bins": 5, "hidden": [50, 50], "noise_sd": 0.1,
        "batch_size": None, "max_epochs": None, "patience": None, "lr_grid": None,
    },
    "policy": {
        "mode": "reliable", "outcome": "dcnet", "hidden": [50, 50],
        "eps_bar": None, "quantile": 0.05, "restarts": 5, "search_draws": 10,
        "lr_grid": None, "lambda_lr": 0.01, "lambda_init_range": [1.0, 5.0],
        "batch_size": 512, "max_epochs": 400, "patience": 20,
    },
    "eval": {
        "n": 5000, "p": 2, "alpha": 2.0, "kappa": 1.0,
        "d_values": [10, 100], "seeds": [1, 2, 3], "quantile": 0.05,
        "restarts": 5, "alphas": [0.0, 1.0, 2.0, 4.0], "ps": [2, 3],
        "quantiles": [0.01, 0.05, 0.1, 0.2], "sweep_d": 10, "sweep_seed": 1,
        "mu_fit": None, "gps_fit": None, "policy_overrides": {},
        "sections": ["table", "alpha", "p", "quantile"],
        "surface_row": 0, "surface_resolution": 101,
    },
}

_POLICY_OVERRIDE_KEYS = (
    "hidden", "eps_bar", "search_draws", "lr_grid", "lambda_lr",
    "lambda_init_range", "batch_size", "max_epochs", "patience",
)


# ---------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------


def _merge(defaults: dict, user: dict, prefix: str = "") -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in user.items():
        dotted = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigurationError(f"unknown config key: {dotted}")
        if isinstance(defaults[key], dict) and key != "policy_overrides":
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {dotted} must be a table")
            merged[key] = _merge(defaults[key], value, prefix=f"{dotted}.")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(path) -> dict:
    """Read a JSON config file and resolve it against the full schema."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"config file {path} is not valid JSON: {err}")
    if not isinstance(doc, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    cfg = _merge(_DEFAULTS, doc)
    for key in cfg["eval"]["policy_overrides"]:
        if key not in _POLICY_OVERRIDE_KEYS:
            raise ConfigurationError(f"unknown config key: eval.policy_overrides.{key}")
    for fit_key in ("mu_fit", "gps_fit"):
        sub = cfg["eval"][fit_key]
        if sub is not None:
            for key in sub:
                if key not in _FIT_KEYS:
                    raise ConfigurationError(f"unknown config key: eval.{fit_key}.{key}")
    return cfg


def _build(name: str, build):
    """Construct a config dataclass, turning loose type errors into exit-2s."""
    try:
        return build()
    except (TypeError, ValueError) as err:
        raise ConfigurationError(f"bad value in config section {name!r}: {err}")


def _fit_from(section: dict, base: FitConfig) -> FitConfig | None:
    """Per-stage fit settings: None keys keep the module default."""
    overrides = {k: section[k] for k in _FIT_KEYS if section.get(k) is not None}
    if not overrides:
        return None
    if "lr_grid" in overrides:
        overrides["lr_grid"] = tuple(overrides["lr_grid"])
    return replace(base, **overrides)


def _tuples(doc: dict, *keys) -> dict:
    out = dict(doc)
    for key in keys:
        if out.get(key) is not None:
            out[key] = tuple(out[key])
    return out


# ---------------------------------------------------------------------
# artifact plumbing
# ---------------------------------------------------------------------


def _require(out: Path, name: str, stage: str) -> Path:
    path = out / name
    if not path.exists():
        raise ArtifactMissingError(
            f"missing {name} in {out}; run `doseopt {stage}` first")
    return path


def _load_dataset(out: Path) -> Dataset:
    return Dataset.load_csv(_require(out, "dataset.csv", "generate"))


def _load_oracle(out: Path):
    """Simulation ground truth, or None when the dataset came from elsewhere."""
    path = out / "dataset_meta.json"
    if not path.exists():
        return None
    meta = json.loads(path.read_text())
    if "oracle" not in meta:
        return None
    return oracle_from_metadata(meta)


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _candidate_log(metadata: dict, path: Path) -> None:
    frame = pd.DataFrame(metadata["candidates"],
                         columns=["lr", "best_val", "epochs_run",
                                  "diverged", "skipped_steps"])
    frame.to_csv(path, index=False)


# ---------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------


def cmd_generate(cfg: dict, out: Path) -> int:
    sim = _build("sim", lambda: SimConfig(**cfg["sim"]))
    data, oracle = generate(sim, cfg["seed"])
    data.save_csv(out / "dataset.csv")
    _write_json(out / "dataset_meta.json", dataset_metadata(sim, cfg["seed"], oracle))
    log.info("wrote %d rows to %s", data.n, out / "dataset.csv")
    return 0


def cmd_train(cfg: dict, out: Path, stage: str) -> int:
    data = _load_dataset(out)
    seed = cfg["seed"]
    if stage == "mu":
        sec = cfg["dcnet"]
        kind = sec["kind"]
        if kind not in ("dcnet", "mlp"):
            raise ConfigurationError(f"dcnet.kind must be 'dcnet' or 'mlp', got {kind!r}")
        model = train_mu(
            data, kind, derive_seed(seed, 10 + ("dcnet", "mlp").index(kind)),
            fit_config=_fit_from(sec, MU_FIT),
            repr_hidden=tuple(sec["repr_hidden"]), head_hidden=tuple(sec["head_hidden"]),
            mlp_hidden=tuple(sec["mlp_hidden"]))
        model.save(out / f"mu_{kind}.json")
        _candidate_log(model.metadata, out / f"mu_{kind}_log.csv")
        log.info("mu stage (%s): validation MSE %.4f", kind, model.metadata["best_val"])
    elif stage == "gps":
        sec = cfg["gps"]
        model = train_gps(data, derive_seed(seed, 12), fit_config=_fit_from(sec, GPS_FIT),
                          bins=sec["bins"], hidden=tuple(sec["hidden"]),
                          noise_sd=sec["noise_sd"])
        model.save(out / "gps.json")
        _candidate_log(model.metadata, out / "gps_log.csv")
        log.info("gps stage: validation loss %.4f", model.metadata["best_val"])
    else:
        sec = cfg["policy"]
        mu_model = DoseResponseModel.load(
            _require(out, f"mu_{sec['outcome']}.json", "train --stage mu"))
        gps_eval = None
        if sec["mode"] == "reliable":
            gps_eval = GpsDensityEvaluator(
                GpsModel.load(_require(out, "gps.json", "train --stage gps")))
        # None-valued keys fall back to PolicyConfig defaults (lr_grid, eps_bar)
        loose = {k: v for k, v in sec.items() if k != "outcome" and v is not None}
        pcfg = _build("policy", lambda: PolicyConfig(
            d=data.d, p=data.p,
            **_tuples(loose, "hidden", "lr_grid", "lambda_init_range")))
        model = train_policy(
            data, dose_evaluator(mu_model), gps_eval, pcfg,
            derive_seed(seed, 20 + ("naive", "reliable").index(sec["mode"]),
                        int(round(1000 * pcfg.quantile))))
        model.save(out / f"policy_{sec['mode']}.json")
        pd.DataFrame(model.logs).to_csv(out / f"policy_{sec['mode']}_log.csv", index=False)
        log.info("policy stage (%s): eps_bar=%s, score %.4f", sec["mode"],
                 model.eps_bar, model.restarts[model.selected]["val_score"])
    return 0


def cmd_evaluate(cfg: dict, out: Path) -> int:
    data = _load_dataset(out)
    oracle = _load_oracle(out)
    mu_model = DoseResponseModel.load(
        _require(out, f"mu_{cfg['policy']['outcome']}.json", "train --stage mu"))
    gps_model = GpsModel.load(_require(out, "gps.json", "train --stage gps"))
    checkpoints = sorted(out.glob("policy_*.json"))
    if not checkpoints:
        raise ArtifactMissingError(
            f"no policy checkpoints in {out}; run `doseopt train --stage policy` first")

    x_tr, t_tr, _ = data.subset("train")
    x_te, t_te, _ = data.subset("test")
    eps_ref = compute_threshold(density(gps_model, t_tr, x_tr),
                                cfg["policy"]["quantile"])
    if oracle is None:
        log.warning("dataset_meta.json has no simulation oracle; "
                    "reporting factual metrics only")

    def _row(label: str, t_sel: np.ndarray) -> dict:
        return {
            "policy": label,
            "value_hat": float(np.mean(predict_mu(mu_model, t_sel, x_te))),
            "constraint_rate": float(np.mean(density(gps_model, t_sel, x_te) >= eps_ref)),
            "eps_ref": eps_ref,
        }

    rows = [_row("observed", t_te)]
    if oracle is not None:
        r = regret(t_te, oracle, x_te)
        rows[0].update({"selected_regret": r, "mean_regret": r,
                        "std_regret": 0.0, "range_regret": 0.0})
    for path in checkpoints:
        model = PolicyModel.load(path)
        row = _row(model.config.mode, model.predict(x_te))
        if oracle is not None:
            metrics = policy_metrics(model, oracle, x_te, gps_model, eps_ref)
            row.update({k: metrics[k] for k in ("selected_regret", "mean_regret",
                                                "std_regret", "range_regret")})
        rows.append(row)
    columns = ["policy", "value_hat", "constraint_rate", "eps_ref"]
    if oracle is not None:
        columns += ["selected_regret", "mean_regret", "std_regret", "range_regret"]
    pd.DataFrame(rows, columns=columns).to_csv(out / "evaluation.csv", index=False)
    log.info("wrote %s (%d policies)", out / "evaluation.csv", len(rows) - 1)
    return 0


def cmd_sweep(cfg: dict, out: Path) -> int:
    sec = dict(cfg["eval"])
    sections = tuple(sec.pop("sections"))
    sec.pop("surface_row")
    sec.pop("surface_resolution")
    sec["mu_fit"] = None if sec["mu_fit"] is None else replace(
        MU_FIT, **_tuples(sec["mu_fit"], "lr_grid"))
    sec["gps_fit"] = None if sec["gps_fit"] is None else replace(
        GPS_FIT, **_tuples(sec["gps_fit"], "lr_grid"))
    sec["policy_overrides"] = _tuples(sec["policy_overrides"],
                                      "hidden", "lr_grid", "lambda_init_range")
    bench = _build("eval", lambda: BenchmarkConfig(
        **_tuples(sec, "d_values", "seeds", "alphas", "ps", "quantiles")))
    report = run_benchmark(bench, sections=sections)
    report.save(out)
    if report.failures:
        log.warning("%d cells failed; see manifest.json", len(report.failures))
    log.info("wrote benchmark report to %s", out)
    return 0


def cmd_surface(cfg: dict, out: Path) -> int:
    data = _load_dataset(out)
    oracle = _load_oracle(out)
    if oracle is None:
        raise ArtifactMissingError(
            f"surface grids need the simulation oracle in {out / 'dataset_meta.json'}; "
            "run `doseopt generate` first")
    mu_models = {
        kind: DoseResponseModel.load(_require(out, f"mu_{kind}.json", "train --stage mu"))
        for kind in ("dcnet", "mlp")
    }
    gps_model = GpsModel.load(_require(out, "gps.json", "train --stage gps"))
    row = cfg["eval"]["surface_row"]
    resolution = cfg["eval"]["surface_resolution"]
    if not isinstance(row, int) or not 0 <= row < data.n:
        raise ConfigurationError(
            f"eval.surface_row must be an integer in [0, {data.n}), got {row!r}")
    if not isinstance(resolution, int):
        raise ConfigurationError(
            f"eval.surface_resolution must be an integer, got {resolution!r}")
    frame = surface_grid(oracle, mu_models, gps_model, data.x[row],
                         resolution=resolution)
    frame.to_csv(out / "surface.csv", index=False)
    log.info("wrote %s (%d grid points)", out / "surface.csv", len(frame) - 1)
    return 0


# ---------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------


def _parse_args(argv):
    parser = argparse.ArgumentParser(
        prog="doseopt",
        description="Reliable dosage-combination policy learning pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's global seed")
        p.add_argument("--out", default=None,
                       help="output directory (beats $DOSEOPT_OUT and the config)")
        return p

    add("generate", "simulate a dataset and write it with its ground-truth metadata")
    train = add("train", "fit one pipeline stage on the generated dataset")
    train.add_argument("--stage", required=True, choices=("mu", "gps", "policy"))
    train.add_argument("--quantile", type=float, default=None,
                       help="override policy.quantile (density threshold level)")
    add("evaluate", "score trained policies on the held-out test split")
    sweep = add("sweep", "run the self-contained benchmark table and sweeps")
    sweep.add_argument("--quantile", type=float, default=None,
                       help="override eval.quantile for the benchmark cells")
    add("surface", "export oracle/estimated response surfaces on a dosage grid")
    return parser.parse_args(argv)


def _resolve(args) -> tuple[dict, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    quantile = getattr(args, "quantile", None)
    if quantile is not None:
        if args.command == "train":
            cfg["policy"]["quantile"] = quantile
        else:
            cfg["eval"]["quantile"] = quantile
    out = args.out or os.environ.get("DOSEOPT_OUT") or cfg["out"] or "runs"
    cfg["out"] = str(out)
    return cfg, Path(out)


def main(argv=None) -> int:
    try:
        args = _parse_args(argv)
    except SystemExit as err:
        if err.code in (0, None):
            return 0
        return err.code if isinstance(err.code, int) else 2
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        cfg, out = _resolve(args)
        log.setLevel(logging.INFO if cfg["verbose"] else logging.WARNING)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "resolved_config.json", cfg)
        if args.command == "generate":
            return cmd_generate(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, args.stage)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out)
        if args.command == "sweep":
            return cmd_sweep(cfg, out)
        return cmd_surface(cfg, out)
    except (ConfigurationError, DataError, DimensionError, DomainError) as err:
        log.error(str(err))
        return 2
    except ArtifactMissingError as err:
        log.error(str(err))
        return 3
    except NumericalError as err:
        log.error(str(err))
        return 4


if __name__ == "__main__":
    sys.exit(main())
