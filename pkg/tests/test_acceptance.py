"""End-to-end acceptance checks, one test per shipped guarantee.

Each test prints a single `<label>: PASS (<seconds>)` line on success (visible
with -rA), so the suite doubles as a release checklist.  The benchmark
ordering and robustness checks train the full pipeline at realistic scale
and dominate the runtime; everything else is desk-sized.
"""

import json
import math
import time
from contextlib import contextmanager

import numpy as np
import pandas as pd
from scipy import stats

import test_autodiff as op_checks
from conftest import finite_diff_grad, rel_err

from doseopt import autodiff as ad
from doseopt.cli import main as cli_main
from doseopt.dataset import Dataset
from doseopt.dcnet import mu_grad_t, predict_mu, train_mu
from doseopt.evaluation import (
    BenchmarkConfig,
    run_alpha_sweep,
    run_quantile_sweep,
    run_table,
)
from doseopt.gps_flow import (
    FlowConfig,
    GpsModel,
    density,
    init_flow_params,
    log_prob,
    log_prob_node,
    train_gps,
)
from doseopt.policy import FunctionEvaluator, PolicyConfig, train_policy
from doseopt.splines import SplineSpec, eval_basis
from doseopt.synthgen import SimConfig, beta_params, generate
from doseopt.training import FitConfig


@contextmanager
def _timed(label: str):
    start = time.perf_counter()
    yield
    print(f"{label}: PASS ({time.perf_counter() - start:.1f}s)")


QUICK_FIT = FitConfig(batch_size=64, max_epochs=8, patience=4, lr_grid=(5e-3,))


# ---------------------------------------------------------------------
# generator fidelity
# ---------------------------------------------------------------------


def test_generator_fidelity():
    with _timed("generator fidelity"):
        # no assignment bias -> uniform dosage marginals
        flat, _ = generate(SimConfig(n=5000, d=10, p=2, alpha=0.0), seed=101)
        for j in range(2):
            p_value = stats.kstest(flat.t[:, j], "uniform").pvalue
            assert p_value > 0.01, f"dosage dim {j}: KS p-value {p_value:.4f}"

        data, oracle = generate(SimConfig(n=1000, d=6, p=2, alpha=2.0), seed=7)
        # the assignment density's per-sample mode is exactly the optimum
        tt = oracle.tilde_t(data.x)
        a, q = beta_params(2.0, tt)
        mode = (a - 1.0) / (a + q - 2.0)
        assert np.max(np.abs(mode - tt)) <= 1e-12

        # closed-form optimum matches a dense grid argmax of the surface
        rng = np.random.default_rng(3)
        x = rng.random((50, 6))
        axis = np.linspace(0.0, 1.0, 101)
        g1, g2 = np.meshgrid(axis, axis, indexing="ij")
        grid = np.column_stack([g1.ravel(), g2.ravel()])
        for i in range(50):
            xi = np.broadcast_to(x[i], (grid.shape[0], 6))
            best = grid[np.argmax(oracle.mu(grid, xi))]
            t_opt = oracle.tilde_t(x[i:i + 1])[0]
            assert np.all(np.abs(best - t_opt) <= 0.01 + 1e-12), f"sample {i}"


# ---------------------------------------------------------------------
# gradient numerics
# ---------------------------------------------------------------------


def test_gradient_numerics(rng):
    with _timed("gradient numerics"):
        # every registered tape primitive against central differences
        missing = set(ad.PRIMITIVE_OPS) - set(op_checks.OP_CASES)
        assert not missing, f"primitives without a check: {sorted(missing)}"
        for name in sorted(op_checks.OP_CASES):
            inputs, builder = op_checks.OP_CASES[name](rng)
            nodes = [ad.param(v) for v in inputs]
            out = builder(nodes)
            w = rng.normal(size=out.value.shape)
            ad.backward(ad.sum_all(ad.mul(out, ad.Node(w))))
            for i in range(len(inputs)):
                def f(xv, i=i):
                    vals = [np.asarray(u, dtype=np.float64) for u in inputs]
                    vals[i] = xv
                    with ad.no_grad():
                        r = builder([ad.Node(v) for v in vals])
                    return float(np.sum(r.value * w))
                fd = finite_diff_grad(f, np.asarray(inputs[i], dtype=np.float64).copy())
                assert rel_err(nodes[i].grad, fd) <= 1e-5, f"{name} input {i}"

        # dosage gradients through both outcome models and the flow
        data, _ = generate(SimConfig(n=200, d=4, p=2, alpha=1.0), seed=5)
        t0 = np.array([[0.31, 0.57], [0.62, 0.44], [0.18, 0.83]])
        x0 = data.x[:3]
        for kind in ("dcnet", "mlp"):
            model = train_mu(data, kind, seed=11, fit_config=QUICK_FIT,
                             repr_hidden=(8, 8), head_hidden=(8,),
                             mlp_hidden=(16, 16))
            fd = finite_diff_grad(
                lambda tv: float(np.sum(predict_mu(model, tv, x0))), t0.copy())
            assert rel_err(mu_grad_t(model, t0, x0), fd) <= 1e-5, kind

        flow = train_gps(data, seed=12, fit_config=QUICK_FIT, hidden=(8, 8))
        t_node = ad.param(t0)
        lp = log_prob_node({k: ad.Node(v) for k, v in flow.params.items()},
                           t_node, ad.Node(x0), flow.config)
        ad.backward(ad.sum_all(lp), [t_node])
        fd = finite_diff_grad(
            lambda tv: float(np.sum(log_prob(flow, tv, x0))), t0.copy())
        assert rel_err(t_node.grad, fd) <= 1e-5


# ---------------------------------------------------------------------
# spline and flow structure
# ---------------------------------------------------------------------


def test_spline_and_flow_structure():
    with _timed("spline/flow structure"):
        spec = SplineSpec()
        basis = eval_basis(spec, np.linspace(0.0, 1.0, 2001))
        assert np.max(np.abs(basis.sum(axis=1) - 1.0)) <= 1e-12
        assert basis[0, 0] == 1.0 and not basis[0, 1:].any()
        assert basis[-1, -1] == 1.0 and not basis[-1, :-1].any()

        # freshly initialized flows are exactly the identity transform
        rng = np.random.default_rng(0)
        for p in (1, 2):
            cfg = FlowConfig(d=4, p=p)
            flow = GpsModel(cfg, init_flow_params(cfg, rng), {})
            t = rng.random((64, p))
            x = rng.random((64, 4))
            # zero up to round-off in the rational-quadratic derivative
            assert np.max(np.abs(log_prob(flow, t, x))) <= 1e-12

        # trained flows stay normalized
        fit = FitConfig(batch_size=256, max_epochs=150, patience=25,
                        lr_grid=(1e-3, 5e-3))
        data1, _ = generate(SimConfig(n=1500, d=5, p=1, alpha=2.0), seed=21)
        flow1 = train_gps(data1, seed=22, fit_config=fit)
        centers = ((np.arange(2048) + 0.5) / 2048)[:, None]
        for i in range(3):
            x_row = np.broadcast_to(data1.x[i], (2048, 5))
            integral = float(np.mean(density(flow1, centers, x_row)))
            assert abs(integral - 1.0) <= 0.02, f"p=1 row {i}: {integral:.4f}"

        data2, _ = generate(SimConfig(n=1500, d=5, p=2, alpha=2.0), seed=23)
        flow2 = train_gps(data2, seed=24, fit_config=fit)
        c = (np.arange(256) + 0.5) / 256
        g1, g2 = np.meshgrid(c, c, indexing="ij")
        grid = np.column_stack([g1.ravel(), g2.ravel()])
        for i in range(2):
            x_row = np.broadcast_to(data2.x[i], (grid.shape[0], 5))
            integral = float(np.mean(density(flow2, grid, x_row)))
            assert abs(integral - 1.0) <= 0.05, f"p=2 row {i}: {integral:.4f}"


# ---------------------------------------------------------------------
# dose-response quality
# ---------------------------------------------------------------------


def test_dose_response_quality():
    with _timed("dose-response quality"):
        data, _ = generate(SimConfig(n=5000, d=10, p=2, alpha=0.0), seed=31)
        model = train_mu(data, "dcnet", seed=32)
        x_te, t_te, y_te = data.subset("test")
        mse = float(np.mean((predict_mu(model, t_te, x_te) - y_te) ** 2))
        # 1.5x the irreducible noise variance of 0.25
        assert mse <= 0.375, f"factual test MSE {mse:.4f}"


# ---------------------------------------------------------------------
# constrained optimum on the hand-solvable toy
# ---------------------------------------------------------------------

# outcome peaks at t=0.8 but the density bump exp(-((t-0.3)/0.1)^2/2)
# clears exp(-2) only on [0.1, 0.5]: constrained optimum 0.5, free 0.8
TOY_EPS = math.exp(-2.0)


def _toy_mu():
    def fn(t):
        diff = ad.sub(ad.reshape(t, (t.value.shape[0],)), ad.as_node(0.8))
        return ad.neg(ad.mul(diff, diff))
    return FunctionEvaluator(fn)


def _toy_density():
    def fn(t):
        z = ad.mul(ad.sub(ad.reshape(t, (t.value.shape[0],)), ad.as_node(0.3)),
                   ad.as_node(10.0))
        return ad.exp(ad.mul(ad.mul(z, z), ad.as_node(-0.5)))
    return FunctionEvaluator(fn)


def _toy_dataset(n: int, seed: int) -> Dataset:
    gen = np.random.default_rng(seed)
    n_tr, n_va = int(0.64 * n), int(0.16 * n)
    idx = np.arange(n)
    return Dataset(x=gen.random((n, 2)), t=gen.uniform(0.15, 0.6, size=(n, 1)),
                   y=gen.normal(size=n), train_idx=idx[:n_tr],
                   val_idx=idx[n_tr:n_tr + n_va], test_idx=idx[n_tr + n_va:])


def test_constrained_optimum_on_the_toy():
    with _timed("constrained-optimum toy"):
        for seed in range(5):
            data = _toy_dataset(n=1600, seed=100 + seed)
            reliable = train_policy(
                data, _toy_mu(), _toy_density(),
                PolicyConfig(d=2, p=1, mode="reliable", eps_bar=TOY_EPS),
                seed=seed)
            naive = train_policy(
                data, _toy_mu(), None,
                PolicyConfig(d=2, p=1, mode="naive"), seed=seed)
            x_te = data.subset("test")[0]
            t_rel = float(np.mean(reliable.predict(x_te)))
            t_nai = float(np.mean(naive.predict(x_te)))
            assert abs(t_rel - 0.5) <= 0.05, f"seed {seed}: reliable at {t_rel:.3f}"
            assert abs(t_nai - 0.8) <= 0.05, f"seed {seed}: naive at {t_nai:.3f}"


# ---------------------------------------------------------------------
# benchmark orderings
# ---------------------------------------------------------------------


def test_benchmark_method_ordering():
    with _timed("benchmark ordering"):
        rows, failures = run_table(BenchmarkConfig())
        assert not failures, failures
        frame = pd.DataFrame(rows)

        # density-aware selection wins where confounding bites hardest
        wide = frame[(frame["method"] == "dcnet") & (frame["d"] == 100)]
        sel = wide.groupby("mode")["selected_regret"].mean()
        assert sel["reliable"] < sel["naive"], dict(sel)

        # restart spread shrinks in (almost) every cell
        cells = frame[frame["method"] != "observed"].pivot_table(
            index=["seed", "d", "method"], columns="mode", values="std_regret")
        holds = cells["reliable"] <= cells["naive"] + 1e-12
        assert holds.sum() >= len(holds) - 1, cells[~holds]

        # selected reliable policies respect the density floor
        reliable = frame[frame["mode"] == "reliable"]
        assert (reliable["constraint_rate"] >= 0.95).all(), \
            reliable[reliable["constraint_rate"] < 0.95]


def test_robustness_sweeps():
    with _timed("robustness sweeps"):
        config = BenchmarkConfig()
        rows, failures = run_alpha_sweep(config)
        assert not failures, failures
        fa = pd.DataFrame(rows).set_index(["alpha", "mode"])
        for alpha in (1.0, 2.0, 4.0):
            r_rel = fa.loc[(alpha, "reliable"), "range_regret"]
            r_nai = fa.loc[(alpha, "naive"), "range_regret"]
            assert r_rel <= r_nai + 1e-12, f"alpha={alpha}: {r_rel:.4f} > {r_nai:.4f}"

        rows, failures = run_quantile_sweep(config)
        assert not failures, failures
        fq = pd.DataFrame(rows).set_index("quantile")
        assert set(fq.index) == set(config.quantiles)
        base = fq.loc[0.05, "range_regret"]
        for q in [q for q in config.quantiles if q < 0.05]:
            assert fq.loc[q, "range_regret"] <= 2.0 * base + 1e-12, \
                f"quantile {q}: range {fq.loc[q, 'range_regret']:.4f} vs baseline {base:.4f}"


# ---------------------------------------------------------------------
# stage-level reproducibility
# ---------------------------------------------------------------------


def test_every_stage_reruns_bit_identically(tmp_path):
    with _timed("stage reproducibility"):
        compared = ["dataset.csv", "dataset_meta.json", "mu_dcnet.json",
                    "mu_dcnet_log.csv", "gps.json", "gps_log.csv",
                    "policy_reliable.json", "policy_reliable_log.csv",
                    "evaluation.csv", "results.csv", "manifest.json",
                    "sweep_quantile.csv"]
        outs = []
        for tag in ("first", "second"):
            out = tmp_path / tag
            cfg_path = tmp_path / f"{tag}.json"
            cfg_path.write_text(json.dumps({
                "seed": 9, "out": str(out),
                "sim": {"n": 220, "d": 3, "p": 2, "alpha": 2.0},
                "dcnet": {"repr_hidden": [8, 8], "head_hidden": [8],
                          "batch_size": 64, "max_epochs": 12, "patience": 5,
                          "lr_grid": [5e-3]},
                "gps": {"hidden": [8, 8], "batch_size": 64, "max_epochs": 12,
                        "patience": 5, "lr_grid": [5e-3]},
                "policy": {"hidden": [8], "restarts": 2, "search_draws": 2,
                           "batch_size": 64, "max_epochs": 10, "patience": 5,
                           "lr_grid": [5e-3]},
                "eval": {"n": 240, "p": 1, "d_values": [3], "seeds": [0],
                         "restarts": 2, "quantiles": [0.05, 0.2], "sweep_d": 3,
                         "sweep_seed": 0, "sections": ["table", "quantile"],
                         "mu_fit": {"batch_size": 128, "max_epochs": 25,
                                    "patience": 8, "lr_grid": [5e-3]},
                         "gps_fit": {"batch_size": 128, "max_epochs": 25,
                                     "patience": 8, "lr_grid": [5e-3]},
                         "policy_overrides": {"search_draws": 2, "hidden": [16],
                                              "batch_size": 128,
                                              "max_epochs": 20, "patience": 8,
                                              "lr_grid": [5e-3]}},
            }))
            for argv in (["generate"], ["train", "--stage", "mu"],
                         ["train", "--stage", "gps"],
                         ["train", "--stage", "policy"], ["evaluate"],
                         ["sweep"]):
                assert cli_main(argv + ["--config", str(cfg_path)]) == 0, argv
            outs.append(out)
        for name in compared:
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
