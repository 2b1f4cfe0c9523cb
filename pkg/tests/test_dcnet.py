"""Varying-coefficient network: layout, equivalence to the per-sample
definition, smoothness, gradients, and training behaviour."""

import numpy as np
import pytest

from doseopt import autodiff as ad
from doseopt.dcnet import (
    DcnetConfig,
    DcnetDoseEvaluator,
    DoseResponseModel,
    MlpConfig,
    MlpDoseEvaluator,
    d_eta,
    dcnet_forward,
    dose_evaluator,
    head_params,
    head_slots,
    init_dcnet_params,
    init_mlp_params,
    mlp_forward,
    mu_grad_t,
    predict_mu,
    train_mu,
    unpack_eta,
)
from doseopt.errors import DimensionError
from doseopt.splines import tensor_product
from doseopt.synthgen import SimConfig, generate
from doseopt.training import FitConfig

from conftest import finite_diff_grad, rel_err

CFG2 = DcnetConfig(d=4, p=2)


def _random_model(config, rng, kind="dcnet") -> DoseResponseModel:
    if kind == "dcnet":
        params = init_dcnet_params(config, rng)
    else:
        params = init_mlp_params(config, rng)
    return DoseResponseModel(kind=kind, config=config, params=params, metadata={})


def _per_sample_oracle(config, params, t, x):
    """Direct definition: unpack eta(t_i) into head weights, evaluate row by row."""
    B = params["head.B"]
    out = np.empty(len(t))
    for i in range(len(t)):
        z = x[i]
        for li in range(len(config.repr_hidden)):
            z = np.maximum(z @ params[f"repr.w{li}"] + params[f"repr.b{li}"], 0.0)
        psi = tensor_product(config.tensor_basis, t[i])
        layers = unpack_eta(config, B @ psi)
        for j, (w, b) in enumerate(layers):
            z = z @ w + b
            if j < len(layers) - 1:
                z = np.maximum(z, 0.0)
        out[i] = z[0]
    return out


def test_head_layout_weights_before_biases():
    slots = head_slots(CFG2)
    assert [s["n_in"] for s in slots] == [50, 50, 50]
    assert [s["n_out"] for s in slots] == [50, 50, 1]
    assert slots[0]["w_lo"] == 0
    assert slots[0]["b_lo"] == 2500
    assert slots[1]["w_lo"] == 2550
    assert d_eta(CFG2) == 5151


def test_unpack_eta_row_major(rng):
    eta = rng.normal(size=d_eta(CFG2))
    (w0, b0), (w1, b1), (w2, b2) = unpack_eta(CFG2, eta)
    assert w0.shape == (50, 50) and b0.shape == (50,)
    assert w2.shape == (50, 1) and b2.shape == (1,)
    # row-major: consecutive eta entries fill one input-row of the weight
    assert np.array_equal(w0[0], eta[:50])
    assert np.array_equal(w0[1], eta[50:100])
    assert np.array_equal(b2, eta[-1:])


def test_unpack_eta_bad_length():
    with pytest.raises(DimensionError):
        unpack_eta(CFG2, np.zeros(100))


def test_head_params_single_and_batch(rng):
    B = rng.normal(size=(d_eta(CFG2), 25))
    t = rng.uniform(0, 1, size=(6, 2))
    psi = tensor_product(CFG2.tensor_basis, t)
    batch = head_params(B, psi)
    assert batch.shape == (6, d_eta(CFG2))
    for i in range(6):
        assert np.allclose(batch[i], head_params(B, psi[i]))


def test_zero_B_gives_zero_output(rng):
    params = init_dcnet_params(CFG2, rng)
    params["head.B"] = np.zeros_like(params["head.B"])
    model = DoseResponseModel("dcnet", CFG2, params, {})
    t = rng.uniform(0, 1, size=(8, 2))
    x = rng.uniform(0, 1, size=(8, 4))
    assert np.allclose(predict_mu(model, t, x), 0.0)


def test_identical_columns_remove_dosage_dependence(rng):
    # if every basis column of B is the same, eta(t) is constant in t
    params = init_dcnet_params(CFG2, rng)
    col = rng.normal(size=d_eta(CFG2))
    params["head.B"] = np.tile(col[:, None], (1, 25))
    model = DoseResponseModel("dcnet", CFG2, params, {})
    x = rng.uniform(0, 1, size=(5, 4))
    base = predict_mu(model, np.full((5, 2), 0.5), x)
    for _ in range(5):
        t = rng.uniform(0, 1, size=(5, 2))
        assert np.allclose(predict_mu(model, t, x), base, atol=1e-12)


def test_corner_dosage_selects_single_column(rng):
    params = init_dcnet_params(CFG2, rng)
    B = params["head.B"]
    psi = tensor_product(CFG2.tensor_basis, np.array([0.0, 1.0]))
    eta = head_params(B, psi)
    assert np.allclose(eta, B[:, 4])  # dim-0 basis 1 (slowest) x dim-1 basis 5


def test_forward_matches_per_sample_definition(rng):
    params = init_dcnet_params(CFG2, rng)
    model = DoseResponseModel("dcnet", CFG2, params, {})
    t = rng.uniform(0, 1, size=(16, 2))
    x = rng.uniform(0, 1, size=(16, 4))
    fast = predict_mu(model, t, x)
    slow = _per_sample_oracle(CFG2, params, t, x)
    assert rel_err(fast, slow) < 1e-12


def test_prediction_gradient_wrt_dosage(rng):
    params = init_dcnet_params(CFG2, rng)
    model = DoseResponseModel("dcnet", CFG2, params, {})
    t0 = rng.uniform(0.05, 0.30, size=(4, 2))
    x = rng.uniform(0, 1, size=(4, 4))
    grad = mu_grad_t(model, t0, x)

    def f(tv):
        return float(predict_mu(model, tv, x).sum())

    fd = finite_diff_grad(f, t0.copy())
    assert rel_err(grad, fd, floor=1e-4) < 1e-5


def test_parameter_gradients_vs_finite_difference(rng):
    cfg = DcnetConfig(d=3, p=1, repr_hidden=(7, 6), head_hidden=(5, 4))
    params0 = init_dcnet_params(cfg, rng)
    t = rng.uniform(0, 1, size=(9, 1))
    x = rng.uniform(0, 1, size=(9, 3))
    y = rng.normal(size=9)
    psi = tensor_product(cfg.tensor_basis, t)

    nodes = {k: ad.param(v) for k, v in params0.items()}
    pred = dcnet_forward(nodes, ad.Node(x), ad.Node(psi), cfg)
    err = ad.sub(pred, ad.Node(y))
    ad.backward(ad.mean_all(ad.mul(err, err)), list(nodes.values()))

    def loss_with(name, val):
        trial = {k: (val if k == name else v) for k, v in params0.items()}
        return float(np.mean((_per_sample_oracle(cfg, trial, t, x) - y) ** 2))

    for name in ("head.B", "repr.w0", "repr.b1"):
        fd = finite_diff_grad(lambda v, n=name: loss_with(n, v), params0[name].copy())
        assert rel_err(nodes[name].grad, fd, floor=1e-6) < 1e-5, name


def test_smooth_across_interior_knot(rng):
    # value and first derivative of mu(t) have no jump at the knot
    params = init_dcnet_params(CFG2, rng)
    model = DoseResponseModel("dcnet", CFG2, params, {})
    x = rng.uniform(0, 1, size=(3, 4))
    k = 1.0 / 3.0
    h = 1e-6
    for j in (0, 1):
        t_lo, t_hi = np.full((3, 2), 0.5), np.full((3, 2), 0.5)
        t_lo[:, j], t_hi[:, j] = k - h, k + h
        jump = predict_mu(model, t_hi, x) - predict_mu(model, t_lo, x)
        slope = mu_grad_t(model, t_hi, x)[:, j] - mu_grad_t(model, t_lo, x)[:, j]
        scale = max(1.0, np.abs(mu_grad_t(model, t_hi, x)[:, j]).max())
        assert np.max(np.abs(jump)) < 1e-5 * scale
        assert np.max(np.abs(slope)) < 1e-4 * scale


def test_mlp_forward_matches_manual(rng):
    cfg = MlpConfig(d=3, p=2, hidden=(8, 8, 8, 8))
    params = init_mlp_params(cfg, rng)
    xt = rng.uniform(0, 1, size=(10, 5))
    node = mlp_forward({k: ad.Node(v) for k, v in params.items()}, ad.Node(xt), cfg)
    z = xt
    for i in range(4):
        z = np.maximum(z @ params[f"w{i}"] + params[f"b{i}"], 0.0)
    manual = (z @ params["w4"] + params["b4"])[:, 0]
    assert np.allclose(node.value, manual, atol=1e-12)


# ---------------------------------------------------------------------
# frozen-model evaluators used by policy training
# ---------------------------------------------------------------------

def test_dcnet_evaluator_matches_predict(rng):
    params = init_dcnet_params(CFG2, rng)
    model = DoseResponseModel("dcnet", CFG2, params, {})
    ev = DcnetDoseEvaluator(model)
    x = rng.uniform(0, 1, size=(12, 4))
    t = rng.uniform(0, 1, size=(12, 2))
    cache = ev.prepare(x)
    rows = np.arange(12)
    node = ev.build(ad.Node(t), cache, rows)
    assert rel_err(node.value, predict_mu(model, t, x)) < 1e-12
    # sub-batches index into the cache
    sub = np.array([3, 7, 9])
    node = ev.build(ad.Node(t[sub]), cache, sub)
    assert rel_err(node.value, predict_mu(model, t[sub], x[sub])) < 1e-12


def test_dcnet_evaluator_gradient_flows_to_dosage(rng):
    params = init_dcnet_params(CFG2, rng)
    model = DoseResponseModel("dcnet", CFG2, params, {})
    ev = DcnetDoseEvaluator(model)
    x = rng.uniform(0, 1, size=(6, 4))
    t0 = rng.uniform(0.4, 0.6, size=(6, 2))
    cache = ev.prepare(x)
    t_node = ad.param(t0)
    out = ev.build(t_node, cache, np.arange(6))
    ad.backward(ad.sum_all(out), [t_node])
    assert np.allclose(t_node.grad, mu_grad_t(model, t0, x), atol=1e-10)


def test_mlp_evaluator_matches_predict(rng):
    cfg = MlpConfig(d=4, p=2)
    params = init_mlp_params(cfg, rng)
    model = DoseResponseModel("mlp", cfg, params, {})
    ev = MlpDoseEvaluator(model)
    x = rng.uniform(0, 1, size=(9, 4))
    t = rng.uniform(0, 1, size=(9, 2))
    node = ev.build(ad.Node(t), ev.prepare(x), np.arange(9))
    assert rel_err(node.value, predict_mu(model, t, x)) < 1e-12


def test_dose_evaluator_dispatch(rng):
    m1 = _random_model(CFG2, rng)
    m2 = _random_model(MlpConfig(d=4, p=2), rng, kind="mlp")
    assert isinstance(dose_evaluator(m1), DcnetDoseEvaluator)
    assert isinstance(dose_evaluator(m2), MlpDoseEvaluator)


# ---------------------------------------------------------------------
# training
# ---------------------------------------------------------------------

FAST_FIT = FitConfig(batch_size=200, max_epochs=60, patience=15, lr_grid=(5e-3,))


def test_train_mu_learns_constant_outcome():
    # constant target: the fit should recover it up to Adam's fixed-lr
    # steady-state wiggle (no decay schedule in the recipe)
    data, _ = generate(SimConfig(n=2000, d=3, p=2, alpha=0.0), seed=31)
    data.y[:] = 1.7
    fitcfg = FitConfig(batch_size=500, max_epochs=300, patience=100, lr_grid=(5e-3,))
    model = train_mu(data, kind="dcnet", seed=1, fit_config=fitcfg)
    x_te, t_te, _ = data.subset("test")
    preds = predict_mu(model, t_te, x_te)
    assert abs(preds.mean() - 1.7) < 0.01
    assert np.sqrt(np.mean((preds - 1.7) ** 2)) < 0.05


def test_train_mu_beats_mean_predictor():
    data, orc = generate(SimConfig(n=1500, d=3, p=2, alpha=0.0), seed=8)
    model = train_mu(data, kind="dcnet", seed=2,
                     fit_config=FitConfig(batch_size=500, max_epochs=150,
                                          patience=30, lr_grid=(5e-3,)))
    x_te, t_te, y_te = data.subset("test")
    mse = np.mean((predict_mu(model, t_te, x_te) - y_te) ** 2)
    base = np.mean((y_te - data.y[data.train_idx].mean()) ** 2)
    assert mse < 0.6 * base


def test_train_mu_deterministic():
    data, _ = generate(SimConfig(n=400, d=3, p=2), seed=12)
    m1 = train_mu(data, kind="mlp", seed=5, fit_config=FAST_FIT)
    m2 = train_mu(data, kind="mlp", seed=5, fit_config=FAST_FIT)
    for k in m1.params:
        assert np.array_equal(m1.params[k], m2.params[k]), k
    assert m1.metadata["best_val"] == m2.metadata["best_val"]


def test_train_mu_metadata_reports_grid():
    data, _ = generate(SimConfig(n=400, d=3, p=2), seed=12)
    fitcfg = FitConfig(batch_size=200, max_epochs=10, patience=5, lr_grid=(1e-3, 5e-3))
    model = train_mu(data, kind="dcnet", seed=3, fit_config=fitcfg)
    assert model.metadata["selected_lr"] in (1e-3, 5e-3)
    assert len(model.metadata["candidates"]) == 2
    assert all(c["epochs_run"] <= 10 for c in model.metadata["candidates"])


def test_model_save_load_round_trip(tmp_path, rng):
    data, _ = generate(SimConfig(n=400, d=3, p=2), seed=12)
    model = train_mu(data, kind="dcnet", seed=4, fit_config=FAST_FIT)
    path = tmp_path / "mu.json"
    model.save(path)
    loaded = DoseResponseModel.load(path)
    assert loaded.kind == "dcnet"
    assert loaded.config == model.config
    t = rng.uniform(0, 1, size=(20, 2))
    x = rng.uniform(0, 1, size=(20, 3))
    assert np.array_equal(predict_mu(loaded, t, x), predict_mu(model, t, x))
