"""Conditional density of dosages given covariates, as a normalizing flow.

The model factorizes autoregressively: dimension j of the dosage vector
gets its own conditioner MLP that reads (x, t_1..t_{j-1}) and emits the
parameters of a monotone rational-quadratic spline on [0, 1] (bin widths
and heights via softmax, knot derivatives via a shifted softplus).  The
spline maps the dosage to a uniform base variable, so the conditional
density is

    f(t | x) = prod_j  s_j'(t_j; x, t_<j),

which integrates to one over [0, 1]^p by construction.  The conditioner's
output layer is zero-initialized, making every spline exactly the
identity at the start of training (density identically one).

Training minimizes the negative log-likelihood with small Gaussian noise
added to the dosages (reflected at the interval boundaries) as a
regularizer; validation uses clean dosages.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DimensionError, StateError
from .training import FitConfig, LR_GRID, fit, he_uniform

_EDGE = 1e-9  # dosages are clamped this far inside [0, 1] before transforming
# floors keep extreme conditioner outputs from collapsing bins to zero
# width/height (which would blow up the log-density); the affine floor
# leaves softmax(0) = 1/K untouched, so zero-init still gives the exact
# identity transform
_MIN_BIN = 1e-4
_MIN_DERIV = 1e-4
_DERIV_SHIFT = math.log(math.expm1(1.0 - _MIN_DERIV))  # softplus(shift) = 1 - min


@dataclass
class FlowConfig:
    d: int
    p: int
    bins: int = 5
    hidden: tuple[int, ...] = (50, 50)
    noise_sd: float = 0.1

    def __post_init__(self):
        if self.d < 1 or self.p < 1:
            raise ConfigurationError(f"need d >= 1 and p >= 1, got d={self.d}, p={self.p}")
        if self.bins < 2:
            raise ConfigurationError(f"need at least 2 spline bins, got {self.bins}")

    @property
    def raw_width(self) -> int:
        """Conditioner output size: widths + heights + knot derivatives."""
        return 3 * self.bins + 1


def init_flow_params(config: FlowConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for j in range(config.p):
        n_in = config.d + j
        widths = [*config.hidden, config.raw_width]
        for layer, width in enumerate(widths):
            last = layer == len(widths) - 1
            params[f"cond{j}.w{layer}"] = (
                np.zeros((n_in, width)) if last else he_uniform(rng, n_in, width)
            )
            params[f"cond{j}.b{layer}"] = np.zeros(width)
            n_in = width
    return params


def _conditioner_forward(params: dict, j: int, inp: "ad.Node", config: FlowConfig) -> "ad.Node":
    z = inp
    depth = len(config.hidden)
    for layer in range(depth):
        z = ad.dense(z, params[f"cond{j}.w{layer}"], params[f"cond{j}.b{layer}"],
                     activation="relu")
    return ad.dense(z, params[f"cond{j}.w{depth}"], params[f"cond{j}.b{depth}"])


def spline_params(raw: "ad.Node", bins: int):
    """Normalize raw conditioner outputs into knot grids and derivatives.

    Returns (kx, ky, dv): x-knots and y-knots of shape (B, bins + 1)
    starting at exactly 0, and positive derivatives at every knot.
    """
    scale = 1.0 - bins * _MIN_BIN
    w = ad.add(ad.mul(ad.softmax_last(ad.slice_last(raw, 0, bins)), scale), _MIN_BIN)
    h = ad.add(ad.mul(ad.softmax_last(ad.slice_last(raw, bins, 2 * bins)), scale), _MIN_BIN)
    dv = ad.add(
        ad.softplus(ad.add(ad.slice_last(raw, 2 * bins, 3 * bins + 1), _DERIV_SHIFT)),
        _MIN_DERIV,
    )
    zero = ad.Node(np.zeros((raw.value.shape[0], 1)))
    kx = ad.concat_last([zero, ad.cumsum_last(w)])
    ky = ad.concat_last([zero, ad.cumsum_last(h)])
    return kx, ky, dv


def rq_spline(u: "ad.Node", kx: "ad.Node", ky: "ad.Node", dv: "ad.Node"):
    """Monotone rational-quadratic spline through the given knots.

    u is (B,) in [0, 1].  Returns (s, log_deriv): the transformed value
    and log s'(u), both (B,).  With uniform knots and unit derivatives
    this is exactly the identity with log-derivative zero.
    """
    bins = kx.value.shape[1] - 1
    idx = np.clip((u.value[:, None] >= kx.value).sum(axis=1) - 1, 0, bins - 1)
    xk = ad.gather_last(kx, idx)
    xk1 = ad.gather_last(kx, idx + 1)
    yk = ad.gather_last(ky, idx)
    yk1 = ad.gather_last(ky, idx + 1)
    dk = ad.gather_last(dv, idx)
    dk1 = ad.gather_last(dv, idx + 1)

    wk = ad.sub(xk1, xk)
    hk = ad.sub(yk1, yk)
    sk = ad.div(hk, wk)
    xi = ad.div(ad.sub(u, xk), wk)
    one_m_xi = ad.sub(1.0, xi)
    xi_prod = ad.mul(xi, one_m_xi)

    denom = ad.add(sk, ad.mul(ad.sub(ad.add(dk1, dk), ad.mul(2.0, sk)), xi_prod))
    numer_s = ad.mul(hk, ad.add(ad.mul(sk, ad.mul(xi, xi)), ad.mul(dk, xi_prod)))
    s = ad.add(yk, ad.div(numer_s, denom))

    numer_d = ad.add(
        ad.add(ad.mul(dk1, ad.mul(xi, xi)), ad.mul(2.0, ad.mul(sk, xi_prod))),
        ad.mul(dk, ad.mul(one_m_xi, one_m_xi)),
    )
    log_deriv = ad.sub(
        ad.add(ad.mul(2.0, ad.log(sk)), ad.log(numer_d)),
        ad.mul(2.0, ad.log(denom)),
    )
    return s, log_deriv


def rq_spline_inverse(s_val: np.ndarray, kx: np.ndarray, ky: np.ndarray,
                      dv: np.ndarray) -> np.ndarray:
    """Closed-form inverse of the spline (numpy, used for sampling/tests)."""
    bins = kx.shape[1] - 1
    idx = np.clip((s_val[:, None] >= ky).sum(axis=1) - 1, 0, bins - 1)
    rows = np.arange(len(s_val))
    xk, xk1 = kx[rows, idx], kx[rows, idx + 1]
    yk, yk1 = ky[rows, idx], ky[rows, idx + 1]
    dk, dk1 = dv[rows, idx], dv[rows, idx + 1]
    wk, hk = xk1 - xk, yk1 - yk
    sk = hk / wk
    r = s_val - yk
    term = r * (dk1 + dk - 2.0 * sk)
    a = hk * (sk - dk) + term
    b = hk * dk - term
    c = -sk * r
    disc = np.maximum(b * b - 4.0 * a * c, 0.0)
    xi = 2.0 * c / (-b - np.sqrt(disc))
    return xk + np.clip(xi, 0.0, 1.0) * wk


@dataclass
class GpsModel:
    """Trained conditional dosage density."""

    config: FlowConfig
    params: dict[str, np.ndarray]
    metadata: dict

    def save(self, path) -> None:
        ad.save_params(path, self.params, extra={
            "config": asdict(self.config),
            "metadata": self.metadata,
        })

    @classmethod
    def load(cls, path) -> "GpsModel":
        params, doc = ad.load_params(path)
        cfgdict = dict(doc["config"])
        cfgdict["hidden"] = tuple(cfgdict["hidden"])
        return cls(config=FlowConfig(**cfgdict), params=params, metadata=doc["metadata"])


def _check_tx(t: np.ndarray, x: np.ndarray, config: FlowConfig):
    if t.shape[1] != config.p or x.shape[1] != config.d:
        raise DimensionError(
            f"expected t with {config.p} and x with {config.d} columns, "
            f"got {t.shape} and {x.shape}"
        )
    if t.shape[0] != x.shape[0]:
        raise DimensionError(f"t has {t.shape[0]} rows but x has {x.shape[0]}")


def log_prob_node(params: dict, t: "ad.Node", x: "ad.Node", config: FlowConfig) -> "ad.Node":
    """Tape-recorded log density, differentiable in t and the parameters.

    t values must already lie inside [0, 1]; callers holding raw data use
    :func:`log_prob`, which clamps the boundary first.
    """
    total = None
    for j in range(config.p):
        if j == 0:
            inp = x
        else:
            inp = ad.concat_last([x, ad.slice_last(t, 0, j)])
        raw = _conditioner_forward(params, j, inp, config)
        kx, ky, dv = spline_params(raw, config.bins)
        tj = ad.reshape(ad.slice_last(t, j, j + 1), (t.value.shape[0],))
        _, log_deriv = rq_spline(tj, kx, ky, dv)
        total = log_deriv if total is None else ad.add(total, log_deriv)
    return total


def log_prob(model: GpsModel, t: np.ndarray, x: np.ndarray) -> np.ndarray:
    """log f(t | x) for arrays; dosages clamped 1e-9 inside the boundary."""
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_tx(t, x, model.config)
    t = np.clip(t, _EDGE, 1.0 - _EDGE)
    with ad.no_grad():
        nodes = {k: ad.Node(v) for k, v in model.params.items()}
        return log_prob_node(nodes, ad.Node(t), ad.Node(x), model.config).value


def density(model: GpsModel, t: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.exp(log_prob(model, t, x))


def grad_log_prob_t(model: GpsModel, t: np.ndarray, x: np.ndarray) -> np.ndarray:
    """d log f(t | x) / d t, one row per sample."""
    t = np.clip(np.atleast_2d(np.asarray(t, dtype=np.float64)), _EDGE, 1.0 - _EDGE)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_tx(t, x, model.config)
    t_node = ad.param(t)
    nodes = {k: ad.Node(v) for k, v in model.params.items()}
    lp = log_prob_node(nodes, t_node, ad.Node(x), model.config)
    ad.backward(ad.sum_all(lp), [t_node])
    return t_node.grad


def transform(model: GpsModel, t: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Map dosages to the uniform base space (per-dimension latent)."""
    t = np.clip(np.atleast_2d(np.asarray(t, dtype=np.float64)), _EDGE, 1.0 - _EDGE)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_tx(t, x, model.config)
    out = np.empty_like(t)
    with ad.no_grad():
        nodes = {k: ad.Node(v) for k, v in model.params.items()}
        for j in range(model.config.p):
            inp = ad.Node(np.concatenate([x, t[:, :j]], axis=1))
            raw = _conditioner_forward(nodes, j, inp, model.config)
            kx, ky, dv = spline_params(raw, model.config.bins)
            s, _ = rq_spline(ad.Node(t[:, j]), kx, ky, dv)
            out[:, j] = s.value
    return out


def sample(model: GpsModel, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw dosages from the fitted conditional, autoregressively."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    t = np.empty((n, model.config.p))
    z = rng.random((n, model.config.p))
    with ad.no_grad():
        nodes = {k: ad.Node(v) for k, v in model.params.items()}
        for j in range(model.config.p):
            inp = ad.Node(np.concatenate([x, t[:, :j]], axis=1))
            raw = _conditioner_forward(nodes, j, inp, model.config)
            kx, ky, dv = spline_params(raw, model.config.bins)
            t[:, j] = rq_spline_inverse(z[:, j], kx.value, ky.value, dv.value)
    return t


# ---------------------------------------------------------------------
# training
# ---------------------------------------------------------------------

GPS_FIT = FitConfig(batch_size=512, max_epochs=800, patience=50, lr_grid=LR_GRID)


def _reflect_unit(v: np.ndarray) -> np.ndarray:
    """Reflect perturbed dosages back into [0, 1]."""
    v = np.remainder(v, 2.0)
    return np.where(v > 1.0, 2.0 - v, v)


def train_gps(data, seed: int, fit_config: FitConfig | None = None,
              bins: int = 5, hidden=(50, 50), noise_sd: float = 0.1) -> GpsModel:
    """Fit the dosage density on the training split by maximum likelihood."""
    cfg = fit_config or GPS_FIT
    config = FlowConfig(d=data.d, p=data.p, bins=bins, hidden=tuple(hidden),
                        noise_sd=noise_sd)
    x_tr, t_tr, _ = data.subset("train")
    x_va, t_va, _ = data.subset("val")
    t_va_c = np.clip(t_va, _EDGE, 1.0 - _EDGE)

    def make_params(rng):
        return {k: ad.param(v, name=k) for k, v in init_flow_params(config, rng).items()}

    def build_loss(params, idx, rng):
        t_noisy = _reflect_unit(t_tr[idx] + rng.normal(0.0, config.noise_sd,
                                                       size=(len(idx), config.p)))
        t_noisy = np.clip(t_noisy, _EDGE, 1.0 - _EDGE)
        lp = log_prob_node(params, ad.Node(t_noisy), ad.Node(x_tr[idx]), config)
        return ad.neg(ad.mean_all(lp))

    def val_metric(params):
        lp = log_prob_node(params, ad.Node(t_va_c), ad.Node(x_va), config)
        return -float(lp.value.mean())

    snapshot, meta = fit(make_params, build_loss, val_metric, len(t_tr), cfg, seed)
    meta.update({"seed": seed, "n_train": len(t_tr), "noise_sd": config.noise_sd})
    return GpsModel(config=config, params=snapshot, metadata=meta)


# ---------------------------------------------------------------------
# frozen-model evaluator for policy training
# ---------------------------------------------------------------------


class GpsDensityEvaluator:
    """Evaluate a frozen flow's density at policy-proposed dosages.

    Dimension 0 depends on x only, so its spline parameters are fully
    precomputed per split.  Later dimensions cache the covariate half of
    the first conditioner layer and pay only for the dosage half plus the
    two remaining layers each step.
    """

    def __init__(self, model: GpsModel):
        self.config = model.config
        self.params = model.params

    def prepare(self, x: np.ndarray) -> dict:
        cfg = self.config
        cache: dict = {}
        with ad.no_grad():
            nodes = {k: ad.Node(v) for k, v in self.params.items()}
            raw0 = _conditioner_forward(nodes, 0, ad.Node(x), cfg)
            kx, ky, dv = spline_params(raw0, cfg.bins)
            cache["dim0"] = (kx.value, ky.value, dv.value)
        for j in range(1, cfg.p):
            w0 = self.params[f"cond{j}.w0"]
            cache[f"xw{j}"] = x @ w0[: cfg.d] + self.params[f"cond{j}.b0"]
        return cache

    def build(self, t_node: "ad.Node", cache: dict, rows: np.ndarray) -> "ad.Node":
        """Density (not log) as a (B,) node differentiable in t."""
        cfg = self.config
        kx0, ky0, dv0 = cache["dim0"]
        t0 = ad.reshape(ad.slice_last(t_node, 0, 1), (t_node.value.shape[0],))
        _, total = rq_spline(t0, ad.Node(kx0[rows]), ad.Node(ky0[rows]), ad.Node(dv0[rows]))
        depth = len(cfg.hidden)
        for j in range(1, cfg.p):
            w0 = self.params[f"cond{j}.w0"]
            t_prev = ad.slice_last(t_node, 0, j)
            z = ad.relu(ad.add(ad.Node(cache[f"xw{j}"][rows]),
                               ad.matmul(t_prev, ad.Node(w0[cfg.d:]))))
            for layer in range(1, depth):
                z = ad.dense(z, ad.Node(self.params[f"cond{j}.w{layer}"]),
                             ad.Node(self.params[f"cond{j}.b{layer}"]), activation="relu")
            raw = ad.dense(z, ad.Node(self.params[f"cond{j}.w{depth}"]),
                           ad.Node(self.params[f"cond{j}.b{depth}"]))
            kx, ky, dv = spline_params(raw, cfg.bins)
            tj = ad.reshape(ad.slice_last(t_node, j, j + 1), (t_node.value.shape[0],))
            _, log_deriv = rq_spline(tj, kx, ky, dv)
            total = ad.add(total, log_deriv)
        return ad.exp(total)
