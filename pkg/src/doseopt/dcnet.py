"""Dose-response models: a varying-coefficient network and an MLP baseline.

The varying-coefficient network ("dcnet") separates covariates from
dosages.  A representation MLP phi maps x to a feature vector; the head
is a second MLP acting on phi(x) whose *entire parameter vector* is a
function of the dosage:

    eta(t) = B psi(t)

where psi(t) is the tensor-product B-spline basis of the dosage vector
and B is a learned (d_eta x K) coefficient matrix, d_eta being the number
of head parameters.  Rows of B follow the head's flat parameter layout:
layer by layer, weight matrix (row-major, shape in x out) before bias.
Because psi is one-hot at the dosage-space corners and sums to one
everywhere, eta(t) is a smooth (C^1) interpolation between K "anchor"
parameter settings.

The forward pass never materializes eta per sample.  For each head layer,
    z W(t) + b(t) = contract_k [ (z R_l)_(., k, .) , psi_k ] + psi Bb_l
where R_l is a reshaped slice of B; this turns the batched
per-sample-parameter evaluation into one dense matmul plus a light
contraction, with gradients flowing through both B and t.

The baseline MLP simply takes [x, t] through four relu layers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DimensionError, StateError
from .splines import SplineSpec, TensorBasisSpec, tensor_basis_node, tensor_product
from .training import FitConfig, LR_GRID, fit, he_uniform


@dataclass
class DcnetConfig:
    d: int
    p: int
    repr_hidden: tuple[int, ...] = (50, 50)
    head_hidden: tuple[int, ...] = (50, 50)
    spline: SplineSpec = field(default_factory=SplineSpec)

    def __post_init__(self):
        if self.d < 1 or self.p < 1:
            raise ConfigurationError(f"need d >= 1 and p >= 1, got d={self.d}, p={self.p}")
        if not self.repr_hidden or not self.head_hidden:
            raise ConfigurationError("representation and head need at least one hidden layer")

    @property
    def tensor_basis(self) -> TensorBasisSpec:
        return TensorBasisSpec.for_dims(self.p, self.spline)

    @property
    def head_sizes(self) -> list[tuple[int, int]]:
        """(n_in, n_out) per head layer, ending in the scalar output."""
        widths = [self.repr_hidden[-1], *self.head_hidden, 1]
        return list(zip(widths[:-1], widths[1:]))


@dataclass
class MlpConfig:
    d: int
    p: int
    hidden: tuple[int, ...] = (50, 50, 50, 50)

    def __post_init__(self):
        if self.d < 1 or self.p < 1:
            raise ConfigurationError(f"need d >= 1 and p >= 1, got d={self.d}, p={self.p}")


def head_slots(config: DcnetConfig) -> list[dict]:
    """Row ranges of each head layer's weight and bias inside eta/B."""
    out, offset = [], 0
    for n_in, n_out in config.head_sizes:
        w_lo, w_hi = offset, offset + n_in * n_out
        b_lo, b_hi = w_hi, w_hi + n_out
        out.append({"w_lo": w_lo, "w_hi": w_hi, "b_lo": b_lo, "b_hi": b_hi,
                    "n_in": n_in, "n_out": n_out})
        offset = b_hi
    return out


def d_eta(config: DcnetConfig) -> int:
    return head_slots(config)[-1]["b_hi"]


def head_params(B: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """eta(t) = B psi(t); accepts a single basis vector or a batch."""
    psi = np.asarray(psi, dtype=np.float64)
    if psi.ndim == 1:
        return B @ psi
    return psi @ B.T


def unpack_eta(config: DcnetConfig, eta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat head-parameter vector into per-layer (W, b)."""
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != (d_eta(config),):
        raise DimensionError(f"expected eta of shape ({d_eta(config)},), got {eta.shape}")
    out = []
    for slot in head_slots(config):
        w = eta[slot["w_lo"]:slot["w_hi"]].reshape(slot["n_in"], slot["n_out"])
        b = eta[slot["b_lo"]:slot["b_hi"]]
        out.append((w, b))
    return out


# ---------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------


def init_dcnet_params(config: DcnetConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    n_in = config.d
    for i, width in enumerate(config.repr_hidden):
        params[f"repr.w{i}"] = he_uniform(rng, n_in, width)
        params[f"repr.b{i}"] = np.zeros(width)
        n_in = width
    base = np.empty(d_eta(config))
    for slot in head_slots(config):
        w = he_uniform(rng, slot["n_in"], slot["n_out"])
        base[slot["w_lo"]:slot["w_hi"]] = w.ravel()
        base[slot["b_lo"]:slot["b_hi"]] = 0.0
    K = config.tensor_basis.size
    # every basis column starts from the same ordinary init, plus a little
    # noise so the dosage dependence has something to break symmetry with
    params["head.B"] = base[:, None] + 0.01 * rng.standard_normal((d_eta(config), K))
    return params


def init_mlp_params(config: MlpConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    n_in = config.d + config.p
    for i, width in enumerate([*config.hidden, 1]):
        params[f"w{i}"] = he_uniform(rng, n_in, width)
        params[f"b{i}"] = np.zeros(width)
        n_in = width
    return params


# ---------------------------------------------------------------------
# forward passes (tape-recorded; wrap arrays in Nodes for inference)
# ---------------------------------------------------------------------


def repr_forward(params: dict, x: "ad.Node", config: DcnetConfig) -> "ad.Node":
    z = x
    for i in range(len(config.repr_hidden)):
        z = ad.dense(z, params[f"repr.w{i}"], params[f"repr.b{i}"], activation="relu")
    return z


def _head_layer(z, B, psi, slot, K: int, last: bool):
    n_in, n_out = slot["n_in"], slot["n_out"]
    batch = z.value.shape[0]
    R = ad.reshape(
        ad.transpose(
            ad.reshape(ad.slice_rows(B, slot["w_lo"], slot["w_hi"]), (n_in, n_out, K)),
            (0, 2, 1),
        ),
        (n_in, K * n_out),
    )
    m = ad.reshape(ad.matmul(z, R), (batch, K, n_out))
    zw = ad.basis_contract(m, psi)
    bb = ad.transpose(ad.slice_rows(B, slot["b_lo"], slot["b_hi"]), (1, 0))
    h = ad.add(zw, ad.matmul(psi, bb))
    return h if last else ad.relu(h)


def head_forward(B: "ad.Node", z: "ad.Node", psi: "ad.Node", config: DcnetConfig) -> "ad.Node":
    """Evaluate the varying-coefficient head: (B, repr) x (B, K) -> (B,)."""
    slots = head_slots(config)
    K = config.tensor_basis.size
    for i, slot in enumerate(slots):
        z = _head_layer(z, B, psi, slot, K, last=(i == len(slots) - 1))
    return ad.reshape(z, (z.value.shape[0],))


def dcnet_forward(params: dict, x: "ad.Node", psi: "ad.Node", config: DcnetConfig) -> "ad.Node":
    z = repr_forward(params, x, config)
    return head_forward(params["head.B"], z, psi, config)


def mlp_forward(params: dict, xt: "ad.Node", config: MlpConfig) -> "ad.Node":
    z = xt
    depth = len(config.hidden)
    for i in range(depth):
        z = ad.dense(z, params[f"w{i}"], params[f"b{i}"], activation="relu")
    z = ad.dense(z, params[f"w{depth}"], params[f"b{depth}"])
    return ad.reshape(z, (z.value.shape[0],))


# ---------------------------------------------------------------------
# trained model container
# ---------------------------------------------------------------------


@dataclass
class DoseResponseModel:
    kind: str  # "dcnet" | "mlp"
    config: DcnetConfig | MlpConfig
    params: dict[str, np.ndarray]
    metadata: dict

    def save(self, path) -> None:
        ad.save_params(path, self.params, extra={
            "kind": self.kind,
            "config": _config_dict(self.config),
            "metadata": self.metadata,
        })

    @classmethod
    def load(cls, path) -> "DoseResponseModel":
        params, doc = ad.load_params(path)
        kind = doc["kind"]
        cfgdict = dict(doc["config"])
        if kind == "dcnet":
            cfgdict["spline"] = SplineSpec(
                degree=cfgdict["spline"]["degree"],
                interior_knots=tuple(cfgdict["spline"]["interior_knots"]),
            )
            cfgdict["repr_hidden"] = tuple(cfgdict["repr_hidden"])
            cfgdict["head_hidden"] = tuple(cfgdict["head_hidden"])
            config = DcnetConfig(**cfgdict)
        elif kind == "mlp":
            cfgdict["hidden"] = tuple(cfgdict["hidden"])
            config = MlpConfig(**cfgdict)
        else:
            raise StateError(f"unknown model kind {kind!r} in {path}")
        return cls(kind=kind, config=config, params=params, metadata=doc["metadata"])


def _config_dict(config) -> dict:
    out = asdict(config)
    return out


def predict_mu(model: DoseResponseModel, t: np.ndarray, x: np.ndarray,
               chunk: int = 2048) -> np.ndarray:
    """Point predictions of the outcome at dosage t for covariates x."""
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if t.shape[0] != x.shape[0]:
        raise DimensionError(f"t has {t.shape[0]} rows but x has {x.shape[0]}")
    out = np.empty(t.shape[0])
    with ad.no_grad():
        nodes = {k: ad.Node(v) for k, v in model.params.items()}
        for lo in range(0, t.shape[0], chunk):
            sl = slice(lo, lo + chunk)
            if model.kind == "dcnet":
                psi = ad.Node(tensor_product(model.config.tensor_basis, t[sl]))
                out[sl] = dcnet_forward(nodes, ad.Node(x[sl]), psi, model.config).value
            else:
                xt = ad.Node(np.concatenate([x[sl], t[sl]], axis=1))
                out[sl] = mlp_forward(nodes, xt, model.config).value
    return out


def mu_grad_t(model: DoseResponseModel, t: np.ndarray, x: np.ndarray) -> np.ndarray:
    """d mu / d t, one row per sample (used in tests and diagnostics)."""
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t_node = ad.param(t)
    nodes = {k: ad.Node(v) for k, v in model.params.items()}
    if model.kind == "dcnet":
        psi = tensor_basis_node(model.config.tensor_basis, t_node)
        preds = dcnet_forward(nodes, ad.Node(x), psi, model.config)
    else:
        xt = ad.concat_last([ad.Node(x), t_node])
        preds = mlp_forward(nodes, xt, model.config)
    ad.backward(ad.sum_all(preds), [t_node])
    return t_node.grad


# ---------------------------------------------------------------------
# training
# ---------------------------------------------------------------------

MU_FIT = FitConfig(batch_size=1000, max_epochs=800, patience=50, lr_grid=LR_GRID)


def train_mu(data, kind: str, seed: int, fit_config: FitConfig | None = None,
             repr_hidden=(50, 50), head_hidden=(50, 50),
             mlp_hidden=(50, 50, 50, 50), spline: SplineSpec | None = None) -> DoseResponseModel:
    """Fit a dose-response model on the factual training split.

    Model selection runs the full LR grid and keeps the candidate with
    the lowest validation MSE on factual (t, x, y) triples.
    """
    cfg = fit_config or MU_FIT
    x_tr, t_tr, y_tr = data.subset("train")
    x_va, t_va, y_va = data.subset("val")

    if kind == "dcnet":
        config = DcnetConfig(d=data.d, p=data.p, repr_hidden=tuple(repr_hidden),
                             head_hidden=tuple(head_hidden), spline=spline or SplineSpec())
        psi_tr = tensor_product(config.tensor_basis, t_tr)
        psi_va = tensor_product(config.tensor_basis, t_va)

        def make_params(rng):
            return {k: ad.param(v, name=k) for k, v in init_dcnet_params(config, rng).items()}

        def build_loss(params, idx, rng):
            pred = dcnet_forward(params, ad.Node(x_tr[idx]), ad.Node(psi_tr[idx]), config)
            err = ad.sub(pred, ad.Node(y_tr[idx]))
            return ad.mean_all(ad.mul(err, err))

        def val_metric(params):
            pred = dcnet_forward(params, ad.Node(x_va), ad.Node(psi_va), config)
            return float(np.mean((pred.value - y_va) ** 2))

    elif kind == "mlp":
        config = MlpConfig(d=data.d, p=data.p, hidden=tuple(mlp_hidden))
        xt_tr = np.concatenate([x_tr, t_tr], axis=1)
        xt_va = np.concatenate([x_va, t_va], axis=1)

        def make_params(rng):
            return {k: ad.param(v, name=k) for k, v in init_mlp_params(config, rng).items()}

        def build_loss(params, idx, rng):
            pred = mlp_forward(params, ad.Node(xt_tr[idx]), config)
            err = ad.sub(pred, ad.Node(y_tr[idx]))
            return ad.mean_all(ad.mul(err, err))

        def val_metric(params):
            pred = mlp_forward(params, ad.Node(xt_va), config)
            return float(np.mean((pred.value - y_va) ** 2))

    else:
        raise ConfigurationError(f"unknown dose-response kind {kind!r}")

    snapshot, meta = fit(make_params, build_loss, val_metric, len(y_tr), cfg, seed)
    meta.update({"kind": kind, "seed": seed, "n_train": len(y_tr)})
    return DoseResponseModel(kind=kind, config=config, params=snapshot, metadata=meta)


# ---------------------------------------------------------------------
# frozen-model evaluators for policy training
# ---------------------------------------------------------------------


class DcnetDoseEvaluator:
    """Evaluate a frozen dcnet at policy-proposed dosages.

    The covariate side never changes during policy training, so phi(x)
    and the first head layer's covariate contraction are precomputed once
    per split; each optimization step only pays for basis evaluation and
    the small per-layer matmuls.
    """

    def __init__(self, model: DoseResponseModel):
        if model.kind != "dcnet":
            raise StateError(f"expected a dcnet model, got {model.kind!r}")
        self.config = model.config
        self.tspec = model.config.tensor_basis
        K = self.tspec.size
        B = model.params["head.B"]
        self._params = model.params
        self._slots = head_slots(model.config)
        self._R = []
        self._Bb = []
        for slot in self._slots:
            n_in, n_out = slot["n_in"], slot["n_out"]
            R = B[slot["w_lo"]:slot["w_hi"]].reshape(n_in, n_out, K)
            self._R.append(np.ascontiguousarray(R.transpose(0, 2, 1)).reshape(n_in, K * n_out))
            self._Bb.append(np.ascontiguousarray(B[slot["b_lo"]:slot["b_hi"]].T))
        self._K = K

    def prepare(self, x: np.ndarray) -> dict:
        with ad.no_grad():
            nodes = {k: ad.Node(v) for k, v in self._params.items()}
            phi = repr_forward(nodes, ad.Node(x), self.config).value
        slot0 = self._slots[0]
        m1 = (phi @ self._R[0]).reshape(x.shape[0], self._K, slot0["n_out"])
        return {"m1": m1}

    def build(self, t_node: "ad.Node", cache: dict, rows: np.ndarray) -> "ad.Node":
        psi = tensor_basis_node(self.tspec, t_node)
        m1 = ad.Node(cache["m1"][rows])
        z = ad.relu(ad.add(ad.basis_contract(m1, psi), ad.matmul(psi, ad.Node(self._Bb[0]))))
        for i, slot in enumerate(self._slots[1:], start=1):
            batch = z.value.shape[0]
            m = ad.reshape(ad.matmul(z, ad.Node(self._R[i])), (batch, self._K, slot["n_out"]))
            h = ad.add(ad.basis_contract(m, psi), ad.matmul(psi, ad.Node(self._Bb[i])))
            z = h if i == len(self._slots) - 1 else ad.relu(h)
        return ad.reshape(z, (z.value.shape[0],))


class MlpDoseEvaluator:
    """Frozen-MLP counterpart; caches the covariate half of layer one."""

    def __init__(self, model: DoseResponseModel):
        if model.kind != "mlp":
            raise StateError(f"expected an mlp model, got {model.kind!r}")
        self.config = model.config
        self.params = model.params

    def prepare(self, x: np.ndarray) -> dict:
        w0 = self.params["w0"]
        return {"xw": x @ w0[: self.config.d] + self.params["b0"]}

    def build(self, t_node: "ad.Node", cache: dict, rows: np.ndarray) -> "ad.Node":
        w0 = self.params["w0"]
        z = ad.relu(ad.add(ad.Node(cache["xw"][rows]),
                           ad.matmul(t_node, ad.Node(w0[self.config.d:]))))
        depth = len(self.config.hidden)
        for i in range(1, depth):
            z = ad.dense(z, ad.Node(self.params[f"w{i}"]), ad.Node(self.params[f"b{i}"]),
                         activation="relu")
        z = ad.dense(z, ad.Node(self.params[f"w{depth}"]), ad.Node(self.params[f"b{depth}"]))
        return ad.reshape(z, (z.value.shape[0],))


def dose_evaluator(model: DoseResponseModel):
    return DcnetDoseEvaluator(model) if model.kind == "dcnet" else MlpDoseEvaluator(model)
