"""Dosage policy learning against frozen nuisance models.

A small MLP maps covariates to dosage proposals in (0, 1)^p.  It is
trained by stochastic gradient descent-ascent on a per-sample Lagrangian:
the policy parameters descend on

    L = -(1/n) sum_i [ mu_hat(pi(x_i), x_i)
                       - lambda_i max(eps - f_hat(pi(x_i), x_i), 0) ]

while the multipliers lambda_i ascend on L (projected back to [0, inf)
after every step), so the penalty grows exactly on samples whose proposed
dosage falls below the density threshold eps and is flat — no pull in
either direction — once the constraint holds.  Each sample ends up pinned
at the most valuable dosage whose estimated density still clears the
floor.  The naive variant drops the penalty term.

Hyperparameters (policy LR, multiplier init) come from a small random
search; the final model is the best of K restarts under a constrained
validation score: the sum of predicted outcomes over validation samples
whose proposal clears the threshold.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (ConfigurationError, DataError, DimensionError, DomainError,
                     NumericalError, StateError)
from .training import LR_GRID, he_uniform


@dataclass(frozen=True)
class PolicyConfig:
    d: int
    p: int
    mode: str = "reliable"
    hidden: tuple = (50, 50)
    eps_bar: float | None = None        # explicit threshold; None -> train quantile
    quantile: float = 0.05
    restarts: int = 5
    search_draws: int = 10
    lr_grid: tuple = LR_GRID
    lambda_lr: float = 0.01
    lambda_init_range: tuple = (1.0, 5.0)
    batch_size: int = 512
    max_epochs: int = 400
    patience: int = 20

    def __post_init__(self):
        if self.mode not in ("reliable", "naive"):
            raise ConfigurationError(f"unknown policy mode {self.mode!r}")
        if self.d < 1 or self.p < 1:
            raise ConfigurationError("d and p must be positive")
        if self.restarts < 1 or self.search_draws < 1:
            raise ConfigurationError("need at least one restart and one search draw")
        if self.eps_bar is not None and self.eps_bar < 0:
            raise ConfigurationError("density threshold must be nonnegative")
        if not 0.0 < self.quantile < 1.0:
            raise ConfigurationError(f"quantile must lie in (0, 1), got {self.quantile}")
        lo, hi = self.lambda_init_range
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"bad multiplier init range ({lo}, {hi})")


def compute_threshold(gps_values, quantile: float = 0.05) -> float:
    """Density threshold: linear-interpolation quantile of train-set values."""
    v = np.asarray(gps_values, dtype=np.float64).ravel()
    if v.size == 0:
        raise DataError("cannot take a quantile of zero density values")
    if not 0.0 < quantile < 1.0:
        raise DomainError(f"quantile must lie in (0, 1), got {quantile}")
    return float(np.quantile(v, quantile))


# ---------------------------------------------------------------------
# policy network
# ---------------------------------------------------------------------


def init_policy_params(config: PolicyConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    sizes = [config.d, *config.hidden, config.p]
    last = len(sizes) - 2
    params = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if i == last:
            # the sigmoid output layer gets the plain 1/sqrt(fan_in) scale:
            # restarts must start from genuinely different proposals (or they
            # all roll into the same local optimum and the restart machinery
            # is moot), but the ReLU-gain scale saturates the squash, and a
            # proposal parked on a flat of both the outcome head and the
            # density cannot be pulled anywhere by either gradient
            params[f"w{i}"] = he_uniform(rng, n_in, n_out) / math.sqrt(2.0)
        else:
            params[f"w{i}"] = he_uniform(rng, n_in, n_out)
        params[f"b{i}"] = np.zeros(n_out)
    return params


def policy_forward(params: dict, x) -> "ad.Node":
    """Covariates -> dosage proposals, strictly inside (0, 1)^p."""
    z = ad.as_node(x)
    depth = len(params) // 2 - 1
    for i in range(depth):
        z = ad.dense(z, params[f"w{i}"], params[f"b{i}"], activation="relu")
    return ad.dense(z, params[f"w{depth}"], params[f"b{depth}"], activation="sigmoid")


# ---------------------------------------------------------------------
# objective pieces (array reference versions, used in tests and logs)
# ---------------------------------------------------------------------


def policy_loss(mu_hat, gps_hat=None, lam=None, eps_bar=None) -> float:
    """Batch training loss; without a density model this is just -mean(mu).

    The penalized form charges lambda_i times the density shortfall
    max(eps_bar - f_i, 0): ascending in lambda raises the penalty where the
    proposal is unreliable, theta-descent trades predicted outcome against
    staying above the threshold, and proposals already clearing it carry no
    penalty at all — so the multipliers never drag a feasible proposal
    toward high-density regions it has no reason to visit.
    """
    mu = np.asarray(mu_hat, dtype=np.float64)
    if gps_hat is None:
        return float(-np.mean(mu))
    f = np.asarray(gps_hat, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if not (mu.shape == f.shape == lam.shape):
        raise DimensionError(
            f"mismatched lengths: mu {mu.shape}, density {f.shape}, lambda {lam.shape}"
        )
    return float(-np.mean(mu - lam * np.maximum(eps_bar - f, 0.0)))


def validation_score(mu_hat, gps_hat=None, eps_bar=None) -> float:
    """Model-selection score: sum of predicted outcomes over samples whose
    proposal clears the density threshold (all samples when no threshold)."""
    mu = np.asarray(mu_hat, dtype=np.float64)
    if gps_hat is None or eps_bar is None:
        return float(mu.sum())
    gate = np.asarray(gps_hat, dtype=np.float64) >= eps_bar
    return float(mu[gate].sum())


class FunctionEvaluator:
    """Adapt a closed-form dosage function to the frozen-evaluator interface.

    The callable gets the dosage node (batch, p) and must return a (batch,)
    node built from recorded ops; covariates are ignored.  Used for sanity
    studies where the nuisance surfaces are known analytically.
    """

    def __init__(self, fn):
        self.fn = fn

    def prepare(self, x: np.ndarray):
        return None

    def build(self, t_node: "ad.Node", cache, rows: np.ndarray) -> "ad.Node":
        return self.fn(t_node)


def evaluate_policy(params: dict, x: np.ndarray, mu_eval, gps_eval=None):
    """One-shot frozen-model evaluation of a parameter set on covariates x.

    Returns (t, mu, f) arrays; f is None without a density evaluator.
    """
    rows = np.arange(x.shape[0])
    with ad.no_grad():
        t = policy_forward(params, ad.Node(x))
        mu = mu_eval.build(t, mu_eval.prepare(x), rows).value
        f = None
        if gps_eval is not None:
            f = gps_eval.build(t, gps_eval.prepare(x), rows).value
    return t.value, mu, f


# ---------------------------------------------------------------------
# descent-ascent training
# ---------------------------------------------------------------------


class _Problem:
    """Shared read-only state (data + prepared caches) for one training job."""

    def __init__(self, x_tr, x_va, mu_eval, gps_eval, config: PolicyConfig,
                 eps_bar: float | None):
        self.config = config
        self.x_tr = x_tr
        self.x_va = x_va
        self.mu_eval = mu_eval
        self.gps_eval = gps_eval
        self.eps_bar = eps_bar
        self.mu_tr = mu_eval.prepare(x_tr)
        self.mu_va = mu_eval.prepare(x_va)
        self.reliable = config.mode == "reliable"
        self.gps_tr = gps_eval.prepare(x_tr) if self.reliable else None
        self.gps_va = gps_eval.prepare(x_va) if self.reliable else None
        self._va_rows = np.arange(x_va.shape[0])

    def val_metrics(self, params) -> tuple[float, float]:
        """(selection score, constraint-satisfaction rate) on the val split."""
        with ad.no_grad():
            t = policy_forward(params, ad.Node(self.x_va))
            mu = self.mu_eval.build(t, self.mu_va, self._va_rows).value
            if not self.reliable:
                return float(mu.sum()), math.nan
            f = self.gps_eval.build(t, self.gps_va, self._va_rows).value
        rate = float(np.mean(f >= self.eps_bar))
        return validation_score(mu, f, self.eps_bar), rate


def _run(problem: _Problem, lr: float, lambda_init: float, seed) -> dict:
    cfg = problem.config
    rng = np.random.default_rng(seed)
    params = {k: ad.param(v, name=k) for k, v in
              init_policy_params(cfg, rng).items()}
    nodes = list(params.values())
    opt = ad.Adam(nodes, lr=lr)
    n = problem.x_tr.shape[0]
    lam = np.full(n, float(lambda_init)) if problem.reliable else None
    lam_opt = ad.ScatteredAdam(n, lr=cfg.lambda_lr) if problem.reliable else None

    best_key = None
    best_score = -math.inf
    best_snapshot = {k: p.value.copy() for k, p in params.items()}
    best_rate = math.nan
    stale = 0
    skipped = 0
    diverged = False
    epochs_run = 0
    epoch_loss = math.nan
    log: list[dict] = []

    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            t = policy_forward(params, ad.Node(problem.x_tr[idx]))
            mu = problem.mu_eval.build(t, problem.mu_tr, idx)
            if problem.reliable:
                f = problem.gps_eval.build(t, problem.gps_tr, idx)
                lam_node = ad.param(lam[idx], name="lam")
                shortfall = ad.relu(ad.sub(ad.as_node(problem.eps_bar), f))
                loss = ad.neg(ad.mean_all(ad.sub(mu, ad.mul(lam_node, shortfall))))
            else:
                loss = ad.neg(ad.mean_all(mu))
            if not np.isfinite(loss.value):
                skipped += 1
                continue
            ad.backward(loss, nodes)
            opt.step()
            if problem.reliable:
                # ascend L in lambda, then project back onto [0, inf).  The
                # shortfall gradient is nonnegative, so multipliers ratchet
                # up on samples missing the density floor and rest untouched
                # on samples that clear it.
                lam = lam_opt.step_at(lam, idx, -lam_node.grad)
                np.maximum(lam, 0.0, out=lam)
            losses.append(float(loss.value))
        epochs_run = epoch + 1
        if not losses:
            diverged = True
            break
        epoch_loss = float(np.mean(losses))
        score, rate = problem.val_metrics(params)
        log.append({
            "epoch": epochs_run,
            "train_loss": epoch_loss,
            "mean_lambda": float(lam.mean()) if problem.reliable else 0.0,
            "constraint_rate": rate,
            "val_score": score,
        })
        if not math.isfinite(score):
            diverged = True
            break
        # same ranking as restart selection: feasibility share first, gated
        # score second.  Stopping on the raw gated sum alone would abort a
        # run while the multipliers are still herding proposals inside the
        # threshold, because samples entering the gate can drag the sum down.
        key = (1.0 if math.isnan(rate) else rate, score)
        if best_key is None or key > best_key:
            best_key = key
            best_score = score
            best_snapshot = {k: p.value.copy() for k, p in params.items()}
            best_rate = rate
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    if skipped:
        warnings.warn(f"skipped {skipped} non-finite policy training steps")
    return {
        "params": None if diverged else best_snapshot,
        "val_score": None if diverged else best_score,
        "constraint_rate": best_rate,
        "final_train_loss": epoch_loss,
        "epochs_run": epochs_run,
        "skipped_steps": skipped + opt.skipped_updates,
        "diverged": diverged,
        "lr": lr,
        "lambda_init": lambda_init,
        "lam": lam,
        "log": log,
    }


def gda_run(x_train, x_val, mu_eval, gps_eval, config: PolicyConfig,
            lr: float, lambda_init: float, seed) -> dict:
    """One descent-ascent training run with fixed hyperparameters.

    Exposed separately from :func:`train_policy` so single trajectories can
    be studied (and because restarts are embarrassingly parallel).
    """
    problem = _Problem(np.asarray(x_train, dtype=np.float64),
                       np.asarray(x_val, dtype=np.float64),
                       mu_eval, gps_eval, config, config.eps_bar)
    if problem.reliable and problem.eps_bar is None:
        raise ConfigurationError("reliable mode needs an explicit eps_bar here")
    return _run(problem, lr, lambda_init, seed)


def _pick_key(run: dict) -> tuple:
    """Ranking key for one training run, larger is better.

    Feasibility comes first: a run is compared by the share of validation
    proposals that clear the density threshold, so a run that satisfies the
    constraint everywhere always beats one that strands samples outside the
    threshold, no matter how its gated value sum compares.  (The gated sum
    alone cannot order such runs: a fully violating run sums zero samples,
    which would beat any feasible run whose predicted outcomes are negative.)
    Within a feasibility tier the gated validation score decides, then the
    lower final training loss.  Naive runs carry no threshold, so every
    sample trivially clears it and the tier is constant.
    """
    rate = run["constraint_rate"]
    return (1.0 if math.isnan(rate) else rate,
            run["val_score"], -run["final_train_loss"])


def _pick_best(runs: list[dict]) -> int | None:
    best = None
    for i, r in enumerate(runs):
        if r.get("diverged", False) or r.get("duplicate", False):
            continue
        if best is None or _pick_key(r) > _pick_key(runs[best]):
            best = i
    return best


def _check_nuisance_shape(evaluator, data, what: str):
    cfg = getattr(evaluator, "config", None)
    if cfg is None:
        return
    if getattr(cfg, "d", data.d) != data.d or getattr(cfg, "p", data.p) != data.p:
        raise ConfigurationError(
            f"{what} model was trained for d={cfg.d}, p={cfg.p} "
            f"but the dataset has d={data.d}, p={data.p}"
        )


def train_policy(data, mu_eval, gps_eval, config: PolicyConfig, seed: int) -> "PolicyModel":
    """Learn a dosage policy on one dataset.

    mu_eval / gps_eval follow the frozen-evaluator interface
    (prepare(x) -> cache, build(t_node, cache, rows) -> (batch,) node);
    gps_eval may be None in naive mode.  Hyperparameters are picked by
    random search, then the best of ``config.restarts`` fresh runs under
    the constrained validation score is selected.
    """
    if config.d != data.d or config.p != data.p:
        raise ConfigurationError(
            f"config is for d={config.d}, p={config.p} but the dataset "
            f"has d={data.d}, p={data.p}"
        )
    reliable = config.mode == "reliable"
    if reliable and gps_eval is None:
        raise ConfigurationError("reliable mode needs a trained density model")
    _check_nuisance_shape(mu_eval, data, "dose-response")
    if reliable:
        _check_nuisance_shape(gps_eval, data, "density")

    x_tr, t_tr, _ = data.subset("train")
    x_va, _, _ = data.subset("val")
    problem = _Problem(x_tr, x_va, mu_eval, gps_eval, config, config.eps_bar)
    if reliable and problem.eps_bar is None:
        with ad.no_grad():
            f_obs = gps_eval.build(ad.Node(t_tr), problem.gps_tr,
                                   np.arange(len(t_tr))).value
        problem.eps_bar = compute_threshold(f_obs, config.quantile)

    children = np.random.SeedSequence(seed).spawn(1 + config.search_draws + config.restarts)
    hp_rng = np.random.default_rng(children[0])

    # random search over (lr, lambda_init); repeated draws are not retrained
    # (in naive mode the multiplier is unused, so the LR alone identifies a draw)
    search: list[dict] = []
    seen = set()
    for i in range(config.search_draws):
        lr = float(hp_rng.choice(np.asarray(config.lr_grid)))
        lam0 = float(hp_rng.uniform(*config.lambda_init_range))
        key = lr if not reliable else (lr, lam0)
        if key in seen:
            search.append({"lr": lr, "lambda_init": lam0, "duplicate": True,
                           "diverged": False, "val_score": None,
                           "final_train_loss": math.nan, "epochs_run": 0})
            continue
        seen.add(key)
        run = _run(problem, lr, lam0, children[1 + i])
        run["duplicate"] = False
        search.append(run)
    best_draw = _pick_best(search)
    if best_draw is None:
        raise NumericalError("every hyperparameter draw diverged")
    lr_star = search[best_draw]["lr"]
    lam0_star = search[best_draw]["lambda_init"]

    restarts = []
    logs: list[dict] = []
    for k in range(config.restarts):
        run = _run(problem, lr_star, lam0_star, children[1 + config.search_draws + k])
        for row in run.pop("log"):
            logs.append({"restart": k, **row})
        run.pop("lam")
        restarts.append(run)
    selected = _pick_best(restarts)
    if selected is None:
        raise NumericalError("every policy restart diverged")
    keys = [_pick_key(r) for r in restarts if not r["diverged"]]
    assert _pick_key(restarts[selected]) == max(keys)

    metadata = {
        "seed": seed,
        "n_train": int(x_tr.shape[0]),
        "quantile": None if config.eps_bar is not None or not reliable else config.quantile,
        "search": [
            {k: v for k, v in s.items() if k not in ("params", "lam", "log")}
            for s in search
        ],
        "selected_lr": lr_star,
        "selected_lambda_init": lam0_star,
    }
    return PolicyModel(config=config, eps_bar=problem.eps_bar, restarts=restarts,
                       selected=selected, metadata=metadata, logs=logs)


# ---------------------------------------------------------------------
# trained-policy container
# ---------------------------------------------------------------------


@dataclass
class PolicyModel:
    """All restarts of one policy training plus the selected index.

    ``logs`` holds per-epoch training rows (restart, epoch, train_loss,
    mean_lambda, constraint_rate, val_score); they are written to a
    separate CSV by the command-line layer, not into the checkpoint.
    """

    config: PolicyConfig
    eps_bar: float | None
    restarts: list[dict]
    selected: int | None
    metadata: dict
    logs: list[dict] = field(default_factory=list, repr=False, compare=False)

    @property
    def params(self) -> dict[str, np.ndarray]:
        if self.selected is None or not self.restarts:
            raise StateError("policy has no trained restart to predict with")
        params = self.restarts[self.selected]["params"]
        if params is None:
            raise StateError("selected restart holds no parameters")
        return params

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.config.d:
            raise DimensionError(
                f"expected {self.config.d} covariate columns, got {x.shape[1]}"
            )
        with ad.no_grad():
            nodes = {k: ad.Node(v) for k, v in self.params.items()}
            return policy_forward(nodes, ad.Node(x)).value

    def save(self, path) -> None:
        doc = {
            "config": asdict(self.config),
            "eps_bar": self.eps_bar,
            "selected": self.selected,
            "restarts": [
                {
                    "params": None if r["params"] is None
                    else ad.params_to_payload(r["params"]),
                    **{k: v for k, v in r.items() if k != "params"},
                }
                for r in self.restarts
            ],
            "metadata": self.metadata,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path) -> "PolicyModel":
        with open(Path(path)) as fh:
            doc = json.load(fh)
        cfgdict = dict(doc["config"])
        for key in ("hidden", "lr_grid", "lambda_init_range"):
            cfgdict[key] = tuple(cfgdict[key])
        restarts = []
        for r in doc["restarts"]:
            r = dict(r)
            r["params"] = None if r["params"] is None else ad.payload_to_params(r["params"])
            restarts.append(r)
        return cls(config=PolicyConfig(**cfgdict), eps_bar=doc["eps_bar"],
                   restarts=restarts, selected=doc["selected"],
                   metadata=doc["metadata"])


def predict_dosage(model: PolicyModel, x: np.ndarray) -> np.ndarray:
    """Dosage proposals in (0, 1)^p for covariates x, one row per sample."""
    return model.predict(x)
