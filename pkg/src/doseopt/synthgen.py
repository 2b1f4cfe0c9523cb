"""Semi-synthetic dosage data with a known dose-response surface.

Covariates are uniform on [0, 1]^d (or supplied via CSV); each dosage
dimension j gets a covariate-dependent optimum

    eta_j    = v1_j . x / (2 v2_j . x)          (clamped to [-10, 10])
    ttilde_j = 1 / (20 + 20 exp(-eta_j)) + 0.2  (so ttilde in (0.2, 0.25))

and observed dosages are drawn from Beta(alpha + 1, q_j) whose mode sits
exactly at ttilde_j; alpha controls how concentrated (confounded) the
assignment is, with alpha = 0 giving uniform dosages.  Outcomes follow

    mu(t, x) = 2 + (2/p) sum_j [(sigma(eta_j) + 0.5) cos(3 pi (t_j - ttilde_j))
               - 0.01 (t_j - ttilde_j)^2] - 0.1 kappa prod_j (t_j - ttilde_j)^2

plus Gaussian noise, so ttilde(x) is the exact optimal policy and both
mu and the assignment density are available in closed form for
evaluation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from scipy.special import betainc, betaincinv, betaln

from .dataset import Dataset, make_split_indices
from .errors import ConfigurationError, DataError

ETA_CLAMP = 10.0
_T_FLOOR = 1e-9


@dataclass
class SimConfig:
    n: int = 5000
    d: int = 10
    p: int = 2
    alpha: float = 2.0
    kappa: float = 1.0
    noise_sd: float = 0.5
    covariates: str = "uniform"  # "uniform" or a path to a CSV of width d

    def __post_init__(self):
        if self.n < 10:
            raise ConfigurationError(f"n must be at least 10, got {self.n}")
        if self.d < 1 or self.p < 1:
            raise ConfigurationError(f"need d >= 1 and p >= 1, got d={self.d}, p={self.p}")
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be non-negative, got {self.alpha}")
        if self.noise_sd <= 0:
            raise ConfigurationError(f"noise_sd must be positive, got {self.noise_sd}")


@dataclass
class SimOracle:
    """Ground truth for one generated dataset: directions plus constants."""

    v1: np.ndarray  # (p, d) unit rows
    v2: np.ndarray  # (p, d) unit rows
    alpha: float
    kappa: float
    noise_sd: float

    @property
    def p(self) -> int:
        return self.v1.shape[0]

    @property
    def d(self) -> int:
        return self.v1.shape[1]

    # -- building blocks ------------------------------------------------
    def eta(self, x: np.ndarray) -> np.ndarray:
        """Covariate scores, one per dosage dimension: (B, d) -> (B, p)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        num = x @ self.v1.T
        den = 2.0 * (x @ self.v2.T)
        den = np.where(np.abs(den) < 1e-8, np.copysign(1e-8, den), den)
        return np.clip(num / den, -ETA_CLAMP, ETA_CLAMP)

    def tilde_t(self, x: np.ndarray) -> np.ndarray:
        """Per-sample optimal dosages in (0.2, 0.25)."""
        return compute_tilde_t(self.eta(x))

    def mu(self, t: np.ndarray, x: np.ndarray) -> np.ndarray:
        """True dose-response surface, vectorized over rows."""
        t = np.atleast_2d(np.asarray(t, dtype=np.float64))
        eta = self.eta(x)
        tt = compute_tilde_t(eta)
        delta = t - tt
        sig = 1.0 / (1.0 + np.exp(-eta))
        per_dim = (sig + 0.5) * np.cos(3.0 * np.pi * delta) - 0.01 * delta ** 2
        p = t.shape[1]
        return (
            2.0
            + (2.0 / p) * per_dim.sum(axis=1)
            - 0.1 * self.kappa * np.prod(delta ** 2, axis=1)
        )

    def gps(self, t: np.ndarray, x: np.ndarray) -> np.ndarray:
        """True generalized propensity density of t given x (product of Betas)."""
        t = np.clip(np.atleast_2d(np.asarray(t, dtype=np.float64)), _T_FLOOR, 1 - _T_FLOOR)
        a, q = beta_params(self.alpha, self.tilde_t(x))
        logpdf = (a - 1.0) * np.log(t) + (q - 1.0) * np.log1p(-t) - betaln(a, q)
        return np.exp(logpdf.sum(axis=1))

    def gps_cdf(self, t: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Per-dimension Beta CDFs at t (B, p); handy for KS-style checks."""
        t = np.atleast_2d(np.asarray(t, dtype=np.float64))
        a, q = beta_params(self.alpha, self.tilde_t(x))
        return betainc(a, q, np.clip(t, 0.0, 1.0))

    def optimal_policy(self, x: np.ndarray) -> np.ndarray:
        return self.tilde_t(x)

    # -- (de)serialization ----------------------------------------------
    def to_metadata(self) -> dict:
        return {
            "v1": self.v1.tolist(),
            "v2": self.v2.tolist(),
            "alpha": self.alpha,
            "kappa": self.kappa,
            "noise_sd": self.noise_sd,
        }

    @classmethod
    def from_metadata(cls, meta: dict) -> "SimOracle":
        return cls(
            v1=np.array(meta["v1"], dtype=np.float64),
            v2=np.array(meta["v2"], dtype=np.float64),
            alpha=float(meta["alpha"]),
            kappa=float(meta["kappa"]),
            noise_sd=float(meta["noise_sd"]),
        )


def compute_tilde_t(eta: np.ndarray) -> np.ndarray:
    """Map scores to optimal dosages: 1/(20 + 20 e^-eta) + 0.2."""
    return 1.0 / (20.0 + 20.0 * np.exp(-np.asarray(eta, dtype=np.float64))) + 0.2


def beta_params(alpha: float, tilde_t: np.ndarray) -> tuple[float, np.ndarray]:
    """Beta(a, q) parameters whose mode is exactly tilde_t.

    a = alpha + 1 and q = (a - 1)/tilde_t - a + 2, which plugs into the
    Beta mode formula (a - 1)/(a + q - 2) to give tilde_t identically.
    alpha = 0 collapses to Beta(1, 1), the uniform distribution.
    """
    a = float(alpha) + 1.0
    q = (a - 1.0) / np.asarray(tilde_t, dtype=np.float64) - a + 2.0
    return a, q


def generate(config: SimConfig, seed: int) -> tuple[Dataset, SimOracle]:
    """Draw one dataset plus its ground-truth oracle.

    Deterministic in (config, seed): independent child streams are used
    for (directions, covariates, dosages, outcome noise, split shuffle),
    in that order, so e.g. switching the covariate source does not change
    the dosage draws.
    """
    ss = np.random.SeedSequence(seed)
    rng_dirs, rng_cov, rng_dose, rng_noise, rng_split = (
        np.random.default_rng(child) for child in ss.spawn(5)
    )

    v1 = rng_dirs.standard_normal((config.p, config.d))
    v2 = rng_dirs.standard_normal((config.p, config.d))
    v1 /= np.linalg.norm(v1, axis=1, keepdims=True)
    v2 /= np.linalg.norm(v2, axis=1, keepdims=True)
    oracle = SimOracle(v1=v1, v2=v2, alpha=config.alpha, kappa=config.kappa,
                       noise_sd=config.noise_sd)

    if config.covariates == "uniform":
        x = rng_cov.random((config.n, config.d))
    else:
        x = _load_covariates(config.covariates, config.n, config.d)

    a, q = beta_params(config.alpha, oracle.tilde_t(x))
    u = rng_dose.random((config.n, config.p))
    t = betaincinv(a, q, u)  # inverse-CDF sampling, one uniform per entry

    y = oracle.mu(t, x) + rng_noise.normal(0.0, config.noise_sd, size=config.n)

    train_idx, val_idx, test_idx = make_split_indices(config.n, rng_split)
    data = Dataset(x=x, t=t, y=y, train_idx=train_idx, val_idx=val_idx, test_idx=test_idx)
    return data, oracle


def _load_covariates(path: str, n: int, d: int) -> np.ndarray:
    frame = pd.read_csv(path)
    if frame.shape[1] != d:
        raise DataError(
            f"covariate file {path} has {frame.shape[1]} columns, config expects d={d}"
        )
    if frame.shape[0] < n:
        raise DataError(
            f"covariate file {path} has {frame.shape[0]} rows, config expects n={n}"
        )
    x = frame.to_numpy(dtype=np.float64)[:n]
    if not np.all(np.isfinite(x)):
        raise DataError(f"covariate file {path} contains non-finite values")
    return x


# ---------------------------------------------------------------------
# dataset + oracle bundle I/O
# ---------------------------------------------------------------------


def dataset_metadata(config: SimConfig, seed: int, oracle: SimOracle) -> dict:
    return {"config": asdict(config), "seed": seed, "oracle": oracle.to_metadata()}


def oracle_from_metadata(meta: dict) -> SimOracle:
    return SimOracle.from_metadata(meta["oracle"])
