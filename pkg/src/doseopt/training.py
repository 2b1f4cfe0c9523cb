"""Shared mini-batch fitting loop: LR grid, Adam, early stopping.

Both nuisance models (dose-response and propensity flow) train the same
way: for each learning rate in a grid, reinitialize from a per-candidate
seed, run Adam on shuffled mini-batches, track the best validation metric
with patience-based early stopping, and finally keep the candidate with
the lowest validation metric.  Runs that go non-finite are marked failed
and excluded; if every candidate fails the fit raises NumericalError.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NumericalError

LR_GRID = (1e-4, 5e-4, 1e-3, 5e-3, 1e-2)


@dataclass
class FitConfig:
    batch_size: int
    max_epochs: int
    patience: int
    lr_grid: tuple[float, ...] = LR_GRID


def fit(make_params, build_loss, val_metric, n_train: int, cfg: FitConfig, seed: int):
    """Run the LR grid and return (best_params, metadata).

    make_params(rng)             -> dict[str, Node] of fresh trainable leaves
    build_loss(params, idx, rng) -> scalar loss Node for mini-batch rows idx
                                    (rng for e.g. noise regularization)
    val_metric(params)           -> float, lower is better (full val set)
    """
    children = np.random.SeedSequence(seed).spawn(len(cfg.lr_grid))
    candidates = []
    for lr, child in zip(cfg.lr_grid, children):
        rng = np.random.default_rng(child)
        params = make_params(rng)
        nodes = list(params.values())
        opt = ad.Adam(nodes, lr=lr)
        best_val = math.inf
        best_snapshot = {k: p.value.copy() for k, p in params.items()}
        stale = 0
        skipped = 0
        diverged = False
        epochs_run = 0
        for epoch in range(cfg.max_epochs):
            perm = rng.permutation(n_train)
            stepped = 0
            for lo in range(0, n_train, cfg.batch_size):
                idx = perm[lo:lo + cfg.batch_size]
                loss = build_loss(params, idx, rng)
                if not np.isfinite(loss.value):
                    skipped += 1
                    continue
                ad.backward(loss, nodes)
                opt.step()
                stepped += 1
            epochs_run = epoch + 1
            if stepped == 0:
                diverged = True
                break
            with ad.no_grad():
                v = float(val_metric(params))
            if not math.isfinite(v):
                diverged = True
                break
            if v < best_val:
                best_val = v
                best_snapshot = {k: p.value.copy() for k, p in params.items()}
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        candidates.append({
            "lr": lr,
            "best_val": best_val if math.isfinite(best_val) else None,
            "epochs_run": epochs_run,
            "diverged": diverged,
            "skipped_steps": skipped + opt.skipped_updates,
            "snapshot": None if diverged else best_snapshot,
        })

    usable = [c for c in candidates if not c["diverged"] and c["best_val"] is not None]
    if not usable:
        raise NumericalError(
            "every learning-rate candidate diverged; check the data scaling"
        )
    winner = min(usable, key=lambda c: c["best_val"])
    meta = {
        "selected_lr": winner["lr"],
        "best_val": winner["best_val"],
        "epochs_run": winner["epochs_run"],
        "candidates": [
            {k: v for k, v in c.items() if k != "snapshot"} for c in candidates
        ],
    }
    return winner["snapshot"], meta


def he_uniform(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    """Kaiming-style fan-in uniform init for relu layers."""
    bound = math.sqrt(6.0 / n_in)
    return rng.uniform(-bound, bound, size=(n_in, n_out))
