"""Observational dataset container with a fixed train/val/test split.

On disk a dataset is a single CSV with columns ``x1..xd, t1..tp, y,
split`` where split is one of train/val/test.  Floats are written with
shortest round-trip repr, so save -> load -> save is byte-stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import DataError

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class Dataset:
    x: np.ndarray  # (n, d) covariates
    t: np.ndarray  # (n, p) observed dosages in [0, 1]
    y: np.ndarray  # (n,) outcomes
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 2 or self.t.ndim != 2 or self.y.ndim != 1:
            raise DataError(
                f"bad array ranks: x{self.x.shape}, t{self.t.shape}, y{self.y.shape}"
            )
        n = self.x.shape[0]
        if self.t.shape[0] != n or self.y.shape[0] != n:
            raise DataError(
                f"row counts disagree: x has {n}, t has {self.t.shape[0]}, "
                f"y has {self.y.shape[0]}"
            )
        counted = len(self.train_idx) + len(self.val_idx) + len(self.test_idx)
        if counted != n:
            raise DataError(f"split indices cover {counted} rows of {n}")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def p(self) -> int:
        return self.t.shape[1]

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLIT_NAMES:
            raise DataError(f"unknown split {split!r}, expected one of {SPLIT_NAMES}")
        return {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[split]

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.x[idx], self.t[idx], self.y[idx]

    def to_frame(self) -> pd.DataFrame:
        cols = {f"x{j + 1}": self.x[:, j] for j in range(self.d)}
        cols.update({f"t{j + 1}": self.t[:, j] for j in range(self.p)})
        cols["y"] = self.y
        labels = np.empty(self.n, dtype=object)
        labels[self.train_idx] = "train"
        labels[self.val_idx] = "val"
        labels[self.test_idx] = "test"
        cols["split"] = labels
        return pd.DataFrame(cols)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "Dataset":
        xcols = [c for c in frame.columns if c.startswith("x") and c[1:].isdigit()]
        tcols = [c for c in frame.columns if c.startswith("t") and c[1:].isdigit()]
        for required in ("y", "split"):
            if required not in frame.columns:
                raise DataError(f"dataset is missing the {required!r} column")
        if not xcols or not tcols:
            raise DataError("dataset needs x1.. and t1.. columns")
        xcols.sort(key=lambda c: int(c[1:]))
        tcols.sort(key=lambda c: int(c[1:]))
        labels = frame["split"].to_numpy()
        unknown = set(labels) - set(SPLIT_NAMES)
        if unknown:
            raise DataError(f"unknown split labels: {sorted(unknown)}")
        return cls(
            x=frame[xcols].to_numpy(dtype=np.float64),
            t=frame[tcols].to_numpy(dtype=np.float64),
            y=frame["y"].to_numpy(dtype=np.float64),
            train_idx=np.flatnonzero(labels == "train"),
            val_idx=np.flatnonzero(labels == "val"),
            test_idx=np.flatnonzero(labels == "test"),
        )

    def save_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def load_csv(cls, path) -> "Dataset":
        # round_trip parsing keeps save -> load bit-exact
        return cls.from_frame(pd.read_csv(path, float_precision="round_trip"))


def make_split_indices(n: int, seed_rng: np.random.Generator,
                       fractions=(0.64, 0.16)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffled 64/16/20 split (remainder goes to test).

    Indices come back sorted within each split so that a dataset loaded
    from CSV (where membership is stored as a label) is indistinguishable
    from the in-memory original.
    """
    perm = seed_rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return (
        np.sort(perm[:n_train]),
        np.sort(perm[n_train:n_train + n_val]),
        np.sort(perm[n_train + n_val:]),
    )
