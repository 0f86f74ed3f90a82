"""Balanced panel containers, CSV ingestion and model transformations."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd


class PanelError(ValueError):
    """Raised for malformed or unbalanced panel input."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PanelDataset:
    """Balanced N x T panel with outcome ``y`` (N, T) and regressors ``X`` (N, T, K).

    Arrays are copied and made read-only on construction.
    """

    y: np.ndarray
    X: np.ndarray
    unit_ids: tuple = ()
    time_ids: tuple = ()
    x_names: tuple = ()

    def __post_init__(self):
        y = _frozen(self.y)
        X = _frozen(self.X)
        if y.ndim != 2:
            raise PanelError(f"y must be 2-d (N, T), got shape {y.shape}")
        if X.ndim == 2:
            X = _frozen(X[:, :, None])
        if X.ndim != 3 or X.shape[:2] != y.shape:
            raise PanelError(f"X shape {X.shape} does not match y shape {y.shape}")
        N, T, K = X.shape
        if N < 2 or T < 1 or K < 1:
            raise PanelError(f"need N >= 2, T >= 1, K >= 1 (got N={N}, T={T}, K={K})")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise PanelError("panel contains non-finite values")
        unit_ids = tuple(self.unit_ids) or tuple(str(i + 1) for i in range(N))
        time_ids = tuple(self.time_ids) or tuple(str(t + 1) for t in range(T))
        x_names = tuple(self.x_names) or tuple(f"x{k + 1}" for k in range(K))
        if len(unit_ids) != N or len(time_ids) != T or len(x_names) != K:
            raise PanelError("label lengths do not match panel dimensions")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "unit_ids", unit_ids)
        object.__setattr__(self, "time_ids", time_ids)
        object.__setattr__(self, "x_names", x_names)

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def K(self) -> int:
        return self.X.shape[2]

    def replace(self, **changes) -> "PanelDataset":
        kw = dict(y=self.y, X=self.X, unit_ids=self.unit_ids,
                  time_ids=self.time_ids, x_names=self.x_names)
        kw.update(changes)
        return PanelDataset(**kw)


@dataclass(frozen=True)
class GroupAssignment:
    """Group labels for N units.

    ``labels`` are 0-based integers in ``range(G)``; JSON and CLI output use
    1-based labels.
    """

    labels: np.ndarray
    G: int = field(default=0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
            labels = np.asarray(labels, dtype=float)
            if labels.ndim != 1 or np.any(labels != np.round(labels)):
                raise ValueError("labels must be a 1-d integer sequence")
        labels = labels.astype(np.int64)
        labels.setflags(write=False)
        G = int(self.G) if self.G else int(labels.max()) + 1
        if G < 1:
            raise ValueError("G must be >= 1")
        if labels.min() < 0 or labels.max() >= G:
            raise ValueError(f"labels must lie in 0..{G - 1}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "G", G)

    @property
    def N(self) -> int:
        return self.labels.shape[0]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.G)

    def all_nonempty(self) -> bool:
        return bool(np.all(self.sizes() > 0))


def canonical_labels(labels: np.ndarray, G: int | None = None) -> np.ndarray:
    """Relabel groups by order of first occurrence (0, 1, ...)."""
    labels = np.asarray(labels)
    G = G or int(labels.max()) + 1
    mapping = -np.ones(G, dtype=np.int64)
    nxt = 0
    for g in labels:
        if mapping[g] < 0:
            mapping[g] = nxt
            nxt += 1
    # groups absent from labels keep the tail slots
    for g in range(G):
        if mapping[g] < 0:
            mapping[g] = nxt
            nxt += 1
    return mapping[labels]


def group_dummy_matrix(gamma: GroupAssignment | np.ndarray, K: int,
                       G: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return the N x G dummy matrix D and its expansion D kron I_K (NK x GK)."""
    if isinstance(gamma, GroupAssignment):
        labels, G = gamma.labels, gamma.G
    else:
        labels = np.asarray(gamma, dtype=np.int64)
        G = G or int(labels.max()) + 1
    D = np.zeros((labels.shape[0], G))
    D[np.arange(labels.shape[0]), labels] = 1.0
    return D, np.kron(D, np.eye(K))


def within_transform(d: PanelDataset) -> PanelDataset:
    """Subtract each unit's time mean from y and every regressor."""
    if d.T < 2:
        raise PanelError("within transformation needs T >= 2")
    y = d.y - d.y.mean(axis=1, keepdims=True)
    X = d.X - d.X.mean(axis=1, keepdims=True)
    return d.replace(y=y, X=X)


def augment_time_dummies(d: PanelDataset) -> PanelDataset:
    """Append T-1 time dummies (first period is the base) to the regressors."""
    if d.T < 2:
        raise PanelError("time dummies need T >= 2")
    dummies = np.zeros((d.N, d.T, d.T - 1))
    for tau in range(d.T - 1):
        dummies[:, tau + 1, tau] = 1.0
    names = d.x_names + tuple(f"time_{t}" for t in d.time_ids[1:])
    return d.replace(X=np.concatenate([d.X, dummies], axis=2), x_names=names)


def _sort_key(values: Sequence[str]):
    try:
        nums = [float(v) for v in values]
    except ValueError:
        return sorted(values)
    order = np.argsort(nums, kind="stable")
    return [values[i] for i in order]


def load_panel(path: str | Path, unit: str = "unit", time: str = "time", y: str = "y",
               x: Sequence[str] | None = None) -> PanelDataset:
    """Read a long-format CSV (one row per unit-period) into a PanelDataset.

    Regressor columns default to every column named ``x<k>``, in numeric order.
    Rows may come in any order; the result is sorted by (unit, time).
    """
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    df.columns = [c.strip() for c in df.columns]
    if df.empty:
        raise PanelError("empty panel")
    for col in (unit, time, y):
        if col not in df.columns:
            raise PanelError(f"missing column '{col}'")
    if x is None:
        x = sorted((c for c in df.columns if c.startswith("x") and c[1:].isdigit()),
                   key=lambda c: int(c[1:]))
    x = list(x)
    if not x:
        raise PanelError("no regressor columns found")
    for col in x:
        if col not in df.columns:
            raise PanelError(f"missing column '{col}'")

    df[unit] = df[unit].str.strip()
    df[time] = df[time].str.strip()
    dup = df.duplicated([unit, time])
    if dup.any():
        row = df[dup].iloc[0]
        raise PanelError(f"duplicate cell ({row[unit]},{row[time]})")

    values = {}
    for col in [y] + x:
        # exact decimal parsing (pandas' fast parser is not round-trip exact)
        num = np.empty(len(df))
        for i, text in enumerate(df[col]):
            try:
                num[i] = float(text)
            except ValueError:
                num[i] = np.nan
            if not np.isfinite(num[i]):
                raise PanelError(
                    f"non-numeric value {text!r} in column '{col}' at row {i + 2} "
                    f"(unit {df[unit].iloc[i]}, time {df[time].iloc[i]})")
        values[col] = num

    units = _sort_key(list(dict.fromkeys(df[unit])))
    times = _sort_key(list(dict.fromkeys(df[time])))
    ui = {u: k for k, u in enumerate(units)}
    ti = {t: k for k, t in enumerate(times)}
    rows = df[unit].map(ui).to_numpy()
    cols = df[time].map(ti).to_numpy()

    present = np.zeros((len(units), len(times)), dtype=bool)
    present[rows, cols] = True
    if not present.all():
        miss = [f"({units[a]},{times[b]})" for a, b in zip(*np.nonzero(~present))]
        raise PanelError("unbalanced: missing " + ", ".join(miss))

    Y = np.empty((len(units), len(times)))
    Y[rows, cols] = values[y]
    X = np.empty((len(units), len(times), len(x)))
    for k, col in enumerate(x):
        X[rows, cols, k] = values[col]
    return PanelDataset(Y, X, tuple(units), tuple(times), tuple(x))


def save_panel(d: PanelDataset, path: str | Path) -> None:
    """Write the panel in the long CSV format read by :func:`load_panel`."""
    rows = []
    for i, u in enumerate(d.unit_ids):
        for t, s in enumerate(d.time_ids):
            rows.append([u, s, repr(float(d.y[i, t]))] +
                        [repr(float(v)) for v in d.X[i, t]])
    df = pd.DataFrame(rows, columns=["unit", "time", "y"] + [f"x{k + 1}" for k in range(d.K)])
    df.to_csv(path, index=False, encoding="utf-8")


@dataclass(frozen=True)
class LinearHypothesis:
    """Null hypothesis ``R @ alpha = r_vec`` on the stacked group coefficients.

    ``alpha`` is stacked group by group: (alpha_1', ..., alpha_G')', each of
    length K, so R has G*K columns.
    """

    R: np.ndarray
    r_vec: np.ndarray
    G: int
    K: int
    rank_tol: float = 1e-10

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        r_vec = np.atleast_1d(np.asarray(self.r_vec, dtype=float))
        if R.shape[1] != self.G * self.K:
            raise ValueError(f"R has {R.shape[1]} columns, expected G*K = {self.G * self.K}")
        if r_vec.shape != (R.shape[0],):
            raise ValueError(f"r_vec must have length {R.shape[0]}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(r_vec))):
            raise ValueError("R and r_vec must be finite")
        sv = np.linalg.svd(R, compute_uv=False)
        if R.shape[0] > R.shape[1] or sv.min() <= self.rank_tol * sv.max():
            raise ValueError("R is rank deficient")
        R.setflags(write=False)
        r_vec.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "r_vec", r_vec)

    @property
    def df(self) -> int:
        return self.R.shape[0]

    def embed(self, K_full: int) -> "LinearHypothesis":
        """Lift a hypothesis on the first K coefficients of each group to K_full per group."""
        if K_full == self.K:
            return self
        if K_full < self.K:
            raise ValueError("cannot embed into fewer coefficients")
        R = np.zeros((self.df, self.G * K_full))
        for g in range(self.G):
            R[:, g * K_full:g * K_full + self.K] = self.R[:, g * self.K:(g + 1) * self.K]
        return LinearHypothesis(R, self.r_vec, self.G, K_full, self.rank_tol)

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "r": self.r_vec.tolist(), "G": self.G, "K": self.K}

    @classmethod
    def from_dict(cls, obj: dict, G: int | None = None, K: int | None = None) -> "LinearHypothesis":
        R = np.atleast_2d(np.asarray(obj["R"], dtype=float))
        r_vec = obj.get("r", obj.get("r_vec"))
        if r_vec is None:
            r_vec = np.zeros(R.shape[0])
        G = int(obj.get("G", G or 0)) or None
        K = int(obj.get("K", K or 0)) or None
        if G is None and K is None:
            raise ValueError("hypothesis needs G or K to interpret the columns of R")
        if G is None:
            G = R.shape[1] // K
        if K is None:
            K = R.shape[1] // G
        return cls(R, r_vec, G, K)


def equal_slopes(G: int, K: int, g1: int = 0, g2: int = 1,
                 coefs: Sequence[int] | None = None) -> LinearHypothesis:
    """alpha_{k,g1} = alpha_{k,g2} for every k in ``coefs`` (default: all)."""
    coefs = range(K) if coefs is None else coefs
    rows = []
    for k in coefs:
        row = np.zeros(G * K)
        row[g1 * K + k] = 1.0
        row[g2 * K + k] = -1.0
        rows.append(row)
    return LinearHypothesis(np.array(rows), np.zeros(len(rows)), G, K)
