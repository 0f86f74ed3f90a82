"""Covariance estimators for group-specific coefficient vectors."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from .panel import LinearHypothesis, PanelDataset

METHODS = ("pesaran", "dk", "theory")
EIG_FLOOR = 1e-12
SINGULAR_RTOL = 1e-12


class CovarianceError(ValueError):
    pass


@dataclass(frozen=True)
class GroupCovariances:
    """Per-group covariance blocks of the stacked group coefficients."""

    per_group: tuple
    method: str

    @property
    def G(self) -> int:
        return len(self.per_group)

    @property
    def block(self) -> np.ndarray:
        return block_diag(*self.per_group)

    def to_dict(self) -> dict:
        return {"method": self.method, "per_group": [b.tolist() for b in self.per_group]}

    @classmethod
    def from_dict(cls, obj: dict) -> "GroupCovariances":
        return cls(tuple(np.asarray(b, dtype=float) for b in obj["per_group"]), obj["method"])


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def default_bandwidth(T: int) -> int:
    """Newey-West style rule floor(4 (T/100)^(2/9)) + 1."""
    return int(math.floor(4.0 * (T / 100.0) ** (2.0 / 9.0))) + 1


def bartlett_weight(lag, L: int):
    """Triangular weight 1 - |lag|/L, zero beyond L."""
    x = np.abs(np.asarray(lag, dtype=float)) / L
    return np.where(x <= 1.0, 1.0 - x, 0.0)


def pesaran_group_cov(B: np.ndarray, labels: np.ndarray, G: int | None = None) -> GroupCovariances:
    """Dispersion of unit coefficients around their group mean, scaled by n(n-1)."""
    B = np.asarray(B, dtype=float)
    labels = np.asarray(labels)
    G = G or int(labels.max()) + 1
    blocks = []
    for g in range(G):
        Bg = B[labels == g]
        n = Bg.shape[0]
        if n < 2:
            raise CovarianceError(f"group {g + 1} has {n} member(s); the Pesaran estimator needs at least 2")
        dev = Bg - Bg.mean(axis=0)
        blocks.append(_sym(dev.T @ dev) / (n * (n - 1)))
    return GroupCovariances(tuple(blocks), "pesaran")


def _clip_psd(a: np.ndarray, g: int) -> np.ndarray:
    lam, vec = np.linalg.eigh(a)
    top = max(lam.max(), 0.0)
    if lam.min() < -1e-8 * max(top, 1e-300):
        warnings.warn(f"group {g + 1}: clipping negative eigenvalue {lam.min():.3g} of DK block",
                      RuntimeWarning, stacklevel=3)
    if lam.min() < 0:
        lam = np.clip(lam, 0.0, None)
        a = (vec * lam) @ vec.T
    return _sym(a)


def driscoll_kraay_cov(d: PanelDataset, labels: np.ndarray, alpha: np.ndarray,
                       L: int | None = None, G: int | None = None) -> GroupCovariances:
    """Driscoll-Kraay covariance per group with Bartlett weights.

    ``alpha`` is (G, K) or the stacked G*K vector; ``d`` must be the panel the
    group coefficients were fitted on (after any transformation).
    """
    labels = np.asarray(labels)
    G = G or int(labels.max()) + 1
    K = d.K
    alpha = np.asarray(alpha, dtype=float).reshape(G, K)
    L = default_bandwidth(d.T) if L is None else int(L)
    if L < 1:
        raise CovarianceError("bandwidth must be >= 1")
    T = d.T
    t = np.arange(T)
    W = bartlett_weight(t[:, None] - t[None, :], L)
    resid = d.y - np.einsum("ntk,nk->nt", d.X, alpha[labels])
    blocks = []
    for g in range(G):
        idx = labels == g
        n = int(idx.sum())
        Xg = d.X[idx]
        Q = np.einsum("ntk,ntl->kl", Xg, Xg) / (n * T)
        if np.linalg.cond(Q) > 1e12:
            raise CovarianceError(f"group {g + 1}: singular Gram matrix in DK estimator")
        S = np.einsum("ntk,nt->tk", Xg, resid[idx])  # cross-sectional score sums per period
        meat = S.T @ W @ S / (n * n * T * T)
        Qi = np.linalg.inv(Q)
        blocks.append(_clip_psd(_sym(Qi @ meat @ Qi), g))
    return GroupCovariances(tuple(blocks), "dk")


def theoretical_cov(Sigma: np.ndarray, sigma2: float, labels: np.ndarray,
                    G: int | None = None) -> GroupCovariances:
    """Blocks sigma2 / n_g * inv(Sigma)."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if sigma2 <= 0:
        raise CovarianceError("sigma2 must be positive")
    if np.linalg.cond(Sigma) > 1e12:
        raise CovarianceError("Sigma is singular")
    labels = np.asarray(labels)
    G = G or int(labels.max()) + 1
    n = np.bincount(labels, minlength=G)
    if np.any(n == 0):
        raise CovarianceError("empty group")
    Si = _sym(np.linalg.inv(Sigma))
    return GroupCovariances(tuple(sigma2 / ng * Si for ng in n), "theory")


def gram_cov(d: PanelDataset, labels: np.ndarray, sigma2: float,
             G: int | None = None) -> GroupCovariances:
    """Blocks sigma2 * inv(pooled group Gram), the homoskedastic pooled-OLS covariance."""
    labels = np.asarray(labels)
    G = G or int(labels.max()) + 1
    blocks = []
    for g in range(G):
        Xg = d.X[labels == g]
        A = np.einsum("ntk,ntl->kl", Xg, Xg)
        if Xg.shape[0] == 0 or np.linalg.cond(A) > 1e12:
            raise CovarianceError(f"group {g + 1}: singular Gram matrix")
        blocks.append(sigma2 * _sym(np.linalg.inv(A)))
    return GroupCovariances(tuple(blocks), "theory")


def hypothesis_cov(cov: GroupCovariances | np.ndarray, H: LinearHypothesis) -> np.ndarray:
    """R V R', symmetrized; raises when numerically singular."""
    V = cov.block if isinstance(cov, GroupCovariances) else np.asarray(cov, dtype=float)
    if V.shape != (H.R.shape[1],) * 2:
        raise CovarianceError(f"covariance is {V.shape}, hypothesis needs {H.R.shape[1]} columns")
    out = _sym(H.R @ V @ H.R.T)
    lam = np.linalg.eigvalsh(out)
    if lam.max() <= 0 or lam.min() < SINGULAR_RTOL * lam.max():
        raise CovarianceError("hypothesis covariance singular")
    return out


def sym_power(a: np.ndarray, power: float, floor: float = EIG_FLOOR) -> np.ndarray:
    """Symmetric matrix power via eigendecomposition, eigenvalues floored at floor * max."""
    lam, vec = np.linalg.eigh(_sym(np.atleast_2d(a)))
    lam = np.maximum(lam, floor * lam.max())
    return _sym((vec * lam ** power) @ vec.T)


def sym_sqrt(a: np.ndarray) -> np.ndarray:
    return sym_power(a, 0.5)


def sym_invsqrt(a: np.ndarray) -> np.ndarray:
    return sym_power(a, -0.5)
