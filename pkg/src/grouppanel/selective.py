"""Selective (post-clustering) Wald tests conditioned on the recorded iteration trace.

The data vector (unit coefficients for TSK, outcomes for PCR/GFE) is written
as ``phi * v + w``.  At ``phi = sqrt(h)`` this reproduces the observed data,
and every recorded assignment step is a quadratic inequality in ``phi``.  The
intersection of these inequalities is the truncation set; the p-value is the
chi-square tail restricted to it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import mpmath
import numpy as np
from scipy import special, stats

from .estimators import (ClusterwiseProblem, GroupFit, KmeansProblem, group_sum,
                         model_data, unit_ols)
from .panel import LinearHypothesis, PanelDataset, group_dummy_matrix
from .variance import (CovarianceError, GroupCovariances, default_bandwidth,
                       driscoll_kraay_cov, hypothesis_cov, pesaran_group_cov,
                       sym_invsqrt, sym_sqrt, theoretical_cov)

log = logging.getLogger(__name__)

COEF_TOL = 1e-12
DISC_TOL = 1e-12
OBS_SLACK = 1e-9
SCORE_TOL = 1e-8
TINY_MASS = 1e-300


class InfeasibleTraceError(RuntimeError):
    """The observed statistic falls outside its own truncation set."""


# ---------------------------------------------------------------------------
# Wald statistic and constrained estimates


def wald_statistic(alpha: np.ndarray, cov_R: np.ndarray, H: LinearHypothesis) -> float:
    """(R alpha - r)' inv(cov_R) (R alpha - r)."""
    dev = H.R @ np.asarray(alpha, dtype=float).reshape(-1) - H.r_vec
    cov_R = np.atleast_2d(cov_R)
    lam = np.linalg.eigvalsh(cov_R)
    if lam.max() <= 0 or lam.min() < 1e-12 * lam.max():
        raise CovarianceError("hypothesis covariance singular")
    return float(max(dev @ np.linalg.solve(cov_R, dev), 0.0))


def projection_matrix(V: np.ndarray, H: LinearHypothesis) -> np.ndarray:
    """V R' inv(R V R'): maps a restriction deviation to the coefficient correction.

    Never inverts V itself, so a singular working covariance is allowed as
    long as R V R' is not.
    """
    VR = V @ H.R.T
    bracket = H.R @ VR
    if np.linalg.cond(bracket) > 1e12:
        raise CovarianceError("singular bracket R inv(weight) R'")
    return np.linalg.solve(bracket.T, VR.T).T


def constrained_alpha(alpha: np.ndarray, H: LinearHypothesis, weight: np.ndarray) -> np.ndarray:
    """Minimizer of (a - alpha)' weight (a - alpha) subject to R a = r."""
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    weight = np.atleast_2d(np.asarray(weight, dtype=float))
    if np.linalg.cond(weight) > 1e12:
        raise CovarianceError("weight matrix singular")
    C = projection_matrix(np.linalg.inv(weight), H)
    return alpha - C @ (H.R @ alpha - H.r_vec)


# ---------------------------------------------------------------------------
# decompositions


@dataclass
class Decomposition:
    """Data = phi * v + w, exact at phi = sqrt(h).

    ``v`` and ``w`` are (N, K) in coefficient space or (N, T) in observation
    space.  ``correction`` is the GK coefficient shift per unit of ``phi``.
    """

    v: np.ndarray
    w: np.ndarray
    j_dir: np.ndarray
    h: float
    space: str
    alpha: np.ndarray
    alpha_R: np.ndarray
    correction: np.ndarray
    cov_R: np.ndarray
    score_error: float = 0.0

    @property
    def phi_obs(self) -> float:
        return math.sqrt(self.h)

    @property
    def degenerate(self) -> bool:
        return self.h <= 0.0

    def perturbed(self, phi: float) -> np.ndarray:
        return phi * self.v + self.w


def _direction(alpha, cov_R, H):
    dev = H.R @ alpha - H.r_vec
    z = sym_invsqrt(cov_R) @ dev
    norm = float(np.linalg.norm(z))
    h = norm * norm
    if norm == 0.0:
        return np.zeros_like(z), 0.0, dev
    return z / norm, h, dev


def _correction(V, weight, H, cov_R, j_dir, projection):
    if projection == "cov":
        C = projection_matrix(V, H)
    elif projection == "gram":
        C = projection_matrix(np.linalg.inv(weight), H)
    else:
        raise ValueError(f"unknown projection {projection!r}")
    return C, C @ sym_sqrt(cov_R) @ j_dir


def decompose_tsk(B: np.ndarray, fit: GroupFit, H: LinearHypothesis, cov: GroupCovariances,
                  projection: str = "cov") -> Decomposition:
    """Split unit coefficients into a component along the tested direction and a remainder."""
    if fit.method != "tsk":
        raise ValueError("decompose_tsk needs a TSK fit")
    B = np.asarray(B, dtype=float)
    N, K = B.shape
    gamma = fit.gamma
    n = np.bincount(gamma, minlength=fit.G).astype(float)
    alpha = KmeansProblem(B).centers(gamma, fit.G).reshape(-1)
    cov_R = hypothesis_cov(cov, H)
    j_dir, h, dev = _direction(alpha, cov_R, H)
    weight = np.kron(np.diag(n), np.eye(K))
    C, corr = _correction(cov.block, weight, H, cov_R, j_dir, projection)
    alpha_R = alpha - C @ dev
    a_mat, aR_mat, corr_mat = alpha.reshape(fit.G, K), alpha_R.reshape(fit.G, K), corr.reshape(fit.G, K)
    v = corr_mat[gamma]
    w = aR_mat[gamma] + (B - a_mat[gamma])
    return Decomposition(v, w, j_dir, h, "coef", alpha, alpha_R, corr, cov_R)


def _group_grams(X: np.ndarray, gamma: np.ndarray, G: int) -> np.ndarray:
    return group_sum(gamma, G, np.einsum("ntk,ntl->nkl", X, X))


def score(d: PanelDataset, gamma: np.ndarray, G: int, y: np.ndarray | None = None) -> np.ndarray:
    """Grouped score X(gamma)' y as a stacked G*K vector."""
    y = d.y if y is None else y
    return group_sum(gamma, G, np.einsum("ntk,nt->nk", d.X, y)).reshape(-1)


def decompose_pcr(d: PanelDataset, fit: GroupFit, H: LinearHypothesis, cov: GroupCovariances,
                  projection: str = "cov") -> Decomposition:
    """Observation-space split of the outcomes.

    ``d`` is the panel the fit was computed on (after within/dummy
    transformations).
    """
    if fit.method not in ("pcr", "gfe"):
        raise ValueError("decompose_pcr needs a PCR or GFE fit")
    G, K, gamma = fit.G, d.K, fit.gamma
    grams = _group_grams(d.X, gamma, G)
    alpha = ClusterwiseProblem(d.y, d.X).centers(gamma, G)
    if alpha is None:
        raise CovarianceError("singular group Gram matrix")
    alpha = alpha.reshape(-1)
    cov_R = hypothesis_cov(cov, H)
    j_dir, h, dev = _direction(alpha, cov_R, H)
    weight = np.zeros((G * K, G * K))
    for g in range(G):
        weight[g * K:(g + 1) * K, g * K:(g + 1) * K] = grams[g]
    C, corr = _correction(cov.block, weight, H, cov_R, j_dir, projection)
    alpha_R = alpha - C @ dev
    a_mat, aR_mat, corr_mat = alpha.reshape(G, K), alpha_R.reshape(G, K), corr.reshape(G, K)
    resid = d.y - np.einsum("ntk,nk->nt", d.X, a_mat[gamma])
    v = np.einsum("ntk,nk->nt", d.X, corr_mat[gamma])
    w = np.einsum("ntk,nk->nt", d.X, aR_mat[gamma]) + resid
    dec = Decomposition(v, w, j_dir, h, "obs", alpha, alpha_R, corr, cov_R)
    dec.score_error = score_identity_error(d, fit, dec, weight)
    if dec.score_error > SCORE_TOL:
        log.warning("score identity off by %.3g", dec.score_error)
    return dec


def score_identity_error(d: PanelDataset, fit: GroupFit, dec: Decomposition,
                         weight: np.ndarray) -> float:
    """Relative gap between X(gamma)'y(phi) and Gram * (alpha_R + phi * correction)."""
    worst = 0.0
    for phi in (0.0, dec.phi_obs, 2.0 * dec.phi_obs + 1.0):
        direct = score(d, fit.gamma, fit.G, dec.perturbed(phi))
        via_gram = weight @ (dec.alpha_R + phi * dec.correction)
        scale = max(1.0, float(np.abs(direct).max()))
        worst = max(worst, float(np.abs(direct - via_gram).max()) / scale)
    return worst


# ---------------------------------------------------------------------------
# quadratic constraints


@dataclass(frozen=True)
class QuadraticConstraint:
    """{phi >= 0 : a phi^2 + b phi + c <= 0}, from iteration m, unit i, rival group g."""

    a: float
    b: float
    c: float
    m: int = -1
    i: int = -1
    g: int = -1

    def __call__(self, phi):
        return self.a * phi * phi + self.b * phi + self.c


@dataclass
class ConstraintSet:
    """Vectorized collection of quadratic constraints."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    m: np.ndarray
    i: np.ndarray
    g: np.ndarray

    def __len__(self) -> int:
        return self.a.shape[0]

    def __iter__(self):
        for k in range(len(self)):
            yield QuadraticConstraint(float(self.a[k]), float(self.b[k]), float(self.c[k]),
                                      int(self.m[k]), int(self.i[k]), int(self.g[k]))

    def __getitem__(self, idx) -> "ConstraintSet":
        return ConstraintSet(self.a[idx], self.b[idx], self.c[idx],
                             self.m[idx], self.i[idx], self.g[idx])

    def values(self, phi: float) -> np.ndarray:
        return (self.a * phi + self.b) * phi + self.c

    @classmethod
    def from_list(cls, cons: Iterable[QuadraticConstraint]) -> "ConstraintSet":
        cons = list(cons)
        arr = lambda f, dt: np.array([getattr(q, f) for q in cons], dtype=dt)
        return cls(arr("a", float), arr("b", float), arr("c", float),
                   arr("m", np.int64), arr("i", np.int64), arr("g", np.int64))

    @classmethod
    def empty(cls) -> "ConstraintSet":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, zi, zi, zi)


def _constraints_from_residuals(rv: np.ndarray, rw: np.ndarray, recorded: np.ndarray,
                                m: int) -> ConstraintSet:
    """rv, rw: (N, G, L) residual parts of unit i against center g (linear in phi)."""
    N, G = rv.shape[:2]
    qa = np.einsum("ngl,ngl->ng", rv, rv)
    qb = 2.0 * np.einsum("ngl,ngl->ng", rv, rw)
    qc = np.einsum("ngl,ngl->ng", rw, rw)
    rows = np.arange(N)
    own = recorded
    ii, gg = np.nonzero(np.arange(G)[None, :] != own[:, None])
    return ConstraintSet(qa[ii, own[ii]] - qa[ii, gg], qb[ii, own[ii]] - qb[ii, gg],
                         qc[ii, own[ii]] - qc[ii, gg], np.full(ii.shape, m, dtype=np.int64),
                         rows[ii], gg)


def _concat(parts: Sequence[ConstraintSet]) -> ConstraintSet:
    if not parts:
        return ConstraintSet.empty()
    return ConstraintSet(*(np.concatenate([getattr(p, f) for p in parts])
                           for f in ("a", "b", "c", "m", "i", "g")))


def quadratic_constraints_tsk(dec: Decomposition, trace) -> ConstraintSet:
    """One constraint per (iteration >= 1, unit, rival group) in coefficient space."""
    G = trace.centers[0].shape[0]
    pv, pw = KmeansProblem(dec.v), KmeansProblem(dec.w)
    parts = []
    for m in range(1, trace.M + 1):
        prev = trace.assignments[m - 1]
        cv, cw = pv.centers(prev, G), pw.centers(prev, G)
        rv = dec.v[:, None, :] - cv[None, :, :]
        rw = dec.w[:, None, :] - cw[None, :, :]
        parts.append(_constraints_from_residuals(rv, rw, trace.assignments[m], m))
    return _concat(parts)


def _pooled_coefs(grams: np.ndarray, X: np.ndarray, y: np.ndarray, labels: np.ndarray,
                  G: int) -> np.ndarray:
    A = group_sum(labels, G, grams)
    b = group_sum(labels, G, np.einsum("ntk,nt->nk", X, y))
    return np.linalg.solve(A, b[:, :, None])[:, :, 0]


def quadratic_constraints_pcr(dec: Decomposition, trace, d: PanelDataset) -> ConstraintSet:
    """One constraint per (iteration >= 1, unit, rival group) in observation space.

    Pooled group coefficients are linear in the outcomes, so they are
    computed separately for ``v`` and ``w``.
    """
    G = trace.centers[0].shape[0]
    grams = np.einsum("ntk,ntl->nkl", d.X, d.X)
    parts = []
    for m in range(1, trace.M + 1):
        prev = trace.assignments[m - 1]
        av = _pooled_coefs(grams, d.X, dec.v, prev, G)
        aw = _pooled_coefs(grams, d.X, dec.w, prev, G)
        rv = dec.v[:, :, None] - np.einsum("ntk,gk->ntg", d.X, av)
        rw = dec.w[:, :, None] - np.einsum("ntk,gk->ntg", d.X, aw)
        parts.append(_constraints_from_residuals(rv.transpose(0, 2, 1), rw.transpose(0, 2, 1),
                                                 trace.assignments[m], m))
    return _concat(parts)


# ---------------------------------------------------------------------------
# truncation set


@dataclass(frozen=True)
class TruncationSet:
    """Sorted disjoint closed intervals on [0, inf); upper ends may be inf."""

    intervals: tuple

    def __post_init__(self):
        prev = -np.inf
        for lo, hi in self.intervals:
            if not (0.0 <= lo <= hi) or lo < prev:
                raise ValueError(f"invalid or overlapping interval ({lo}, {hi})")
            prev = hi

    @classmethod
    def full(cls) -> "TruncationSet":
        return cls(((0.0, math.inf),))

    @property
    def is_full(self) -> bool:
        return len(self.intervals) == 1 and self.intervals[0] == (0.0, math.inf)

    def contains(self, phi, slack: float = 0.0):
        phi = np.asarray(phi, dtype=float)
        out = np.zeros(phi.shape, dtype=bool)
        for lo, hi in self.intervals:
            out |= (phi >= lo - slack) & (phi <= hi + slack)
        return out

    def to_list(self) -> list:
        return [[lo, hi if math.isfinite(hi) else None] for lo, hi in self.intervals]

    @classmethod
    def from_list(cls, obj) -> "TruncationSet":
        return cls(tuple((float(lo), math.inf if hi is None else float(hi)) for lo, hi in obj))


def _as_arrays(constraints):
    if isinstance(constraints, ConstraintSet):
        return constraints.a.copy(), constraints.b.copy(), constraints.c.copy()
    cs = ConstraintSet.from_list(constraints)
    return cs.a, cs.b, cs.c


def feasible_set(constraints, phi_obs: float) -> TruncationSet:
    """Exact solution of a system of quadratic inequalities on phi >= 0.

    Each constraint is a band (a > 0 or linear), a complement of an open
    interval (a < 0), or trivially true. Bands intersect to one interval and
    the open holes are removed from it.
    """
    if phi_obs < 0:
        raise ValueError("phi_obs must be nonnegative")
    a, b, c = _as_arrays(constraints)
    if a.size == 0:
        return TruncationSet.full()
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
        raise ValueError("non-finite constraint coefficients")
    ps = max(phi_obs, 1.0)
    scale = np.maximum.reduce([np.abs(a) * ps * ps, np.abs(b) * ps, np.abs(c)])
    scale = np.where(scale > 0, scale, 1.0)
    a = np.where(np.abs(a) * ps * ps < COEF_TOL * scale, 0.0, a)
    b = np.where(np.abs(b) * ps < COEF_TOL * scale, 0.0, b)
    c = np.where(np.abs(c) < COEF_TOL * scale, 0.0, c)

    # the observed point satisfies its own trace; absorb rounding at phi_obs
    at_obs = (a * phi_obs + b) * phi_obs + c
    bad = at_obs > 0
    if np.any(bad):
        tol = OBS_SLACK * (np.abs(a) * phi_obs ** 2 + np.abs(b) * phi_obs + np.abs(c))
        far = at_obs > np.maximum(tol, 1e-300)
        if np.any(far):
            k = int(np.flatnonzero(far)[0])
            raise InfeasibleTraceError(
                f"trace infeasible - decomposition inconsistent (constraint {k} "
                f"evaluates to {at_obs[k]:.3g} at phi_obs={phi_obs:.6g})")
        c = np.where(bad, c - at_obs, c)

    lower, upper = 0.0, math.inf
    holes = []

    lin = (a == 0)
    # a = 0, b = 0: c <= 0 holds (checked above at phi_obs)
    inc = lin & (b > 0)
    if np.any(inc):
        upper = min(upper, float(np.min(-c[inc] / b[inc])))
    dec = lin & (b < 0)
    if np.any(dec):
        lower = max(lower, float(np.max(-c[dec] / b[dec])))

    quad = ~lin
    if np.any(quad):
        aq, bq, cq = a[quad], b[quad], c[quad]
        disc = bq * bq - 4.0 * aq * cq
        dscale = bq * bq + np.abs(4.0 * aq * cq)
        disc = np.where((disc < 0) & (disc > -DISC_TOL * dscale), 0.0, disc)
        sq = np.sqrt(np.maximum(disc, 0.0))
        q = -0.5 * (bq + np.where(bq >= 0, 1.0, -1.0) * sq)
        with np.errstate(divide="ignore", invalid="ignore"):
            r1 = q / aq
            r2 = np.where(q != 0, cq / q, r1)
        lo_r, hi_r = np.minimum(r1, r2), np.maximum(r1, r2)
        pos = aq > 0
        if np.any(pos & (disc < 0)):
            raise InfeasibleTraceError("trace infeasible - decomposition inconsistent (empty band)")
        if np.any(pos):
            lower = max(lower, float(np.max(lo_r[pos])))
            upper = min(upper, float(np.min(hi_r[pos])))
        neg = (~pos) & (disc > 0) & (hi_r > 0)
        if np.any(neg):
            holes = sorted(zip(lo_r[neg].tolist(), hi_r[neg].tolist()))

    # merge open holes, then subtract from [lower, upper]
    merged = []
    for lo, hi in holes:
        if merged and lo < merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    intervals = []
    cur = lower
    for lo, hi in merged:
        if hi <= cur:
            continue
        if lo >= upper:
            break
        if lo >= cur:
            intervals.append((cur, lo))
        cur = max(cur, hi)
    if cur <= upper:
        intervals.append((cur, upper))
    return _ensure_observed(intervals, phi_obs)


def _ensure_observed(intervals, phi_obs: float) -> TruncationSet:
    slack = OBS_SLACK * max(1.0, phi_obs)
    for lo, hi in intervals:
        if lo <= phi_obs <= hi:
            return TruncationSet(tuple(intervals))
    best, dist = None, math.inf
    for k, (lo, hi) in enumerate(intervals):
        gap = lo - phi_obs if phi_obs < lo else phi_obs - hi
        if gap < dist:
            best, dist = k, gap
    if best is None or dist > slack:
        raise InfeasibleTraceError(
            f"trace infeasible - decomposition inconsistent (phi_obs={phi_obs:.6g}, "
            f"nearest interval at distance {dist:.3g})")
    lo, hi = intervals[best]
    intervals[best] = (min(lo, phi_obs), max(hi, phi_obs))
    # widening can touch a neighbour; merge if so
    out = []
    for lo, hi in intervals:
        if out and lo <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], hi))
        else:
            out.append((lo, hi))
    return TruncationSet(tuple(out))


# ---------------------------------------------------------------------------
# truncated chi-square


def _chi2_mass(lo: float, hi: float, r: int) -> float:
    """P(lo^2 <= W <= hi^2) for W ~ chi2_r, choosing the well-conditioned tail."""
    s = 0.5 * r
    xl, xh = 0.5 * lo * lo, (0.5 * hi * hi if math.isfinite(hi) else math.inf)
    if xh <= s:
        return float(special.gammainc(s, xh) - special.gammainc(s, xl))
    upper = 0.0 if math.isinf(xh) else float(special.gammaincc(s, xh))
    return float(special.gammaincc(s, xl) - upper)


def _chi2_mass_mp(lo: float, hi: float, r: int):
    a = mpmath.mpf(r) / 2
    b = mpmath.inf if not math.isfinite(hi) else mpmath.mpf(hi) ** 2 / 2
    return mpmath.gammainc(a, mpmath.mpf(lo) ** 2 / 2, b, regularized=True)


def truncated_chi2_pvalue(h: float, r: int, S: TruncationSet) -> float:
    """P(W >= h | sqrt(W) in S) for W ~ chi2_r."""
    if h < 0 or r < 1:
        raise ValueError("need h >= 0 and r >= 1")
    if h == 0:
        return 1.0
    cut = math.sqrt(h)
    upper_parts = [(max(lo, cut), hi) for lo, hi in S.intervals if hi >= cut]
    den = sum(_chi2_mass(lo, hi, r) for lo, hi in S.intervals)
    num = sum(_chi2_mass(lo, hi, r) for lo, hi in upper_parts)
    if den < TINY_MASS or num < 1e-12 * den:
        with mpmath.workdps(60):
            den_mp = mpmath.fsum(_chi2_mass_mp(lo, hi, r) for lo, hi in S.intervals)
            if den_mp == 0:
                raise ValueError("truncation set has zero chi-square mass")
            num_mp = mpmath.fsum(_chi2_mass_mp(lo, hi, r) for lo, hi in upper_parts)
            return float(min(max(num_mp / den_mp, 0), 1))
    return float(min(max(num / den, 0.0), 1.0))


def truncation_mass(r: int, S: TruncationSet) -> float:
    return float(sum(_chi2_mass(lo, hi, r) for lo, hi in S.intervals))


# ---------------------------------------------------------------------------
# end-to-end test


@dataclass
class TestResult:
    statistic: float
    df: int
    naive_p: float
    selective_p: float
    truncation: TruncationSet
    method: str
    hypothesis: dict
    diagnostics: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "df": self.df, "naive_p": self.naive_p,
                "selective_p": self.selective_p, "truncation": self.truncation.to_list(),
                "method": self.method, "hypothesis": self.hypothesis,
                "diagnostics": self.diagnostics}

    @classmethod
    def from_dict(cls, obj: dict) -> "TestResult":
        return cls(float(obj["statistic"]), int(obj["df"]), float(obj["naive_p"]),
                   float(obj["selective_p"]), TruncationSet.from_list(obj["truncation"]),
                   obj["method"], obj["hypothesis"], dict(obj.get("diagnostics", {})))


def naive_pvalue(h: float, r: int) -> float:
    return float(stats.chi2.sf(h, r))


def decompose(fit: GroupFit, data, H: LinearHypothesis, cov: GroupCovariances,
              projection: str = "cov") -> Decomposition:
    if fit.method == "tsk":
        return decompose_tsk(data, fit, H, cov, projection)
    return decompose_pcr(data, fit, H, cov, projection)


def constraints_for(fit: GroupFit, data, dec: Decomposition) -> ConstraintSet:
    if fit.method == "tsk":
        return quadratic_constraints_tsk(dec, fit.trace)
    return quadratic_constraints_pcr(dec, fit.trace, data)


def selective_test(fit: GroupFit, data, H: LinearHypothesis, cov: GroupCovariances,
                   projection: str = "cov") -> TestResult:
    """Naive and trace-conditional p-values for ``H`` after the fit.

    ``data`` is the unit coefficient matrix for TSK and the fitted
    (transformed) panel for PCR/GFE.
    """
    if H.G != fit.G or H.K != fit.K:
        raise ValueError(f"hypothesis is for G={H.G}, K={H.K}; fit has G={fit.G}, K={fit.K}")
    dec = decompose(fit, data, H, cov, projection)
    naive = naive_pvalue(dec.h, H.df)
    diag = {"M": fit.M, "converged": fit.converged, "phi_obs": dec.phi_obs,
            "score_identity_error": dec.score_error, "projection": projection}
    if dec.degenerate:
        S, p = TruncationSet.full(), 1.0
        diag.update(n_constraints=0, truncation_mass=1.0, degenerate=True)
    else:
        cons = constraints_for(fit, data, dec)
        S = feasible_set(cons, dec.phi_obs)
        p = truncated_chi2_pvalue(dec.h, H.df, S)
        diag.update(n_constraints=len(cons), truncation_mass=truncation_mass(H.df, S),
                    degenerate=False)
    return TestResult(dec.h, H.df, naive, p, S, fit.method, H.to_dict(), diag)


def default_variance(method: str) -> str:
    return "pesaran" if method == "tsk" else "dk"


def fit_covariance(d: PanelDataset, fit: GroupFit, variance: str | None = None,
                   bandwidth: int | None = None, sigma2: float | None = None,
                   Sigma: np.ndarray | None = None, B: np.ndarray | None = None) -> GroupCovariances:
    """Covariance of the group coefficients of ``fit`` computed on the raw panel ``d``."""
    variance = variance or default_variance(fit.method)
    md = model_data(d, fit)
    if variance == "pesaran":
        if fit.method != "tsk":
            raise ValueError("the Pesaran estimator needs unit-level coefficients (TSK)")
        return pesaran_group_cov(unit_ols(md) if B is None else B, fit.gamma, fit.G)
    if variance == "dk":
        return driscoll_kraay_cov(md, fit.gamma, fit.alpha, bandwidth, fit.G)
    if variance == "theory":
        if sigma2 is None:
            raise ValueError("theory variance needs sigma2")
        if Sigma is None:
            grams = np.einsum("ntk,ntl->nkl", md.X, md.X)
            Sigma = grams.mean(axis=0)
        return theoretical_cov(Sigma, sigma2, fit.gamma, fit.G)
    raise ValueError(f"unknown variance {variance!r}")


def selective_test_panel(d: PanelDataset, fit: GroupFit, H: LinearHypothesis, variance: str | None = None,
             bandwidth: int | None = None, sigma2: float | None = None,
             Sigma: np.ndarray | None = None, projection: str = "cov") -> TestResult:
    """Selective test of ``H`` on a raw panel, applying the fit's transformations.

    A hypothesis on the slopes of a GFE fit is lifted onto the dummy-augmented
    coefficient vector.
    """
    if H.K != fit.K:
        if H.K == fit.n_slopes:
            H = H.embed(fit.K)
        else:
            raise ValueError(f"hypothesis has K={H.K}; fit has K={fit.K}")
    md = model_data(d, fit)
    data = unit_ols(md) if fit.method == "tsk" else md
    cov = fit_covariance(d, fit, variance, bandwidth, sigma2, Sigma,
                         B=data if fit.method == "tsk" else None)
    res = selective_test(fit, data, H, cov, projection)
    res.diagnostics["variance"] = cov.method
    return res



# ---------------------------------------------------------------------------
# independent checks


def grid_truncation_oracle(dec: Decomposition, fit: GroupFit, data, grid) -> np.ndarray:
    """Membership of each grid phi by re-running the recorded assignment steps.

    Rebuilds the perturbed data, recomputes each iteration's centers from the
    recorded previous assignment, and checks the recorded next assignment is
    an argmin.  Uses the estimators' own center and cost routines.
    """
    trace = fit.trace
    G = fit.G
    out = np.zeros(len(grid), dtype=bool)
    for k, phi in enumerate(grid):
        pert = dec.perturbed(float(phi))
        problem = KmeansProblem(pert) if dec.space == "coef" else ClusterwiseProblem(pert, data.X)
        ok = True
        for m in range(1, trace.M + 1):
            centers = problem.centers(trace.assignments[m - 1], G)
            if centers is None:
                ok = False
                break
            cost = problem.cost(centers)
            rec = trace.assignments[m]
            own = cost[np.arange(cost.shape[0]), rec]
            if np.any(own > cost.min(axis=1) + 1e-12 * np.maximum(1.0, np.abs(own))):
                ok = False
                break
        out[k] = ok
    return out


def lemma_b1_product(gamma: np.ndarray, G: int, Sigma: np.ndarray, H: LinearHypothesis) -> np.ndarray:
    """Cross-covariance factor between the tested contrast and the TSK remainder.

    Built with common per-unit covariance inv(Sigma); vanishes identically.
    """
    K = Sigma.shape[0]
    N = len(gamma)
    _, D = group_dummy_matrix(gamma, K, G)
    DtD_inv = np.linalg.inv(D.T @ D)
    n = np.bincount(gamma, minlength=G)
    Nsig = np.kron(np.diag(n), Sigma)
    Nsig_inv = np.linalg.inv(Nsig)
    R = H.R
    M = np.linalg.inv(R @ Nsig_inv @ R.T)
    Isi = np.kron(np.eye(N), np.linalg.inv(Sigma))
    left = (np.eye(N * K)
            - D @ (np.eye(G * K) - Nsig_inv @ R.T @ M @ R) @ DtD_inv @ D.T
            - Isi @ D @ DtD_inv @ Nsig @ DtD_inv @ D.T)
    return left @ Isi @ D @ DtD_inv @ R.T


def lemma_c1_product(X: np.ndarray, gamma: np.ndarray, G: int, H: LinearHypothesis) -> np.ndarray:
    """Cross-covariance factor between the tested contrast and the PCR score remainder.

    ``X`` is (N, T, K); the unit-level Gram blocks enter through X'X.
    """
    N, T, K = X.shape
    _, D = group_dummy_matrix(gamma, K, G)
    XtX = np.zeros((N * K, N * K))
    for i in range(N):
        XtX[i * K:(i + 1) * K, i * K:(i + 1) * K] = X[i].T @ X[i]
    XtXg = XtX @ D
    A_inv = np.linalg.inv(D.T @ XtX @ D)
    R = H.R
    M = np.linalg.inv(R @ A_inv @ R.T)
    left = XtXg @ A_inv @ R.T @ M @ R @ A_inv @ D.T - np.eye(N * K)
    return left @ XtX @ D @ A_inv @ R.T
