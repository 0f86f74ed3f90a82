"""Group-membership estimators: Two-Step Kmeans, Panel Clusterwise Regression, GFE.

Every fit records its full iteration trace (assignments and centers), which
the selective tests condition on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .panel import PanelDataset, augment_time_dummies, within_transform

log = logging.getLogger(__name__)

METHODS = ("tsk", "pcr", "gfe")
MAX_ITER = 500
TIE_TOL = 1e-12
COND_MAX = 1e12
INIT_RETRIES = 1000


class EstimationError(RuntimeError):
    """Raised when no valid fit can be produced."""


def group_sum(labels: np.ndarray, G: int, arr: np.ndarray) -> np.ndarray:
    """Sum the rows of ``arr`` within each group; returns shape (G,) + arr.shape[1:]."""
    onehot = (labels[None, :] == np.arange(G)[:, None]).astype(float)
    return (onehot @ arr.reshape(arr.shape[0], -1)).reshape((G,) + arr.shape[1:])


@dataclass
class FitTrace:
    """Iterates of the alternating algorithm.

    ``assignments[m]`` is gamma^(m) (gamma^(0) is the random start) and
    ``centers[m]`` the centers computed from it, so gamma^(m+1) is the argmin
    against ``centers[m]``.  ``objective[m]`` is evaluated at
    (gamma^(m), centers[m]).
    """

    assignments: list
    centers: list
    objective: list
    converged: bool = True

    @property
    def M(self) -> int:
        return len(self.assignments) - 1

    def relabel(self, perm: np.ndarray) -> "FitTrace":
        """Apply ``new = perm[old]`` to every iteration."""
        inv = np.argsort(perm)
        return FitTrace([perm[a] for a in self.assignments],
                        [c[inv] for c in self.centers],
                        list(self.objective), self.converged)


@dataclass
class GroupFit:
    method: str
    G: int
    gamma: np.ndarray
    alpha: np.ndarray
    objective: float
    trace: FitTrace
    restarts: int = 1
    winning_restart: int = 0
    failed_restarts: int = 0
    seed: int | None = None
    n_slopes: int | None = None
    within: bool = False

    def __post_init__(self):
        if self.n_slopes is None:
            self.n_slopes = self.alpha.shape[1]

    @property
    def K(self) -> int:
        """Coefficients per group (including time dummies for GFE)."""
        return self.alpha.shape[1]

    @property
    def M(self) -> int:
        return self.trace.M

    @property
    def converged(self) -> bool:
        return self.trace.converged

    @property
    def alpha_vec(self) -> np.ndarray:
        return self.alpha.reshape(-1)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.gamma, minlength=self.G)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "G": self.G,
            "K": self.K,
            "n_slopes": self.n_slopes,
            "within": self.within,
            "gamma": (self.gamma + 1).tolist(),
            "alpha": self.alpha.tolist(),
            "objective": self.objective,
            "M": self.M,
            "converged": self.converged,
            "restarts": self.restarts,
            "winning_restart": self.winning_restart,
            "failed_restarts": self.failed_restarts,
            "seed": self.seed,
            "trace": {
                "assignments": [(a + 1).tolist() for a in self.trace.assignments],
                "centers": [c.tolist() for c in self.trace.centers],
                "objective": list(self.trace.objective),
            },
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GroupFit":
        tr = obj["trace"]
        trace = FitTrace([np.asarray(a, dtype=np.int64) - 1 for a in tr["assignments"]],
                         [np.asarray(c, dtype=float) for c in tr["centers"]],
                         [float(v) for v in tr["objective"]],
                         bool(obj.get("converged", True)))
        return cls(method=obj["method"], G=int(obj["G"]),
                   gamma=np.asarray(obj["gamma"], dtype=np.int64) - 1,
                   alpha=np.asarray(obj["alpha"], dtype=float),
                   objective=float(obj["objective"]), trace=trace,
                   restarts=int(obj.get("restarts", 1)),
                   winning_restart=int(obj.get("winning_restart", 0)),
                   failed_restarts=int(obj.get("failed_restarts", 0)),
                   seed=obj.get("seed"), n_slopes=obj.get("n_slopes"),
                   within=bool(obj.get("within", False)))


# ---------------------------------------------------------------------------
# problems: closed-form center updates and per-unit costs


class KmeansProblem:
    """Kmeans on the rows of a coefficient matrix B (N, K)."""

    def __init__(self, B: np.ndarray):
        self.B = np.asarray(B, dtype=float)
        self.N, self.K = self.B.shape

    def centers(self, labels: np.ndarray, G: int) -> np.ndarray | None:
        n = np.bincount(labels, minlength=G)
        if np.any(n == 0):
            return None
        return group_sum(labels, G, self.B) / n[:, None]

    def cost(self, centers: np.ndarray) -> np.ndarray:
        diff = self.B[:, None, :] - centers[None, :, :]
        return np.einsum("ngk,ngk->ng", diff, diff)


class ClusterwiseProblem:
    """Pooled least squares per group on a panel y (N, T), X (N, T, K)."""

    def __init__(self, y: np.ndarray, X: np.ndarray):
        self.y = np.asarray(y, dtype=float)
        self.X = np.asarray(X, dtype=float)
        self.N, self.T, self.K = self.X.shape
        self.gram = np.matmul(self.X.transpose(0, 2, 1), self.X)
        self.xy = np.matmul(self.X.transpose(0, 2, 1), self.y[:, :, None])[:, :, 0]
        self._flat = self.X.reshape(-1, self.K)

    def centers(self, labels: np.ndarray, G: int) -> np.ndarray | None:
        n = np.bincount(labels, minlength=G)
        if np.any(n == 0):
            return None
        A = group_sum(labels, G, self.gram)
        b = group_sum(labels, G, self.xy)
        if np.any(np.linalg.cond(A) > COND_MAX):
            return None
        return np.linalg.solve(A, b[:, :, None])[:, :, 0]

    def cost(self, centers: np.ndarray) -> np.ndarray:
        resid = self.y[:, :, None] - (self._flat @ centers.T).reshape(self.N, self.T, -1)
        return np.square(resid).sum(axis=1)


def assign(cost: np.ndarray, current: np.ndarray | None = None) -> np.ndarray:
    """Row-wise argmin; ties within TIE_TOL keep the current label, else the smallest index."""
    best = cost.min(axis=1, keepdims=True)
    tied = cost <= best + TIE_TOL * np.maximum(1.0, np.abs(best))
    labels = np.argmax(tied, axis=1)
    if current is not None:
        keep = tied[np.arange(cost.shape[0]), current]
        labels = np.where(keep, current, labels)
    return labels


def _objective_at(problem, labels: np.ndarray, centers: np.ndarray) -> float:
    return float(problem.cost(centers)[np.arange(labels.shape[0]), labels].sum())


def run_alternating(problem, init: np.ndarray, G: int,
                    max_iter: int = MAX_ITER) -> FitTrace | None:
    """Alternate assignment and center updates from ``init`` until labels repeat.

    Returns None when a group empties or a center update is singular.
    """
    labels = np.asarray(init, dtype=np.int64)
    centers = problem.centers(labels, G)
    if centers is None:
        return None
    rows = np.arange(labels.shape[0])
    cost = problem.cost(centers)
    assignments, cents = [labels], [centers]
    objective = [float(cost[rows, labels].sum())]
    for _ in range(max_iter):
        new = assign(cost, labels)
        new_centers = problem.centers(new, G)
        if new_centers is None:
            return None
        cost = problem.cost(new_centers)
        assignments.append(new)
        cents.append(new_centers)
        objective.append(float(cost[rows, new].sum()))
        if np.array_equal(new, labels):
            return FitTrace(assignments, cents, objective, True)
        labels, centers = new, new_centers
    return FitTrace(assignments, cents, objective, False)


def random_labels(rng: np.random.Generator, N: int, G: int) -> np.ndarray:
    """Uniform labels on range(G), redrawn until every group is nonempty."""
    if G > N:
        raise EstimationError(f"cannot form {G} nonempty groups from {N} units")
    for _ in range(INIT_RETRIES):
        labels = rng.integers(0, G, size=N)
        if np.bincount(labels, minlength=G).min() > 0:
            return labels
    raise EstimationError("could not draw an initialization with all groups nonempty")


def restart_rng(seed: int, restart: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(restart)])


def _multi_start(problem, G: int, restarts: int, seed: int, method: str) -> GroupFit:
    if G < 1:
        raise ValueError("groups must be >= 1")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    best, best_r, failed = None, -1, 0
    for r in range(restarts):
        init = random_labels(restart_rng(seed, r), problem.N, G)
        trace = run_alternating(problem, init, G)
        if trace is None:
            failed += 1
            log.debug("%s restart %d abandoned (empty group or singular update)", method, r)
            continue
        if best is None or trace.objective[-1] < best.objective[-1]:
            best, best_r = trace, r
    if best is None:
        raise EstimationError(f"all {restarts} {method} restarts failed")
    if failed:
        log.info("%s: %d of %d restarts discarded", method, failed, restarts)
    best = best.relabel(_first_occurrence_perm(best.assignments[-1], G))
    return GroupFit(method=method, G=G, gamma=best.assignments[-1].copy(),
                    alpha=best.centers[-1].copy(), objective=best.objective[-1],
                    trace=best, restarts=restarts, winning_restart=best_r,
                    failed_restarts=failed, seed=seed)


def _first_occurrence(labels: np.ndarray, G: int) -> np.ndarray:
    first = np.full(G, labels.shape[0], dtype=np.int64)
    for i, g in enumerate(labels):
        if first[g] == labels.shape[0]:
            first[g] = i
    return first


def _first_occurrence_perm(labels: np.ndarray, G: int) -> np.ndarray:
    """perm with perm[old] = new, ordering groups by first appearance."""
    order = np.argsort(_first_occurrence(labels, G), kind="stable")
    perm = np.empty(G, dtype=np.int64)
    perm[order] = np.arange(G)
    return perm


# ---------------------------------------------------------------------------
# public estimators


def unit_ols(d: PanelDataset) -> np.ndarray:
    """Unit-by-unit OLS coefficients, returned as an (N, K) matrix."""
    if d.T < d.K:
        raise EstimationError(f"unit-by-unit OLS requires T >= K (T={d.T}, K={d.K})")
    gram = np.einsum("ntk,ntl->nkl", d.X, d.X)
    cond = np.linalg.cond(gram)
    bad = np.flatnonzero(~(cond < COND_MAX))
    if bad.size:
        i = bad[0]
        raise EstimationError(
            f"singular Gram matrix for unit {d.unit_ids[i]} (condition number {cond[i]:.3g})")
    xy = np.einsum("ntk,nt->nk", d.X, d.y)
    return np.linalg.solve(gram, xy[:, :, None])[:, :, 0]


def tsk_fit(B: np.ndarray, G: int, restarts: int = 100, seed: int = 0) -> GroupFit:
    """Two-Step Kmeans: Kmeans on unit-level coefficient estimates."""
    return _multi_start(KmeansProblem(B), G, restarts, seed, "tsk")


def pcr_fit(d: PanelDataset, G: int, restarts: int = 100, seed: int = 0) -> GroupFit:
    """Panel clusterwise regression (joint least squares over groups and slopes)."""
    return _multi_start(ClusterwiseProblem(d.y, d.X), G, restarts, seed, "pcr")


def gfe_data(d: PanelDataset, within: bool = False) -> PanelDataset:
    """Regressors extended with time dummies; demeaned afterwards when ``within``."""
    aug = augment_time_dummies(d)
    return within_transform(aug) if within else aug


def gfe_fit(d: PanelDataset, G: int, restarts: int = 100, seed: int = 0,
            within: bool = False) -> GroupFit:
    """PCR with group-specific time effects (time dummies interacted with groups).

    ``alpha[:, :K]`` holds the slopes and ``alpha[:, K:]`` the dummy coefficients.
    """
    fit = _multi_start(ClusterwiseProblem(*_yx(gfe_data(d, within))), G, restarts, seed, "gfe")
    fit.n_slopes = d.K
    fit.within = within
    return fit


def _yx(d: PanelDataset):
    return d.y, d.X


def problem_for(method: str, data) -> KmeansProblem | ClusterwiseProblem:
    """Problem object for ``data``: B matrix for tsk, (already augmented) panel otherwise."""
    if method == "tsk":
        return KmeansProblem(data)
    if method in ("pcr", "gfe"):
        return ClusterwiseProblem(data.y, data.X)
    raise ValueError(f"unknown method {method!r}")


def objective(method: str, data, labels: np.ndarray, G: int | None = None) -> float:
    """Objective at the closed-form optimal centers for ``labels``.

    ``data`` is the (N, K) coefficient matrix for ``"tsk"`` and a panel for
    ``"pcr"``/``"gfe"`` (GFE panels must already carry the dummies).
    """
    labels = np.asarray(labels, dtype=np.int64)
    G = G or int(labels.max()) + 1
    problem = problem_for(method, data)
    centers = problem.centers(labels, G)
    if centers is None:
        raise EstimationError("empty group or singular group Gram matrix")
    return _objective_at(problem, labels, centers)


def _restricted_growth(N: int, G: int):
    """All label vectors modulo relabeling: restricted growth strings with <= G blocks."""
    labels = [0] * N

    def rec(i, used):
        if i == N:
            yield np.array(labels, dtype=np.int64), used
            return
        for g in range(min(used + 1, G)):
            labels[i] = g
            yield from rec(i + 1, max(used, g + 1))

    if N == 0:
        return
    labels[0] = 0
    yield from rec(1, 1)


def brute_force_fit(method: str, data, G: int, limit: float = 1e6) -> GroupFit:
    """Global minimizer of :func:`objective` by exhaustive enumeration.

    Partitions are enumerated once per relabeling class; only those with all
    G groups nonempty (and nonsingular updates) are eligible.
    """
    problem = problem_for(method, data)
    N = problem.N
    if float(G) ** N > limit:
        raise EstimationError(f"instance too large for enumeration: G^N = {G}^{N}")
    best, best_obj, count = None, np.inf, 0
    for labels, used in _restricted_growth(N, G):
        count += 1
        if used < G:
            continue
        centers = problem.centers(labels, G)
        if centers is None:
            continue
        val = _objective_at(problem, labels, centers)
        if val < best_obj:
            best, best_obj = (labels.copy(), centers), val
    if best is None:
        raise EstimationError("no feasible partition")
    labels, centers = best
    trace = FitTrace([labels], [centers], [best_obj], True)
    fit = GroupFit(method=method, G=G, gamma=labels, alpha=centers, objective=best_obj,
                   trace=trace, restarts=count)
    return fit


def estimate(d: PanelDataset, method: str, G: int, restarts: int = 100, seed: int = 0,
             within: bool = False) -> GroupFit:
    """Fit ``method`` on a panel, applying the within transformation if asked."""
    if method == "gfe":
        return gfe_fit(d, G, restarts, seed, within=within)
    dd = within_transform(d) if within else d
    if method == "tsk":
        fit = tsk_fit(unit_ols(dd), G, restarts, seed)
    elif method == "pcr":
        fit = pcr_fit(dd, G, restarts, seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    fit.within = within
    return fit


def model_data(d: PanelDataset, fit: GroupFit) -> PanelDataset:
    """The transformed panel a fit was computed on (within / dummies)."""
    if fit.method == "gfe":
        return gfe_data(d, fit.within)
    return within_transform(d) if fit.within else d
