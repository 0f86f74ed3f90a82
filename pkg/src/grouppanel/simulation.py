"""Monte Carlo designs with two latent clusters and the rejection-rate study engine."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .estimators import ClusterwiseProblem, GroupFit, FitTrace, estimate
from .panel import (LinearHypothesis, PanelDataset, augment_time_dummies,
                    within_transform)
from .selective import naive_pvalue, selective_test_panel
from .variance import driscoll_kraay_cov, hypothesis_cov
from .selective import wald_statistic

log = logging.getLogger(__name__)

SLOPES = {
    "DGP1": ((2.0, 1.0), (2.0, 1.0)),
    "DGP2": ((2.0, 1.0), (4.0, 1.0)),
    "DGP3": ((2.0, 1.0), (4.0, 2.0)),
}
CASES = ("baseline", "unit_fe", "gfe")
PROCEDURES = ("predetermined", "naive_tsk", "naive_pcr", "naive_gfe",
              "cond_tsk", "cond_pcr", "cond_gfe")
HYPOTHESES = ("H01", "H02", "H03")
MAX_FAILURE_RATE = 0.05


def hypothesis(name: str) -> LinearHypothesis:
    """The three restrictions on two groups with two slopes each (alpha stacked by group)."""
    if name == "H01":
        R = [[1, 0, -1, 0], [0, 1, 0, -1]]
        r = [0, 0]
    elif name == "H02":
        R = [[0, 1, 0, -1]]
        r = [0]
    elif name == "H03":
        R = [[1, 0, 0, 0], [0, 0, 1, 0]]
        r = [0, 0]
    else:
        raise ValueError(f"unknown hypothesis {name!r}")
    return LinearHypothesis(np.array(R, dtype=float), np.array(r, dtype=float), 2, 2)


@dataclass(frozen=True)
class SimConfig:
    N: int = 120
    T: int = 20
    reps: int = 250
    seed: int = 0
    dgp: str = "DGP1"
    case: str = "baseline"
    rho_u: float = 0.5
    rho_x: float = 0.5
    rho_s: float = 0.2
    length_scale: float = 0.3
    x_corr: float = 0.4
    n1: int | None = None
    t_df: float = 6.0
    burn_in: int = 0
    level: float = 0.05
    restarts: int = 50
    bandwidth: int | None = None
    hypotheses: tuple = HYPOTHESES
    procedures: tuple = PROCEDURES

    def __post_init__(self):
        if self.dgp not in SLOPES:
            raise ValueError(f"dgp must be one of {sorted(SLOPES)}")
        if self.case not in CASES:
            raise ValueError(f"case must be one of {CASES}")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        n1 = self.cluster_sizes[0]
        if not (2 <= n1 <= self.N - 2):
            raise ValueError("both true clusters need at least 2 units")
        for p in self.procedures:
            if p not in PROCEDURES:
                raise ValueError(f"unknown procedure {p!r}")
        for h in self.hypotheses:
            hypothesis(h)
        object.__setattr__(self, "hypotheses", tuple(self.hypotheses))
        object.__setattr__(self, "procedures", tuple(self.procedures))

    @property
    def cluster_sizes(self) -> tuple:
        n1 = self.N // 3 if self.n1 is None else self.n1
        return n1, self.N - n1

    @classmethod
    def from_dict(cls, obj: dict) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hypotheses"] = list(self.hypotheses)
        out["procedures"] = list(self.procedures)
        return out


def spatial_cov(n: int, rho_s: float = 0.2, length_scale: float = 0.3) -> np.ndarray:
    """Exponential kernel on an equally spaced grid of [0, 1], mixed with the identity."""
    if n < 2:
        raise ValueError("need at least 2 units")
    s = np.arange(n) / (n - 1)
    D = np.abs(s[:, None] - s[None, :])
    S = rho_s * np.exp(-D / length_scale) + (1.0 - rho_s) * np.eye(n)
    assert np.linalg.eigvalsh(S).min() > 0, "spatial kernel not positive definite"
    return S


def rep_rng(seed: int, rep: int) -> np.random.Generator:
    """Counter-based stream for one replication."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(rep)])))


def true_labels(cfg: SimConfig) -> np.ndarray:
    n1, n2 = cfg.cluster_sizes
    return np.r_[np.zeros(n1, dtype=np.int64), np.ones(n2, dtype=np.int64)]


def simulate_panel(cfg: SimConfig, rep: int) -> tuple[PanelDataset, np.ndarray]:
    """One draw of the design; returns the panel and the true 0-based labels."""
    rng = rep_rng(cfg.seed, rep)
    N, T = cfg.N, cfg.T
    sizes = cfg.cluster_sizes
    chols = [np.linalg.cholesky(spatial_cov(n, cfg.rho_s, cfg.length_scale)) for n in sizes]
    bounds = np.cumsum((0,) + sizes)
    LC = np.linalg.cholesky(np.array([[1.0, cfg.x_corr], [cfg.x_corr, 1.0]]))
    t_scale = math.sqrt((cfg.t_df - 2.0) / cfg.t_df)

    def spatial(z):
        out = np.empty_like(z)
        for L, a, b in zip(chols, bounds[:-1], bounds[1:]):
            out[a:b] = L @ z[a:b]
        return out

    def x_innov():
        return spatial(rng.standard_normal((N, 2))) @ LC.T

    def e_innov(t):  # t is 1-based
        z = spatial(rng.standard_normal(N))
        if t <= T / 2:
            return z
        # one mixing draw per cluster keeps clusters independent
        for a, b in zip(bounds[:-1], bounds[1:]):
            z[a:b] *= t_scale * math.sqrt(cfg.t_df / rng.chisquare(cfg.t_df))
        return z

    ax, au = math.sqrt(1 - cfg.rho_x ** 2), math.sqrt(1 - cfg.rho_u ** 2)
    x, u = x_innov(), e_innov(1)
    for _ in range(cfg.burn_in):
        x = cfg.rho_x * x + ax * x_innov()
        u = cfg.rho_u * u + au * e_innov(1)
    X = np.empty((N, T, 2))
    U = np.empty((N, T))
    X[:, 0], U[:, 0] = x, u
    for t in range(1, T):
        X[:, t] = cfg.rho_x * X[:, t - 1] + ax * x_innov()
        U[:, t] = cfg.rho_u * U[:, t - 1] + au * e_innov(t + 1)

    labels = true_labels(cfg)
    alpha = np.array(SLOPES[cfg.dgp])
    y = np.einsum("ntk,nk->nt", X, alpha[labels]) + U
    if cfg.case in ("unit_fe", "gfe"):
        y = y + rng.normal(0.0, 0.5, size=N)[:, None]
    if cfg.case == "gfe":
        tt = np.arange(1, T + 1)
        eta = np.vstack([0.8 * np.sin(2 * np.pi * tt / T),
                         2.0 + np.sin(2 * np.pi * tt / T + np.pi / 4)])
        y = y + eta[labels]
    d = PanelDataset(y=y, X=X, unit_ids=[str(i + 1) for i in range(N)],
                     time_ids=[str(t + 1) for t in range(T)], x_names=["x1", "x2"])
    return d, labels


def _predetermined_fit(d: PanelDataset, labels: np.ndarray, within: bool) -> tuple:
    dd = within_transform(d) if within else d
    alpha = ClusterwiseProblem(dd.y, dd.X).centers(labels, 2)
    if alpha is None:
        raise RuntimeError("singular Gram under true groups")
    return dd, alpha


def _fit_seed(cfg: SimConfig, rep: int, k: int) -> int:
    return int(np.random.SeedSequence([int(cfg.seed), int(rep), 7, k]).generate_state(1)[0])


def replicate(cfg: SimConfig, rep: int) -> dict:
    """Rejection indicators for one replication: {(hypothesis, procedure): 0/1 or None}."""
    d, labels = simulate_panel(cfg, rep)
    within = cfg.case != "baseline"
    out: dict = {}
    errors: dict = {}
    procs = set(cfg.procedures)

    if "predetermined" in procs:
        try:
            dd, alpha = _predetermined_fit(d, labels, within)
            cov = driscoll_kraay_cov(dd, labels, alpha, cfg.bandwidth, 2)
            for hn in cfg.hypotheses:
                H = hypothesis(hn)
                h = wald_statistic(alpha.reshape(-1), hypothesis_cov(cov, H), H)
                out[(hn, "predetermined")] = int(naive_pvalue(h, H.df) < cfg.level)
        except Exception as exc:  # noqa: BLE001 - counted as a failed replication
            errors["predetermined"] = repr(exc)
            for hn in cfg.hypotheses:
                out[(hn, "predetermined")] = None

    for k, method in enumerate(("tsk", "pcr", "gfe")):
        wanted = [p for p in (f"naive_{method}", f"cond_{method}") if p in procs]
        if not wanted:
            continue
        try:
            fit = estimate(d, method, 2, cfg.restarts, _fit_seed(cfg, rep, k), within=within)
        except Exception as exc:  # noqa: BLE001
            errors[method] = repr(exc)
            for hn in cfg.hypotheses:
                for p in wanted:
                    out[(hn, p)] = None
            continue
        for hn in cfg.hypotheses:
            H = hypothesis(hn)
            try:
                res = selective_test_panel(d, fit, H, bandwidth=cfg.bandwidth)
                vals = {f"naive_{method}": res.naive_p, f"cond_{method}": res.selective_p}
                for p in wanted:
                    out[(hn, p)] = int(vals[p] < cfg.level)
            except Exception as exc:  # noqa: BLE001
                errors[f"{method}:{hn}"] = repr(exc)
                for p in wanted:
                    out[(hn, p)] = None
    if errors:
        log.info("rep %d failures: %s", rep, errors)
    return {"rep": rep, "indicators": out, "errors": errors}


def _replicate_star(args):
    return replicate(*args)


@dataclass
class StudyResult:
    config: SimConfig
    rows: list
    failures: int
    valid: bool
    errors: list = field(default_factory=list)


def run_rejection_study(cfg: SimConfig, jobs: int = 1) -> StudyResult:
    """Rejection frequencies with binomial standard errors for every (hypothesis, procedure)."""
    tasks = [(cfg, rep) for rep in range(cfg.reps)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_replicate_star, tasks, chunksize=max(1, cfg.reps // (4 * jobs))))
    else:
        results = [replicate(*t) for t in tasks]
    rows = []
    worst = 0.0
    for hn in cfg.hypotheses:
        for p in cfg.procedures:
            vals = [r["indicators"].get((hn, p)) for r in results]
            ok = [v for v in vals if v is not None]
            fail = len(vals) - len(ok)
            worst = max(worst, fail / len(vals))
            rate = float(np.mean(ok)) if ok else float("nan")
            se = math.sqrt(rate * (1 - rate) / len(ok)) if ok else float("nan")
            rows.append({"T": cfg.T, "hypothesis": hn, "dgp": cfg.dgp, "case": cfg.case,
                         "procedure": p, "rejection_rate": rate, "se": se,
                         "n": len(ok), "failures": fail})
    failed_reps = sum(1 for r in results if r["errors"])
    errors = [(r["rep"], r["errors"]) for r in results if r["errors"]]
    valid = worst <= MAX_FAILURE_RATE
    if not valid:
        log.warning("study invalid: failure rate %.1f%% exceeds %.0f%%", 100 * worst,
                    100 * MAX_FAILURE_RATE)
    return StudyResult(cfg, rows, failed_reps, valid, errors)


# ---------------------------------------------------------------------------
# study files


CSV_FIELDS = ("T", "hypothesis", "dgp", "case", "procedure", "rejection_rate", "se",
              "n", "failures")


def load_study(path: str | Path) -> list[SimConfig]:
    """Read a study JSON: shared settings plus a list of ``designs`` overriding them."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return study_configs(obj)


def study_configs(obj: dict, **overrides) -> list[SimConfig]:
    obj = dict(obj)
    designs = obj.pop("designs", [{}])
    obj.pop("description", None)
    base = {**obj, **{k: v for k, v in overrides.items() if v is not None}}
    return [SimConfig.from_dict({**base, **des, **{k: v for k, v in overrides.items()
                                                    if v is not None}})
            for des in designs]


def write_rows(rows: list, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k])
                        for k in CSV_FIELDS})


def lookup(rows: list, hypothesis: str, procedure: str, **match) -> dict:
    """The unique row for (hypothesis, procedure) and optional T/dgp/case filters."""
    hits = [r for r in rows if r["hypothesis"] == hypothesis and r["procedure"] == procedure
            and all(r[k] == v for k, v in match.items())]
    if len(hits) != 1:
        raise KeyError(f"{len(hits)} rows match {hypothesis}/{procedure}/{match}")
    return hits[0]
