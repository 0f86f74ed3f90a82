"""Command line: ``gps estimate``, ``gps test`` and ``gps simulate``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure or infeasible trace.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .estimators import EstimationError, GroupFit, estimate
from .panel import LinearHypothesis, PanelError, load_panel
from .selective import InfeasibleTraceError, selective_test_panel
from .simulation import run_rejection_study, study_configs, write_rows
from .variance import CovarianceError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class CliError(Exception):
    def __init__(self, reason: str, code: int = EXIT_INPUT):
        super().__init__(reason)
        self.code = code


@dataclass
class RunManifest:
    command: list
    config_hash: str
    seed: int | None
    wall_time: float = 0.0
    versions: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def write(self, path: Path) -> None:
        missing = [p for p in self.outputs if not Path(p).is_file() or Path(p).stat().st_size == 0]
        if missing:
            raise RuntimeError(f"manifest lists missing or empty outputs: {missing}")
        path.write_text(json.dumps(self.__dict__, indent=2) + "\n", encoding="utf-8")


def _versions() -> dict:
    import mpmath
    import pandas
    import scipy
    return {"grouppanel": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
            "pandas": pandas.__version__, "mpmath": mpmath.__version__}


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("GPS_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"GPS_SEED must be an integer, got {env!r}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _load(args):
    try:
        x = args.x.split(",") if args.x else None
        return load_panel(args.data, unit=args.unit, time=args.time, y=args.y, x=x)
    except (PanelError, OSError, ValueError) as exc:
        raise CliError(f"invalid panel: {exc}")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def group_summary(fit: GroupFit, x_names) -> str:
    names = list(x_names) + [f"d{k}" for k in range(len(x_names), fit.K)]
    sizes = fit.sizes
    lines = [f"method={fit.method} G={fit.G} objective={fit.objective:.6g} "
             f"iterations={fit.M} converged={fit.converged}",
             "group  size  " + "  ".join(f"{n:>12s}" for n in names[:fit.n_slopes])]
    for g in range(fit.G):
        coefs = "  ".join(f"{v:12.6g}" for v in fit.alpha[g, :fit.n_slopes])
        lines.append(f"{g + 1:>5d}  {sizes[g]:>4d}  {coefs}")
    return "\n".join(lines) + "\n"


def cmd_estimate(args) -> int:
    if args.groups < 1:
        raise CliError("groups must be ≥ 1")
    if args.restarts < 1:
        raise CliError("restarts must be ≥ 1")
    d = _load(args)
    if args.groups > d.N:
        raise CliError(f"groups must be ≤ N ({d.N})")
    if args.method == "tsk" and d.T < d.K:
        raise CliError("TSK requires T ≥ K")
    if args.within and d.T < 2:
        raise CliError("within transformation requires T ≥ 2")
    seed = _seed(args.seed)
    start = time.time()
    try:
        fit = estimate(d, args.method, args.groups, args.restarts, seed, within=args.within)
    except EstimationError as exc:
        raise CliError(str(exc), EXIT_NUMERIC)
    out = _out_dir(args)
    fit_path, table_path = out / "fit.json", out / "groups.txt"
    obj = fit.to_dict()
    obj["unit_ids"] = list(d.unit_ids)
    obj["x_names"] = list(d.x_names)
    _write_json(fit_path, obj)
    summary = group_summary(fit, d.x_names)
    table_path.write_text(summary, encoding="utf-8")
    sys.stdout.write(summary)
    _manifest(args, out, seed, start, [fit_path, table_path])
    return EXIT_OK


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read {what}: {exc}")


def cmd_test(args) -> int:
    d = _load(args)
    try:
        fit = GroupFit.from_dict(_read_json(args.fit, "fit"))
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"invalid fit file: {exc}")
    if fit.gamma.shape[0] != d.N:
        raise CliError(f"fit has {fit.gamma.shape[0]} units, panel has {d.N}")
    try:
        H = LinearHypothesis.from_dict(_read_json(args.hypothesis, "hypothesis"),
                                       G=fit.G, K=fit.n_slopes)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"invalid hypothesis: {exc}")
    if args.variance == "theory" and args.sigma2 is None:
        raise CliError("--variance theory needs --sigma2")
    if args.bandwidth is not None and args.bandwidth < 1:
        raise CliError("bandwidth must be ≥ 1")
    start = time.time()
    try:
        res = selective_test_panel(d, fit, H, variance=args.variance, bandwidth=args.bandwidth,
                                   sigma2=args.sigma2, projection=args.projection)
    except InfeasibleTraceError as exc:
        raise CliError(str(exc), EXIT_NUMERIC)
    except CovarianceError as exc:
        raise CliError(str(exc), EXIT_NUMERIC)
    except ValueError as exc:
        raise CliError(str(exc))
    out = _out_dir(args)
    path = out / "test.json"
    _write_json(path, res.to_dict())
    sys.stdout.write(f"statistic={res.statistic:.6g} df={res.df} naive_p={res.naive_p:.6g} "
                     f"selective_p={res.selective_p:.6g}\n")
    _manifest(args, out, None, start, [path])
    return EXIT_OK


def cmd_simulate(args) -> int:
    study = _read_json(args.config, "config")
    seed = args.seed if args.seed is not None else (
        int(os.environ["GPS_SEED"]) if "GPS_SEED" in os.environ and "seed" not in study else None)
    if args.jobs < 1:
        raise CliError("jobs must be ≥ 1")
    try:
        configs = study_configs(study, reps=args.reps, seed=seed)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}")
    start = time.time()
    rows, valid, failures = [], True, 0
    for cfg in configs:
        res = run_rejection_study(cfg, jobs=args.jobs)
        rows.extend(res.rows)
        valid &= res.valid
        failures += res.failures
    out = _out_dir(args)
    path = out / "rejections.csv"
    write_rows(rows, path)
    for r in rows:
        sys.stdout.write(f"T={r['T']} {r['hypothesis']} {r['dgp']} {r['case']} "
                         f"{r['procedure']}: {r['rejection_rate']:.3f} (se {r['se']:.3f})\n")
    _manifest(args, out, configs[0].seed, start, [path],
              extra={"valid": bool(valid), "failed_replications": failures,
                     "configs": [c.to_dict() for c in configs]})
    if not valid:
        sys.stderr.write("error: more than 5% of replications failed; study invalid\n")
        return EXIT_NUMERIC
    return EXIT_OK


def _manifest(args, out: Path, seed, start: float, outputs, extra=None) -> None:
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    man = RunManifest(command=sys.argv[:1] + list(args.argv), config_hash=_hash(flags),
                      seed=seed, wall_time=time.time() - start, versions=_versions(),
                      outputs=[str(p) for p in outputs], extra=extra or {})
    man.write(out / "manifest.json")


def _panel_flags(p):
    p.add_argument("--data", required=True, help="long-format CSV: one row per (unit, time)")
    p.add_argument("--unit", default="unit", help="unit id column")
    p.add_argument("--time", default="time", help="time id column")
    p.add_argument("--y", default="y", help="outcome column")
    p.add_argument("--x", default=None, help="comma-separated regressor columns (default: all others)")
    p.add_argument("--out-dir", default=".", help="directory for outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gps", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="estimate latent groups")
    _panel_flags(p)
    p.add_argument("--method", choices=("tsk", "pcr", "gfe"), required=True)
    p.add_argument("--groups", type=int, required=True)
    p.add_argument("--restarts", type=int, default=100)
    p.add_argument("--seed", type=int, default=None, help="default: $GPS_SEED or 0")
    p.add_argument("--within", action="store_true", help="demean by unit before fitting")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("test", help="selective test of a linear hypothesis")
    _panel_flags(p)
    p.add_argument("--fit", required=True, help="fit.json from `estimate`")
    p.add_argument("--hypothesis", required=True, help='JSON {"R": [[...]], "r_vec": [...]}')
    p.add_argument("--variance", choices=("pesaran", "dk", "theory"), default=None,
                   help="default: pesaran for tsk, dk otherwise")
    p.add_argument("--bandwidth", type=int, default=None, help="Bartlett bandwidth for dk")
    p.add_argument("--sigma2", type=float, default=None, help="error variance for theory")
    p.add_argument("--projection", choices=("cov", "gram"), default="cov")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("simulate", help="Monte Carlo rejection study")
    p.add_argument("--config", required=True, help="study JSON")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
