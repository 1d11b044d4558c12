"""Command-line front end: ``estimate``, ``simulate``, ``montecarlo``, ``diagnose``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .diagnostics import run_suite
from .estimator import EstimatorConfig, estimate
from .simulate import DEFAULTS, DGP_KINDS, DgpSpec, sample, true_theta
from .types import DatasetError, parse_basis, read_csv, write_csv

COMMANDS = ("estimate", "simulate", "montecarlo", "diagnose")
JOBS_ENV = "DIRECTDML_JOBS"


class ConfigError(ValueError):
    """Invalid configuration text or flag combination."""


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    command: str = "estimate"
    data: Optional[str] = None
    dgp: Optional[str] = None
    dgp_params: tuple = ()
    n: int = 1000
    reps: int = 100
    seed: int = 0
    functional: str = "ate"
    riesz_model: str = "linear"
    loss: str = "ls"
    riesz_basis: Optional[str] = None
    ratio_link: str = "softplus"
    gamma_basis: Optional[str] = None
    weighted: bool = False
    tmle: bool = False
    iterations: int = 2
    crossfit: int = 5
    ridge: float = 0.0
    tol: float = 1e-10
    max_iter: Optional[int] = None
    out: Optional[str] = None
    scores: Optional[str] = None
    summary: Optional[str] = None
    jobs: Optional[int] = None
    broken_fixture: bool = False

    def estimator(self) -> EstimatorConfig:
        return EstimatorConfig(
            functional=self.functional, riesz_model=self.riesz_model, loss=self.loss,
            riesz_basis=self.riesz_basis, ratio_link=self.ratio_link, gamma_basis=self.gamma_basis,
            weighted=self.weighted, tmle=self.tmle, iterations=self.iterations, crossfit=self.crossfit,
            seed=self.seed, ridge=self.ridge, tol=self.tol, max_iter=self.max_iter,
        )

    def dgp_spec(self, seed: Optional[int] = None) -> DgpSpec:
        if self.dgp is None:
            raise ConfigError("no dgp configured")
        return DgpSpec(self.dgp, dict(self.dgp_params), self.seed if seed is None else seed)

    def resolved(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "dgp_params":
                v = {k: list(x) if isinstance(x, tuple) else x for k, x in v}
            out[f.name] = v
        return out


_BOOL = {"on": True, "true": True, "yes": True, "1": True, "off": False, "false": False, "no": False, "0": False}
_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, text: str):
    t = _TYPES[key]
    text = text.strip()
    if "Optional" in t and text.lower() in ("", "none"):
        return None
    if "bool" in t:
        if text.lower() not in _BOOL:
            raise ConfigError(f"{key} expects on/off, got {text!r}")
        return _BOOL[text.lower()]
    if "int" in t:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key} expects an integer, got {text!r}") from None
    if "float" in t:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key} expects a number, got {text!r}") from None
    return text


def _parse_param(text: str):
    text = text.strip()
    parts = [p.strip() for p in text.split(",")]
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise ConfigError(f"DGP parameter value {text!r} is not numeric") from None
    return tuple(vals) if len(vals) > 1 or text.endswith(",") else vals[0]


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v) + ("," if len(v) == 1 else "")
    return str(v)


def parse_config(text: str, source: str = "config") -> dict:
    """Parse flat ``key = value`` lines into a dict of overrides.

    ``#`` starts a comment; ``dgp.<name> = value`` sets a DGP parameter.
    Errors name the offending line.
    """
    values: dict = {}
    params: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        try:
            if key.startswith("dgp."):
                params[key[4:]] = _parse_param(val)
            elif key in _TYPES:
                if key == "dgp_params":
                    raise ConfigError("use dgp.<name> = value for DGP parameters")
                values[key] = _parse_value(key, val)
            else:
                raise ConfigError(f"unknown key {key!r}")
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    if params:
        values["dgp_params"] = tuple(sorted(params.items()))
    return values


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form: one ``key = value`` line per field in declaration order."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "dgp_params":
            for k, x in v:
                lines.append(f"dgp.{k} = {_format_value(x)}")
        else:
            lines.append(f"{f.name} = {_format_value(v)}")
    return "\n".join(lines) + "\n"


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.command not in COMMANDS:
        raise ConfigError(f"unknown command {cfg.command!r}")
    if cfg.command == "estimate":
        if not cfg.data and not cfg.dgp:
            raise ConfigError("estimate needs --data or --dgp")
        if cfg.data and not Path(cfg.data).is_file():
            raise ConfigError(f"data file {cfg.data!r} does not exist")
    if cfg.command in ("simulate", "montecarlo"):
        if not cfg.dgp:
            raise ConfigError(f"{cfg.command} needs --dgp")
    if cfg.dgp is not None:
        if cfg.dgp not in DGP_KINDS:
            raise ConfigError(f"unknown dgp {cfg.dgp!r}; expected one of {DGP_KINDS}")
        unknown = {k for k, _ in cfg.dgp_params} - set(DEFAULTS[cfg.dgp])
        if unknown:
            raise ConfigError(f"unknown parameters for {cfg.dgp}: {sorted(unknown)}")
    if cfg.n < 1 or cfg.reps < 1:
        raise ConfigError("n and reps must be positive")
    if cfg.jobs is not None and cfg.jobs < 1:
        raise ConfigError("jobs must be positive")
    if cfg.command in ("estimate", "montecarlo"):
        try:
            ec = cfg.estimator()
            q = cfg.dgp_spec().q if cfg.dgp else 1
            parse_basis(ec.riesz_basis_token(), q)
            parse_basis(ec.gamma_basis_token(), q)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return cfg


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _jobs(cfg: RunConfig) -> int:
    if cfg.jobs is not None:
        return cfg.jobs
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def _load_data(cfg: RunConfig):
    if cfg.data:
        return read_csv(cfg.data)
    return sample(cfg.dgp_spec(), cfg.n)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def run_estimate(cfg: RunConfig) -> dict:
    data = _load_data(cfg)
    est = estimate(data, cfg.estimator(), jobs=_jobs(cfg))
    result = est.as_dict()
    result["n"] = data.n
    result["config"] = cfg.resolved()
    if cfg.dgp and not cfg.data:
        try:
            result["truth"] = true_theta(cfg.dgp_spec(), cfg.functional)
        except ValueError:
            pass
    if cfg.scores:
        with open(cfg.scores, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "score"])
            for i, s in enumerate(est.scores):
                w.writerow([i, repr(float(s))])
    return result


def run_simulate(cfg: RunConfig) -> dict:
    data = sample(cfg.dgp_spec(), cfg.n)
    if cfg.out:
        write_csv(data, cfg.out)
    return {"rows": data.n, "dgp": cfg.dgp, "seed": cfg.seed, "out": cfg.out, "config": cfg.resolved()}


def _replicate(args) -> dict:
    cfg, rep = args
    seed = cfg.seed + rep
    truth = true_theta(cfg.dgp_spec(), cfg.functional)
    row = {"rep": rep, "seed": seed, "theta_hat": math.nan, "se": math.nan,
           "lo": math.nan, "hi": math.nan, "covered": "", "error": ""}
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            data = sample(cfg.dgp_spec(seed), cfg.n)
            est = estimate(data, replace(cfg, seed=seed).estimator())
        lo, hi = est.ci95
        row.update(theta_hat=est.theta_hat, se=est.se, lo=lo, hi=hi, covered=int(lo <= truth <= hi))
    except Exception as exc:  # recorded per replication; the study continues
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def summarize(rows: list[dict], truth: float) -> dict:
    ok = [r for r in rows if not r["error"]]
    th = np.array([r["theta_hat"] for r in ok])
    se = np.array([r["se"] for r in ok])
    cov = np.array([r["covered"] for r in ok], dtype=float)
    nan = float("nan")
    return {
        "replications": len(rows),
        "failures": len(rows) - len(ok),
        "truth": truth,
        "mean_theta": float(th.mean()) if ok else nan,
        "bias": float(th.mean() - truth) if ok else nan,
        "rmse": float(np.sqrt(np.mean((th - truth) ** 2))) if ok else nan,
        "coverage": float(cov.mean()) if ok else nan,
        "mean_se": float(se.mean()) if ok else nan,
        "sd_theta": float(th.std(ddof=1)) if len(ok) > 1 else nan,
    }


MC_COLUMNS = ("rep", "seed", "theta_hat", "se", "lo", "hi", "covered", "error")


def run_montecarlo(cfg: RunConfig) -> dict:
    jobs = _jobs(cfg)
    tasks = [(cfg, r) for r in range(cfg.reps)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_replicate, tasks))
    else:
        rows = [_replicate(t) for t in tasks]
    rows.sort(key=lambda r: r["rep"])
    truth = true_theta(cfg.dgp_spec(), cfg.functional)
    summ = summarize(rows, truth)
    if cfg.out:
        with open(cfg.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=MC_COLUMNS)
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    out = {"summary": summ, "config": cfg.resolved()}
    if cfg.summary:
        Path(cfg.summary).write_text(_json(out))
    return out


def run_diagnose(cfg: RunConfig) -> dict:
    rows = run_suite(cfg.seed, cfg.broken_fixture)
    return {"checks": [r.as_dict() for r in rows], "passed": all(r.passed for r in rows),
            "table": [r.line() for r in rows]}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_estimator_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--functional", choices=("ate", "att", "ame", "covshift"))
    p.add_argument("--riesz-model", choices=("linear", "logit-inv", "ratio"))
    p.add_argument("--loss", help="ls | kl | entropy | power:<b>")
    p.add_argument("--riesz-basis", help="basis token, e.g. split:raw or poly:2:d")
    p.add_argument("--ratio-link", choices=("softplus", "exp"))
    p.add_argument("--gamma-basis", help="basis token for the outcome regression")
    p.add_argument("--weighted", choices=("on", "off"))
    p.add_argument("--tmle", choices=("on", "off"))
    p.add_argument("--iterations", type=int, help="rounds T of the alternating weighted algorithm")
    p.add_argument("--crossfit", type=int, help="folds K (0 for full-sample fitting)")
    p.add_argument("--ridge", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)


def _add_dgp_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dgp", choices=DGP_KINDS)
    p.add_argument("--n", type=int)
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="override a DGP parameter (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="directdml", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--jobs", type=int, help=f"parallel workers (default ${JOBS_ENV} or 1)")

    p = sub.add_parser("estimate", help="estimate a parameter from a CSV or simulated data")
    common(p)
    p.add_argument("--data", help="input CSV with y, d, z1..zq[, role]")
    p.add_argument("--scores", help="write per-row scores to this CSV")
    _add_dgp_flags(p)
    _add_estimator_flags(p)

    p = sub.add_parser("simulate", help="draw a synthetic dataset")
    common(p)
    _add_dgp_flags(p)

    p = sub.add_parser("montecarlo", help="repeat estimation over simulated replications")
    common(p)
    p.add_argument("--reps", type=int)
    p.add_argument("--summary", help="write the summary JSON here")
    _add_dgp_flags(p)
    _add_estimator_flags(p)

    p = sub.add_parser("diagnose", help="run the self-check suite")
    common(p)
    p.add_argument("--broken-fixture", action="store_true", help="include a planted wrong-gradient check")
    return parser


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    values: dict = {"command": ns.command}
    if getattr(ns, "config", None):
        path = Path(ns.config)
        if not path.is_file():
            raise ConfigError(f"config file {ns.config!r} does not exist")
        values.update(parse_config(path.read_text(), str(path)))
        values["command"] = ns.command
    for key, val in vars(ns).items():
        if key in ("command", "config", "param") or val is None:
            continue
        if key == "broken_fixture" and not val:
            continue
        if key in ("weighted", "tmle"):
            val = _BOOL[val]
        values[key] = val
    if getattr(ns, "param", None):
        params = dict(values.get("dgp_params", ()))
        for item in ns.param:
            if "=" not in item:
                raise ConfigError(f"--param expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            params[k.strip()] = _parse_param(v)
        values["dgp_params"] = tuple(sorted(params.items()))
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


RUNNERS = {"estimate": run_estimate, "simulate": run_simulate,
           "montecarlo": run_montecarlo, "diagnose": run_diagnose}


def _error(kind: str, exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc)}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = validate(config_from_args(ns))
    except (ConfigError, DatasetError) as exc:
        return _error("config", exc, 2)
    try:
        result = RUNNERS[cfg.command](cfg)
    except (DatasetError, ValueError, RuntimeError, OSError) as exc:
        return _error(type(exc).__name__, exc, 1)
    text = _json(result)
    if cfg.command == "estimate" and cfg.out:
        Path(cfg.out).write_text(text)
    elif cfg.command == "diagnose":
        if cfg.out:
            Path(cfg.out).write_text(text)
        sys.stdout.write("\n".join(result["table"]) + "\n")
        return 0 if result["passed"] else 1
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
