"""Command-line interface: ``proxyctl estimate | simulate | benchmark``.

Every command reads an optional JSON config (a file path or an inline JSON
object) and lets flags override individual fields. The fully resolved config
is echoed into the output so a run can be reproduced by feeding it back.
Diagnostics go to standard error; data go to files (or standard output when
no output path is given). Files are written to a temporary sibling and then
renamed into place.

The thread count of the BLAS backend can be capped with ``PROXYCTL_THREADS``;
it is applied before numpy is first imported.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import warnings
from pathlib import Path

THREAD_ENV = "PROXYCTL_THREADS"
_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_thread_env():
    threads = os.environ.get(THREAD_ENV)
    if threads:
        for var in _BLAS_VARS:
            os.environ.setdefault(var, threads)


_apply_thread_env()

import numpy as np  # noqa: E402

from . import harness  # noqa: E402
from .errors import ConfigError, InvalidInputError, ParseError, ProxyCtlError  # noqa: E402
from .estimators import (  # noqa: E402
    FoldPlan,
    estimate_2sls,
    estimate_adaptive,
    estimate_dr,
    estimate_fixed_rank,
    estimate_naive_ols,
)
from .inference import confidence_interval  # noqa: E402
from .partialling import DataMatrices  # noqa: E402
from .simulate import DgpSpec, draw_dataset, draw_params, make_rng  # noqa: E402

log = logging.getLogger("proxyctl")

ESTIMATE_DEFAULTS = {
    "input": None,
    "roles": None,
    "estimator": "dr",
    "rank": None,
    "lambda": "cv",
    "delta": None,
    "folds": 5,
    "cv_folds": 5,
    "levels": [0.90, 0.95, 0.99],
    "seed": 0,
    "out": None,
    "format": "json",
}
SIMULATE_DEFAULTS = {"dgp": None, "seed": None, "out": None}
BENCHMARK_DEFAULTS = {"grid": None, "preset": None, "seed": None, "out": None, "format": "csv",
                      "workers": 1}

PRESETS = {
    # the three rank-selection acceptance cells at 100 replications
    "desk": {
        "cells": [
            {"d_w": 10, "d_v": 50, "n": 5000},
            {"d_w": 10, "d_v": 20, "n": 10000},
            {"d_w": 10, "d_v": 10, "n": 10000},
        ],
        "estimators": ["adaptive"],
        "replications": 100,
    },
    "full": {
        "cells": [
            {"d_w": w, "d_v": v, "n": n}
            for w, v in ((10, 10), (20, 20), (10, 20), (20, 40), (10, 50), (20, 100))
            for n in (1000, 5000, 10000, 50000, 100000)
        ],
        "estimators": ["naive", "fixed_rank", "adaptive", "dr"],
        "replications": 500,
    },
}


# ---------------------------------------------------------------- config ---

def load_config(source: str | None) -> dict:
    """Parse ``source`` as inline JSON (if it starts with '{') or a file path."""
    if source is None:
        return {}
    text = source
    if not source.lstrip().startswith("{"):
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _merge(defaults: dict, cfg: dict, flags: dict) -> dict:
    unknown = set(cfg) - set(defaults) - {"command"}
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    out = dict(defaults)
    out.update({k: v for k, v in cfg.items() if k != "command"})
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _parse_levels(text):
    if text is None:
        return None
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --levels value {text!r}") from exc


def _parse_lambda(text):
    if text is None or text == "cv":
        return text
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"--lambda must be a number or 'cv', got {text!r}") from exc


# ------------------------------------------------------------------- I/O ---

def atomic_write(path: str | None, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temporary file and rename."""
    if path is None:
        sys.stdout.buffer.write(payload)
        sys.stdout.flush()
        return
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_csv(path: str) -> tuple[list[str], np.ndarray]:
    """Read a headed, comma-separated numeric table.

    Parse failures name the 1-based file line and the column header.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot open input {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise ParseError(f"{path}: duplicate column names in header")
        rows = []
        for line_no, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(header):
                raise ParseError(f"{path}: line {line_no} has {len(raw)} fields, header has {len(header)}")
            row = []
            for name, cell in zip(header, raw):
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(f"{path}: line {line_no}, column '{name}': "
                                     f"cannot parse {cell!r} as a number") from None
                if not math.isfinite(value):
                    raise ParseError(f"{path}: line {line_no}, column '{name}': non-finite value {cell!r}")
                row.append(value)
            rows.append(row)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return header, np.array(rows, dtype=np.float64)


def _as_list(value, role):
    if value is None:
        return []
    if isinstance(value, str):
        return [value]
    if isinstance(value, list) and all(isinstance(v, str) for v in value):
        return value
    raise ConfigError(f"role '{role}' must be a column name or a list of names")


def build_data(header: list[str], table: np.ndarray, roles: dict, need_proxies: bool) -> DataMatrices:
    """Map named columns to roles. A constant column is added to D if absent."""
    if not isinstance(roles, dict):
        raise ConfigError("'roles' must map y, x, z, v (and optionally d) to column names")
    unknown = set(roles) - {"y", "x", "z", "v", "d"}
    if unknown:
        raise ConfigError(f"unknown roles {sorted(unknown)}")
    mapped = {r: _as_list(roles.get(r), r) for r in ("y", "x", "z", "v", "d")}
    required = ("y", "x", "z", "v") if need_proxies else ("y", "x")
    for role in required:
        if not mapped[role]:
            raise ConfigError(f"role '{role}' is not mapped to any column")
    if len(mapped["y"]) != 1:
        raise ConfigError("role 'y' must name exactly one column")
    seen = {}
    for role, names in mapped.items():
        for name in names:
            if name in seen:
                raise ConfigError(f"column '{name}' is mapped to both '{seen[name]}' and '{role}'")
            seen[name] = role
            if name not in header:
                raise ConfigError(f"column '{name}' (role '{role}') not found in input header")
    index = {name: i for i, name in enumerate(header)}
    n = table.shape[0]

    def cols(role):
        return table[:, [index[c] for c in mapped[role]]] if mapped[role] else np.zeros((n, 0))

    d = cols("d")
    if d.shape[1] == 0 or not np.all(d[:, 0] == 1.0):
        d = np.hstack([np.ones((n, 1)), d])
    return DataMatrices(cols("y"), cols("x"), cols("z"), cols("v"), d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def _dumps(obj) -> bytes:
    return (json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n").encode()


# -------------------------------------------------------------- commands ---

def cmd_estimate(cfg: dict) -> int:
    if cfg["input"] is None:
        raise ConfigError("estimate needs an input CSV ('input' or --input)")
    name = cfg["estimator"]
    if name not in harness.ESTIMATORS:
        raise ConfigError(f"unknown estimator {name!r}; choose from {list(harness.ESTIMATORS)}")
    if cfg["format"] not in ("json", "csv"):
        raise ConfigError("format must be json or csv")
    header, table = read_csv(cfg["input"])
    data = build_data(header, table, cfg["roles"], need_proxies=name != "naive")
    seed = int(cfg["seed"])
    lam = _parse_lambda(cfg["lambda"])
    lam = None if lam == "cv" else lam
    result = {"estimator": name, "n": data.n, "seed": seed}
    diag = {}
    if name == "naive":
        beta = estimate_naive_ols(data)
    elif name == "tsls":
        beta = estimate_2sls(data)
    elif name == "fixed_rank":
        rank = cfg["rank"]
        if rank is None:
            raise ConfigError("fixed_rank needs 'rank' (or --rank)")
        est = estimate_fixed_rank(data, int(rank))
        beta = est.beta
        result["rank"] = est.rank_used
        diag = est.diagnostics
    elif name == "adaptive":
        est = estimate_adaptive(data, lam, int(cfg["cv_folds"]), seed=seed)
        beta = est.beta
        result["rank"] = est.rank_used
        result["lambda"] = est.diagnostics["lambda"]
        diag = est.diagnostics
    else:
        plan = FoldPlan.make(data.n, int(cfg["folds"]), seed)
        est = estimate_dr(data, plan, lam, cfg["delta"], cv_folds=int(cfg["cv_folds"]), seed=seed)
        beta = est.beta
        result["rank"] = est.diagnostics["ranks"]
        result["lambda"] = est.lam
        result["sigma2"] = est.sigma2
        result["std_error"] = np.sqrt(np.maximum(np.diag(est.sigma2), 0.0) / data.n)
        cis = []
        for k in range(beta.size):
            l = np.zeros(beta.size)
            l[k] = 1.0
            for level in cfg["levels"]:
                ci = confidence_interval(beta, est.sigma2, l, float(level), data.n)
                cis.append({"coordinate": k, "level": float(level), "lower": ci.lower,
                            "upper": ci.upper, "center": ci.center})
        result["ci"] = cis
        diag = est.diagnostics
        if diag.get("weak_identification"):
            log.warning("weak identification: ratio %.3g", diag["weak_identification_ratio"])
    if name != "dr" and cfg["levels"] and "levels" in cfg.get("_explicit", ()):
        log.warning("confidence intervals are only produced for the dr estimator")
    result["beta"] = beta
    result["diagnostics"] = diag
    result["config"] = {k: v for k, v in cfg.items() if not k.startswith("_")}
    log.info("estimate %s: beta=%s", name, np.array2string(beta, precision=6))
    if cfg["format"] == "json":
        payload = _dumps(result)
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["coordinate", "beta", "level", "lower", "upper"])
        for k in range(beta.size):
            rows = [c for c in result.get("ci", []) if c["coordinate"] == k]
            if rows:
                for c in rows:
                    w.writerow([k, repr(float(beta[k])), repr(c["level"]), repr(c["lower"]), repr(c["upper"])])
            else:
                w.writerow([k, repr(float(beta[k])), "", "", ""])
        payload = buf.getvalue().encode()
    atomic_write(cfg["out"], payload)
    return 0


def dataset_csv(data: DataMatrices) -> bytes:
    """CSV with headers y, x1.., z1.., v1.., d1.. and round-trip float text."""
    names = ["y"]
    blocks = [data.y]
    for role in ("x", "z", "v", "d"):
        block = getattr(data, role)
        names += [f"{role}{k + 1}" for k in range(block.shape[1])]
        blocks.append(block)
    table = np.hstack(blocks)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for row in table:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue().encode()


def cmd_simulate(cfg: dict) -> int:
    raw = cfg["dgp"]
    if not isinstance(raw, dict):
        raise ConfigError("simulate needs a 'dgp' object with at least d_w and d_v")
    raw = dict(raw)
    if cfg["seed"] is not None:
        raw["seed"] = int(cfg["seed"])
    spec = DgpSpec.from_dict(raw)
    rng = make_rng(spec.seed)
    params = draw_params(spec, rng)
    ds = draw_dataset(params, spec.n, rng)
    sidecar = {"spec": spec.to_dict(), "params": params.to_dict(), "seed": spec.seed,
               "config": {**cfg, "dgp": spec.to_dict()}}
    out = cfg["out"]
    atomic_write(out, dataset_csv(ds.data))
    if out is not None:
        atomic_write(str(out) + ".params.json", _dumps(sidecar))
    else:
        log.info("no output path; parameter sidecar not written")
    log.info("simulated n=%d rows (d_W=%d, d_V=%d, d_Z=%d)", spec.n, spec.d_w, spec.d_v, spec.d_z)
    return 0


def cmd_benchmark(cfg: dict) -> int:
    raw = cfg["grid"]
    if raw is None:
        preset = cfg["preset"] or "desk"
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        raw = PRESETS[preset]
    raw = dict(raw)
    for key, flag in (("master_seed", "seed"), ("estimators", "estimators"), ("levels", "levels"),
                      ("dr_folds", "folds"), ("fixed_rank", "rank")):
        if cfg.get(flag) is not None:
            raw[key] = cfg[flag]
    if cfg["format"] not in ("json", "csv"):
        raise ConfigError("format must be json or csv")
    grid = harness.ExperimentGrid.from_dict(raw)
    results = harness.run_grid(grid, workers=int(cfg["workers"]))
    for r in results:
        if r.failures:
            log.warning("cell %d %s: %d of %d replications failed", r.cell_id, r.estimator, r.failures, r.reps)
    sys.stdout.write(harness.rank_table_text(results))
    sys.stdout.flush()
    body = harness.summarize(results, cfg["format"])
    if cfg["format"] == "json":
        doc = json.loads(body)
        doc["config"] = _jsonable({**{k: v for k, v in cfg.items() if not k.startswith("_")},
                                   "grid": grid.to_dict(), "preset": None})
        body = _dumps(doc)
    if cfg["out"] is not None:
        atomic_write(cfg["out"], body)
        if cfg["format"] == "csv":
            echo = {**{k: v for k, v in cfg.items() if not k.startswith("_")}, "grid": grid.to_dict(),
                    "preset": None}
            atomic_write(str(cfg["out"]) + ".config.json", _dumps(echo))
    return 0


# ------------------------------------------------------------ entry point ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxyctl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file or inline JSON object")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output path (default: standard output)")

    est = sub.add_parser("estimate", help="estimate the treatment coefficient from a CSV")
    common(est)
    est.add_argument("--input", help="input CSV with a header row")
    est.add_argument("--estimator", choices=harness.ESTIMATORS)
    est.add_argument("--rank", type=int)
    est.add_argument("--lambda", dest="lambda_", help="eigenvalue threshold or 'cv'")
    est.add_argument("--delta", type=float)
    est.add_argument("--folds", type=int)
    est.add_argument("--levels", help="comma-separated CI levels, e.g. 0.9,0.95")
    est.add_argument("--format", choices=("json", "csv"))

    sim = sub.add_parser("simulate", help="draw a synthetic dataset")
    common(sim)

    bench = sub.add_parser("benchmark", help="run a Monte Carlo grid")
    common(bench)
    bench.add_argument("--preset", choices=sorted(PRESETS))
    bench.add_argument("--estimator", help="comma-separated estimator list")
    bench.add_argument("--rank", type=int, help="rank for fixed_rank (default d_V)")
    bench.add_argument("--folds", type=int, help="cross-fitting folds for dr")
    bench.add_argument("--levels", help="comma-separated CI levels")
    bench.add_argument("--format", choices=("json", "csv"))
    bench.add_argument("--workers", type=int, help="worker processes")
    return parser


def _resolve(args) -> dict:
    cfg = load_config(args.config)
    if args.command == "estimate":
        flags = {"input": args.input, "estimator": args.estimator, "rank": args.rank,
                 "lambda": _parse_lambda(args.lambda_), "delta": args.delta, "folds": args.folds,
                 "levels": _parse_levels(args.levels), "seed": args.seed, "out": args.out,
                 "format": args.format}
        merged = _merge(ESTIMATE_DEFAULTS, cfg, flags)
        merged["lambda"] = _parse_lambda(merged["lambda"])
        merged["_explicit"] = tuple(k for k, v in flags.items() if v is not None) + tuple(cfg)
        return merged
    if args.command == "simulate":
        return _merge(SIMULATE_DEFAULTS, cfg, {"seed": args.seed, "out": args.out})
    flags = {"preset": args.preset, "seed": args.seed, "out": args.out, "format": args.format,
             "workers": args.workers}
    merged = _merge({**BENCHMARK_DEFAULTS, "estimators": None, "levels": None, "folds": None,
                     "rank": None}, cfg, flags)
    if args.estimator is not None:
        merged["estimators"] = [e.strip() for e in args.estimator.split(",") if e.strip()]
    if args.levels is not None:
        merged["levels"] = _parse_levels(args.levels)
    if args.folds is not None:
        merged["folds"] = args.folds
    if args.rank is not None:
        merged["rank"] = args.rank
    return merged


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve(args)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            status = {"estimate": cmd_estimate, "simulate": cmd_simulate,
                      "benchmark": cmd_benchmark}[args.command](cfg)
        for w in caught:
            log.warning("%s", w.message)
        return status
    except ProxyCtlError as exc:
        print(f"proxyctl: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"proxyctl: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
