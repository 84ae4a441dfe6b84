"""Monte Carlo driver: replications over a grid of DGP cells.

Each replication of a cell draws fresh parameters and a fresh sample from the
stream ``make_rng(master_seed, cell.seed, rep)``, so results do not depend on
the order in which replications or cells are executed.

Result schema (one row per cell and estimator):

    cell_id, d_W, d_V, d_Z, n, estimator, median_se, coverage_90,
    coverage_95, coverage_99, rank_correct_frac, reps, failures, seed

``median_se`` is the median over successful replications of
``||beta_hat - beta0||^2`` (midpoint of the two central values for even
counts). Coverage columns are filled for the doubly-robust estimator only and
``rank_correct_frac`` for the rank-selecting estimators only; other cells are
empty in CSV and null in JSON. For the doubly-robust estimator a replication
counts as a correct rank selection when every fold selected ``d_W``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidInputError, ProxyCtlError
from .estimators import (
    FoldPlan,
    estimate_2sls,
    estimate_adaptive,
    estimate_dr,
    estimate_fixed_rank,
    estimate_naive_ols,
)
from .inference import confidence_interval
from .simulate import DgpSpec, draw_dataset, draw_params, make_rng

__all__ = [
    "ESTIMATORS",
    "SCHEMA",
    "CellResult",
    "ExperimentGrid",
    "RepRecord",
    "median",
    "parse_results",
    "run_cell",
    "run_grid",
    "run_replication",
    "summarize",
    "rank_table_text",
]

log = logging.getLogger(__name__)

ESTIMATORS = ("naive", "fixed_rank", "adaptive", "dr", "tsls")
LEVELS = (0.90, 0.95, 0.99)
SCHEMA = (
    "cell_id", "d_W", "d_V", "d_Z", "n", "estimator", "median_se",
    "coverage_90", "coverage_95", "coverage_99", "rank_correct_frac",
    "reps", "failures", "seed",
)


def _level_key(level: float) -> str:
    return f"coverage_{round(level * 100)}"


@dataclass(frozen=True)
class ExperimentGrid:
    cells: tuple
    estimators: tuple = ("adaptive",)
    replications: int = 100
    levels: tuple = LEVELS
    master_seed: int = 0
    fixed_rank: int | None = None   # None means r = d_V
    cv_folds: int = 5
    dr_folds: int = 5

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(
            c if isinstance(c, DgpSpec) else DgpSpec.from_dict(c) for c in self.cells))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))
        if not self.cells:
            raise ConfigError("grid needs at least one cell")
        if not self.estimators:
            raise ConfigError("grid needs at least one estimator")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ConfigError(f"unknown estimators {sorted(unknown)}; choose from {list(ESTIMATORS)}")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        bad = [v for v in self.levels if not any(math.isclose(v, ok) for ok in LEVELS)]
        if bad:
            raise ConfigError(f"levels must be drawn from {list(LEVELS)}, got {bad}")
        if self.cv_folds < 2 or self.dr_folds < 2:
            raise ConfigError("fold counts must be >= 2")

    def to_dict(self) -> dict:
        return {
            "cells": [c.to_dict() for c in self.cells],
            "estimators": list(self.estimators),
            "replications": self.replications,
            "levels": list(self.levels),
            "master_seed": self.master_seed,
            "fixed_rank": self.fixed_rank,
            "cv_folds": self.cv_folds,
            "dr_folds": self.dr_folds,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentGrid:
        allowed = set(cls.__dataclass_fields__)
        extra = set(raw) - allowed
        if extra:
            raise ConfigError(f"unknown grid fields: {sorted(extra)}")
        if "cells" not in raw:
            raise ConfigError("grid needs 'cells'")
        return cls(**raw)


@dataclass(frozen=True)
class RepRecord:
    """Outcome of one estimator on one replication."""

    estimator: str
    rep: int
    sq_error: float | None
    hits: dict = field(default_factory=dict)
    rank_correct: bool | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass(frozen=True)
class CellResult:
    cell_id: int
    spec: DgpSpec
    estimator: str
    median_se: float | None
    coverage: dict | None
    rank_correct_frac: float | None
    reps: int
    failures: int
    seed: int

    def row(self) -> dict:
        out = {
            "cell_id": self.cell_id, "d_W": self.spec.d_w, "d_V": self.spec.d_v,
            "d_Z": self.spec.d_z, "n": self.spec.n, "estimator": self.estimator,
            "median_se": self.median_se, "rank_correct_frac": self.rank_correct_frac,
            "reps": self.reps, "failures": self.failures, "seed": self.seed,
        }
        for level in LEVELS:
            out[_level_key(level)] = None if self.coverage is None else self.coverage.get(_level_key(level))
        return {k: out[k] for k in SCHEMA}


def median(values) -> float:
    """Median with the midpoint rule for even counts."""
    vals = sorted(float(v) for v in values)
    if not vals:
        raise InvalidInputError("median of an empty sequence")
    mid = len(vals) // 2
    if len(vals) % 2:
        return vals[mid]
    return 0.5 * (vals[mid - 1] + vals[mid])


def _one(name, data, params, grid: ExperimentGrid, rep_seed: int, rep: int) -> RepRecord:
    d_w = params.dims["w"]
    d_v = params.dims["v"]
    beta0 = params.beta0
    hits, rank_ok = {}, None
    if name == "naive":
        beta = estimate_naive_ols(data)
    elif name == "tsls":
        beta = estimate_2sls(data)
    elif name == "fixed_rank":
        beta = estimate_fixed_rank(data, d_v if grid.fixed_rank is None else grid.fixed_rank).beta
    elif name == "adaptive":
        est = estimate_adaptive(data, cv_folds=grid.cv_folds, seed=rep_seed)
        beta, rank_ok = est.beta, est.rank_used == d_w
    else:
        plan = FoldPlan.make(data.n, grid.dr_folds, rep_seed)
        est = estimate_dr(data, plan, cv_folds=grid.cv_folds, seed=rep_seed)
        beta = est.beta
        rank_ok = all(r == d_w for r in est.diagnostics["ranks"])
        l = np.zeros(beta.size)
        l[0] = 1.0
        for level in grid.levels:
            ci = confidence_interval(beta, est.sigma2, l, level, data.n)
            hits[_level_key(level)] = ci.contains(float(beta0[0]))
    if not np.all(np.isfinite(beta)):
        raise FloatingPointError("non-finite estimate")
    return RepRecord(name, rep, float(np.sum((beta - beta0) ** 2)), hits, rank_ok)


def run_replication(spec: DgpSpec, grid: ExperimentGrid, rep: int) -> list[RepRecord]:
    """Draw one parameter set and sample and run every requested estimator."""
    rng = make_rng(grid.master_seed, spec.seed, rep)
    params = draw_params(spec, rng)
    data = draw_dataset(params, spec.n, rng).data
    rep_seed = int(rng.integers(2**31 - 1))
    out = []
    for name in grid.estimators:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                out.append(_one(name, data, params, grid, rep_seed, rep))
        except (ProxyCtlError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            log.warning("cell seed %s rep %d estimator %s failed: %s", spec.seed, rep, name, exc)
            out.append(RepRecord(name, rep, None, error=f"{type(exc).__name__}: {exc}"))
    return out


def _aggregate(cell_id, spec, grid, records) -> list[CellResult]:
    results = []
    for name in grid.estimators:
        recs = [r for r in records if r.estimator == name]
        ok = [r for r in recs if not r.failed]
        med = median(r.sq_error for r in ok) if ok else None
        coverage = None
        if name == "dr":
            coverage = {
                _level_key(lv): (sum(r.hits[_level_key(lv)] for r in ok) / len(ok) if ok else None)
                for lv in grid.levels
            }
        rank_frac = None
        if name in ("adaptive", "dr") and ok:
            rank_frac = sum(bool(r.rank_correct) for r in ok) / len(ok)
        results.append(CellResult(cell_id, spec, name, med, coverage, rank_frac,
                                  len(recs), len(recs) - len(ok), grid.master_seed))
    return results


def _rep_task(args):
    spec, grid, rep = args
    return run_replication(spec, grid, rep)


def run_cell(cell_id: int, spec: DgpSpec, grid: ExperimentGrid, workers: int = 1) -> list[CellResult]:
    tasks = [(spec, grid, k) for k in range(grid.replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_rep_task, tasks))
    else:
        batches = [_rep_task(t) for t in tasks]
    records = [r for batch in batches for r in batch]
    return _aggregate(cell_id, spec, grid, records)


def run_grid(grid: ExperimentGrid, workers: int = 1) -> list[CellResult]:
    """Run every cell; failures are counted per estimator, never imputed."""
    results = []
    for cell_id, spec in enumerate(grid.cells):
        results.extend(run_cell(cell_id, spec, grid, workers))
    return results


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def summarize(results, fmt: str = "csv") -> bytes:
    """Serialize results (CellResult objects or row dicts) to CSV or JSON bytes."""
    rows = [r.row() if isinstance(r, CellResult) else {k: r[k] for k in SCHEMA} for r in results]
    if not rows:
        raise InvalidInputError("nothing to summarize")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SCHEMA)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in SCHEMA])
        return buf.getvalue().encode()
    if fmt == "json":
        return (json.dumps({"schema": list(SCHEMA), "rows": rows}, indent=2) + "\n").encode()
    raise InvalidInputError(f"unknown format {fmt!r}; use csv or json")


_INT_COLS = {"cell_id", "d_W", "d_V", "d_Z", "n", "reps", "failures", "seed"}


def parse_results(blob: bytes, fmt: str = "csv") -> list[dict]:
    """Inverse of :func:`summarize`: rows as dicts with typed values."""
    if fmt == "json":
        return json.loads(blob.decode())["rows"]
    if fmt != "csv":
        raise InvalidInputError(f"unknown format {fmt!r}; use csv or json")
    reader = csv.DictReader(io.StringIO(blob.decode()))
    if tuple(reader.fieldnames or ()) != SCHEMA:
        raise InvalidInputError("CSV header does not match the result schema")
    rows = []
    for raw in reader:
        row = {}
        for k in SCHEMA:
            v = raw[k]
            if k == "estimator":
                row[k] = v
            elif v == "":
                row[k] = None
            else:
                row[k] = int(v) if k in _INT_COLS else float(v)
        rows.append(row)
    return rows


def rank_table_text(results) -> str:
    """Fixed-width table of correct-rank frequencies for the adaptive estimator."""
    rows = [r.row() if isinstance(r, CellResult) else r for r in results]
    rows = [r for r in rows if r["estimator"] == "adaptive"]
    lines = ["Frequency of correct rank selection (adaptive estimator)",
             f"{'d_W':>5} {'d_V':>5} {'d_Z':>5} {'n':>7} {'reps':>6} {'fail':>5} {'freq':>7}"]
    for r in rows:
        freq = "" if r["rank_correct_frac"] is None else f"{r['rank_correct_frac']:.3f}"
        lines.append(f"{r['d_W']:>5} {r['d_V']:>5} {r['d_Z']:>5} {r['n']:>7} "
                     f"{r['reps']:>6} {r['failures']:>5} {freq:>7}")
    return "\n".join(lines) + "\n"

