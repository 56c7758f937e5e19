"""Rate sweeps: configuration, the (k, seed) job pool, log-log fits and
CSV/JSON persistence."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .environment import Environment, parse_law
from .errors import ConfigurationError, DomainError, StableHomogError
from .lattice import LatticeBox, _fraction
from .operators import BOUNDARIES, CACHE_LIMIT, NonlocalOperator, check_alpha
from .reference import QuadratureConfig, SmoothBump, make_test_function
from .solvers import solve_resolvent

CSV_COLUMNS = ["alpha", "d", "law", "seed", "k", "box_m", "boundary", "l2_error", "status", "wall_ms"]
EXTRA_COLUMNS = ["u_norm", "f_norm", "reason"]
TREND_NOTE = (
    "trend check: fits target the polynomial exponent only; logarithmic corrections "
    "and asymptotic constants are not identifiable at these sizes"
)


@dataclass
class ExperimentConfig:
    d: int
    alpha: float
    lam: float = 1.0
    law: str = "constant"
    seeds: list = field(default_factory=lambda: [0])
    ks: list = field(default_factory=lambda: [4, 8, 16])
    box_m: object = 2
    boundary: str = "killed"
    bump_radius: float = 1.0
    bump_center: list = None
    solver_tol: float = 1e-9
    k_ref_multiplier: int = 8
    output_dir: str = "."
    reference_method: str = "polar"
    deterministic: bool = False
    jump_cutoff: float = None
    r_ext_factor: float = 2.0

    # JSON spells lam as "lambda"
    _ALIASES = {"lambda": "lam"}

    def __post_init__(self):
        self.validate()

    def validate(self):
        try:
            check_alpha(self.alpha)
        except DomainError as exc:
            raise ConfigurationError(str(exc)) from None
        if not isinstance(self.d, int) or not 1 <= self.d <= 3:
            raise ConfigurationError(f"d must be 1, 2 or 3, got {self.d!r}")
        if not self.d > self.alpha:
            raise ConfigurationError(f"rate experiments need d > alpha (d = {self.d}, alpha = {self.alpha})")
        if not self.lam > 0:
            raise ConfigurationError(f"lambda must be positive, got {self.lam}")
        parse_law(self.law)
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigurationError("seeds must be a non-empty list of non-negative integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("seeds must be distinct")
        if not self.ks or any(not isinstance(k, int) or k < 1 for k in self.ks):
            raise ConfigurationError("ks must be a non-empty list of positive integers")
        if any(b <= a for a, b in zip(self.ks, self.ks[1:])):
            raise ConfigurationError("ks must be strictly increasing")
        if self.boundary not in BOUNDARIES:
            raise ConfigurationError(f"boundary must be one of {BOUNDARIES}")
        if self.reference_method not in ("polar", "lattice"):
            raise ConfigurationError("reference_method must be 'polar' or 'lattice'")
        if not self.solver_tol > 0:
            raise ConfigurationError("solver_tol must be positive")
        if self.k_ref_multiplier < 1:
            raise ConfigurationError("k_ref_multiplier must be at least 1")
        center = self.center
        if len(center) != self.d:
            raise ConfigurationError("bump_center must have d coordinates")
        M = _fraction(self.box_m)
        if M <= 0:
            raise ConfigurationError("box_m must be positive")
        if max(abs(c) for c in center) + self.bump_radius > M:
            raise ConfigurationError(f"the bump does not fit in the box of half-width {M}")
        for k in self.ks:
            if (2 * M * k).denominator != 1:
                raise ConfigurationError(f"2*box_m*k must be an integer (k = {k})")

    @property
    def center(self) -> tuple:
        return tuple(float(c) for c in (self.bump_center or [0.0] * self.d))

    @property
    def law_obj(self):
        return parse_law(self.law)

    def quadrature(self) -> QuadratureConfig:
        return QuadratureConfig(method=self.reference_method, k_ref=self.k_ref_multiplier * max(self.ks))

    def bump(self) -> SmoothBump:
        return SmoothBump(self.center, self.bump_radius)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            key = "lambda" if f.name == "lam" else f.name
            val = getattr(self, f.name)
            out[key] = str(val) if key == "box_m" and not isinstance(val, (int, float)) else val
        return out

    def config_hash(self) -> str:
        """Hash of the physics of the sweep; output location is excluded."""
        payload = {k: v for k, v in self.to_dict().items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, val in data.items():
            name = cls._ALIASES.get(key, key)
            if name not in known or name == "lam" and key == "lam":
                raise ConfigurationError(f"unknown config key {key!r}")
            kwargs[name] = val
        for required in ("d", "alpha"):
            if required not in kwargs:
                raise ConfigurationError(f"config is missing {required!r}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: expected a JSON object")
        return cls.from_dict(data)


@dataclass
class SweepRecord:
    alpha: float
    d: int
    law: str
    seed: int
    k: int
    box_m: str
    boundary: str
    l2_error: float
    status: str
    wall_ms: float
    u_norm: float = math.nan
    f_norm: float = math.nan
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def worker_count() -> int:
    env = os.environ.get("STABLE_HOMOG_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigurationError(f"STABLE_HOMOG_THREADS must be an integer, got {env!r}") from None
        return max(1, n)
    return os.cpu_count() or 1


def _memory_budget() -> float:
    return float(os.environ.get("STABLE_HOMOG_MEMORY_GB", 4)) * 2**30


def _job(config: ExperimentConfig, tf, k: int, seed: int) -> SweepRecord:
    t0 = time.perf_counter()
    base = dict(alpha=config.alpha, d=config.d, law=config.law, seed=seed, k=k,
                box_m=str(_fraction(config.box_m)), boundary=config.boundary)
    try:
        env = Environment(seed, config.law_obj, config.d)
        op = NonlocalOperator(tf.box, config.alpha, env, "random", config.boundary,
                              config.jump_cutoff, config.r_ext_factor)
        try:
            u, _ = solve_resolvent(op, config.lam, tf.f, config.solver_tol)
        finally:
            op.release()
        err = float(np.sqrt(np.sum((u.values - tf.u.values) ** 2) * k ** (-config.d)))
        status, reason, un = "ok", "", u.norm()
    except (StableHomogError, ValueError, ArithmeticError, MemoryError) as exc:
        err, status, reason, un = math.nan, "censored", f"{type(exc).__name__}: {exc}", math.nan
    wall = 0.0 if config.deterministic else (time.perf_counter() - t0) * 1e3
    return SweepRecord(**base, l2_error=err, status=status, wall_ms=wall, u_norm=un, f_norm=tf.f.norm(), reason=reason)


def run_sweep(config: ExperimentConfig, workers: int = None, progress=None) -> list:
    """Solve the resolvent problem for every (k, seed) and record the L^2 error.

    Jobs at one k share the test function and run in a pool whose size is
    capped by the worker count and by the memory held by cached dense
    operators.  Records come back ordered by (k, seed).
    """
    config.validate()
    workers = worker_count() if workers is None else max(1, workers)
    g = config.bump()
    quad = config.quadrature()
    out = []
    for k in config.ks:
        box = LatticeBox(k, config.box_m, config.d)
        try:
            tf = make_test_function(g, config.lam, config.alpha, box, quad)
        except (StableHomogError, ValueError, ArithmeticError) as exc:
            for seed in sorted(config.seeds):
                out.append(SweepRecord(config.alpha, config.d, config.law, seed, k, str(box.M), config.boundary,
                                       math.nan, "censored", 0.0, reason=f"{type(exc).__name__}: {exc}"))
            continue
        dense = 8.0 * box.size**2 if box.size <= CACHE_LIMIT else 0.0
        n_pool = max(1, min(workers, int(_memory_budget() // dense) if dense else workers))
        seeds = sorted(config.seeds)
        if config.law_obj.is_constant:
            # every seed sees the same operator
            first = _job(config, tf, k, seeds[0])
            recs = [first] + [SweepRecord(**{**asdict(first), "seed": s}) for s in seeds[1:]]
        elif n_pool == 1:
            recs = [_job(config, tf, k, s) for s in seeds]
        else:
            with ThreadPoolExecutor(n_pool) as pool:
                recs = list(pool.map(lambda s: _job(config, tf, k, s), seeds))
        out.extend(recs)
        if progress is not None:
            progress(k, recs)
    return out


# ---------------------------------------------------------------------------
# fitting


@dataclass
class RateFit:
    slope: float
    intercept: float
    stderr: float
    n_points: int
    predicted_exponent: float
    branch: str = ""


def predicted_exponent(alpha: float, d: int, random: bool = True):
    """Exponent of k in the error bound and the branch it comes from."""
    check_alpha(alpha)
    if not random:
        if alpha > 1:
            return -(2 - alpha), "deterministic, alpha in (1,2)"
        return -1.0, "deterministic, alpha in (0,1]"
    if alpha > 1:
        return -(2 - alpha) / 2, "alpha in (1,2)"
    if alpha == 1:
        return -0.5, "alpha = 1"
    return -min(alpha / 2, min(1 - alpha, d / 2)), "alpha in (0,1)"


def per_k_stats(records) -> list:
    rows = []
    for k in sorted({r.k for r in records}):
        at = [r for r in records if r.k == k]
        errs = np.array([r.l2_error for r in at if r.ok])
        n = len(errs)
        mean = float(errs.mean()) if n else math.nan
        se = float(errs.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0 if n else math.nan
        rows.append(dict(k=k, mean_error=mean, stderr=se, n_ok=n, n_censored=len(at) - n))
    return rows


def fit_rate(records, alpha: float = None, d: int = None, random: bool = None) -> RateFit:
    """Least-squares slope of log(seed-mean error) against log k.

    Levels without ok records are dropped.  ``alpha``, ``d`` and
    ``random`` default to the values carried by the records.
    """
    records = list(records)
    stats = [s for s in per_k_stats(records) if s["n_ok"] > 0]
    if len(stats) < 3:
        raise DomainError(f"a rate fit needs at least 3 k-levels with ok records, got {len(stats)}")
    ks = np.array([s["k"] for s in stats], dtype=float)
    means = np.array([s["mean_error"] for s in stats])
    if np.any(~(means > 0)):
        raise DomainError("mean errors must be positive to take logarithms")
    x, y = np.log(ks), np.log(means)
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    n = len(x)
    sxx = float(np.sum((x - x.mean()) ** 2))
    stderr = math.sqrt(float(np.sum(resid**2)) / (n - 2) / sxx) if n > 2 else 0.0
    if alpha is None and records:
        alpha = records[0].alpha
    if d is None and records:
        d = records[0].d
    if random is None:
        random = not (records and parse_law(records[0].law).is_constant)
    pred, branch = predicted_exponent(alpha, d, random) if alpha is not None else (math.nan, "")
    return RateFit(float(slope), float(intercept), stderr, n, pred, branch)


# ---------------------------------------------------------------------------
# persistence


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_records_csv(records, path, config_hash: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# config_hash: {config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS + EXTRA_COLUMNS)
        for r in records:
            row = asdict(r)
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS + EXTRA_COLUMNS])
    return path


def read_records_csv(path):
    """Records and the config hash from a sweep CSV."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"records file not found: {path}")
    lines = path.read_text().splitlines()
    config_hash = None
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, val = line[1:].partition(":")
            if key.strip() == "config_hash":
                config_hash = val.strip()
        elif line.strip():
            body.append(line)
    reader = csv.DictReader(body)
    missing = set(CSV_COLUMNS) - set(reader.fieldnames or [])
    if missing:
        raise ConfigurationError(f"{path}: missing columns {sorted(missing)}")
    recs = []
    for row in reader:
        recs.append(SweepRecord(
            alpha=float(row["alpha"]), d=int(row["d"]), law=row["law"], seed=int(row["seed"]), k=int(row["k"]),
            box_m=row["box_m"], boundary=row["boundary"], l2_error=float(row["l2_error"]), status=row["status"],
            wall_ms=float(row["wall_ms"]), u_norm=float(row.get("u_norm") or "nan"),
            f_norm=float(row.get("f_norm") or "nan"), reason=row.get("reason") or "",
        ))
    return recs, config_hash


def load_records(paths):
    """Read several sweep CSVs, refusing to mix different configurations."""
    all_recs, hashes = [], set()
    for p in paths:
        recs, h = read_records_csv(p)
        hashes.add(h)
        all_recs.extend(recs)
    if len(hashes) > 1:
        raise ConfigurationError(f"records come from different configurations: {sorted(map(str, hashes))}")
    return all_recs, hashes.pop() if hashes else None


def summary(records, config_hash: str, alpha=None, d=None, random=None) -> dict:
    out = {"config_hash": config_hash, "per_k": per_k_stats(records)}
    try:
        fit = fit_rate(records, alpha, d, random)
        out["fit"] = {"slope": fit.slope, "stderr": fit.stderr, "predicted_exponent": fit.predicted_exponent,
                      "intercept": fit.intercept, "n_points": fit.n_points, "branch": fit.branch}
    except DomainError as exc:
        out["fit"] = {"slope": None, "stderr": None, "predicted_exponent": None, "error": str(exc)}
    out["fit_method"] = "least squares of log(seed-mean error) against log k"
    out["notes"] = TREND_NOTE
    return out


def write_summary_json(data: dict, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return path


def sweep_to_files(config: ExperimentConfig, stem: str = "sweep", workers: int = None):
    """Run the sweep and write ``<stem>.csv`` and ``<stem>.json`` to the output directory."""
    recs = run_sweep(config, workers)
    h = config.config_hash()
    out_dir = Path(config.output_dir)
    csv_path = write_records_csv(recs, out_dir / f"{stem}.csv", h)
    random = not config.law_obj.is_constant
    json_path = write_summary_json(summary(recs, h, config.alpha, config.d, random), out_dir / f"{stem}.json")
    return recs, csv_path, json_path


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
