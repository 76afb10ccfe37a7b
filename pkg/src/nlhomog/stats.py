"""Ensembles, stretched-exponential tail fits, rate fits and report emission."""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict, field

import numpy as np

from .errors import EnsembleError, InsufficientDataError
from .lagrangian import splitmix64

CSV_SCHEMA = "nlhomog-csv v1"
BOOTSTRAP_SEED = 20240917
BOOTSTRAP_RESAMPLES = 200
FAILURE_FRACTION = 0.10


def derive_seed(master_seed: int, index: int) -> int:
    """Per-member seed: splitmix64(master xor index)."""
    return int(splitmix64(np.uint64((int(master_seed) ^ int(index)) & 0xFFFFFFFFFFFFFFFF)))


# ---------------------------------------------------------------------------
# O_sigma tail fits
# ---------------------------------------------------------------------------

@dataclass
class TailFit:
    sigma: float
    theta_hat: float
    sample_count: int
    tail_fractions: dict
    chebyshev_bounds: dict
    degenerate: bool = False

    def to_dict(self):
        return asdict(self)


def _tail_mean(x, theta, sigma):
    with np.errstate(over="ignore"):
        return float(np.mean(np.exp((x / theta) ** sigma)))


def fit_Osigma(samples, sigma: float) -> TailFit:
    """Smallest theta with mean(exp((X_+/theta)^sigma)) <= 2 over the samples.

    The search runs on samples scaled by their maximum, over a fixed dyadic
    bracket in log(theta), so the result is exactly 1-homogeneous in the samples
    and monotone under adding samples.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 8:
        raise InsufficientDataError("fit_Osigma needs at least 8 samples")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    xp = np.maximum(x, 0.0)
    top = float(xp.max())
    lams = (1.0, 2.0, 4.0)
    bounds = {str(l): 2.0 * math.exp(-(l**sigma)) for l in lams}
    if top == 0.0:
        return TailFit(sigma, 0.0, int(x.size), {str(l): 0.0 for l in lams}, bounds, degenerate=True)
    y = xp / top
    # theta/top lies in [(ln 2N)^{-1/sigma}, (ln 2)^{-1/sigma}]; fix the bracket for N <= 1e12
    log_hi = -math.log(math.log(2.0)) / sigma
    log_lo = -math.log(math.log(2.0e12)) / sigma
    steps = int(math.ceil(math.log2((log_hi - log_lo) / 1e-7))) + 1
    lo, hi = log_lo, log_hi
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if _tail_mean(y, math.exp(mid), sigma) <= 2.0:
            hi = mid
        else:
            lo = mid
    theta = top * math.exp(hi)
    fractions = {str(l): float(np.mean(x > l * theta)) for l in lams}
    return TailFit(sigma, theta, int(x.size), fractions, bounds)


# ---------------------------------------------------------------------------
# rate fits
# ---------------------------------------------------------------------------

@dataclass
class RateFit:
    alpha_hat: float
    half_width: float
    lower: float
    upper: float
    n_list: list
    count: int
    medians: list = field(default_factory=list)

    def to_dict(self):
        return {"alpha_hat": self.alpha_hat, "ci": [self.lower, self.upper], "half_width": self.half_width,
                "n_list": self.n_list, "count": self.count, "medians": self.medians}


def _slope(ns, meds):
    x = -np.asarray(ns, dtype=float) * math.log(3.0)
    y = np.log(np.asarray(meds, dtype=float))
    xm = x - x.mean()
    return float(np.dot(xm, y - y.mean()) / np.dot(xm, xm))


def fit_rate(samples_by_n, resamples=BOOTSTRAP_RESAMPLES, seed=BOOTSTRAP_SEED, min_per_n=8) -> RateFit:
    """Least-squares slope of log(median error) against log(3^-n).

    ``samples_by_n`` maps n to a sequence of positive errors (one per seed). The
    confidence band is a seed-level percentile bootstrap.
    """
    ns = sorted(samples_by_n)
    if len(ns) < 3:
        raise InsufficientDataError("fit_rate needs at least three scales")
    groups = [np.asarray(samples_by_n[n], dtype=float) for n in ns]
    if any(len(g) < min_per_n for g in groups):
        raise InsufficientDataError(f"fit_rate needs at least {min_per_n} samples per scale")
    meds = [float(np.median(g)) for g in groups]
    alpha = _slope(ns, meds)
    rng = np.random.default_rng(seed)
    boot = np.empty(resamples)
    for b in range(resamples):
        boot[b] = _slope(ns, [np.median(g[rng.integers(0, len(g), len(g))]) for g in groups])
    lo, hi = np.percentile(boot, [2.5, 97.5])
    return RateFit(alpha, float(0.5 * (hi - lo)), float(lo), float(hi), ns, int(sum(len(g) for g in groups)), meds)


def loglog_slope(x, y):
    """Ordinary least-squares slope of log y against log x."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    lxm = lx - lx.mean()
    return float(np.dot(lxm, ly - ly.mean()) / np.dot(lxm, lxm))


def mean_and_stderr(values, axis=0):
    v = np.asarray(values, dtype=float)
    n = v.shape[axis]
    m = v.mean(axis=axis)
    s = v.std(axis=axis, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(m)
    return m, s


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

def _run_member(args):
    func, params, index, seed = args
    try:
        return index, seed, func(params, seed), None
    except Exception as exc:  # recorded per seed, judged by the caller
        return index, seed, None, f"{type(exc).__name__}: {exc}"


@dataclass
class EnsembleResult:
    rows: list
    failures: dict

    @property
    def seeds(self):
        return [r["seed"] for r in self.rows]


def ensemble_run(func, params, master_seed: int, count: int, workers: int = 1, order=None) -> EnsembleResult:
    """Run ``func(params, seed)`` for ``count`` derived seeds.

    ``func`` returns a dict (one row) or a list of dicts. Rows are tagged with
    ``member`` and ``seed`` and sorted by member index, so the aggregate does not
    depend on the execution order or on the worker count. Up to 10% failures are
    tolerated and recorded.
    """
    indices = list(range(count)) if order is None else list(order)
    jobs = [(func, params, i, derive_seed(master_seed, i)) for i in indices]
    if workers > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_member, jobs))
    else:
        results = [_run_member(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    rows, failures = [], {}
    for index, seed, out, err in results:
        if err is not None:
            failures[seed] = err
            continue
        for row in (out if isinstance(out, list) else [out]):
            rows.append({"member": index, "seed": seed, **row})
    if len(failures) > FAILURE_FRACTION * count:
        raise EnsembleError(f"{len(failures)} of {count} ensemble members failed", failures)
    return EnsembleResult(rows, failures)


# ---------------------------------------------------------------------------
# emitters
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def csv_text(rows, columns):
    buf = io.StringIO()
    buf.write(CSV_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(rows, columns))


def read_csv(path):
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != CSV_SCHEMA:
            raise ValueError(f"unexpected CSV schema line {first!r}")
        return list(csv.DictReader(fh))


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating,)):
        o = float(o)
    if isinstance(o, float):
        return o if math.isfinite(o) else ("inf" if o > 0 else ("-inf" if o < 0 else "nan"))
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    return o


def json_text(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(json_text(obj))
