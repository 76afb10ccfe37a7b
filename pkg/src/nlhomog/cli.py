"""Command-line entry point: strict JSON configs, experiment runners and reports.

Exit codes: 0 success, 2 configuration error, 3 solver or ensemble error,
4 acceptance threshold missed under --check.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import cells, homog, lbar_regularity, regularity
from .errors import ConfigurationError, InsufficientDataError, NlhomogError
from .lagrangian import CoefficientLaw, NonlinearitySpec, lagrangian_terms, realization_for_cube
from .solvers import minimize_energy
from .stats import derive_seed, ensemble_run, fit_Osigma, fit_rate, json_text, loglog_slope, read_csv, write_csv, write_json

OUTPUT_ROOT_ENV = "NLHOMOG_OUTPUT_ROOT"
COMMANDS = ("sample", "cell", "lbar", "commute", "twoscale", "diffreg", "linreg", "superlin", "excess", "lbarreg",
            "report")

DEFAULTS = {
    "law": {"kind": "iid_two_point", "range_low": 1.0, "range_high": 4.0, "dimension": 2, "mollifier_width": 0.25},
    "nonlinearity": {"kind": "perturbed_sqrt", "lambda_max": 5.0},
    "mesh": {"h": 0.5},
    "solver": {"tol": 1e-9},
    "experiment": {},
    "ensemble": {"size": 8, "master_seed": 1, "workers": 1},
    "output": {"timing": False},
}

_TABLE = {"n": 2, "ensemble": 8, "radius": 1.0, "spacing": 0.25}
_G = {"kind": "affine", "slope": [1.0, 0.0], "amplitude": 0.0}
_F = {"kind": "sinusoidal", "slope": [0.0, 0.0], "amplitude": 1.0}

EXPERIMENT_DEFAULTS = {
    "sample": {"n": 1, "seed": None},
    "cell": {"n": 1, "xis": [[1.0, 0.0]], "want_d2": True},
    "lbar": {"n": 1, "n_list": None, "axes": [[0.0, 0.25, 0.5], [0.0, 0.25, 0.5]]},
    "commute": {"n_list": [2, 3], "g_profile": _G, "f_profile": _F, "table": _TABLE},
    "twoscale": {"n": 4, "mesoscales": [1, 2, 3], "g_profile": _G, "f_profile": _F, "table": _TABLE,
                 "psi_width": "default", "zeta": True},
    "diffreg": {"R": 13.5, "g_profile": _G, "f_profile": _F, "K_ratio": 10.0, "corrector_N": None,
                "corrector_pairs": []},
    "linreg": {"R": 13.5, "g_profile": _G, "f_profile": _F, "K_ratio": 10.0},
    "superlin": {"n": 2, "g_profile": _G, "f_profile": _F, "s_list": None, "min_slope": 1.05},
    "excess": {"R": 16.0, "N": 4, "g_profile": {"kind": "quadratic", "slope": [0.5, 0.0], "amplitude": 0.5},
               "xi_match": [0.5, 0.0], "xi_radius": 0.25, "xi_points": 1, "min_exponent": 1.5},
    "lbarreg": {"n": 1, "axes": [[-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0]] * 2, "gamma": 1.0,
                "M": 2.0, "refine": False, "xi": [1.0, 0.5], "cv_n": 2, "k_list": [0, 1], "fd_step": 0.125},
    "report": {},
}


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def load_config(command, raw=None, overrides=()):
    """Merge a user config into the defaults; unknown keys raise ConfigurationError."""
    cfg = copy.deepcopy(DEFAULTS)
    cfg["experiment"] = copy.deepcopy(EXPERIMENT_DEFAULTS[command])
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = [k for k in raw if k not in cfg]
    for section, values in raw.items():
        if section not in cfg:
            continue
        if not isinstance(values, dict):
            raise ConfigurationError(f"config section {section!r} must be an object")
        unknown += [f"{section}.{k}" for k in values if k not in cfg[section]]
        for k, v in values.items():
            if k in cfg[section]:
                cfg[section][k] = v
    for item in overrides:
        key, sep, value = item.partition("=")
        parts = key.split(".")
        if not sep or len(parts) != 2 or parts[0] not in cfg or parts[1] not in cfg[parts[0]]:
            unknown.append(key)
            continue
        try:
            cfg[parts[0]][parts[1]] = json.loads(value)
        except json.JSONDecodeError:
            cfg[parts[0]][parts[1]] = value
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    law = cfg["law"]
    if law["kind"] != "mollified_iid":
        cfg["law"].pop("mollifier_width", None)
    return cfg


def build_models(cfg):
    law = cfg["law"]
    nl = NonlinearitySpec(cfg["nonlinearity"]["kind"], float(cfg["nonlinearity"]["lambda_max"]))
    kw = {"mollifier_width": float(law["mollifier_width"])} if "mollifier_width" in law else {}
    coeff = CoefficientLaw(law["kind"], float(law["range_low"]), float(law["range_high"]), int(law["dimension"]), **kw)
    coeff.check_compatible(nl)
    return coeff, nl


def validate_config(cfg):
    """Reject generic settings that would otherwise fail inside every ensemble member."""
    h = cfg["mesh"]["h"]
    if not isinstance(h, (int, float)) or h <= 0 or abs(math.log2(h) - round(math.log2(h))) > 1e-12 or h > 1:
        raise ConfigurationError("mesh.h must be 2^-k with k >= 0")
    tol = cfg["solver"]["tol"]
    if not isinstance(tol, (int, float)) or tol <= 0:
        raise ConfigurationError("solver.tol must be positive")
    ens = cfg["ensemble"]
    if int(ens["size"]) < 1 or int(ens["workers"]) < 1:
        raise ConfigurationError("ensemble.size and ensemble.workers must be >= 1")


def config_hash(cfg):
    return hashlib.sha256(json_text(cfg).encode()).hexdigest()[:12]


def output_dir(command, cfg):
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    base = f"{command}-{config_hash(cfg)}-{time.strftime('%Y%m%dT%H%M%S')}"
    path = root / base
    k = 1
    while path.exists():
        path = root / f"{base}-{k}"
        k += 1
    path.mkdir(parents=True)
    return path


def _profile(p, d):
    p = dict(p)
    if p.get("slope") is not None:
        s = list(p["slope"])[:d]
        p["slope"] = s + [0.0] * (d - len(s))
    return p


# ---------------------------------------------------------------------------
# ensemble members (module level so they pickle for worker processes)
# ---------------------------------------------------------------------------

def _models(params):
    return build_models(params["cfg"])


def _cell_member(params, seed):
    cfg = params["cfg"]
    law, nl = _models(params)
    ex = cfg["experiment"]
    n = int(ex["n"])
    out = cells.cell_sweep(law, nl, n, ex["xis"], [seed], cfg["mesh"]["h"], cfg["solver"]["tol"],
                           bool(ex["want_d2"]), cfg["output"]["timing"])
    rows = out["rows"]
    if law.dimension == 1 and nl.kind == "quadratic" and law.kind != "mollified_iid":
        real = realization_for_cube(law, nl, 3**n, seed)
        hm = 1.0 / np.mean(1.0 / real.cell_values)
        for r in rows:
            r["oracle"] = 0.5 * hm * r["xi1"] ** 2
    for r in rows:
        r.pop("seed", None)
    return rows


def _homogenized(params):
    law, nl = _models(params)
    return homog.homogenized_model(law, nl, params.get("table"))


def _commute_member(params, seed):
    cfg = params["cfg"]
    law, nl = _models(params)
    ex = cfg["experiment"]
    d = law.dimension
    rows = []
    for n in ex["n_list"]:
        s = homog.commutativity_trial(law, nl, int(n), seed, _profile(ex["f_profile"], d), params.get("table"),
                                      _profile(ex["g_profile"], d), cfg["mesh"]["h"], cfg["solver"]["tol"])
        row = s.csv_row(cfg["output"]["timing"])
        row.pop("seed")
        rows.append(row)
    return rows


def _twoscale_member(params, seed):
    cfg = params["cfg"]
    law, nl = _models(params)
    ex = cfg["experiment"]
    d, n, h, tol = law.dimension, int(ex["n"]), cfg["mesh"]["h"], cfg["solver"]["tol"]
    k, l, m = (int(v) for v in ex["mesoscales"])
    real = realization_for_cube(law, nl, 3**n, seed, margin=3**l + 2)
    model = _homogenized(params)
    mesh = cells.cube_mesh(n, float(h), d)
    g = homog.boundary_profile(_profile(ex["g_profile"], d), mesh.nodes, 3**n)
    f = homog.boundary_profile(_profile(ex["f_profile"], d), mesh.nodes, 3**n)
    u_hom, _ = minimize_energy(model, mesh, g, tol=tol)
    psi = ex["psi_width"]
    ledger = homog.two_scale_expansion(real, n, (k, l, m), u_hom, f, model, h, tol, psi_width=psi,
                                       zeta="default" if ex["zeta"] else None)
    return {"n": n, **ledger.errors}


def _scan_member(params, seed):
    cfg = params["cfg"]
    law, nl = _models(params)
    ex = cfg["experiment"]
    d, R = law.dimension, float(ex["R"])
    real = realization_for_cube(law, nl, 2 * math.ceil(R) + 1, seed)
    fn = regularity.difference_lipschitz_scan if params["command"] == "diffreg" else regularity.linearized_lipschitz_scan
    scan = fn(real, R, _profile(ex["g_profile"], d), _profile(ex["f_profile"], d), float(ex["K_ratio"]),
              cfg["mesh"]["h"], cfg["solver"]["tol"], seed=seed, experiment_id=params["command"])
    rows = scan.csv_rows()
    for r in rows:
        r.pop("seed")
    return rows


def _corrector_member(params, seed):
    cfg = params["cfg"]
    law, nl = _models(params)
    ex = cfg["experiment"]
    N = int(ex["corrector_N"])
    real = realization_for_cube(law, nl, 3**N, seed)
    rows = []
    for pair in ex["corrector_pairs"]:
        res = regularity.corrector_difference(law, nl, N, pair[0], pair[1], seed, cfg["mesh"]["h"],
                                              cfg["solver"]["tol"], realization=real)
        rows += [{"N": N, "step": res.step, "r": r, "ratio": q} for r, q in zip(res.radii, res.ratios)]
    return rows


def _superlin_member(params, seed):
    cfg = params["cfg"]
    law, nl = _models(params)
    ex = cfg["experiment"]
    d, n = law.dimension, int(ex["n"])
    real = realization_for_cube(law, nl, 3**n, seed)
    mesh = cells.cube_mesh(n, float(cfg["mesh"]["h"]), d)
    res = regularity.superlinear_linearization(real, mesh, _profile(ex["g_profile"], d), _profile(ex["f_profile"], d),
                                               ex["s_list"], cfg["solver"]["tol"])
    return [{"n": n, "s": s, "error": e, "slope": res.slope, "inconclusive": res.inconclusive}
            for s, e in zip(res.s_list, res.errors)]


def _excess_member(params, seed):
    cfg = params["cfg"]
    law, nl = _models(params)
    ex = cfg["experiment"]
    d, N = law.dimension, int(ex["N"])
    real = realization_for_cube(law, nl, 3**N, seed)
    xi_match = (list(ex["xi_match"]) + [0.0] * d)[:d]
    fit = regularity.excess_decay_fit(real, float(ex["R"]), _profile(ex["g_profile"], d), xi_match, N,
                                      cfg["mesh"]["h"], cfg["solver"]["tol"], float(ex["xi_radius"]),
                                      int(ex["xi_points"]))
    row = {"R": float(ex["R"]), "exponent": fit.exponent, "degenerate": fit.degenerate}
    for r, e in zip(fit.radii, fit.excess):
        row[f"excess_r{r:g}"] = e
    for i, x in enumerate(fit.xi):
        row[f"xi{i + 1}"] = x
    return row


# ---------------------------------------------------------------------------
# runners: each returns (files {name: (rows, columns) or obj}, summary, checks)
# ---------------------------------------------------------------------------

def _columns(rows, lead=("member", "seed")):
    cols = list(lead)
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return cols


def _run_ensemble(func, params, cfg):
    ens = cfg["ensemble"]
    return ensemble_run(func, params, int(ens["master_seed"]), int(ens["size"]), int(ens["workers"]))


def _table_for(cfg, law, nl, center):
    if law.range_low == law.range_high:
        return None
    t = dict(_TABLE, **cfg["experiment"]["table"])
    axes = []
    for c in center:
        half = math.ceil(float(t["radius"]) / float(t["spacing"]))
        axes.append(float(c) + float(t["spacing"]) * np.arange(-half, half + 1))
    seed = derive_seed(int(cfg["ensemble"]["master_seed"]), 0x7AB1E)
    return cells.tabulate_Lbar(law, nl, axes, int(t["n"]), int(t["ensemble"]), seed, cfg["mesh"]["h"],
                               cfg["solver"]["tol"], check=False)


def run_sample(cfg, law, nl):
    ex = cfg["experiment"]
    seed = cfg["ensemble"]["master_seed"] if ex["seed"] is None else ex["seed"]
    real = realization_for_cube(law, nl, 3 ** int(ex["n"]), int(seed))
    idx = np.stack(np.meshgrid(*[np.arange(b) for b in real.box], indexing="ij"), axis=-1).reshape(-1, law.dimension)
    rows = [{"cell": ";".join(str(int(o + i)) for o, i in zip(real.origin, ix)), "value": float(v)}
            for ix, v in zip(idx, real.cell_values.reshape(-1))]
    files = {"cells.csv": (rows, ["cell", "value"]), "realization.json": json.loads(real.to_json())}
    return files, {"cells": len(rows), "min": float(real.cell_values.min()), "max": float(real.cell_values.max())}, {}


def run_cell(cfg, law, nl):
    res = _run_ensemble(_cell_member, {"cfg": cfg}, cfg)
    rows = res.rows
    tol = cfg["solver"]["tol"]
    summary = {"failures": {str(k): v for k, v in res.failures.items()}, "slopes": []}
    checks = {}
    xis = np.atleast_2d(np.asarray(cfg["experiment"]["xis"], dtype=float))
    for p, xi in enumerate(xis):
        vals = np.array([r["nu"] for r in rows if np.allclose([r[f"xi{i + 1}"] for i in range(law.dimension)], xi)])
        se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        entry = {"xi": xi.tolist(), "mean_nu": float(vals.mean()), "stderr": se, "count": int(len(vals))}
        if law.range_low == law.range_high:
            exact = float(lagrangian_terms(nl.kind, np.array(law.range_low), xi)[0])
            entry["exact"] = exact
            checks[f"constant_nu_xi{p}"] = bool(np.all(np.abs(vals - exact) <= 1e-7))
        elif law.dimension == 1 and nl.kind == "quadratic" and law.kind != "mollified_iid":
            hm = law_harmonic_mean(law)
            entry["homogenized"] = 0.5 * hm * xi[0] ** 2
            checks[f"harmonic_mean_xi{p}"] = bool(abs(entry["mean_nu"] - entry["homogenized"]) <= 2 * se + 1e-12)
        summary["slopes"].append(entry)
    if "oracle" in (rows[0] if rows else {}):
        checks["periodic_oracle"] = bool(all(abs(r["nu"] - r["oracle"]) <= 1e-8 + 10 * tol for r in rows))
    return {"results.csv": (rows, _columns(rows))}, summary, checks


def law_harmonic_mean(law):
    """Harmonic mean of the single-cell coefficient distribution."""
    lo, hi = law.range_low, law.range_high
    if lo == hi:
        return lo
    if law.kind == "iid_two_point":
        return 2.0 / (1.0 / lo + 1.0 / hi)
    if law.kind == "iid_uniform":
        return (hi - lo) / math.log(hi / lo)
    raise ConfigurationError("no closed-form harmonic mean for this law")


def run_lbar(cfg, law, nl):
    ex = cfg["experiment"]
    ens = cfg["ensemble"]
    axes = [np.asarray(a, dtype=float) for a in ex["axes"]][: law.dimension]
    table = cells.tabulate_Lbar(law, nl, axes, int(ex["n"]), int(ens["size"]), int(ens["master_seed"]),
                                cfg["mesh"]["h"], cfg["solver"]["tol"], ex["n_list"], check=False)
    checks = {}
    try:
        table.check_invariants()
        checks["invariants"] = True
    except NlhomogError:
        checks["invariants"] = False
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, law.dimension)
    rows = []
    for i, xi in enumerate(grid):
        row = {f"xi{j + 1}": float(x) for j, x in enumerate(xi)}
        row["Lbar"] = float(table.values.reshape(-1)[i])
        row["Lbar_stderr"] = float(table.value_stderr.reshape(-1)[i])
        for j, g in enumerate(table.gradients.reshape(-1, law.dimension)[i]):
            row[f"DLbar{j + 1}"] = float(g)
        rows.append(row)
    return ({"table.json": table.to_dict(), "table.csv": (rows, _columns(rows, ()))},
            lbar_regularity.hessian_bounds_scan(table), checks)


def run_commute(cfg, law, nl):
    ex = cfg["experiment"]
    d = law.dimension
    g = _profile(ex["g_profile"], d)
    table = _table_for(cfg, law, nl, g.get("slope") or [0.0] * d)
    res = _run_ensemble(_commute_member, {"cfg": cfg, "table": table}, cfg)
    rows = res.rows
    summary = commute_summary(rows)
    summary["failures"] = {str(k): v for k, v in res.failures.items()}
    tol = cfg["solver"]["tol"]
    checks = {}
    if law.range_low == law.range_high:
        checks["constant_control"] = bool(all(max(r["err_grad_Hm1"], r["err_flux_Hm1"], r["err_nonlinear_Hm1"])
                                              <= 10 * tol for r in rows))
    else:
        med = summary["medians"]
        for key in ("rel_grad", "rel_flux"):
            seq = [med[str(n)][key] for n in sorted(int(k) for k in med)]
            checks[f"{key}_decreasing"] = bool(all(b < a for a, b in zip(seq, seq[1:])))
            fit = summary["rate_fits"].get(key)
            checks[f"{key}_rate_positive"] = bool(isinstance(fit, dict) and fit["alpha_hat"] > 0 and fit["ci"][0] > 0)
    files = {"results.csv": (rows, homog.COMMUTATIVITY_COLUMNS[:1] + ["member"] + homog.COMMUTATIVITY_COLUMNS[1:])}
    if table is not None:
        files["table.json"] = table.to_dict()
    return files, summary, checks


def commute_summary(rows):
    groups = {}
    for r in rows:
        n = int(r["n"])
        nf = float(r["norm_f"])
        g = groups.setdefault(n, {"rel_grad": [], "rel_flux": [], "rel_nonlinear": []})
        g["rel_grad"].append(float(r["err_grad_Hm1"]) / nf)
        g["rel_flux"].append(float(r["err_flux_Hm1"]) / nf)
        g["rel_nonlinear"].append(float(r["err_nonlinear_Hm1"]) / nf)
    medians = {str(n): {k: float(np.median(v)) for k, v in g.items()} for n, g in sorted(groups.items())}
    fits = {}
    for key in ("rel_grad", "rel_flux", "rel_nonlinear"):
        try:
            if any(min(g[key]) <= 0 for g in groups.values()):
                raise InsufficientDataError("non-positive errors (exact control)")
            fits[key] = fit_rate({n: g[key] for n, g in groups.items()}).to_dict()
        except InsufficientDataError as exc:
            fits[key] = f"unavailable: {exc}"
    return {"medians": medians, "rate_fits": fits}


def run_twoscale(cfg, law, nl):
    ex = cfg["experiment"]
    k, l, m = (int(v) for v in ex["mesoscales"])
    if not 0 <= k < l < m < int(ex["n"]):
        raise ConfigurationError("mesoscales must satisfy k < l < m < n")
    d = law.dimension
    g = _profile(ex["g_profile"], d)
    table = _table_for(cfg, law, nl, g.get("slope") or [0.0] * d)
    res = _run_ensemble(_twoscale_member, {"cfg": cfg, "table": table}, cfg)
    rows = res.rows
    keys = [k for k in rows[0] if k not in ("member", "seed", "n")] if rows else []
    summary = {"mesoscales": ex["mesoscales"], "medians": {k: float(np.median([r[k] for r in rows])) for k in keys},
               "failures": {str(k): v for k, v in res.failures.items()}}
    checks = {"finite": bool(all(math.isfinite(r[k]) for r in rows for k in keys))}
    return {"ledger.csv": (rows, _columns(rows))}, summary, checks


def run_scan(cfg, law, nl, command):
    res = _run_ensemble(_scan_member, {"cfg": cfg, "command": command}, cfg)
    rows = res.rows
    summary = scan_summary(rows)
    summary["failures"] = {str(k): v for k, v in res.failures.items()}
    checks = {"finite_fraction": summary["finite_fraction"] >= 0.9}
    files = {"scans.csv": (rows, ["member"] + regularity.SCAN_COLUMNS)}
    ex = cfg["experiment"]
    if command == "diffreg" and ex.get("corrector_N") is not None and ex["corrector_pairs"]:
        cres = _run_ensemble(_corrector_member, {"cfg": cfg}, cfg)
        files["correctors.csv"] = (cres.rows, _columns(cres.rows))
        by_step = {}
        for r in cres.rows:
            by_step.setdefault(f"{r['step']:g}", []).append(r["ratio"])
        summary["corrector_ratio_max"] = {k: float(np.max(v)) for k, v in by_step.items()}
        summary["corrector_ratio_median"] = {k: float(np.median(v)) for k, v in by_step.items()}
    return files, summary, checks


def scan_summary(rows):
    per_seed = {}
    for r in rows:
        v = r["minimal_scale_hat"]
        per_seed[int(r["member"])] = math.inf if v in ("inf", math.inf) else float(v)
    vals = list(per_seed.values())
    finite = [v for v in vals if math.isfinite(v)]
    out = {"seeds": len(vals), "finite_fraction": len(finite) / len(vals) if vals else 0.0, "tail_fits": {}}
    if rows:
        R = float(rows[0]["R"])
        out["fraction_above_quarter"] = float(np.mean([v > R / 4.0 for v in vals]))
    try:
        out["tail_fits"]["sigma=1"] = fit_Osigma(finite, 1.0).to_dict()
    except InsufficientDataError as exc:
        out["tail_fits"]["sigma=1"] = f"unavailable: {exc}"
    return out


def run_superlin(cfg, law, nl):
    res = _run_ensemble(_superlin_member, {"cfg": cfg}, cfg)
    rows = res.rows
    summary = superlin_summary(rows, cfg["solver"]["tol"])
    summary["failures"] = {str(k): v for k, v in res.failures.items()}
    slope = summary["median_slope"]
    ok = (slope is not None and slope >= float(cfg["experiment"]["min_slope"])) or (
        nl.kind == "quadratic" and summary["max_error"] <= 10 * cfg["solver"]["tol"])
    return {"errors.csv": (rows, _columns(rows))}, summary, {"slope": bool(ok)}


def superlin_summary(rows, tol):
    by_s = {}
    for r in rows:
        by_s.setdefault(float(r["s"]), []).append(float(r["error"]))
    s = sorted(by_s)
    med = [float(np.median(by_s[x])) for x in s]
    top = max(s) if s else 0.0
    pts = [(x, e) for x, e in zip(s, med) if e > 100 * tol and x <= top / 2.0]
    slope = loglog_slope([p[0] for p in pts], [p[1] for p in pts]) if len(pts) >= 3 else None
    return {"s": s, "median_errors": med, "median_slope": slope, "max_error": max(med) if med else 0.0}


def run_excess(cfg, law, nl):
    ex = cfg["experiment"]
    if float(ex["R"]) > 3 ** int(ex["N"]) / 4.0:
        raise ConfigurationError("excess needs R <= 3^N / 4")
    res = _run_ensemble(_excess_member, {"cfg": cfg}, cfg)
    rows = res.rows
    exps = [r["exponent"] for r in rows if r["exponent"] is not None]
    med = float(np.median(exps)) if exps else None
    summary = {"median_exponent": med, "exponents": exps, "failures": {str(k): v for k, v in res.failures.items()}}
    ok = med is not None and med >= float(cfg["experiment"]["min_exponent"])
    return {"excess.csv": (rows, _columns(rows))}, summary, {"exponent": bool(ok)}


def run_lbarreg(cfg, law, nl):
    ex = cfg["experiment"]
    ens = cfg["ensemble"]
    h, tol = cfg["mesh"]["h"], cfg["solver"]["tol"]
    axes = [np.asarray(a, dtype=float) for a in ex["axes"]][: law.dimension]
    table = cells.tabulate_Lbar(law, nl, axes, int(ex["n"]), int(ens["size"]), int(ens["master_seed"]), h, tol,
                                check=False)
    bounds = lbar_regularity.hessian_bounds_scan(table)
    holder = lbar_regularity.holder_quotient_scan(table, float(ex["gamma"]), float(ex["M"]))
    report = {"hessian_bounds": bounds, "holder": holder.to_dict()}
    se = bounds["max_stderr"]
    checks = {"hessian_band": bool(1.0 - 3 * se - 1e-9 <= bounds["min_eigenvalue"]
                                   and bounds["max_eigenvalue"] <= nl.lambda_max + 3 * se + 1e-9)}
    if ex["refine"]:
        fine = [np.linspace(a[0], a[-1], 2 * len(a) - 1) for a in axes]
        t2 = cells.tabulate_Lbar(law, nl, fine, int(ex["n"]), int(ens["size"]), int(ens["master_seed"]), h, tol,
                                 check=False)
        h2 = lbar_regularity.holder_quotient_scan(t2, float(ex["gamma"]), float(ex["M"]),
                                                  min_separation=holder.noise_floor)
        change = abs(h2.max_quotient - holder.max_quotient) / max(holder.max_quotient, 1e-300)
        report["holder_refined"] = h2.to_dict()
        report["refinement_change"] = change
        checks["refinement_stable"] = bool(change <= 0.5)
    cv = []
    xi = (list(ex["xi"]) + [0.0] * law.dimension)[: law.dimension]
    for k in ex["k_list"]:
        cv.append(lbar_regularity.cross_validate_d2(law, nl, xi, int(ex["cv_n"]), int(k), int(ens["size"]),
                                                    int(ens["master_seed"]), h, tol, float(ex["fd_step"])).to_dict())
    report["cross_validation"] = cv
    if cv:
        last = cv[-1]
        checks["cross_validation"] = bool(last["discrepancy"] <= last["uncertainty"] + 10 * tol)
    return {"report.json": report, "table.json": table.to_dict()}, report, checks


RUNNERS = {"sample": run_sample, "cell": run_cell, "lbar": run_lbar, "commute": run_commute,
           "twoscale": run_twoscale, "superlin": run_superlin, "excess": run_excess, "lbarreg": run_lbarreg,
           "diffreg": lambda c, l, n: run_scan(c, l, n, "diffreg"),
           "linreg": lambda c, l, n: run_scan(c, l, n, "linreg")}


# ---------------------------------------------------------------------------
# report over an existing run directory
# ---------------------------------------------------------------------------

def build_report(run_dir):
    run_dir = Path(run_dir)
    try:
        meta = json.loads((run_dir / "run.json").read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"{run_dir} is not a run directory") from exc
    command = meta["command"]
    out = {"command": command, "config_hash": meta["config_hash"], "rate_fits": {}, "tail_fits": {}}
    if command == "commute":
        s = commute_summary(read_csv(run_dir / "results.csv"))
        out["rate_fits"], out["medians"] = s["rate_fits"], s["medians"]
    elif command in ("diffreg", "linreg"):
        rows = read_csv(run_dir / "scans.csv")
        s = scan_summary(rows)
        out["tail_fits"] = s.pop("tail_fits")
        out.update(s)
    elif (run_dir / "summary.json").exists():
        out["summary"] = json.loads((run_dir / "summary.json").read_text())
    return out


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _write_outputs(path, files):
    for name, content in files.items():
        if name.endswith(".csv"):
            rows, cols = content
            write_csv(path / name, rows, cols)
        else:
            write_json(path / name, content)


def run(command, config_path=None, overrides=(), check=False, workers=None, in_dir=None, stdout=None):
    """Execute one subcommand; returns (exit code, output directory or None)."""
    stdout = stdout or sys.stdout
    try:
        if command not in COMMANDS:
            raise ConfigurationError(f"unknown subcommand {command!r}")
        if command == "report":
            if in_dir is None:
                raise ConfigurationError("report needs --in <run directory>")
            rep = build_report(in_dir)
            write_json(Path(in_dir) / "report.json", rep)
            stdout.write(json_text(rep))
            return 0, Path(in_dir)
        raw = {}
        if config_path is not None:
            try:
                raw = json.loads(Path(config_path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigurationError(f"cannot read config {config_path}: {exc}") from exc
        overrides = list(overrides)
        if workers is not None:
            overrides.append(f"ensemble.workers={int(workers)}")
        cfg = load_config(command, raw, overrides)
        law, nl = build_models(cfg)
        validate_config(cfg)
        # worker count does not change results, so it stays out of the hash
        hashed = copy.deepcopy(cfg)
        hashed["ensemble"].pop("workers")
        files, summary, checks = RUNNERS[command](cfg, law, nl)
        path = output_dir(command, hashed)
        write_json(path / "config.json", hashed)
        write_json(path / "run.json", {"command": command, "config_hash": config_hash(hashed)})
        _write_outputs(path, files)
        write_json(path / "summary.json", summary)
        if checks:
            write_json(path / "checks.json", checks)
        stdout.write(f"{path}\n")
        if check and not all(checks.values()):
            failed = sorted(k for k, v in checks.items() if not v)
            sys.stderr.write(f"check failed: {', '.join(failed)}\n")
            return 4, path
        return 0, path
    except ConfigurationError as exc:
        sys.stderr.write(f"configuration error: {exc}\n")
        return 2, None
    except NlhomogError as exc:
        sys.stderr.write(f"{type(exc).__name__}: {exc}\n")
        return 3, None


def main(argv=None):
    parser = argparse.ArgumentParser(prog="nlhomog", description="Numerical experiments on nonlinear stochastic "
                                     "homogenization and its linearization.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config key (value parsed as JSON when possible)")
    parser.add_argument("--workers", type=int, help="worker processes for ensembles")
    parser.add_argument("--check", action="store_true", help="exit 4 when an acceptance check fails")
    parser.add_argument("--in", dest="in_dir", help="run directory for the report subcommand")
    args = parser.parse_args(argv)
    code, _ = run(args.command, args.config, args.set, args.check, args.workers, args.in_dir)
    return code


if __name__ == "__main__":
    sys.exit(main())
