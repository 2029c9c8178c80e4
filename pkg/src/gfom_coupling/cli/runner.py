"""Experiment runner: builds the system and parameters per group, fans trials
out to a thread pool, and writes deterministic CSV/JSON artifacts.

Random streams (all under the base ``seed``):

* ``(0, i_n)``: state-evolution replicates for the ``i_n``-th dimension;
* ``(1, i_n, trial)``: one coupled run (shared across ``sigma_scale`` values);
* ``(2, i_group)``: fresh replicates for the population psi terms;
* ``(3, i_n)``: the Gaussian design of the linear kind.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .. import __version__
from ..coupling import build_coupling, verify_identity
from ..diagnostics import deltas, psi_terms, wilson_interval
from ..diagnostics import bound_thm4 as _bound_thm4
from ..dynamics import SystemSpec
from ..errors import ConfigInvalid, GfomError, SingularSigma
from ..functions import Separable, from_dict, ones
from ..linalg_rand import RngStream, two_one_norm
from ..state_evolution import (
    LinearCaseSpec,
    se_amp,
    se_explicit,
    se_linear_closed_form,
    se_monte_carlo,
)
from ..wasserstein import ar_alpha_sq, lb_linear_case
from .config import ExperimentConfig, with_overrides

__all__ = ["run_experiment", "sweep", "ExperimentAborted", "SCHEMA_VERSION", "csv_columns"]

SCHEMA_VERSION = 1
FAILURE_MARKER = "FAILED"

_BASE_COLUMNS = ["trial_id", "seed", "n", "T", "sigma_scale"]


def csv_columns(T: int) -> dict:
    return {
        "coupling_errors.csv": _BASE_COLUMNS + [
            "coupling_error", "coupling_error_sq", "x_norm_over_sqrt_n", "delta1", "delta2",
            "identity_residual", "fallback_count",
        ] + [f"step_error_{t}" for t in range(T)],
        "exceedance.csv": _BASE_COLUMNS + ["r", "coupling_error", "bound_thm4", "exceeded"],
        "wasserstein.csv": _BASE_COLUMNS + [
            "t", "alpha_sq", "beta_sq", "w2sq", "ar_alpha_sq", "corollary_lb",
            "sandwich_lower", "sandwich_upper",
        ],
        "checks.csv": _BASE_COLUMNS + ["check", "passed", "value", "threshold"],
    }


class ExperimentAborted(GfomError, RuntimeError):
    pass


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        return format(x, ".17g")
    return str(x)


@dataclass
class Group:
    index: int
    n_index: int
    n: int
    scale: float
    sys: SystemSpec
    params: object
    linear: LinearCaseSpec | None


def _linear_spec(cfg: ExperimentConfig, n_index: int, n: int) -> LinearCaseSpec:
    T = cfg.T
    G = RngStream(cfg.seed, (3, n_index)).generator().standard_normal((n, T))
    if cfg.design == "orthonormal":
        Q, R = np.linalg.qr(G)
        F = math.sqrt(n) * Q * np.sign(np.diag(R))
    else:
        F = G
    Lam = np.zeros((T, T))
    for t in range(1, T):
        Lam[t - 1, t] = cfg.lam
    return LinearCaseSpec(F, Lam, Lam)


def _base_system(cfg: ExperimentConfig, n_index: int, n: int):
    se_rng = RngStream(cfg.seed, (0, n_index))
    if cfg.kind == "amp-tanh":
        f = [ones(n)] + [Separable("tanh", {t - 1: 1.0}) for t in range(1, cfg.T)]
        sys, params = se_amp(f, K=cfg.K, rng=se_rng)
        return sys, params, None
    if cfg.kind == "linear":
        spec = _linear_spec(cfg, n_index, n)
        sys = spec.system()
        if cfg.se_source == "monte_carlo":
            return sys, se_monte_carlo(sys, K=cfg.K, rng=se_rng), spec
        if cfg.se_source == "explicit":
            return sys, se_explicit(sys, cfg.sigma, cfg.b), spec
        return sys, se_linear_closed_form(spec), spec
    # custom
    f = [from_dict(d, n) for d in cfg.f]
    g = [from_dict(d, n) for d in cfg.g]
    sys = SystemSpec(n, f, g)
    if cfg.se_source == "explicit":
        return sys, se_explicit(sys, cfg.sigma, cfg.b), None
    return sys, se_monte_carlo(sys, K=cfg.K, rng=se_rng), None


def _groups(cfg: ExperimentConfig) -> list:
    out = []
    for ni, n in enumerate(cfg.n):
        sys, params, spec = _base_system(cfg, ni, n)
        for scale in cfg.sigma_scale:
            p = params if scale == 1.0 else params.with_sigma(scale * params.Sigma)
            out.append(Group(len(out), ni, n, float(scale), sys, p, spec))
    return out


@dataclass
class TrialResult:
    trial_id: int
    coupling_error: float
    x_norm: float
    step_errors: np.ndarray
    delta1: float
    delta2: float
    identity_residual: float
    fallback_count: int


def _trial(cfg: ExperimentConfig, group: Group, i: int) -> TrialResult:
    run = build_coupling(group.sys, group.params, rng=RngStream(cfg.seed, (1, group.n_index, i)))
    try:
        d1, d2 = deltas(run, group.params)
    except SingularSigma:
        d1 = d2 = float("nan")
    return TrialResult(i, run.coupling_error, float(np.linalg.norm(run.X)), run.step_errors,
                       d1, d2, verify_identity(run), len(run.fallback_log))


def _bound(cfg, group, res, r):
    if math.isnan(res.delta1):
        return float("nan")
    return _bound_thm4(group.sys.lipschitz_f, group.sys.lipschitz_g,
                       two_one_norm(group.params.Omega), cfg.T, res.delta1, res.delta2, r,
                       group.n)


def _rows(cfg, groups, results):
    coupling, exceed, wass = [], [], []
    for group, res_list in zip(groups, results):
        base = lambda tid: [tid, cfg.seed, group.n, cfg.T, group.scale]  # noqa: E731
        for res in res_list:
            coupling.append(base(res.trial_id) + [
                res.coupling_error, res.coupling_error ** 2, res.x_norm / math.sqrt(group.n),
                res.delta1, res.delta2, res.identity_residual, res.fallback_count,
            ] + list(res.step_errors))
            for r in cfg.r_grid:
                bound = _bound(cfg, group, res, r)
                if math.isnan(bound):
                    continue
                exceed.append(base(res.trial_id) + [r, res.coupling_error, bound,
                                                    res.coupling_error > bound])
        if group.linear is not None:
            lb = lb_linear_case(group.linear, group.params.Sigma, group.n)
            for t in range(cfg.T):
                ar = ar_alpha_sq(cfg.lam, t + 1) if cfg.design == "orthonormal" else float("nan")
                wass.append(base(-1) + [t, lb.alpha_sq[t], lb.beta_sq[t], lb.w2sq_per_t[t], ar,
                                        lb.corollary_lb, lb.sandwich[0], lb.sandwich[1]])
    return coupling, exceed, wass


def _summaries(cfg, groups, results, psi):
    out = []
    for group, res_list in zip(groups, results):
        errs = np.array([r.coupling_error for r in res_list])
        s = {
            "group": group.index,
            "n": group.n,
            "sigma_scale": group.scale,
            "trials": len(res_list),
            "median_coupling_error": float(np.median(errs)) if len(errs) else None,
            "median_x_norm_over_sqrt_n": (float(np.median([r.x_norm for r in res_list]))
                                          / math.sqrt(group.n)) if len(errs) else None,
            "mean_coupling_error_sq": float(np.mean(errs ** 2)) if len(errs) else None,
            "max_identity_residual": max((r.identity_residual for r in res_list), default=None),
            "fallback_total": int(sum(r.fallback_count for r in res_list)),
            "se_near_degenerate": bool(group.params.mc_meta.get("near_degenerate", False)),
        }
        table = []
        for r in cfg.r_grid:
            bounds = [_bound(cfg, group, res, r) for res in res_list]
            valid = [(res, b) for res, b in zip(res_list, bounds) if not math.isnan(b)]
            if not valid:
                continue
            k = sum(res.coupling_error > b for res, b in valid)
            lo, hi = wilson_interval(k, len(valid), 0.99)
            table.append({"r": r, "exceed": int(k), "trials": len(valid),
                          "frequency": k / len(valid), "wilson_low": lo, "wilson_high": hi,
                          "ceiling": 3.0 * math.exp(-r)})
        s["exceedance"] = table
        if group.linear is not None:
            lb = lb_linear_case(group.linear, group.params.Sigma, group.n)
            s["corollary_lb"] = lb.corollary_lb
        if group.index in psi:
            s["psi"] = psi[group.index]
        out.append(s)
    return out


def _write_csv(path, header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    data = buf.getvalue()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(data)
    return hashlib.sha256(data.encode()).hexdigest()


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _psi(cfg, groups):
    out = {}
    if not cfg.psi_K:
        return out
    for group in groups:
        try:
            p = psi_terms(group.sys, group.params, K=cfg.psi_K,
                          rng=RngStream(cfg.seed, (2, group.index)))
        except SingularSigma:
            continue
        out[group.index] = {"psi1": p.psi1, "psi1_se": p.psi1_se, "psi2": p.psi2,
                            "L_composite": p.L_composite,
                            "note": "refined bound evaluated up to an unspecified universal constant"}
    return out


def _run_oracle(cfg, out_dir):
    from .verify import run_checks

    n = cfg.n[0]
    rows = [[-1, cfg.seed, n, cfg.T, 1.0, c.name, c.passed, c.value, c.threshold]
            for c in run_checks(cfg.seed, n=n)]
    return rows


def run_experiment(cfg: ExperimentConfig, out: str | None = None) -> dict:
    """Run every group and trial of ``cfg``; returns the manifest (also written to disk).

    CSV bodies depend only on the config and seed, never on thread count or timing.
    """
    cfg.validate()
    out_dir = out or cfg.out
    os.makedirs(out_dir, exist_ok=True)
    marker = os.path.join(out_dir, FAILURE_MARKER)
    if os.path.exists(marker):
        os.remove(marker)
    t0 = time.perf_counter()
    cols = csv_columns(cfg.T)
    status, error = "complete", None
    groups, results, checks = [], [], []
    try:
        if cfg.kind == "oracle":
            checks = _run_oracle(cfg, out_dir)
        else:
            groups = _groups(cfg)
            results = [[] for _ in groups]
            jobs = [(g, i) for g in groups for i in range(cfg.trials)]
            with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
                futures = [ex.submit(_trial, cfg, g, i) for g, i in jobs]
                try:
                    # gathered in job order regardless of completion order
                    for (g, _), fut in zip(jobs, futures):
                        results[g.index].append(fut.result())
                except BaseException:
                    for fut in futures:
                        fut.cancel()
                    raise
    except Exception as exc:  # flush partial results, then abort
        status, error = "failed", f"{type(exc).__name__}: {exc}"

    psi = _psi(cfg, groups) if status == "complete" else {}
    coupling, exceed, wass = _rows(cfg, groups, results) if groups else ([], [], [])
    digests = {
        "coupling_errors.csv": _write_csv(os.path.join(out_dir, "coupling_errors.csv"),
                                          cols["coupling_errors.csv"], coupling),
        "exceedance.csv": _write_csv(os.path.join(out_dir, "exceedance.csv"),
                                     cols["exceedance.csv"], exceed),
        "wasserstein.csv": _write_csv(os.path.join(out_dir, "wasserstein.csv"),
                                      cols["wasserstein.csv"], wass),
    }
    if cfg.kind == "oracle":
        digests["checks.csv"] = _write_csv(os.path.join(out_dir, "checks.csv"),
                                           cols["checks.csv"], checks)
    _write_json(os.path.join(out_dir, "se_params.json"), {
        "schema_version": SCHEMA_VERSION,
        "groups": [{"group": g.index, "n": g.n, "sigma_scale": g.scale,
                    "params": g.params.to_dict(), "psi": psi.get(g.index)} for g in groups],
    })
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "library_version": __version__,
        "status": status,
        "error": error,
        "config": cfg.to_dict(),
        "csv_columns": {k: v for k, v in cols.items() if k in digests},
        "csv_sha256": digests,
        "trial_streams": [{"group": g.index, "n": g.n, "sigma_scale": g.scale,
                           "seed": cfg.seed, "stream": [1, g.n_index, "trial_id"],
                           "trials": len(results[g.index])} for g in groups],
        "summaries": _summaries(cfg, groups, results, psi) if groups else [],
        "checks_passed": all(row[6] for row in checks) if checks else None,
        "wall_time_s": time.perf_counter() - t0,
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    if status != "complete":
        with open(marker, "w", encoding="utf-8") as fh:
            fh.write(error + "\n")
        raise ExperimentAborted(error)
    return manifest


def sweep(cfg: ExperimentConfig, key: str, values, out: str | None = None) -> list:
    """One :func:`run_experiment` per value of ``key``, each in ``<out>/<key>=<value>``."""
    from .config import SCHEMA

    if key not in SCHEMA or key in ("out", "threads", "preset"):
        raise ConfigInvalid([("param", f"cannot sweep over {key!r}")])
    parse = SCHEMA[key][0]
    base = out or cfg.out
    manifests = []
    for v in values:
        sub = with_overrides(cfg, **{key: parse(v)})
        manifests.append(run_experiment(sub, os.path.join(base, f"{key}={v}")))
    return manifests
