"""Reduced-size property suite behind ``gfom-coupling verify``.

Every check is deterministic given the seed; reports contain no timings so
two runs with the same seed produce identical output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..coupling import build_coupling, corrupt_aprime, verify_identity
from ..diagnostics import check_concentration, check_gram_concentration
from ..functions import Separable, ones
from ..linalg_rand import RngStream
from ..state_evolution import LinearCaseSpec, se_amp, se_linear_closed_form, se_monte_carlo
from ..suites import chol_pert_suite, conditioning_suite, stability_suite
from ..wasserstein import ar_alpha_sq, column_laws, lb_linear_case, w2_gaussian

__all__ = ["Check", "run_checks", "format_report", "FAULTS"]

FAULTS = ("corrupt-aprime",)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    value: float
    threshold: float

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name} value={self.value:.6g} threshold={self.threshold:.6g}"


def tanh_amp_f(n: int, T: int):
    return [ones(n)] + [Separable("tanh", {t - 1: 1.0}) for t in range(1, T)]


def gauss_hermite_tanh_prime(order: int = 200) -> float:
    """``E[1 - tanh(G)^2]`` for ``G ~ N(0, 1)`` by Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite_e.hermegauss(order)
    return float(np.sum(w * (1.0 - np.tanh(x) ** 2)) / math.sqrt(2.0 * math.pi))


def _coupling_checks(root, n, fault):
    T, trials = 4, 10
    sys, params = se_amp(tanh_amp_f(n, T), K=500, rng=root.child(0))
    worst_id = worst_frame = 0.0
    Zs = []
    for i in range(trials):
        run = build_coupling(sys, params, rng=root.child(1, i))
        checked = corrupt_aprime(run) if fault == "corrupt-aprime" else run
        worst_id = max(worst_id, verify_identity(checked))
        worst_frame = max(worst_frame, float(np.abs(run.Q.T @ run.Q / n - np.eye(T)).max()))
        Zs.append(run.Z)
    Z = np.concatenate(Zs)
    ks = stats.kstest(Z.ravel(), "norm").pvalue
    gram = np.abs(Z.T @ Z / Z.shape[0] - np.eye(T)).max()
    gram_thr = 5.0 * math.sqrt(2.0 / Z.shape[0])
    return [
        Check("coupling_identity", worst_id <= 1e-8, worst_id, 1e-8),
        Check("frame_orthonormality", worst_frame <= 1e-8, worst_frame, 1e-8),
        Check("z_gaussian_ks_pvalue", ks >= 0.01, ks, 0.01),
        Check("z_gram_identity", gram <= gram_thr, gram, gram_thr),
    ]


def _se_checks(root, n):
    out = []
    sys, params = se_amp(tanh_amp_f(n, 2), K=2000, rng=root.child(2))
    oracle = gauss_hermite_tanh_prime()
    se = params.mc_meta["b_se"][0, 1]
    z = abs(params.b[0, 1] - oracle) / se
    out.append(Check("se_b01_vs_quadrature_zscore", z <= 3.0, z, 3.0))

    F = root.child(3).generator().standard_normal((n, 3))
    spec = LinearCaseSpec(F, np.zeros((3, 3)), np.zeros((3, 3)))
    mc = se_monte_carlo(spec.system(), K=500, rng=root.child(4))
    exact = se_linear_closed_form(spec)
    diff = np.abs(mc.Sigma - exact.Sigma).max()
    out.append(Check("se_linear_closed_form_agreement", diff <= 1e-12, diff, 1e-12))
    return out


def _wasserstein_checks(root):
    gen = root.child(5).generator()
    n, T = 40, 3
    F = gen.standard_normal((n, T))
    Lam = np.triu(0.5 * gen.standard_normal((T, T)), 1)
    Gam = np.triu(0.5 * gen.standard_normal((T, T)), 1)
    spec = LinearCaseSpec(F, Lam, Gam)
    Sigma = F.T @ F / n + 0.1 * np.eye(T)
    lb = lb_linear_case(spec, Sigma)
    direct = np.array([w2_gaussian(px, py) for px, py in column_laws(spec, Sigma)])
    err = float(np.abs(lb.w2sq_per_t - direct).max())

    Q, R = np.linalg.qr(gen.standard_normal((n, 5)))
    lam = 0.7
    Lam5 = np.diag(np.full(4, lam), 1)
    ar = lb_linear_case(LinearCaseSpec(math.sqrt(n) * Q, Lam5, Lam5), np.eye(5))
    ar_err = max(abs(ar.alpha_sq[t] - ar_alpha_sq(lam, t + 1)) for t in range(5))
    exact_ok = ar_alpha_sq(1.0, 3) == 3.0 and ar_alpha_sq(2.0, 3) == 21.0
    return [
        Check("w2_closed_form_vs_column_laws", err <= 1e-10, err, 1e-10),
        Check("ar_alpha_sq_vs_diagonal", ar_err <= 1e-12, ar_err, 1e-12),
        Check("ar_alpha_sq_exact_values", exact_ok, float(exact_ok), 1.0),
    ]


def _lemma_checks(root):
    out = []
    bad, _, _ = chol_pert_suite(2000, root.child(6))
    out.append(Check("cholesky_perturbation_violations", bad == 0, bad, 0))
    bad, _ = stability_suite(300, root.child(7))
    out.append(Check("stability_violations", bad == 0, bad, 0))
    rows = check_concentration(lambda z: np.linalg.norm(z, axis=1), 100, 1.0, 4000,
                               [1, 2, 4], rng=root.child(8))
    worst = max(r["wilson_low"] - r["ceiling"] for r in rows)
    out.append(Check("gaussian_concentration_margin", all(r["holds"] for r in rows), worst, 0.0))
    rows = check_gram_concentration(lambda g: g.standard_normal((50, 2)), 1.0, 1000,
                                    [1, 2, 4], rng=root.child(9))
    worst = max(r["wilson_low"] - r["ceiling"] for r in rows)
    out.append(Check("gram_concentration_margin", all(r["holds"] for r in rows), worst, 0.0))
    err, proj = conditioning_suite(30, root.child(10))
    out.append(Check("conditioning_vs_joint", err <= 1e-10, err, 1e-10))
    out.append(Check("projection_identity", proj <= 1e-10, proj, 1e-10))
    return out


def run_checks(seed: int, n: int = 200, fault: str | None = None) -> list:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {', '.join(FAULTS)}")
    root = RngStream(seed, (99,))
    checks = []
    checks += _coupling_checks(root, n, fault)
    checks += _se_checks(root, n)
    checks += _wasserstein_checks(root)
    checks += _lemma_checks(root)
    return checks


def format_report(checks) -> str:
    lines = [c.line() for c in checks]
    failed = sum(not c.passed for c in checks)
    lines.append(f"{len(checks) - failed}/{len(checks)} checks passed")
    return "\n".join(lines) + "\n"
