"""Error functionals, the explicit coupling-error bounds, and randomized checks of
the supporting technical inequalities (Cholesky perturbation, discrete-time
stability, Gaussian concentration).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.stats import binomtest

from .coupling import CoupledRun
from .dynamics import SystemSpec, evaluate_columns, run_comparison
from .errors import SingularSigma
from .linalg_rand import RngStream, sample_gaussian_matrix, two_one_norm
from .state_evolution import SeParams, draw_replicates

__all__ = [
    "ErrorReport",
    "compute_Bn_Sn",
    "deltas",
    "bound_thm4",
    "bound_thm5_shape",
    "error_report",
    "psi_terms",
    "PsiTerms",
    "wilson_interval",
    "tail_frequency",
    "check_chol_pert",
    "check_stability",
    "check_concentration",
    "check_gram_concentration",
    "stability_map",
]


def _require_pd(Sigma):
    Sigma = np.asarray(Sigma, dtype=float)
    eig = np.linalg.eigvalsh(Sigma)
    if eig[0] <= 1e-10 * abs(eig[-1]) or eig[0] <= 0:
        raise SingularSigma(f"Sigma is not positive definite (min eigenvalue {eig[0]:.3e})")
    return Sigma


def _sym_opnorm(M) -> float:
    return float(np.abs(np.linalg.eigvalsh(0.5 * (M + M.T))).max())


def compute_Bn_Sn(run: CoupledRun, params: SeParams):
    """Sample matrices ``Bn = Sigma^{-1} (Y - M(Y))^T F(Y) / n`` and
    ``Sn = Omega^{-T} F(Y)^T F(Y) Omega^{-1} / n``."""
    Sigma = _require_pd(params.Sigma)
    n = run.n
    W = run.Y - run.MY
    Bn = scipy.linalg.solve(Sigma, W.T @ run.FY / n, assume_a="pos")
    # F Omega^{-1} via a triangular solve on the right
    FOi = scipy.linalg.solve_triangular(params.Omega, run.FY.T, trans="T", lower=False).T
    Sn = FOi.T @ FOi / n
    return Bn, 0.5 * (Sn + Sn.T)


def deltas(run: CoupledRun, params: SeParams):
    """``(Delta1, Delta2)`` controlling the high-probability coupling bound."""
    Bn, Sn = compute_Bn_Sn(run, params)
    T = run.T
    d1 = two_one_norm(run.MY - run.GY - run.FY @ Bn) / two_one_norm(params.Omega)
    d2 = 52.0 * math.log2(4 * T) * math.sqrt(run.n) * _sym_opnorm(Sn - np.eye(T))
    return d1, d2


def bound_thm4(L_f, L_g, Omega, T, Delta1, Delta2, r, n=None) -> float:
    """``(1 + 4 L_f + L_g)^(T-1) (Delta1 + Delta2 + 2 sqrt(T) + sqrt(2 r)) |Omega|_{2,1}``.

    Holds with probability at least ``1 - 3 exp(-r)`` for ``0 <= r <= n``.
    """
    if r < 0 or (n is not None and r > n):
        raise ValueError(f"r={r} outside [0, n]")
    omega_21 = Omega if np.isscalar(Omega) else two_one_norm(Omega)
    growth = (1.0 + 4.0 * L_f + L_g) ** (T - 1)
    return growth * (Delta1 + Delta2 + 2.0 * math.sqrt(T) + math.sqrt(2.0 * r)) * omega_21


def composite_lipschitz(T, L_f, L_g, L_m, kappa) -> float:
    return math.log2(2 * T) + math.sqrt(T) * (L_f + L_g + L_m) * (1.0 + L_m) ** (T - 1) * math.sqrt(kappa)


def bound_thm5_shape(L_f, L_g, L_composite, Omega, T, psi1, psi2, r, c=1.0) -> float:
    """Shape of the refined bound with universal constant ``c`` (unknown; default 1).

    Only meaningful up to that constant -- compare trends, not levels.
    """
    omega_21 = Omega if np.isscalar(Omega) else two_one_norm(Omega)
    L = L_composite
    return (c * (1.0 + 4.0 * L_f + L_g) ** (T - 1)
            * (psi1 + L * psi2 + L ** 3 * (math.sqrt(T) + math.sqrt(r))) * omega_21)


@dataclass
class ErrorReport:
    trial_id: int
    n: int
    T: int
    coupling_error: float
    step_errors: np.ndarray
    Delta1: float
    Delta2: float
    Bn: np.ndarray
    Sn: np.ndarray
    L_f: float
    L_g: float
    omega_21: float
    seed: int = 0
    x_norm: float = float("nan")
    identity_residual: float = float("nan")
    fallback_count: int = 0
    psi1: float | None = None
    psi2: float | None = None
    L_composite: float | None = None
    extra: dict = field(default_factory=dict)

    def bound_thm4(self, r: float) -> float:
        return bound_thm4(self.L_f, self.L_g, self.omega_21, self.T, self.Delta1, self.Delta2,
                          r, self.n)

    def bound_thm5(self, r: float, c: float = 1.0) -> float:
        if self.psi1 is None:
            raise ValueError("psi terms not attached to this report")
        return bound_thm5_shape(self.L_f, self.L_g, self.L_composite, self.omega_21, self.T,
                                self.psi1, self.psi2, r, c)

    def exceeded(self, r_grid) -> dict:
        return {r: self.coupling_error > self.bound_thm4(r) for r in r_grid}


def error_report(run: CoupledRun, params: SeParams, sys: SystemSpec, trial_id: int = 0,
                 identity_residual: float | None = None) -> ErrorReport:
    Bn, Sn = compute_Bn_Sn(run, params)
    d1, d2 = deltas(run, params)
    return ErrorReport(
        trial_id=trial_id,
        n=run.n,
        T=run.T,
        coupling_error=run.coupling_error,
        step_errors=run.step_errors,
        Delta1=d1,
        Delta2=d2,
        Bn=Bn,
        Sn=Sn,
        L_f=sys.lipschitz_f,
        L_g=sys.lipschitz_g,
        omega_21=two_one_norm(params.Omega),
        seed=run.rng.seed if run.rng is not None else 0,
        x_norm=float(np.linalg.norm(run.X)),
        identity_residual=float("nan") if identity_residual is None else identity_residual,
        fallback_count=len(run.fallback_log),
    )


@dataclass
class PsiTerms:
    psi1: float
    psi2: float
    L_composite: float
    B: np.ndarray
    S: np.ndarray
    psi1_se: float
    S_se: np.ndarray


def psi_terms(sys: SystemSpec, params: SeParams, K: int = 2000, rng: RngStream | None = None,
              batch_size: int = 250) -> PsiTerms:
    """Population ``psi1``, ``psi2`` and the composite constant ``L`` by fresh Monte Carlo.

    ``B`` and ``S`` are estimated from K new replicates of the comparison
    process (never from a diagnostic run); ``psi1`` is then averaged over the
    same replicates in a second pass.
    """
    rng = rng if rng is not None else RngStream(0)
    Sigma = _require_pd(params.Sigma)
    n, T = sys.n, sys.T
    Omega = params.Omega

    def batches():
        # replicates are regenerated from their streams, so two passes see identical draws
        start, j = 0, 0
        while start < K:
            size = min(batch_size, K - start)
            Y, W = run_comparison(params.m, Omega, draw_replicates(rng, j, size, n, T))
            yield Y, W, evaluate_columns(sys.f, Y)
            start += size
            j += 1

    WF, FF = [], []
    for Y, W, FY in batches():
        WF.append(np.einsum("kns,knt->kst", W, FY) / n)
        FF.append(np.einsum("kns,knt->kst", FY, FY) / n)
    WF = np.concatenate(WF)
    FF = np.concatenate(FF)
    B = scipy.linalg.solve(Sigma, WF.mean(axis=0), assume_a="pos")
    Oi = scipy.linalg.solve_triangular(Omega, np.eye(T), lower=False)
    S_k = np.einsum("ts,ksr,ru->ktu", Oi.T, FF, Oi)
    S = S_k.mean(axis=0)
    S = 0.5 * (S + S.T)
    S_se = S_k.std(axis=0, ddof=1) / math.sqrt(K)
    omega_21 = two_one_norm(Omega)
    vals = []
    for Y, W, FY in batches():
        resid = evaluate_columns(params.m, Y) - evaluate_columns(sys.g, Y) - FY @ B
        vals.append(np.linalg.norm(resid, axis=-2).sum(axis=-1) / omega_21)
    vals = np.concatenate(vals)
    psi1 = float(vals.mean())
    psi2 = math.sqrt(n) * _sym_opnorm(S - np.eye(T))
    eig = np.linalg.eigvalsh(Sigma)
    kappa = eig[-1] / eig[0]
    L = composite_lipschitz(T, sys.lipschitz_f, sys.lipschitz_g, params.lipschitz_m, kappa)
    return PsiTerms(psi1, psi2, L, B, S, float(vals.std(ddof=1) / math.sqrt(K)), S_se)


def wilson_interval(k: int, n: int, confidence: float = 0.99):
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def tail_frequency(reports, r_grid, confidence: float = 0.99):
    """Exceedance of the high-probability bound per ``r``, against the ceiling ``3 e^{-r}``.

    One dict per ``r`` with the count, the frequency, its Wilson interval and
    ``holds`` = the Wilson lower limit does not exceed the ceiling.
    """
    reports = list(reports)
    if len(reports) < 100:
        raise ValueError("need at least 100 reports")
    rows = []
    N = len(reports)
    for r in r_grid:
        k = sum(1 for rep in reports if rep.coupling_error > rep.bound_thm4(r))
        lo, hi = wilson_interval(k, N, confidence)
        ceiling = 3.0 * math.exp(-r)
        rows.append({
            "r": float(r), "trials": N, "exceed": k, "frequency": k / N,
            "wilson_low": lo, "wilson_high": hi, "ceiling": ceiling,
            "holds": lo <= ceiling,
        })
    return rows


def check_chol_pert(U):
    """Both Cholesky perturbation inequalities for an upper-triangular ``U``.

    Returns ``(lhs1, rhs1, lhs2, rhs2, (holds1, holds2))`` with
    ``lhs1 = |U - I|``, ``rhs1 = 2 log2(4T) |U^T U - I|``,
    ``lhs2 = |U - I|^2``, ``rhs2 = 9 log2(4T) |U^T U - I|``.
    """
    U = np.asarray(U, dtype=float)
    T = U.shape[0]
    if U.shape != (T, T) or np.any(np.tril(U, -1) != 0):
        raise ValueError("U must be square upper triangular")
    if np.any(np.diag(U) < 0):
        raise ValueError("U must have a nonnegative diagonal")
    I = np.eye(T)
    d = float(np.linalg.norm(U - I, 2))
    e = _sym_opnorm(U.T @ U - I)
    c = math.log2(4 * T)
    lhs1, rhs1 = d, 2.0 * c * e
    lhs2, rhs2 = d * d, 9.0 * c * e
    slack = 1e-12 * max(1.0, rhs1)
    return lhs1, rhs1, lhs2, rhs2, (lhs1 <= rhs1 + slack, lhs2 <= rhs2 + slack)


def stability_map(h, u):
    """States ``v_t = h_t(v_{<t}) + u_t`` for controls ``u`` of shape ``(n, T)``."""
    u = np.asarray(u, dtype=float)
    v = np.zeros_like(u)
    for t in range(u.shape[1]):
        v[:, t] = h[t](v[:, :t]) + u[:, t]
    return v


def check_stability(h, u, u_prime, L: float | None = None):
    """Lipschitz stability of the control-to-state map and the trajectory comparison bound.

    Returns ``((lhs15, rhs15, holds15), (lhs16, rhs16, holds16))`` where the
    first triple compares ``|phi(u) - phi(u')|`` with
    ``sqrt(T) (1 + L)^(T-1) |u - u'|`` and the second compares the free
    trajectory ``x = phi(0)`` with ``y = phi(u)`` against
    ``(1 + L)^(T-1) sum_t |y_t - h_t(y_{<t})|``.
    """
    T = len(h)
    L = max(spec.lipschitz for spec in h) if L is None else L
    vu = stability_map(h, u)
    vp = stability_map(h, u_prime)
    lhs15 = float(np.linalg.norm(vu - vp))
    rhs15 = math.sqrt(T) * (1.0 + L) ** (T - 1) * float(np.linalg.norm(np.asarray(u) - np.asarray(u_prime)))
    x = stability_map(h, np.zeros_like(np.asarray(u, dtype=float)))
    y = vu
    resid = sum(float(np.linalg.norm(y[:, t] - h[t](y[:, :t]))) for t in range(T))
    lhs16 = float(np.linalg.norm(x - y))
    rhs16 = (1.0 + L) ** (T - 1) * resid
    tol15 = 1e-10 * max(1.0, rhs15)
    tol16 = 1e-10 * max(1.0, rhs16)
    return (lhs15, rhs15, lhs15 <= rhs15 + tol15), (lhs16, rhs16, lhs16 <= rhs16 + tol16)


def check_concentration(sample_fn, dim: int, L: float, trials: int, r_grid,
                        rng: RngStream | None = None, confidence: float = 0.99):
    """Empirical upper tails of an ``L``-Lipschitz functional of ``z ~ N(0, I_dim)``.

    ``sample_fn`` maps a ``(trials, dim)`` array to ``trials`` values.  For each
    ``r`` the frequency of ``f(z) >= mean + L sqrt(2 r)`` is compared with
    ``e^{-r}``; ``holds`` means the Wilson lower limit is at most ``e^{-r}``.
    The mean is the sample mean.
    """
    rng = rng if rng is not None else RngStream(0)
    z = rng.generator().standard_normal((trials, dim))
    vals = np.asarray(sample_fn(z), dtype=float)
    mean = vals.mean()
    rows = []
    for r in r_grid:
        k = int(np.sum(vals >= mean + L * math.sqrt(2.0 * r)))
        lo, hi = wilson_interval(k, trials, confidence)
        ceiling = math.exp(-r)
        rows.append({"r": float(r), "trials": trials, "exceed": k, "frequency": k / trials,
                     "wilson_low": lo, "wilson_high": hi, "ceiling": ceiling,
                     "holds": lo <= ceiling})
    return rows


def check_gram_concentration(sample_H, L: float, trials: int, r_grid,
                             rng: RngStream | None = None, confidence: float = 0.99):
    """Deviation of ``H^T H`` from its mean for a random matrix with sub-Gaussian ``|Hu|``.

    ``sample_H(generator)`` returns one ``n x d`` draw.  The exceedance event is
    ``|H^T H - E H^T H| >= 4 |E H^T H|^{1/2} L sqrt(2r) + 2 L^2 (2r + 1)``,
    with ceiling ``2 * 9^d * e^{-r}`` (capped at 1).  ``E H^T H`` is the
    sample mean over the trials.
    """
    rng = rng if rng is not None else RngStream(0)
    gen = rng.generator()
    grams = np.stack([(lambda H: H.T @ H)(sample_H(gen)) for _ in range(trials)])
    mean = grams.mean(axis=0)
    d = mean.shape[0]
    dev = np.array([_sym_opnorm(g - mean) for g in grams])
    scale = math.sqrt(_sym_opnorm(mean))
    rows = []
    for r in r_grid:
        thresh = 4.0 * scale * L * math.sqrt(2.0 * r) + 2.0 * L * L * (2.0 * r + 1.0)
        k = int(np.sum(dev >= thresh))
        lo, hi = wilson_interval(k, trials, confidence)
        ceiling = min(1.0, 2.0 * 9.0 ** d * math.exp(-r))
        rows.append({"r": float(r), "trials": trials, "exceed": k, "frequency": k / trials,
                     "wilson_low": lo, "wilson_high": hi, "ceiling": ceiling,
                     "holds": lo <= ceiling})
    return rows
