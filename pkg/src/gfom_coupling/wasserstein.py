"""Quadratic Wasserstein distances between Gaussian laws and the linear-case lower bounds."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NotPositiveSemidefinite

__all__ = [
    "GaussianLaw",
    "LbReport",
    "psd_sqrt",
    "w2_gaussian",
    "lb_linear_case",
    "column_laws",
    "ar_alpha_sq",
    "sandwich",
]

_SQRT2M1 = math.sqrt(2.0) - 1.0


@dataclass(frozen=True, eq=False)
class GaussianLaw:
    """``N(mean, cov)`` with a possibly singular covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise DimensionMismatch(f"mean has length {d}, covariance has shape {cov.shape}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        if d:
            # relative tolerance plus a round-off floor, so exactly-degenerate
            # laws (e.g. fully observed coordinates) are not rejected
            tol = 1e-10 * max(np.trace(cov), 0.0) / d + 1e-13 * max(np.abs(cov).max(), 1.0)
            lo = np.linalg.eigvalsh(cov)[0]
            if lo < -tol:
                raise NotPositiveSemidefinite(f"covariance has eigenvalue {lo:.3e}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        if self.dim == 0:
            return 0
        eig = np.linalg.eigvalsh(self.cov)
        tol = 1e-10 * max(eig[-1], 0.0) * self.dim
        return int(np.sum(eig > tol))

    @classmethod
    def isotropic(cls, dim: int, var: float, mean=None) -> "GaussianLaw":
        mean = np.zeros(dim) if mean is None else mean
        return cls(mean, var * np.eye(dim))


def psd_sqrt(C) -> np.ndarray:
    """Symmetric square root with eigenvalues clipped at ``1e-12 * trace``."""
    C = 0.5 * (np.asarray(C, dtype=float) + np.asarray(C, dtype=float).T)
    eig, vec = np.linalg.eigh(C)
    floor = 1e-12 * abs(np.trace(C))
    eig = np.where(eig < floor, 0.0, eig)
    return (vec * np.sqrt(eig)) @ vec.T


def w2_gaussian(p: GaussianLaw, q: GaussianLaw) -> float:
    """Squared quadratic Wasserstein distance between two Gaussian laws."""
    if p.dim != q.dim:
        raise DimensionMismatch(f"dimensions differ: {p.dim} vs {q.dim}")
    rq = psd_sqrt(q.cov)
    cross = psd_sqrt(rq @ p.cov @ rq)
    val = float(np.sum((p.mean - q.mean) ** 2)
                + np.trace(p.cov) + np.trace(q.cov) - 2.0 * np.trace(cross))
    return max(val, 0.0)


@dataclass(frozen=True)
class LbReport:
    """Per-step quantities of the linear-case Wasserstein analysis.

    ``alpha``/``beta`` are standard-deviation scales (square roots);
    ``alpha_sq``/``beta_sq`` are their squares.
    """

    alpha: np.ndarray
    beta: np.ndarray
    alpha_sq: np.ndarray
    beta_sq: np.ndarray
    w2sq_per_t: np.ndarray
    corollary_lb: float
    sandwich: tuple
    n: int


def _resolvent(M):
    T = M.shape[0]
    return scipy.linalg.solve_triangular(np.eye(T) - M, np.eye(T), lower=False)


def lb_linear_case(spec, Sigma, n: int | None = None) -> LbReport:
    """Per-column squared distances between the iteration and the comparison process.

    ``spec`` is a :class:`~gfom_coupling.state_evolution.LinearCaseSpec`;
    ``Sigma`` the covariance used by the comparison process.
    """
    n = spec.n if n is None else int(n)
    F = np.asarray(spec.F, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    T = F.shape[1]
    if Sigma.shape != (T, T):
        raise DimensionMismatch(f"Sigma has shape {Sigma.shape}, expected {(T, T)}")
    RL = _resolvent(spec.Lambda)
    RG = _resolvent(spec.Gamma)
    alpha_sq = np.diag(RL.T @ (F.T @ F / n) @ RL).copy()
    beta_sq = np.diag(RG.T @ Sigma @ RG).copy()
    alpha = np.sqrt(np.maximum(alpha_sq, 0.0))
    beta = np.sqrt(np.maximum(beta_sq, 0.0))
    c2 = _SQRT2M1 ** 2
    w2 = (n - 1) / n * c2 * alpha_sq + n * ((1.0 + _SQRT2M1 / n) * alpha - beta) ** 2
    lb = (n - 1) / n * c2 * float(alpha_sq.sum())
    return LbReport(alpha, beta, alpha_sq, beta_sq, w2, lb, sandwich(w2), n)


def column_laws(spec, Sigma):
    """The exact laws of column ``t`` of ``X`` and of ``Y`` in the linear case.

    ``x_t = A v_t`` with ``v_t = F (I - Lambda)^{-1} e_t``, so
    ``cov(x_t) = (|v_t|^2 / n) I + v_t v_t^T / n``; ``y_t`` is isotropic with
    variance ``[(I - Gamma)^{-T} Sigma (I - Gamma)^{-1}]_tt``.
    """
    F = np.asarray(spec.F, dtype=float)
    n, T = F.shape
    V = F @ _resolvent(spec.Lambda)
    RG = _resolvent(spec.Gamma)
    beta_sq = np.diag(RG.T @ np.asarray(Sigma, dtype=float) @ RG)
    out = []
    for t in range(T):
        v = V[:, t]
        cx = (v @ v / n) * np.eye(n) + np.outer(v, v) / n
        out.append((GaussianLaw(np.zeros(n), cx), GaussianLaw.isotropic(n, beta_sq[t])))
    return out


def ar_alpha_sq(lam: float, t: int) -> float:
    """``sum_{s<t} lam^(2 s)``, the squared column scale at step ``t`` (1-based).

    This is the diagonal of ``(I - Lambda)^{-T} (I - Lambda)^{-1}`` for
    ``g_t = lam * x_{t-1}`` and a design with ``F^T F / n = I``.
    """
    if t < 1:
        raise ValueError("t must be at least 1")
    q = float(lam) ** 2
    if q == 1.0:
        return float(t)
    return (q ** t - 1.0) / (q - 1.0)


def sandwich(per_t_w2sq):
    """``(sqrt(sum_t w_t), sum_t sqrt(w_t))`` for nonnegative per-step squared distances."""
    w = np.asarray(per_t_w2sq, dtype=float)
    if np.any(w < 0):
        raise ValueError("squared distances must be nonnegative")
    return float(math.sqrt(w.sum())), float(np.sqrt(w).sum())
