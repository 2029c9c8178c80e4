"""Brute-force Gaussian conditioning for small instances.

Serves as a reference for the recursive conditional laws of an adapted linear
system ``xi_t = F_t(xi_{<t}) theta + g_t(xi_{<t})`` with ``theta ~ N(0, I_N)``.
Desk scale only (N up to a few dozen).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, InconsistentRealization
from .linalg_rand import RngStream, pinv
from .wasserstein import GaussianLaw

__all__ = [
    "ConditionalMap",
    "cond_gaussian",
    "AdaptedLinearSystem",
    "StepConditional",
    "recursive_conditionals",
    "simulate",
    "joint_law",
    "projection_identity_residual",
    "CONSISTENCY_TOL",
]

CONSISTENCY_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class ConditionalMap:
    """``xi -> N(mu_theta + gain (xi - mu_xi), cov)``; the covariance does not depend on ``xi``."""

    mu_theta: np.ndarray
    mu_xi: np.ndarray
    gain: np.ndarray
    cov: np.ndarray

    def mean(self, xi) -> np.ndarray:
        return self.mu_theta + self.gain @ (np.asarray(xi, dtype=float) - self.mu_xi)

    def __call__(self, xi) -> GaussianLaw:
        return GaussianLaw(self.mean(xi), self.cov)


def cond_gaussian(joint: GaussianLaw, split: int) -> ConditionalMap:
    """Law of the first ``split`` coordinates given the rest, for a possibly degenerate joint."""
    d = joint.dim
    if not 0 < split <= d:
        raise DimensionMismatch(f"split {split} outside (0, {d}]")
    mu, C = joint.mean, joint.cov
    Ctt, Ctx, Cxx = C[:split, :split], C[:split, split:], C[split:, split:]
    gain = Ctx @ pinv(Cxx) if d > split else np.zeros((split, 0))
    cov = Ctt - gain @ Ctx.T
    cov = 0.5 * (cov + cov.T)
    # the Schur complement is PSD; clear negative round-off measured on the joint's scale
    w, V = np.linalg.eigh(cov)
    if w[0] < 0 and w[0] >= -1e-10 * max(np.abs(C).max(), 1.0):
        cov = (V * np.clip(w, 0.0, None)) @ V.T
        cov = 0.5 * (cov + cov.T)
    return ConditionalMap(mu[:split].copy(), mu[split:].copy(), gain, cov)


@dataclass(frozen=True, eq=False)
class AdaptedLinearSystem:
    """``xi_t = F_t theta + g_t`` where ``F_t``, ``g_t`` are functions of the past observations.

    ``F_fns[t](history)`` returns an ``m_t x N`` matrix and ``g_fns[t](history)`` a
    length-``m_t`` vector; ``history`` is the list ``[xi_0, ..., xi_{t-1}]``.
    """

    N: int
    F_fns: Sequence[Callable]
    g_fns: Sequence[Callable]

    @property
    def T(self) -> int:
        return len(self.F_fns)

    def step(self, t: int, history):
        F = np.atleast_2d(np.asarray(self.F_fns[t](list(history)), dtype=float))
        g = np.asarray(self.g_fns[t](list(history)), dtype=float).reshape(-1)
        if F.shape[1] != self.N or F.shape[0] != g.shape[0]:
            raise DimensionMismatch(f"step {t}: F has shape {F.shape}, g has length {g.shape[0]}")
        return F, g

    @classmethod
    def constant(cls, Fs, gs) -> "AdaptedLinearSystem":
        Fs = [np.atleast_2d(np.asarray(F, dtype=float)) for F in Fs]
        gs = [np.asarray(g, dtype=float).reshape(-1) for g in gs]
        return cls(Fs[0].shape[1], [lambda h, F=F: F for F in Fs], [lambda h, g=g: g for g in gs])


def simulate(sys: AdaptedLinearSystem, rng) -> tuple:
    """Draw ``theta ~ N(0, I_N)`` and run the system; returns ``(theta, [xi_0, ...])``."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    theta = gen.standard_normal(sys.N)
    xi = []
    for t in range(sys.T):
        F, g = sys.step(t, xi)
        xi.append(F @ theta + g)
    return theta, xi


@dataclass(frozen=True, eq=False)
class StepConditional:
    """Conditional law of ``(theta, xi_t)`` given ``xi_{<t}``."""

    theta_mean: np.ndarray
    theta_cov: np.ndarray
    xi_mean: np.ndarray
    xi_cov: np.ndarray
    cross_cov: np.ndarray

    def joint(self) -> GaussianLaw:
        mean = np.concatenate([self.theta_mean, self.xi_mean])
        cov = np.block([[self.theta_cov, self.cross_cov], [self.cross_cov.T, self.xi_cov]])
        return GaussianLaw(mean, cov)


def _check_consistent(F, resid, t):
    if F.shape[0] == 0:
        return
    proj = resid - F @ (pinv(F) @ resid)
    if np.linalg.norm(proj) > CONSISTENCY_TOL * np.linalg.norm(resid):
        raise InconsistentRealization(
            f"observations up to step {t} are not in the column space of the design")


def recursive_conditionals(sys: AdaptedLinearSystem, xi) -> list:
    """One :class:`StepConditional` per step, from the pseudo-inverse formulas.

    With ``F``, ``g`` the stacked designs and offsets of the past steps:
    ``E[theta | past] = F^+ (xi - g)``, ``cov(theta | past) = I - F^+ F``,
    ``E[xi_t | past] = F_t E[theta | past] + g_t``,
    ``cov(xi_t | past) = F_t (I - F^+ F) F_t^T``.
    """
    xi = [np.asarray(x, dtype=float).reshape(-1) for x in xi]
    if len(xi) < sys.T:
        raise DimensionMismatch(f"need {sys.T} observations, got {len(xi)}")
    N = sys.N
    I = np.eye(N)
    F_prev = np.zeros((0, N))
    g_prev = np.zeros(0)
    out = []
    for t in range(sys.T):
        x_prev = np.concatenate(xi[:t]) if t else np.zeros(0)
        Fp = pinv(F_prev) if F_prev.shape[0] else np.zeros((N, 0))
        P = Fp @ F_prev
        mean = Fp @ (x_prev - g_prev)
        cov = I - P
        cov = 0.5 * (cov + cov.T)
        F_t, g_t = sys.step(t, xi[:t])
        xi_mean = F_t @ mean + g_t
        xi_cov = F_t @ cov @ F_t.T
        out.append(StepConditional(mean, cov, xi_mean, 0.5 * (xi_cov + xi_cov.T), cov @ F_t.T))
        F_prev = np.vstack([F_prev, F_t])
        g_prev = np.concatenate([g_prev, g_t])
        _check_consistent(F_prev, np.concatenate(xi[: t + 1]) - g_prev, t)
    return out


def joint_law(Fs, gs) -> GaussianLaw:
    """Joint law of ``(theta, xi_0, ..., xi_{T-1})`` for a non-adaptive system."""
    F = np.vstack([np.atleast_2d(f) for f in Fs])
    g = np.concatenate([np.asarray(x, dtype=float).reshape(-1) for x in gs])
    N = F.shape[1]
    mean = np.concatenate([np.zeros(N), g])
    cov = np.block([[np.eye(N), F.T], [F, F @ F.T]])
    return GaussianLaw(mean, cov)


def projection_identity_residual(F_prev, F_t) -> float:
    """``|P_prev + Pbar_t - P_all|`` in Frobenius norm, where ``P(M) = M^+ M`` and
    ``Pbar_t = P(F_t (I - P_prev))``."""
    F_prev = np.atleast_2d(np.asarray(F_prev, dtype=float))
    F_t = np.atleast_2d(np.asarray(F_t, dtype=float))
    N = F_t.shape[1]
    P_prev = pinv(F_prev) @ F_prev if F_prev.size else np.zeros((N, N))
    Fbar = F_t @ (np.eye(N) - P_prev)
    F_all = np.vstack([F_prev, F_t]) if F_prev.size else F_t
    # Fbar vanishes in exact arithmetic when F_t adds nothing new; its round-off
    # residue must not be inverted, so the cutoff is relative to F_t, not to Fbar
    cutoff = 1e-10 * max(float(np.linalg.norm(F_t, 2)), 1.0)
    u, s, vt = np.linalg.svd(Fbar, full_matrices=False)
    keep = s > cutoff
    lhs = P_prev + vt[keep].T @ vt[keep]
    return float(np.linalg.norm(lhs - pinv(F_all) @ F_all))
