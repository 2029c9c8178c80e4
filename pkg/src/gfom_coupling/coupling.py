"""Explicit coupling of the iteration with its comparison process.

One :class:`CoupledRun` shares a single GOE matrix ``A`` between the two
processes.  The comparison process is driven by ``z_t``, which is built from
``A`` applied to a Gram-Schmidt frame ``q_t`` of the nonlinearity outputs,
corrected by an independent auxiliary GOE matrix ``A'``.  Only the leading
``T x T`` block of ``A'`` is ever needed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import SystemSpec, evaluate_columns, run_gfom
from .errors import BasisExhausted, NonFinite
from .linalg_rand import RngStream, sample_goe, sample_goe_block
from .state_evolution import SeParams

__all__ = [
    "OrderedBasis",
    "CoupledRun",
    "gram_schmidt_step",
    "build_coupling",
    "verify_identity",
    "corrupt_aprime",
    "SPAN_TOL",
]

SPAN_TOL = 1e-8
_REORTH_TOL = 1e-10

# sub-stream ids inside one trial
_STREAM_A = 0
_STREAM_APRIME = 1


class OrderedBasis:
    """Fixed ordered basis used when a nonlinearity output is already in the span.

    The default is the standard basis, which is never materialised.
    """

    def __init__(self, vectors=None):
        if vectors is not None:
            vectors = np.asarray(vectors, dtype=float)
            if vectors.ndim != 2 or vectors.shape[0] != vectors.shape[1]:
                raise ValueError("basis must be given as an n x n matrix of columns")
            if np.linalg.matrix_rank(vectors) < vectors.shape[0]:
                raise ValueError("basis vectors do not span R^n")
        self._vectors = vectors

    @property
    def is_standard(self) -> bool:
        return self._vectors is None

    def vector(self, i: int, n: int) -> np.ndarray:
        if self._vectors is None:
            e = np.zeros(n)
            e[i] = 1.0
            return e
        return self._vectors[:, i].copy()

    def size(self, n: int) -> int:
        return n if self._vectors is None else self._vectors.shape[1]


def _project_out(Q, v, n):
    return v - Q @ (Q.T @ v) / n


def _orthogonalize(Q, v, n):
    r = _project_out(Q, v, n)
    # second pass when <q_s, sqrt(n) r/|r|> would exceed 1e-10 * n
    if Q.shape[1] and np.abs(Q.T @ r).max() > _REORTH_TOL * math.sqrt(n) * np.linalg.norm(r):
        r = _project_out(Q, r, n)
    return r


def gram_schmidt_step(Q_prev, v, basis: OrderedBasis | None = None, tol: float = SPAN_TOL):
    """Next frame vector of length ``sqrt(n)`` orthogonal to the columns of ``Q_prev``.

    If ``v`` is (numerically) in the span of ``Q_prev`` -- its residual after
    projection is at most ``tol * |v|``, or ``v`` is zero -- the first basis
    vector outside that span is used instead.

    Returns ``(q, used_fallback, basis_index)``; ``basis_index`` is ``None``
    when no fallback happened.
    """
    v = np.asarray(v, dtype=float)
    n = v.shape[0]
    Q_prev = np.asarray(Q_prev, dtype=float).reshape(n, -1)
    k = Q_prev.shape[1]
    if k >= n:
        raise BasisExhausted(f"cannot add frame vector {k + 1} in dimension {n}")
    basis = basis if basis is not None else OrderedBasis()
    vnorm = np.linalg.norm(v)
    if vnorm > 0:
        r = _orthogonalize(Q_prev, v, n)
        rnorm = np.linalg.norm(r)
        if rnorm > tol * vnorm:
            return math.sqrt(n) * r / rnorm, False, None
    for i in range(basis.size(n)):
        if basis.is_standard:
            # residual of e_i is cheap: |e_i - Q Q^T e_i / n|^2 = 1 - |Q[i]|^2 / n
            if 1.0 - Q_prev[i] @ Q_prev[i] / n <= tol * tol:
                continue
        e = basis.vector(i, n)
        r = _orthogonalize(Q_prev, e, n)
        rnorm = np.linalg.norm(r)
        if rnorm > tol * np.linalg.norm(e):
            return math.sqrt(n) * r / rnorm, True, i
    raise BasisExhausted("no basis vector outside the current span")


@dataclass(frozen=True, eq=False)
class CoupledRun:
    """Immutable record of one coupled realisation.

    ``Aprime`` is the leading ``T x T`` block of the auxiliary GOE matrix.
    ``FY``, ``MY`` and ``GY`` are ``F``, ``M`` and ``G`` evaluated on ``Y``;
    ``R = Q^T F(Y) / n`` so that ``F(Y) = Q R``.
    """

    n: int
    T: int
    A: np.ndarray
    Aprime: np.ndarray
    Q: np.ndarray
    Z: np.ndarray
    W: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    R: np.ndarray
    FY: np.ndarray
    MY: np.ndarray
    GY: np.ndarray
    fallback_log: tuple = ()
    rng: RngStream | None = None
    meta: dict = field(default_factory=dict)

    @property
    def coupling_error(self) -> float:
        return float(np.linalg.norm(self.X - self.Y))

    @property
    def step_errors(self) -> np.ndarray:
        return np.linalg.norm(self.X - self.Y, axis=0)


def build_coupling(sys: SystemSpec, params: SeParams, basis: OrderedBasis | None = None,
                   rng: RngStream | None = None, A=None, Aprime=None) -> CoupledRun:
    """Construct ``(A, A', Q, Z, W, Y)`` step by step, then run the iteration on the same ``A``.

    ``A`` / ``Aprime`` may be supplied to reuse a matrix; otherwise both are
    drawn from ``rng`` sub-streams.
    """
    n, T = sys.n, sys.T
    if params.T != T or params.n != n:
        raise ValueError("system and parameters disagree on (n, T)")
    if T > n:
        raise BasisExhausted("more steps than dimensions")
    rng = rng if rng is not None else RngStream(0)
    if A is None:
        A = sample_goe(n, rng.child(_STREAM_A))
    if Aprime is None:
        Aprime = sample_goe_block(n, T, rng.child(_STREAM_APRIME))
    Omega = params.Omega
    basis = basis if basis is not None else OrderedBasis()

    Q = np.zeros((n, T))
    Z = np.zeros((n, T))
    W = np.zeros((n, T))
    Y = np.zeros((n, T))
    FY = np.zeros((n, T))
    MY = np.zeros((n, T))
    fallback = []
    for t in range(T):
        hist = Y[:, :t]
        FY[:, t] = sys.f[t](hist)
        q, used, idx = gram_schmidt_step(Q[:, :t], FY[:, t], basis)
        if used:
            fallback.append((t, idx))
        Q[:, t] = q
        Aq = A @ q
        proj = Q[:, :t].T @ Aq / n
        z = Aq + 0.5 * (Aprime[t, t] - q @ Aq / n) * q + Q[:, :t] @ (Aprime[:t, t] - proj)
        Z[:, t] = z
        W[:, t] = Z[:, : t + 1] @ Omega[: t + 1, t]
        MY[:, t] = params.m[t](hist)
        Y[:, t] = MY[:, t] + W[:, t]
        if not np.all(np.isfinite(Y[:, t])):
            raise NonFinite(t, "comparison iterate")
    X = run_gfom(sys, A)
    GY = evaluate_columns(sys.g, Y)
    R = Q.T @ FY / n
    return CoupledRun(n, T, A, Aprime, Q, Z, W, Y, X, R, FY, MY, GY, tuple(fallback), rng)


def verify_identity(run: CoupledRun, r: int | None = None) -> float:
    """Max over ``t <= r`` of ``|z_t - (A q_t - Q Z^T q_t / n + Q A'[:, t])| / sqrt(n)``.

    ``r`` is a 0-based step index (default: the full horizon); all sums run over
    the first ``r + 1`` frame vectors.
    """
    r = run.T - 1 if r is None else int(r)
    if not 0 <= r < run.T:
        raise ValueError("step index out of range")
    n = run.n
    Qr, Zr = run.Q[:, : r + 1], run.Z[:, : r + 1]
    worst = 0.0
    for t in range(r + 1):
        q = run.Q[:, t]
        rhs = run.A @ q - Qr @ (Zr.T @ q) / n + Qr @ run.Aprime[: r + 1, t]
        worst = max(worst, float(np.linalg.norm(run.Z[:, t] - rhs) / math.sqrt(n)))
    return worst


def corrupt_aprime(run: CoupledRun) -> CoupledRun:
    """Copy of ``run`` with the largest off-diagonal entry pair of ``A'`` sign-flipped.

    Used for fault injection: the stored ``Z`` no longer matches ``A'``.
    """
    Ap = run.Aprime.copy()
    if Ap.shape[0] == 1:
        Ap[0, 0] = -Ap[0, 0]
    else:
        off = np.abs(Ap - np.diag(np.diag(Ap)))
        i, j = np.unravel_index(np.argmax(off), off.shape)
        Ap[i, j] = -Ap[i, j]
        Ap[j, i] = -Ap[j, i]
    return replace(run, Aprime=Ap)
