"""Seeded Gaussian sampling and the small set of matrix primitives used everywhere else.

All randomness flows through :class:`RngStream`, a ``(seed, stream)`` pair that is
turned into a fresh counter-based Philox generator on demand.  Asking the same
stream for a generator twice yields identical draws, so any trial can be replayed
on its own.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .errors import NotPositiveSemidefinite

__all__ = [
    "RngStream",
    "sample_goe",
    "sample_goe_block",
    "sample_gaussian_matrix",
    "cholesky_upper",
    "psd_tolerance",
    "Norms",
    "norms",
    "operator_norm",
    "two_one_norm",
    "pinv",
]

# matrices whose smaller side is at most this use a dense SVD for the operator norm
_DENSE_OPNORM_LIMIT = 64


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream identified by ``seed`` and a tuple of stream ids.

    ``child(k)`` derives an independent sub-stream; derivation is by
    :class:`numpy.random.SeedSequence` spawn keys, so streams with different
    ids are statistically independent.
    """

    seed: int
    stream: tuple = ()

    def __post_init__(self):
        if isinstance(self.stream, (int, np.integer)):
            object.__setattr__(self, "stream", (int(self.stream),))
        else:
            object.__setattr__(self, "stream", tuple(int(s) for s in self.stream))
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(ss))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


def sample_goe(n: int, rng) -> np.ndarray:
    """Draw ``A ~ GOE(n)``: N(0, 2/n) diagonal, N(0, 1/n) off-diagonal, symmetric."""
    if n < 1:
        raise ValueError("GOE dimension must be at least 1")
    g = _as_generator(rng).standard_normal((n, n))
    a = g + g.T
    a *= 1.0 / math.sqrt(2.0 * n)
    return a


def sample_goe_block(n: int, T: int, rng) -> np.ndarray:
    """Leading ``T x T`` principal block of a ``GOE(n)`` matrix.

    Only this block of the auxiliary matrix is ever read by the coupling, so the
    remaining ``n^2`` entries are never materialised.
    """
    if n < 1 or T < 1:
        raise ValueError("dimensions must be at least 1")
    if T > n:
        raise ValueError("block size exceeds matrix dimension")
    g = _as_generator(rng).standard_normal((T, T))
    return (g + g.T) / math.sqrt(2.0 * n)


def sample_gaussian_matrix(n: int, T: int, rng) -> np.ndarray:
    if n < 1 or T < 1:
        raise ValueError("dimensions must be at least 1")
    return _as_generator(rng).standard_normal((n, T))


def psd_tolerance(S: np.ndarray) -> float:
    """Eigenvalue floor ``1e-10 * trace(S) / T`` used for PSD acceptance."""
    T = S.shape[0]
    return 1e-10 * abs(float(np.trace(S))) / max(T, 1)


def _semidefinite_cholesky(S: np.ndarray, eps: float) -> np.ndarray:
    # row-by-row upper factor; pivots at or below eps are treated as exact zeros
    T = S.shape[0]
    U = np.zeros_like(S)
    for k in range(T):
        d = S[k, k] - U[:k, k] @ U[:k, k]
        if d > eps:
            U[k, k] = math.sqrt(d)
            U[k, k + 1:] = (S[k, k + 1:] - U[:k, k] @ U[:k, k + 1:]) / U[k, k]
    return U


def cholesky_upper(S, jitter: float = 0.0, full_output: bool = False):
    """Upper-triangular ``Omega`` with nonnegative diagonal and ``Omega.T @ Omega = S``.

    ``S`` must be symmetric with eigenvalues no smaller than ``-psd_tolerance(S)``;
    anything more negative raises :class:`NotPositiveSemidefinite` instead of being
    repaired.  ``jitter`` adds ``jitter * I`` first.  Matrices whose smallest
    eigenvalue falls below the tolerance go through a semidefinite path that zeroes
    the dependent rows; ``full_output=True`` returns ``(Omega, singular)`` so the
    caller can see that this happened.
    """
    S = np.array(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("expected a square matrix")
    if not np.allclose(S, S.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(S).max(initial=0.0))):
        raise ValueError("matrix is not symmetric")
    S = 0.5 * (S + S.T)
    if jitter:
        S = S + jitter * np.eye(S.shape[0])
    tol = psd_tolerance(S)
    min_eig = float(np.linalg.eigvalsh(S)[0]) if S.size else 0.0
    if min_eig < -tol:
        raise NotPositiveSemidefinite(
            f"smallest eigenvalue {min_eig:.3e} is below -{tol:.3e}"
        )
    singular = min_eig < tol
    if singular:
        omega = _semidefinite_cholesky(S, eps=tol)
    else:
        omega = scipy.linalg.cholesky(S, lower=False)
    if full_output:
        return omega, singular
    return omega


class Norms(NamedTuple):
    frobenius: float
    operator: float
    two_one: float


def two_one_norm(M) -> float:
    """Sum of the Euclidean norms of the columns."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        return float(np.linalg.norm(M))
    return float(np.linalg.norm(M, axis=0).sum())


def operator_norm(M, tol: float = 1e-10) -> float:
    """Largest singular value.

    Dense SVD when the short side is small; otherwise an implicitly restarted
    Lanczos solve on the large matrix.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        return float(np.linalg.norm(M))
    if M.size == 0:
        return 0.0
    if min(M.shape) <= _DENSE_OPNORM_LIMIT:
        return float(np.linalg.norm(M, 2))
    if M.shape[0] == M.shape[1] and np.array_equal(M, M.T):
        vals = scipy.sparse.linalg.eigsh(M, k=2, which="BE", tol=tol, return_eigenvectors=False)
        return float(np.abs(vals).max())
    s = scipy.sparse.linalg.svds(M, k=1, tol=tol, return_singular_vectors=False)
    return float(s[0])


def norms(M) -> Norms:
    M = np.asarray(M, dtype=float)
    return Norms(float(np.linalg.norm(M)), operator_norm(M), two_one_norm(M))


def pinv(M) -> np.ndarray:
    """Moore-Penrose pseudo-inverse; singular values below ``max(shape) * eps * s_max`` are dropped."""
    return scipy.linalg.pinv(np.asarray(M, dtype=float))
