"""The generalized first-order iteration and its conditionally Gaussian comparison process.

Time is 0-based throughout: step ``t`` reads the iterates ``0 .. t-1``.
Trajectories are ``(n, T)`` arrays (or ``(..., n, T)`` for replicate batches)
whose column ``t`` is the iterate at step ``t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFinite
from .functions import Composite, Constant, FunctionSpec

__all__ = ["SystemSpec", "run_gfom", "run_comparison", "amp_from_f", "evaluate_columns"]


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """``x_t = A f_t(x_{<t}) + g_t(x_{<t})`` for ``t = 0 .. T-1``."""

    n: int
    f: tuple
    g: tuple

    def __post_init__(self):
        object.__setattr__(self, "f", tuple(self.f))
        object.__setattr__(self, "g", tuple(self.g))
        if len(self.f) != len(self.g):
            raise ValueError("f and g must have the same length")
        if not self.f:
            raise ValueError("need at least one step")
        if not isinstance(self.f[0], Constant) or not isinstance(self.g[0], Constant):
            raise ValueError("the first f and g must be constant")
        for name, seq in (("f", self.f), ("g", self.g)):
            for t, spec in enumerate(seq):
                if any(s >= t for s in spec.memory):
                    raise ValueError(f"{name}[{t}] reads a non-past index {sorted(spec.memory)}")

    @property
    def T(self) -> int:
        return len(self.f)

    @property
    def lipschitz_f(self) -> float:
        return max(spec.lipschitz for spec in self.f)

    @property
    def lipschitz_g(self) -> float:
        return max(spec.lipschitz for spec in self.g)


def _check_finite(col, t, what="iterate"):
    if not np.all(np.isfinite(col)):
        raise NonFinite(t, what)


def run_gfom(sys: SystemSpec, A: np.ndarray) -> np.ndarray:
    """Run the iteration with data matrix ``A``; returns ``X`` of shape ``(n, T)``."""
    n, T = sys.n, sys.T
    if A.shape != (n, n):
        raise ValueError(f"A has shape {A.shape}, expected {(n, n)}")
    X = np.zeros((n, T))
    for t in range(T):
        hist = X[:, :t]
        X[:, t] = A @ sys.f[t](hist) + sys.g[t](hist)
        _check_finite(X[:, t], t)
    return X


def run_comparison(m, Omega, Z):
    """Comparison process ``y_t = m_t(y_{<t}) + w_t`` with ``W = Z @ Omega``.

    ``Z`` holds standard Gaussian columns, shape ``(..., n, T)``; ``Omega`` is the
    ``T x T`` upper-triangular factor so that ``w_t = sum_{s<=t} Omega[s, t] z_s``.
    Returns ``(Y, W)``.
    """
    Z = np.asarray(Z, dtype=float)
    Omega = np.asarray(Omega, dtype=float)
    T = Z.shape[-1]
    if Omega.shape != (T, T):
        raise ValueError(f"Omega has shape {Omega.shape}, expected {(T, T)}")
    if len(m) < T:
        raise ValueError("need one mean map per step")
    W = Z @ Omega
    Y = np.empty_like(W)
    for t in range(T):
        Y[..., t] = m[t](Y[..., :t]) + W[..., t]
        _check_finite(Y[..., t], t)
    return Y, W


def evaluate_columns(specs, Y) -> np.ndarray:
    """Stack ``spec_t(Y[..., :t])`` for every step into an array shaped like ``Y``."""
    out = np.empty_like(Y)
    for t, spec in enumerate(specs[: Y.shape[-1]]):
        out[..., t] = spec(Y[..., :t])
    return out


def amp_from_f(f, b, n: int | None = None) -> SystemSpec:
    """AMP system with Onsager correction ``g_t = -sum_{s<t} b[s, t] f_s``.

    ``b`` is a ``T x T`` array read only above the diagonal.  Each ``g_t`` is a
    symbolic :class:`Composite`; its declared Lipschitz constant is
    ``(sum_s b[s, t]^2)^{1/2} * max_s Lip(f_s)`` when the ``f_s`` read disjoint
    history indices, and the triangle-inequality sum otherwise.
    """
    f = tuple(f)
    T = len(f)
    b = np.asarray(b, dtype=float)
    if b.shape != (T, T):
        raise ValueError(f"b has shape {b.shape}, expected {(T, T)}")
    if n is None:
        n = f[0].value.shape[0]
    g = [Constant(np.zeros(n))]
    for t in range(1, T):
        terms = tuple((-b[s, t], f[s]) for s in range(t) if b[s, t] != 0.0)
        if not terms:
            g.append(Constant(np.zeros(n)))
            continue
        spec = Composite(terms, n=n)
        mems = [fs.memory for _, fs in terms]
        if sum(len(mm) for mm in mems) == len(frozenset().union(*mems)):
            lf = max(fs.lipschitz for _, fs in terms)
            spec = spec.with_lipschitz(math.sqrt(sum(c * c for c, _ in terms)) * lf)
        g.append(spec)
    return SystemSpec(n, f, tuple(g))
