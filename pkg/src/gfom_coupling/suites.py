"""Randomized instance generators and batch checkers shared by the test suite and ``verify``."""
from __future__ import annotations

import numpy as np

from .conditioning import (
    AdaptedLinearSystem,
    cond_gaussian,
    joint_law,
    projection_identity_residual,
    recursive_conditionals,
    simulate,
)
from .diagnostics import check_chol_pert, check_stability
from .functions import Composite, Constant, Linear, Separable
from .linalg_rand import RngStream
from .wasserstein import GaussianLaw

__all__ = [
    "random_upper",
    "chol_pert_suite",
    "random_stable_system",
    "stability_suite",
    "random_linear_instance",
    "conditioning_suite",
]


def random_upper(gen, T):
    """Upper-triangular ``U``: Gaussian above the diagonal, ``|N(1, 0.5)|`` on it."""
    U = np.triu(gen.standard_normal((T, T)), 1)
    U[np.diag_indices(T)] = np.abs(1.0 + 0.5 * gen.standard_normal(T))
    return U


def chol_pert_suite(count: int, rng: RngStream, T_range=(2, 8), scales=(1.0, 0.1, 0.01)):
    """Run the Cholesky perturbation check on ``count`` random matrices.

    Perturbation sizes cycle through ``scales`` so both the large and the
    near-identity regimes are covered.  Returns ``(violations, worst_ratio1, worst_ratio2)``.
    """
    gen = rng.generator()
    bad = 0
    worst1 = worst2 = 0.0
    for i in range(count):
        T = int(gen.integers(T_range[0], T_range[1] + 1))
        s = scales[i % len(scales)]
        U = random_upper(gen, T)
        U = np.eye(T) + s * (U - np.eye(T))
        U[np.diag_indices(T)] = np.abs(np.diag(U))
        l1, r1, l2, r2, ok = check_chol_pert(U)
        bad += not all(ok)
        if r1 > 0:
            worst1 = max(worst1, l1 / r1)
            worst2 = max(worst2, l2 / r2)
    return bad, worst1, worst2


def random_stable_system(gen, n: int, T: int):
    """``h_0`` constant, later steps a random mix of tanh and linear terms on the past."""
    h = [Constant(gen.standard_normal(n))]
    for t in range(1, T):
        terms = []
        for s in range(t):
            if gen.random() < 0.6:
                c = float(gen.uniform(-1.5, 1.5))
                if gen.random() < 0.5:
                    terms.append((1.0, Separable("tanh", {s: c})))
                else:
                    terms.append((1.0, Linear({s: c})))
        h.append(Composite(tuple(terms), n=n) if terms else Constant(gen.standard_normal(n)))
    return h


def stability_suite(count: int, rng: RngStream, n_range=(2, 12), T_max: int = 6):
    """Both stability inequalities on ``count`` random systems.

    Controls alternate between independent draws and a nearby pair, which is
    where the linearisation is tightest.  Returns ``(violations, worst_ratio)``.
    """
    gen = rng.generator()
    bad = 0
    worst = 0.0
    for i in range(count):
        n = int(gen.integers(n_range[0], n_range[1] + 1))
        T = int(gen.integers(1, T_max + 1))
        h = random_stable_system(gen, n, T)
        u = gen.standard_normal((n, T)) * float(gen.uniform(0.1, 5.0))
        if i % 2:
            up = u + 1e-3 * gen.standard_normal((n, T))
        else:
            up = gen.standard_normal((n, T))
        (l15, r15, ok15), (l16, r16, ok16) = check_stability(h, u, up)
        bad += (not ok15) + (not ok16)
        for lhs, rhs in ((l15, r15), (l16, r16)):
            if rhs > 0:
                worst = max(worst, lhs / rhs)
    return bad, worst


def random_linear_instance(gen, N_max: int = 10, T_max: int = 4, rank_deficient: bool = False):
    """Non-adaptive system with random sizes; optionally repeats earlier rows."""
    N = int(gen.integers(1, N_max + 1))
    T = int(gen.integers(1, T_max + 1))
    Fs, gs = [], []
    for t in range(T):
        m = int(gen.integers(1, 4))
        F = gen.standard_normal((m, N))
        if rank_deficient and t > 0 and gen.random() < 0.7:
            prev = np.vstack(Fs)
            F[0] = prev[int(gen.integers(prev.shape[0]))]
            if m > 1:
                F[-1] = 2.0 * F[0]
        Fs.append(F)
        gs.append(gen.standard_normal(m))
    return N, Fs, gs


def conditioning_suite(count: int, rng: RngStream, N_max: int = 10, T_max: int = 4):
    """Compare the recursive conditional laws with brute-force joint conditioning.

    Every other instance is rank deficient.  Returns ``(max_error, max_projection_residual)``.
    """
    gen = rng.generator()
    worst = 0.0
    worst_proj = 0.0
    for i in range(count):
        N, Fs, gs = random_linear_instance(gen, N_max, T_max, rank_deficient=bool(i % 2))
        sys = AdaptedLinearSystem.constant(Fs, gs)
        _, xi = simulate(sys, gen)
        steps = recursive_conditionals(sys, xi)
        J = joint_law(Fs, gs)
        sizes = [F.shape[0] for F in Fs]
        offs = np.concatenate([[0], np.cumsum(sizes)]) + N
        for t, step in enumerate(steps):
            # reorder the joint as (theta, xi_t | xi_<t) and condition on the tail
            idx = list(range(N)) + list(range(offs[t], offs[t + 1])) + list(range(N, offs[t]))
            sub = GaussianLaw(J.mean[idx], J.cov[np.ix_(idx, idx)])
            law = cond_gaussian(sub, N + sizes[t])(np.concatenate(xi[:t]) if t else np.zeros(0))
            ref = step.joint()
            worst = max(worst, float(np.abs(law.mean - ref.mean).max()),
                        float(np.abs(law.cov - ref.cov).max()))
            if t:
                worst_proj = max(worst_proj, projection_identity_residual(np.vstack(Fs[:t]), Fs[t]))
    return worst, worst_proj
