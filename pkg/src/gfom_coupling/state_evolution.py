"""Parameters ``(m, Sigma, Omega, b)`` of the comparison process.

Three routes:

* :func:`se_monte_carlo` runs the recursive moment-matching construction with K
  replicates of the comparison process (``se_amp`` is the same recursion with
  the Onsager correction folded into ``g`` so that the mean maps vanish);
* :func:`se_linear_closed_form` for constant ``f`` and linear ``g``;
* :func:`b_stein` re-derives the debiasing coefficients from expected Jacobian
  traces, as an independent check on the moment form.

The debiasing column for step ``t`` is ``b[:t, t] = pinv(Sigma[:t, :t]) @ c`` with
``c_r = E<y_r - m_r(y_{<r}), f_t(y_{<t})> / n`` for ``r < t``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .dynamics import SystemSpec, run_comparison
from .errors import NonDifferentiableKind, NotPositiveSemidefinite, SigmaNotPsd
from .functions import Composite, Constant, FunctionSpec, Linear
from .linalg_rand import RngStream, cholesky_upper, pinv, psd_tolerance

__all__ = [
    "SeParams",
    "LinearCaseSpec",
    "se_monte_carlo",
    "se_amp",
    "se_linear_closed_form",
    "se_explicit",
    "b_stein",
    "draw_replicates",
]

DEFAULT_K = 5000
DEFAULT_BATCH = 250


@dataclass(frozen=True, eq=False)
class SeParams:
    n: int
    Sigma: np.ndarray
    Omega: np.ndarray
    b: np.ndarray
    m: tuple
    mc_meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.Sigma.shape[0]

    @property
    def lipschitz_m(self) -> float:
        return max(spec.lipschitz for spec in self.m)

    def with_sigma(self, Sigma) -> "SeParams":
        """Same mean maps with a different covariance (deliberate mismatch studies)."""
        Sigma = np.asarray(Sigma, dtype=float)
        meta = dict(self.mc_meta, sigma_override=True)
        return SeParams(self.n, Sigma, cholesky_upper(Sigma), self.b.copy(), self.m, meta)

    def to_dict(self) -> dict:
        meta = {}
        for k, v in self.mc_meta.items():
            meta[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return {
            "n": self.n,
            "T": self.T,
            "Sigma": self.Sigma.tolist(),
            "Omega": self.Omega.tolist(),
            "b": self.b.tolist(),
            "m": [spec.to_dict() for spec in self.m],
            "mc_meta": meta,
        }


@dataclass(frozen=True, eq=False)
class LinearCaseSpec:
    """Constant ``f_t = F[:, t]``, ``g_t = sum_s Lambda[s, t] x_s``, ``m_t = sum_s Gamma[s, t] y_s``."""

    F: np.ndarray
    Lambda: np.ndarray
    Gamma: np.ndarray

    def __post_init__(self):
        F = np.asarray(self.F, dtype=float)
        T = F.shape[1]
        for name in ("Lambda", "Gamma"):
            M = np.asarray(getattr(self, name), dtype=float)
            if M.shape != (T, T):
                raise ValueError(f"{name} must be {T}x{T}")
            if np.any(np.tril(M) != 0):
                raise ValueError(f"{name} must be strictly upper triangular")
            object.__setattr__(self, name, M)
        object.__setattr__(self, "F", F)

    @property
    def n(self) -> int:
        return self.F.shape[0]

    @property
    def T(self) -> int:
        return self.F.shape[1]

    def _linear_specs(self, M):
        specs = [Constant(np.zeros(self.n))]
        for t in range(1, self.T):
            col = {s: M[s, t] for s in range(t) if M[s, t] != 0.0}
            specs.append(Linear(col) if col else Constant(np.zeros(self.n)))
        return tuple(specs)

    def system(self) -> SystemSpec:
        f = tuple(Constant(self.F[:, t]) for t in range(self.T))
        return SystemSpec(self.n, f, self._linear_specs(self.Lambda))

    def mean_maps(self) -> tuple:
        return self._linear_specs(self.Gamma)


def draw_replicates(rng: RngStream, batch: int, size: int, n: int, cols: int) -> np.ndarray:
    """Standard Gaussian block ``(size, n, cols)`` for replicate batch ``batch``.

    Every column comes from its own sub-stream, so the first ``t`` columns do
    not depend on how many columns are requested.
    """
    Z = np.empty((size, n, cols))
    for s in range(cols):
        Z[..., s] = rng.child(batch, s).generator().standard_normal((size, n))
    return Z


def _batches(K, batch_size):
    start = 0
    j = 0
    while start < K:
        size = min(batch_size, K - start)
        yield j, size
        start += size
        j += 1


def _mean_and_se(x, axis=0):
    K = x.shape[axis]
    mean = x.mean(axis=axis)
    if K < 2:
        return mean, np.zeros_like(mean)
    return mean, x.std(axis=axis, ddof=1) / np.sqrt(K)


def _combine_mean_map(g_t, f, bcol, n):
    terms = [(bcol[s], f[s]) for s in range(len(bcol)) if bcol[s] != 0.0]
    if not terms:
        return g_t
    return Composite(((1.0, g_t),) + tuple(terms), n=n)


def _se_recursion(f, n, g_for_step, mean_for_step, K, rng, jitter, batch_size):
    T = len(f)
    if K < 100:
        raise ValueError("need at least 100 replicates")
    if not isinstance(f[0], Constant):
        raise ValueError("f[0] must be constant")
    Sigma = np.zeros((T, T))
    Sigma_se = np.zeros((T, T))
    b = np.zeros((T, T))
    b_se = np.zeros((T, T))
    g, m = [], []
    Omega = np.zeros((0, 0))
    near_degenerate = []

    for t in range(T):
        if t == 0:
            f0 = f[0].value
            Sigma[0, 0] = f0 @ f0 / n + jitter
        else:
            gram_parts, c_parts = [], []
            for j, size in _batches(K, batch_size):
                Z = draw_replicates(rng, j, size, n, t)
                Y, W = run_comparison(m, Omega, Z)
                Fv = np.empty((size, n, t + 1))
                for s in range(t + 1):
                    Fv[..., s] = f[s](Y[..., :s])
                gram_parts.append(np.einsum("kns,knr->ksr", Fv, Fv) / n)
                if isinstance(f[t], Constant):
                    # E[w_r] = 0, so the correlation with a constant is exactly zero
                    c_parts.append(np.zeros((size, t)))
                else:
                    c_parts.append(np.einsum("knr,kn->kr", W, Fv[..., t]) / n)
            G = np.concatenate(gram_parts)
            C = np.concatenate(c_parts)
            g_mean, g_se = _mean_and_se(G[:, :, t])
            Sigma[: t + 1, t] = Sigma[t, : t + 1] = g_mean
            Sigma[t, t] += jitter
            Sigma_se[: t + 1, t] = Sigma_se[t, : t + 1] = g_se

            prev = Sigma[:t, :t]
            if np.linalg.eigvalsh(prev)[0] < psd_tolerance(prev):
                near_degenerate.append(t)
            P = pinv(prev)
            b[:t, t] = P @ C.mean(axis=0)
            # delta-method influence of each replicate on pinv(Sigma) @ c
            infl = (C - np.einsum("ksr,r->ks", G[:, :t, :t], b[:t, t])) @ P.T
            b_se[:t, t] = _mean_and_se(infl)[1]

        g_t = g_for_step(t, b[:t, t])
        g.append(g_t)
        m_t = mean_for_step(t, g_t, b[:t, t])
        m.append(m_t)
        try:
            Omega = cholesky_upper(Sigma[: t + 1, : t + 1])
        except NotPositiveSemidefinite as exc:
            raise SigmaNotPsd(f"covariance estimate at step {t} is not PSD: {exc}") from exc

    meta = {
        "method": "monte_carlo",
        "K": int(K),
        "seed": int(rng.seed),
        "stream": list(rng.stream),
        "batch_size": int(batch_size),
        "jitter": float(jitter),
        "sigma_se": Sigma_se,
        "b_se": b_se,
        "near_degenerate": bool(near_degenerate),
        "near_degenerate_steps": near_degenerate,
    }
    return tuple(g), SeParams(n, Sigma, Omega, b, tuple(m), meta)


def se_monte_carlo(sys: SystemSpec, K: int = DEFAULT_K, rng: RngStream | None = None,
                   jitter: float = 0.0, batch_size: int = DEFAULT_BATCH) -> SeParams:
    """State evolution for a given ``(f, g)`` by Monte Carlo over K replicates.

    Replicates are shared across all steps (common random numbers) and reduced
    in replicate order, so results are bit-deterministic given the stream.
    """
    rng = rng if rng is not None else RngStream(0)
    f = sys.f

    def g_for_step(t, bcol):
        return sys.g[t]

    def mean_for_step(t, g_t, bcol):
        return _combine_mean_map(g_t, f, bcol, sys.n)

    _, params = _se_recursion(f, sys.n, g_for_step, mean_for_step, K, rng, jitter, batch_size)
    return params


def se_amp(f, K: int = DEFAULT_K, rng: RngStream | None = None, mean=None,
           jitter: float = 0.0, batch_size: int = DEFAULT_BATCH):
    """State evolution with the Onsager correction chosen on the fly.

    ``g_t`` is set to ``mean_t - sum_s b[s, t] f_s`` as soon as ``b[:, t]`` is
    known, which makes the comparison mean maps equal ``mean`` (zero by
    default, i.e. plain AMP).  Returns ``(system, params)``.
    """
    rng = rng if rng is not None else RngStream(0)
    f = tuple(f)
    n = f[0].value.shape[0]
    T = len(f)
    if mean is None:
        mean = tuple(Constant(np.zeros(n)) for _ in range(T))
    mean = tuple(mean)
    if not isinstance(mean[0], Constant):
        raise ValueError("mean[0] must be constant")

    def g_for_step(t, bcol):
        terms = [(-bcol[s], f[s]) for s in range(t) if bcol[s] != 0.0]
        if not terms:
            return mean[t]
        base_is_zero = isinstance(mean[t], Constant) and not np.any(mean[t].value)
        if base_is_zero:
            return Composite(tuple(terms), n=n)
        return Composite(((1.0, mean[t]),) + tuple(terms), n=n)

    def mean_for_step(t, g_t, bcol):
        return mean[t]

    g, params = _se_recursion(f, n, g_for_step, mean_for_step, K, rng, jitter, batch_size)
    if all(isinstance(mk, Constant) and not np.any(mk.value) for mk in mean):
        from .dynamics import amp_from_f

        sys = amp_from_f(f, params.b, n)
    else:
        sys = SystemSpec(n, f, g)
    params.mc_meta["method"] = "monte_carlo_amp"
    return sys, params


def se_linear_closed_form(spec: LinearCaseSpec) -> SeParams:
    """Exact parameters when every ``f_t`` is constant: ``b = 0``, ``Sigma = F^T F / n``."""
    n, T = spec.n, spec.T
    Sigma = spec.F.T @ spec.F / n
    Sigma = 0.5 * (Sigma + Sigma.T)
    Omega, singular = cholesky_upper(Sigma, full_output=True)
    meta = {"method": "closed_form", "near_degenerate": bool(singular)}
    return SeParams(n, Sigma, Omega, np.zeros((T, T)), spec.mean_maps(), meta)


def _jvp(spec: FunctionSpec, H, dH, h):
    return (spec(H + h * dH) - spec(H - h * dH)) / (2.0 * h[..., 0])


def b_stein(sys: SystemSpec, params: SeParams, K: int = 2000, probes: int = 8,
            rng: RngStream | None = None, batch_size: int = DEFAULT_BATCH):
    """Debiasing coefficients from expected Jacobian traces.

    ``b[s, t] = E tr(d f_t / d w_s) / n`` where ``y`` is viewed as a function of
    the Gaussian innovations ``w``.  The tangent ``dy / dw_s`` is propagated by
    forward substitution through the mean maps (the Jacobian of ``m`` is
    strictly block lower triangular), each step a central finite-difference
    JVP with step ``1e-5 * (1 + |y|_inf)``.  Traces use Rademacher Hutchinson
    probes.  Returns ``(b, standard_errors)``.
    """
    rng = rng if rng is not None else RngStream(0)
    n, T = sys.n, sys.T
    f, m = sys.f, params.m
    if any(not spec.differentiable for spec in tuple(f) + tuple(m)):
        warnings.warn("non-differentiable kind present; using the subgradient at kinks",
                      NonDifferentiableKind, stacklevel=2)
    parts = []
    for j, size in _batches(K, batch_size):
        Z = draw_replicates(rng.child(0), j, size, n, T)
        Y, _ = run_comparison(m, params.Omega, Z)
        h = 1e-5 * (1.0 + np.abs(Y).max(axis=(-2, -1)))[:, None, None]
        est = np.zeros((size, T, T))
        gen = rng.child(1, j).generator()
        for s in range(T - 1):
            for _ in range(probes):
                v = gen.choice((-1.0, 1.0), size=(size, n))
                dY = np.zeros_like(Y)
                dY[..., s] = v
                for r in range(s + 1, T):
                    dY[..., r] = _jvp(m[r], Y[..., :r], dY[..., :r], h)
                    dft = _jvp(f[r], Y[..., :r], dY[..., :r], h)
                    est[:, s, r] += np.einsum("kn,kn->k", v, dft) / (n * probes)
        parts.append(est)
    est = np.concatenate(parts)
    b, se = _mean_and_se(est)
    return np.triu(b, 1), np.triu(se, 1)


def se_explicit(sys: SystemSpec, Sigma, b) -> SeParams:
    """Parameters supplied directly; the mean maps are ``g_t + sum_s b[s, t] f_s``."""
    Sigma = np.asarray(Sigma, dtype=float)
    b = np.triu(np.asarray(b, dtype=float), 1)
    T = sys.T
    if Sigma.shape != (T, T) or b.shape != (T, T):
        raise ValueError(f"Sigma and b must be {T}x{T}")
    Omega, singular = cholesky_upper(Sigma, full_output=True)
    m = tuple(_combine_mean_map(sys.g[t], sys.f, b[:t, t], sys.n) for t in range(T))
    meta = {"method": "explicit", "near_degenerate": bool(singular)}
    return SeParams(sys.n, 0.5 * (Sigma + Sigma.T), Omega, b, m, meta)
