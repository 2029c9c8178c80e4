"""Declarative nonlinearities for the iterations.

A spec maps a history of past iterates to a new vector in R^n.  Histories are
arrays of shape ``(..., n, k)``: the last axis is time (0-based), any leading
axes are independent replicates.  A spec only ever reads the time indices in
its ``memory``.

Every spec carries a declared Lipschitz constant with respect to the Euclidean
norm of the whole history.  For the built-in kinds the constant is computed
analytically; callers may override it (``with_lipschitz``) when they know a
sharper value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import MissingHistory

__all__ = [
    "FunctionSpec",
    "Constant",
    "Linear",
    "Separable",
    "MatrixLinear",
    "Composite",
    "SCALAR_FUNCTIONS",
    "evaluate",
    "from_dict",
    "probe_lipschitz",
    "ones",
]


def _soft_threshold(x, theta):
    return np.sign(x) * np.maximum(np.abs(x) - theta, 0.0)


# name -> (callable(x, theta), Lipschitz constant, differentiable everywhere)
SCALAR_FUNCTIONS = {
    "tanh": (lambda x, theta: np.tanh(x), 1.0, True),
    "identity": (lambda x, theta: x, 1.0, True),
    "relu": (lambda x, theta: np.maximum(x, 0.0), 1.0, False),
    "soft_threshold": (_soft_threshold, 1.0, False),
}


def _coeff_dict(coeffs) -> dict:
    if isinstance(coeffs, dict):
        items = coeffs.items()
    else:
        items = enumerate(coeffs)
    out = {}
    for k, v in items:
        k = int(k)
        if k < 0:
            raise ValueError("history indices are nonnegative")
        if float(v) != 0.0:
            out[k] = float(v)
    return out


class FunctionSpec:
    """Base class.  Subclasses implement ``_evaluate`` and ``_natural_lipschitz``."""

    kind = "abstract"

    @property
    def memory(self) -> frozenset:
        raise NotImplementedError

    @property
    def lipschitz(self) -> float:
        declared = getattr(self, "declared_lipschitz", None)
        if declared is not None:
            return float(declared)
        return self._natural_lipschitz()

    def _natural_lipschitz(self) -> float:
        raise NotImplementedError

    def with_lipschitz(self, value: float) -> "FunctionSpec":
        if value < 0:
            raise ValueError("Lipschitz constant must be nonnegative")
        return replace(self, declared_lipschitz=float(value))

    def __call__(self, history) -> np.ndarray:
        history = np.asarray(history, dtype=float)
        if history.ndim < 2:
            raise ValueError("history must have shape (..., n, k)")
        mem = self.memory
        if mem and max(mem) >= history.shape[-1]:
            raise MissingHistory(
                f"{self.kind} reads index {max(mem)} but history has {history.shape[-1]} steps"
            )
        return self._evaluate(history)

    def _evaluate(self, history):
        raise NotImplementedError

    @property
    def differentiable(self) -> bool:
        return True

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Constant(FunctionSpec):
    value: np.ndarray
    declared_lipschitz: float | None = None
    kind = "constant"

    def __post_init__(self):
        object.__setattr__(self, "value", np.asarray(self.value, dtype=float).reshape(-1))

    @property
    def memory(self):
        return frozenset()

    def _natural_lipschitz(self):
        return 0.0

    def _evaluate(self, history):
        batch = history.shape[:-2]
        n = history.shape[-2]
        if n != self.value.shape[0]:
            raise ValueError(f"constant has length {self.value.shape[0]}, history has n={n}")
        return np.broadcast_to(self.value, batch + (n,)).copy()

    def evaluate_constant(self) -> np.ndarray:
        return self.value.copy()

    def to_dict(self):
        return {"kind": "constant", "value": self.value.tolist()}


def ones(n: int) -> Constant:
    return Constant(np.ones(n))


@dataclass(frozen=True, eq=False)
class Linear(FunctionSpec):
    """``sum_s coeffs[s] * x_s``."""

    coeffs: dict
    declared_lipschitz: float | None = None
    kind = "linear"

    def __post_init__(self):
        object.__setattr__(self, "coeffs", _coeff_dict(self.coeffs))

    @property
    def memory(self):
        return frozenset(self.coeffs)

    def _natural_lipschitz(self):
        return math.sqrt(sum(c * c for c in self.coeffs.values()))

    def _evaluate(self, history):
        out = np.zeros(history.shape[:-1])
        for s, c in self.coeffs.items():
            out += c * history[..., s]
        return out

    def to_dict(self):
        return {"kind": "linear", "coeffs": {str(k): v for k, v in self.coeffs.items()}}


@dataclass(frozen=True, eq=False)
class Separable(FunctionSpec):
    """Scalar function applied entrywise to ``sum_s coeffs[s] * x_s``."""

    name: str
    coeffs: dict
    theta: float = 0.0
    declared_lipschitz: float | None = None
    kind = "separable"

    def __post_init__(self):
        if self.name not in SCALAR_FUNCTIONS:
            raise ValueError(f"unknown scalar function {self.name!r}")
        if self.name == "soft_threshold" and self.theta < 0:
            raise ValueError("threshold must be nonnegative")
        object.__setattr__(self, "coeffs", _coeff_dict(self.coeffs))

    @property
    def memory(self):
        return frozenset(self.coeffs)

    def _natural_lipschitz(self):
        scalar_lip = SCALAR_FUNCTIONS[self.name][1]
        return scalar_lip * math.sqrt(sum(c * c for c in self.coeffs.values()))

    @property
    def differentiable(self):
        return SCALAR_FUNCTIONS[self.name][2]

    def _evaluate(self, history):
        u = np.zeros(history.shape[:-1])
        for s, c in self.coeffs.items():
            u += c * history[..., s]
        return SCALAR_FUNCTIONS[self.name][0](u, self.theta)

    def to_dict(self):
        d = {"kind": "separable", "name": self.name,
             "coeffs": {str(k): v for k, v in self.coeffs.items()}}
        if self.name == "soft_threshold":
            d["theta"] = self.theta
        return d


@dataclass(frozen=True, eq=False)
class MatrixLinear(FunctionSpec):
    """Fixed ``n x n`` matrix applied to one past iterate (non-separable)."""

    matrix: np.ndarray
    index: int
    declared_lipschitz: float | None = None
    kind = "matrix_linear"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("mixing matrix must be square")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "index", int(self.index))

    @property
    def memory(self):
        return frozenset({self.index})

    def _natural_lipschitz(self):
        return float(np.linalg.norm(self.matrix, 2))

    def _evaluate(self, history):
        return history[..., self.index] @ self.matrix.T

    def to_dict(self):
        return {"kind": "matrix_linear", "index": self.index, "matrix": self.matrix.tolist()}


@dataclass(frozen=True, eq=False)
class Composite(FunctionSpec):
    """Symbolic linear combination ``sum_i c_i * spec_i``.

    Kept unflattened so the coefficients (e.g. Onsager weights) stay
    recoverable via :meth:`coefficients`.
    """

    terms: tuple
    n: int | None = None
    declared_lipschitz: float | None = None
    kind = "composite"

    def __post_init__(self):
        terms = tuple((float(c), spec) for c, spec in self.terms)
        object.__setattr__(self, "terms", terms)

    @property
    def memory(self):
        mem = frozenset()
        for _, spec in self.terms:
            mem = mem | spec.memory
        return mem

    def _natural_lipschitz(self):
        # disjoint memories: the pieces act on orthogonal blocks of the history,
        # so Cauchy-Schwarz gives the l2 combination; otherwise the triangle inequality
        mems = [spec.memory for _, spec in self.terms]
        disjoint = sum(len(m) for m in mems) == len(frozenset().union(*mems))
        weights = [abs(c) * spec.lipschitz for c, spec in self.terms]
        if disjoint:
            return math.sqrt(sum(w * w for w in weights))
        return sum(weights)

    @property
    def differentiable(self):
        return all(spec.differentiable for _, spec in self.terms)

    def coefficients(self) -> list:
        return [c for c, _ in self.terms]

    def _evaluate(self, history):
        out = np.zeros(history.shape[:-1])
        for c, spec in self.terms:
            out += c * spec._evaluate(history)
        return out

    def to_dict(self):
        return {"kind": "composite",
                "terms": [{"coef": c, "spec": spec.to_dict()} for c, spec in self.terms]}


def evaluate(spec: FunctionSpec, history) -> np.ndarray:
    return spec(history)


def from_dict(d: dict, n: int | None = None) -> FunctionSpec:
    """Inverse of ``to_dict``.

    ``constant`` values may also be given as the strings ``"ones"`` / ``"zeros"``
    (length ``n``) or a scalar (broadcast to length ``n``).
    """
    kind = d.get("kind")
    lip = d.get("lipschitz")
    if kind == "constant":
        value = d["value"]
        if isinstance(value, str):
            if n is None:
                raise ValueError("n is required for symbolic constant values")
            if value == "ones":
                value = np.ones(n)
            elif value == "zeros":
                value = np.zeros(n)
            else:
                raise ValueError(f"unknown constant value {value!r}")
        elif np.isscalar(value):
            if n is None:
                raise ValueError("n is required for scalar constant values")
            value = np.full(n, float(value))
        spec = Constant(np.asarray(value, dtype=float))
    elif kind == "linear":
        spec = Linear(d["coeffs"])
    elif kind == "separable":
        spec = Separable(d["name"], d["coeffs"], float(d.get("theta", 0.0)))
    elif kind == "matrix_linear":
        spec = MatrixLinear(np.asarray(d["matrix"], dtype=float), int(d["index"]))
    elif kind == "composite":
        spec = Composite(tuple((t["coef"], from_dict(t["spec"], n)) for t in d["terms"]), n=n)
    else:
        raise ValueError(f"unknown function kind {kind!r}")
    if lip is not None:
        spec = spec.with_lipschitz(float(lip))
    return spec


def probe_lipschitz(spec: FunctionSpec, n: int, k: int, rng, probes: int = 200,
                    scale: float = 1.0) -> float:
    """Largest observed ratio ``|f(u) - f(v)| / |u - v|`` over random pairs.

    Pairs mix far-apart and nearby points so both global and local slopes are hit.
    """
    gen = rng.generator() if hasattr(rng, "generator") else rng
    worst = 0.0
    for i in range(probes):
        u = scale * gen.standard_normal((n, k))
        eps = 10.0 ** gen.uniform(-4, 0.5)
        v = u + eps * gen.standard_normal((n, k))
        du = np.linalg.norm(u - v)
        if du == 0:
            continue
        worst = max(worst, float(np.linalg.norm(spec(u) - spec(v)) / du))
    return worst
