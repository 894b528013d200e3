"""Numeric building blocks: points, test objectives and reproducible random streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

OBJECTIVE_NAMES = ("quadratic", "shifted-quadratic", "smoothed-huber", "nonconvex-sigmoid-well")


def as_point(x, dim: int | None = None) -> np.ndarray:
    """Return ``x`` as a finite 1-D float64 array, optionally checking its dimension."""
    arr = np.array(x, dtype=np.float64, ndmin=1)
    if arr.ndim != 1:
        raise ValueError(f"a point must be one-dimensional, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"expected a point of dimension {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point has non-finite coordinates")
    return arr


def sq_norm(v: np.ndarray) -> np.ndarray:
    """Squared euclidean norm along the last axis."""
    return np.sum(v * v, axis=-1)


@dataclass(frozen=True, eq=False)
class Objective:
    """A smooth objective with analytically known constants.

    ``value`` and ``gradient`` act on the last axis, so they accept a single
    point of shape ``(dim,)`` or a batch of shape ``(m, dim)``.
    """

    name: str
    dim: int
    params: Mapping[str, object]
    smoothness_L: float
    f_star: float
    x_star: np.ndarray | None
    is_convex: bool
    _value: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)
    _gradient: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)

    def value(self, x) -> np.ndarray | float:
        out = self._value(np.asarray(x, dtype=np.float64))
        return float(out) if np.ndim(out) == 0 else out

    def gradient(self, x) -> np.ndarray:
        return self._gradient(np.asarray(x, dtype=np.float64))

    def to_config(self) -> dict:
        return {"name": self.name, "dim": self.dim, "params": _jsonable(self.params)}


def _jsonable(params: Mapping[str, object]) -> dict:
    out = {}
    for key, val in params.items():
        out[key] = val.tolist() if isinstance(val, np.ndarray) else val
    return out


def _coefficients(params: Mapping[str, object], key: str, dim: int, default=None) -> np.ndarray:
    raw = params.get(key, default)
    if raw is None:
        raise ValueError(f"missing parameter {key!r}")
    arr = np.array(raw, dtype=np.float64, ndmin=1)
    if arr.shape == (1,):
        arr = np.full(dim, arr[0])
    if arr.shape != (dim,):
        raise ValueError(f"parameter {key!r} must be a scalar or have length {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"parameter {key!r} must be finite")
    return arr


def builtin_objective(name: str, dim: int = 1, params: Mapping[str, object] | None = None) -> Objective:
    """Construct one of the builtin test objectives.

    ``quadratic``: ``0.5 * sum(a_i x_i^2)``, ``L = max a``, minimizer at the origin.
    ``shifted-quadratic``: same with the minimizer moved to ``center``.
    ``smoothed-huber``: pseudo-Huber ``sum(a_i h^2 (sqrt(1 + (x_i/h)^2) - 1))``, ``L = max a``.
    ``nonconvex-sigmoid-well``: ``sum(a_i x_i^2 / (1 + x_i^2))``, ``L = 2 max a``, ``f* = 0``.

    Curvature ``a`` defaults to 1 and may be a scalar or a per-coordinate list.
    """
    params = dict(params or {})
    if name not in OBJECTIVE_NAMES:
        raise ValueError(f"unknown objective {name!r}; expected one of {', '.join(OBJECTIVE_NAMES)}")
    dim = int(dim)
    if dim < 1:
        raise ValueError("dim must be a positive integer")
    a = _coefficients(params, "a", dim, default=1.0)
    if np.any(a <= 0):
        raise ValueError("curvature parameter 'a' must be positive")
    params["a"] = a.tolist()

    if name == "quadratic":
        return Objective(
            name, dim, params, float(a.max()), 0.0, np.zeros(dim), True,
            lambda x: 0.5 * np.sum(a * x * x, axis=-1),
            lambda x: a * x,
        )

    if name == "shifted-quadratic":
        c = _coefficients(params, "center", dim, default=0.0)
        params["center"] = c.tolist()
        return Objective(
            name, dim, params, float(a.max()), 0.0, c.copy(), True,
            lambda x: 0.5 * np.sum(a * (x - c) ** 2, axis=-1),
            lambda x: a * (x - c),
        )

    if name == "smoothed-huber":
        h = float(params.get("h", 1.0))
        if not h > 0:
            raise ValueError("smoothed-huber width 'h' must be positive")
        params["h"] = h

        def value(x):
            return np.sum(a * h * h * (np.sqrt(1.0 + (x / h) ** 2) - 1.0), axis=-1)

        def gradient(x):
            return a * x / np.sqrt(1.0 + (x / h) ** 2)

        return Objective(name, dim, params, float(a.max()), 0.0, np.zeros(dim), True, value, gradient)

    # nonconvex-sigmoid-well: |f''| peaks at x = 0 with value 2a.
    def value(x):
        x2 = x * x
        return np.sum(a * x2 / (1.0 + x2), axis=-1)

    def gradient(x):
        return 2.0 * a * x / (1.0 + x * x) ** 2

    return Objective(name, dim, params, float(2.0 * a.max()), 0.0, np.zeros(dim), False, value, gradient)


def objective_from_config(spec: Mapping[str, object]) -> Objective:
    return builtin_objective(str(spec["name"]), int(spec.get("dim", 1)), spec.get("params") or {})


@dataclass(frozen=True)
class SmoothnessReport:
    max_violation: float
    passed: bool
    n_samples: int

    def to_dict(self) -> dict:
        return {"max_violation": self.max_violation, "pass": self.passed, "n_samples": self.n_samples}


def check_smoothness_bound(obj: Objective, samples: Sequence) -> SmoothnessReport:
    """Check ``||grad f(x)||^2 <= 2 L (f(x) - f*)`` over ``samples``."""
    xs = np.array(samples, dtype=np.float64)
    if xs.size == 0:
        return SmoothnessReport(float("-inf"), True, 0)
    xs = xs.reshape(-1, obj.dim)
    gap = np.atleast_1d(obj.value(xs)) - obj.f_star
    violation = sq_norm(obj.gradient(xs)) - 2.0 * obj.smoothness_L * gap
    tol = 1e-9 * np.maximum(1.0, obj.smoothness_L * np.abs(gap))
    return SmoothnessReport(float(violation.max()), bool(np.all(violation <= tol)), len(xs))


def kahan_cumsum(values, axis: int = -1) -> np.ndarray:
    """Compensated running sums along ``axis`` (Kahan-Babuska / Neumaier).

    Loops over the summation axis and vectorizes over the others, so long
    mixed-sign sums keep roughly full float64 accuracy.
    """
    arr = np.moveaxis(np.asarray(values, dtype=np.float64), axis, 0)
    out = np.empty_like(arr)
    total = np.zeros(arr.shape[1:])
    comp = np.zeros(arr.shape[1:])
    for i in range(arr.shape[0]):
        x = arr[i]
        t = total + x
        comp += np.where(np.abs(total) >= np.abs(x), (total - t) + x, (x - t) + total)
        total = t
        out[i] = total + comp
    return np.moveaxis(out, 0, axis)


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by Philox, so a stream is a pure function of its key: streams can be
    built in any order, on any thread, and always reproduce the same draws.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & (2**64 - 1)
        self.stream_id = int(stream_id) & (2**64 - 1)
        self._bitgen = np.random.Philox(key=self.seed | (self.stream_id << 64))
        self.generator = np.random.Generator(self._bitgen)

    @property
    def counter(self) -> int:
        words = self._bitgen.state["state"]["counter"]
        return sum(int(w) << (64 * i) for i, w in enumerate(words))

    def spawn(self, stream_id: int) -> "RngStream":
        """A fresh stream sharing this seed."""
        return RngStream(self.seed, stream_id)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"
