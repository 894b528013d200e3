"""Zero-mean additive gradient noise with an exactly known p-th moment.

Three families are provided:

* ``gaussian``: isotropic, per-coordinate std ``sigma / sqrt(d)`` so that
  ``E||xi||^2 = sigma^2`` (certified at ``p = 2``).
* ``pareto_sphere``: ``xi = s * r * u`` with ``u`` uniform on the unit sphere and
  ``r`` Pareto with shape ``alpha`` and minimum 1.  The scale
  ``s = sigma * ((alpha - p) / alpha) ** (1 / p)`` makes ``E||xi||^p = sigma^p``.
  For ``alpha <= 2`` the variance is infinite.
* ``two_point``: ``+-M e_1`` with probability ``q / 2`` each, else 0, so
  ``E||xi||^p = q M^p``.

None of these come from measured training noise; they are chosen because
their moments are available in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import integrate, stats

from .core import RngStream

NOISE_KINDS = ("gaussian", "pareto_sphere", "two_point")


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested accuracy."""


@dataclass(frozen=True)
class NoiseModel:
    kind: str
    sigma: float = 0.0
    p: float = 2.0
    alpha: float | None = None
    magnitude: float | None = None
    prob: float | None = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {', '.join(NOISE_KINDS)}")
        if not 1.0 < self.p <= 2.0:
            raise ValueError(f"moment order p must lie in (1, 2], got {self.p}")
        if self.kind == "gaussian" and self.p != 2.0:
            raise ValueError("gaussian noise is certified at p = 2 only")
        if self.kind == "pareto_sphere":
            if self.alpha is None or self.alpha <= 1.0:
                raise ValueError("pareto_sphere needs alpha > 1 (the mean is undefined otherwise)")
            if self.alpha <= self.p:
                raise ValueError(f"pareto_sphere needs alpha > p, got alpha={self.alpha}, p={self.p}: "
                                 "the p-th moment is infinite")
        if self.kind == "two_point":
            if self.magnitude is None or not self.magnitude > 0:
                raise ValueError("two_point magnitude must be positive")
            if self.prob is None or not 0.0 < self.prob <= 1.0:
                raise ValueError("two_point prob must lie in (0, 1]")
        elif not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError("sigma must be a finite non-negative number")

    @property
    def certified_p(self) -> float:
        return self.p

    @property
    def certified_sigma(self) -> float:
        if self.kind == "two_point":
            return (self.prob * self.magnitude**self.p) ** (1.0 / self.p)
        return self.sigma

    @property
    def scale(self) -> float:
        """Radial scale ``s`` of the pareto_sphere family."""
        if self.kind != "pareto_sphere":
            raise AttributeError("scale is defined for pareto_sphere only")
        return self.sigma * ((self.alpha - self.p) / self.alpha) ** (1.0 / self.p)

    @property
    def is_degenerate(self) -> bool:
        return self.kind != "two_point" and self.sigma == 0.0

    def is_one_dimensional(self, dim: int) -> bool:
        """Whether the exact 1-d oracles apply to this model in dimension ``dim``."""
        return self.kind == "two_point" or dim == 1

    def to_config(self) -> dict:
        if self.kind == "gaussian":
            return {"kind": "gaussian", "sigma": self.sigma}
        if self.kind == "pareto_sphere":
            return {"kind": "pareto_sphere", "alpha": self.alpha, "p": self.p, "sigma": self.sigma}
        return {"kind": "two_point", "magnitude": self.magnitude, "prob": self.prob, "p": self.p}


def gaussian(sigma: float) -> NoiseModel:
    return NoiseModel("gaussian", sigma=float(sigma), p=2.0)


def pareto_sphere(alpha: float, p: float, sigma: float) -> NoiseModel:
    return NoiseModel("pareto_sphere", sigma=float(sigma), p=float(p), alpha=float(alpha))


def two_point(magnitude: float, prob: float, p: float) -> NoiseModel:
    return NoiseModel("two_point", p=float(p), magnitude=float(magnitude), prob=float(prob))


def noise_from_config(spec: Mapping[str, object]) -> NoiseModel:
    kind = spec.get("kind")
    allowed = {
        "gaussian": {"kind", "sigma"},
        "pareto_sphere": {"kind", "alpha", "p", "sigma"},
        "two_point": {"kind", "magnitude", "prob", "p"},
    }
    if kind not in allowed:
        raise ValueError(f"unknown noise kind {kind!r}")
    extra = set(spec) - allowed[kind]
    if extra:
        raise ValueError(f"unexpected {kind} noise fields: {', '.join(sorted(extra))}")
    try:
        if kind == "gaussian":
            return gaussian(float(spec["sigma"]))
        if kind == "pareto_sphere":
            return pareto_sphere(float(spec["alpha"]), float(spec["p"]), float(spec["sigma"]))
        return two_point(float(spec["magnitude"]), float(spec["prob"]), float(spec["p"]))
    except KeyError as exc:
        raise ValueError(f"{kind} noise is missing field {exc.args[0]!r}") from None


def _generator(rng) -> np.random.Generator:
    return rng.generator if isinstance(rng, RngStream) else rng


def sample_noise(model: NoiseModel, dim: int, rng, size: int | None = None) -> np.ndarray:
    """Draw noise vectors; shape ``(dim,)`` when ``size`` is None, else ``(size, dim)``."""
    gen = _generator(rng)
    n = 1 if size is None else int(size)
    if model.kind == "gaussian":
        out = gen.standard_normal((n, dim)) * (model.sigma / math.sqrt(dim))
    elif model.kind == "pareto_sphere":
        radius = model.scale * np.exp(gen.standard_exponential(n) / model.alpha)
        if dim == 1:
            direction = np.where(gen.random((n, 1)) < 0.5, -1.0, 1.0)
        else:
            direction = gen.standard_normal((n, dim))
            direction /= np.sqrt(np.sum(direction * direction, axis=1, keepdims=True))
        out = radius[:, None] * direction
    else:
        u = gen.random(n)
        half = 0.5 * model.prob
        out = np.zeros((n, dim))
        out[:, 0] = np.where(u < half, model.magnitude, np.where(u < model.prob, -model.magnitude, 0.0))
    return out[0] if size is None else out


@dataclass(frozen=True)
class MomentCertificate:
    p: float
    sigma_p: float


def certified_moment(model: NoiseModel) -> MomentCertificate:
    """Closed-form ``E||xi||^p`` for the model's certified ``p``."""
    if model.kind == "gaussian":
        return MomentCertificate(2.0, model.sigma**2)
    if model.kind == "pareto_sphere":
        # Pareto(alpha, 1) raw moment: E[r^p] = alpha / (alpha - p)
        return MomentCertificate(model.p, model.scale**model.p * model.alpha / (model.alpha - model.p))
    return MomentCertificate(model.p, model.prob * model.magnitude**model.p)


@dataclass(frozen=True)
class ClippedMoments:
    mean_clipped: float
    bias: float
    u_second_moment: float
    method: str
    abserr: float = 0.0


def _two_point_support(model: NoiseModel) -> tuple[np.ndarray, np.ndarray]:
    m = model.magnitude
    return np.array([0.0, m, -m]), np.array([1.0 - model.prob, 0.5 * model.prob, 0.5 * model.prob])


def _quad(fn, a, b, tol):
    res = integrate.quad(fn, a, b, epsabs=tol, epsrel=1e-12, limit=500, full_output=1)
    value, abserr = res[0], res[1]
    if not math.isfinite(value) or abserr > tol:
        message = res[3] if len(res) > 3 else "error estimate above tolerance"
        raise QuadratureError(f"quadrature on [{a}, {b}] failed: abserr={abserr:.3g} > {tol:.3g} ({message})")
    return value, abserr


# Gaussian mass beyond 40 standard deviations is below 1e-340 and ignored.
_GAUSS_SPAN = 40.0


def _integrate_pieces(fn, edges, tol) -> tuple[float, float]:
    total, err = 0.0, 0.0
    pieces = [(lo, hi) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]
    for lo, hi in pieces:
        val, e = _quad(fn, lo, hi, tol / len(pieces))
        total += val
        err += e
    return total, err


def _expectation(model: NoiseModel, fn, kinks_in_noise, tol) -> tuple[float, float]:
    """``E[fn(xi)]`` for a continuous 1-d model, split at the integrand's kinks."""
    if model.kind == "gaussian":
        sd = model.sigma
        lo, hi = -_GAUSS_SPAN * sd, _GAUSS_SPAN * sd
        cuts = {sd * k for k in (-16, -8, -4, -2, -1, 0, 1, 2, 4, 8, 16)}
        cuts.update(k for k in kinks_in_noise if lo < k < hi)
        pdf = stats.norm(scale=sd).pdf
        return _integrate_pieces(lambda z: fn(z) * pdf(z), [lo, *sorted(cuts), hi], tol)

    # pareto_sphere in 1-d: xi = +-s r with r = exp(w), density alpha exp(-alpha w) on w >= 0
    s, alpha = model.scale, model.alpha
    cuts = sorted({math.log(abs(k) / s) for k in kinks_in_noise if abs(k) > s})

    def integrand(w):
        weight = alpha * math.exp(-alpha * w)
        if weight == 0.0:
            return 0.0
        r = math.exp(w)
        return 0.5 * (fn(s * r) + fn(-s * r)) * weight

    finite, err = _integrate_pieces(integrand, [0.0, *cuts], tol / 2) if cuts else (0.0, 0.0)
    tail, err_tail = _quad(integrand, cuts[-1] if cuts else 0.0, math.inf, tol / 2)
    return finite + tail, err + err_tail


def clipped_moment_oracle_1d(model: NoiseModel, g: float, lam: float, tol: float = 1e-10) -> ClippedMoments:
    """Exact moments of ``clip(g + xi, lam)`` in one dimension.

    ``two_point`` is enumerated exactly; the continuous families use adaptive
    quadrature split at the clipping kinks.  Raises :class:`QuadratureError`
    rather than returning an inaccurate value.
    """
    g = float(g)
    lam = float(lam)
    if not lam > 0:
        raise ValueError("clipping level must be positive")

    def clamp(y):
        return min(lam, max(-lam, y))

    if model.kind == "two_point":
        support, probs = _two_point_support(model)
        vals = np.clip(g + support, -lam, lam)
        mean = float(np.dot(probs, vals))
        bias = float(np.dot(probs, vals - g))
        second = float(np.dot(probs, (vals - mean) ** 2))
        return ClippedMoments(mean, bias, second, "enumeration")

    if model.is_degenerate:
        c = clamp(g)
        return ClippedMoments(c, c - g, 0.0, "degenerate")

    # integrand kinks sit where g + xi crosses +-lam
    kinks = (lam - g, -lam - g)
    bias, err_b = _expectation(model, lambda z: clamp(g + z) - g, kinks, tol)
    # E[(c - m)^2] = E[(c - g)^2] - bias^2 with c = clip(g + xi)
    second_raw, err_s = _expectation(model, lambda z: (clamp(g + z) - g) ** 2, kinks, tol)
    second = max(second_raw - bias * bias, 0.0)
    return ClippedMoments(g + bias, bias, second, "quadrature", err_b + err_s)
