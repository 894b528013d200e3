"""Norm clipping, the decomposition of the clipped-gradient error, and a checker
for the bias / variance bounds of clipped heavy-tailed noise.

For a true gradient ``g`` and a stochastic gradient ``g + xi`` the clipped
gradient ``c = clip(g + xi, lam)`` differs from ``g`` by

    theta   = c - g
    theta_u = c - E[c]        (zero conditional mean)
    theta_b = E[c] - g        (conditional bias)

When ``||g|| <= lam / 2`` and ``E||xi||^p <= sigma^p`` these satisfy

    ||theta_u|| <= 2 lam,
    ||theta_b|| <= 4 sigma^p lam^(1-p),
    E||theta_u||^2 <= 16 sigma^p lam^(2-p).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import RngStream, sq_norm
from .noise import NoiseModel, _two_point_support, clipped_moment_oracle_1d, sample_noise

# inner Monte-Carlo size for conditional means without an exact oracle
INNER_SAMPLES = 10_000


class PreconditionError(ValueError):
    """A bound was requested outside the region where it is claimed."""


def clip(g, lam) -> np.ndarray:
    """Rescale ``g`` (last axis) to norm at most ``lam``: ``min(1, lam/||g||) * g``.

    ``lam`` may be a scalar, ``inf`` or an array broadcasting against the
    leading axes of ``g``.  A zero vector is returned unchanged.
    """
    g = np.asarray(g, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("cannot clip a non-finite vector")
    if np.any(~(lam > 0)):
        raise ValueError("clipping level must be positive")
    with np.errstate(over="ignore"):
        norm = np.sqrt(sq_norm(g))
    if not np.all(np.isfinite(norm)):
        # ||g||^2 overflowed: rescale by the largest coordinate first
        big = np.max(np.abs(g), axis=-1)
        safe = np.where(big > 0, big, 1.0)
        norm = big * np.sqrt(sq_norm(g / safe[..., None]))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norm > lam, lam / norm, 1.0)
    return g * scale[..., None]


@dataclass(frozen=True)
class ClipDecomposition:
    theta: np.ndarray
    theta_u: np.ndarray
    theta_b: np.ndarray
    exact_conditional_mean: bool


@dataclass(frozen=True)
class ExactClipMoments:
    """Conditional moments of ``clip(G + xi, lam)`` given the rows of ``G``.

    ``z_sq`` holds ``E[<Z, theta_u>^2]`` for each direction array passed in.
    """

    mean: np.ndarray
    u_sq: np.ndarray
    z_sq: tuple = field(default=())


def has_exact_conditional_mean(model: NoiseModel, dim: int) -> bool:
    return model.is_one_dimensional(dim)


def exact_clip_moments(model: NoiseModel, G, lam: float, Z=()) -> ExactClipMoments:
    """Exact ``E[clip]``, ``E||theta_u||^2`` and ``E<z, theta_u>^2`` for each row of ``G``.

    two_point noise is enumerated in any dimension.  Continuous families are
    integrated by quadrature in one dimension only; other cases raise
    ``ValueError`` instead of approximating.
    """
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    Zs = [np.atleast_2d(np.asarray(z, dtype=np.float64)) for z in Z]
    m, dim = G.shape
    if model.kind == "two_point" or model.is_degenerate:
        if model.is_degenerate:
            support, probs = np.zeros(1), np.ones(1)
        else:
            support, probs = _two_point_support(model)
        outcomes = []
        for s in support:
            y = G.copy()
            y[:, 0] += s
            outcomes.append(clip(y, lam))
        mean = sum(q * c for q, c in zip(probs, outcomes))
        devs = [c - mean for c in outcomes]
        u_sq = sum(q * sq_norm(dv) for q, dv in zip(probs, devs))
        z_sq = tuple(sum(q * np.sum(z * dv, axis=-1) ** 2 for q, dv in zip(probs, devs)) for z in Zs)
        return ExactClipMoments(mean, u_sq, z_sq)
    if dim != 1:
        raise ValueError(f"no exact conditional mean for {model.kind} noise in dimension {dim}")
    mean = np.empty((m, 1))
    u_sq = np.empty(m)
    for i, g in enumerate(G[:, 0]):
        res = clipped_moment_oracle_1d(model, g, lam)
        mean[i, 0] = res.mean_clipped
        u_sq[i] = res.u_second_moment
    z_sq = tuple(z[:, 0] ** 2 * u_sq for z in Zs)
    return ExactClipMoments(mean, u_sq, z_sq)


def conditional_clip_mean(model: NoiseModel, grad, lam: float, rng: RngStream | None = None,
                          inner: int = INNER_SAMPLES) -> tuple[np.ndarray, bool]:
    """``E[clip(grad + xi, lam)]`` and whether it is exact.

    Falls back to ``inner`` Monte-Carlo draws from ``rng`` when no exact
    oracle exists for the model in this dimension.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if has_exact_conditional_mean(model, grad.shape[-1]):
        return exact_clip_moments(model, grad[None, :], lam).mean[0], True
    if rng is None:
        raise ValueError("an rng is required for the Monte-Carlo conditional mean")
    draws = sample_noise(model, grad.shape[-1], rng, size=inner)
    return clip(grad + draws, lam).mean(axis=0), False


def decompose_clip(grad, noise_draw, lam: float, model: NoiseModel,
                   rng: RngStream | None = None) -> ClipDecomposition:
    grad = np.asarray(grad, dtype=np.float64)
    clipped = clip(grad + np.asarray(noise_draw, dtype=np.float64), lam)
    mean, exact = conditional_clip_mean(model, grad, lam, rng)
    return ClipDecomposition(clipped - grad, clipped - mean, mean - grad, exact)


REPORT_KEYS = ("bias_norm", "bias_bound", "u_sq_moment", "u_sq_bound", "u_norm_max", "pass")


@dataclass(frozen=True)
class ClipBoundReport:
    bias_norm: float
    bias_bound: float
    u_sq_moment: float
    u_sq_bound: float
    u_norm_max: float
    passed: bool
    lam: float
    grad_norm: float
    method: str
    p: float
    bias_se: float = 0.0
    u_sq_se: float = 0.0

    @property
    def bias_scaling_ratio(self) -> float:
        """``bias / lam^(1-p)``; roughly constant in ``lam`` when the bias follows the bound's shape."""
        return self.bias_norm / self.lam ** (1.0 - self.p)

    def to_dict(self) -> dict:
        return {
            "bias_norm": self.bias_norm,
            "bias_bound": self.bias_bound,
            "u_sq_moment": self.u_sq_moment,
            "u_sq_bound": self.u_sq_bound,
            "u_norm_max": self.u_norm_max,
            "pass": self.passed,
        }


def clip_bounds(model: NoiseModel, lam: float) -> tuple[float, float]:
    """``(4 sigma^p lam^(1-p), 16 sigma^p lam^(2-p))`` for the model's certified moment."""
    p, sp = model.certified_p, model.certified_sigma ** model.certified_p
    return 4.0 * sp * lam ** (1.0 - p), 16.0 * sp * lam ** (2.0 - p)


def tight_bias_constant_ratio(model: NoiseModel, report: ClipBoundReport) -> float:
    """Observed bias over the sharper intermediate bound ``2^p sigma^p lam^(1-p)``."""
    p = model.certified_p
    sharp = 2.0**p * model.certified_sigma**p * report.lam ** (1.0 - p)
    return report.bias_norm / sharp if sharp > 0 else 0.0


def verify_clip_bounds(model: NoiseModel, grad_norm: float, lam: float, n_mc: int = 100_000,
                       rng: RngStream | None = None, dim: int = 1) -> ClipBoundReport:
    """Check the clipped-noise bias and variance bounds at ``||g|| = grad_norm``.

    The gradient is placed along the first axis.  Conditional moments are
    exact when the model admits a one-dimensional oracle, otherwise estimated
    from the ``n_mc`` draws with standard errors.  ``n_mc`` draws are always
    taken to observe ``max ||theta_u||``.  Each bound passes when
    ``estimate <= bound + 4 SE``.
    """
    grad_norm, lam = float(grad_norm), float(lam)
    if not lam > 0:
        raise ValueError("clipping level must be positive")
    if not 0 <= grad_norm <= lam / 2:
        raise PreconditionError(
            f"clipping bias/variance bound requires 0 <= ||grad|| <= lambda/2, "
            f"got ||grad||={grad_norm} with lambda={lam}")
    if n_mc < 100_000:
        raise ValueError("n_mc must be at least 1e5")
    rng = rng if rng is not None else RngStream(0)
    g = np.zeros(dim)
    g[0] = grad_norm
    draws = clip(g + sample_noise(model, dim, rng, size=int(n_mc)), lam)
    bias_bound, u_sq_bound = clip_bounds(model, lam)

    if has_exact_conditional_mean(model, dim):
        # the gradient and two_point noise both live on the first axis
        res = clipped_moment_oracle_1d(model, grad_norm, lam)
        mean = np.zeros(dim)
        mean[0] = res.mean_clipped
        bias_norm, u_sq, method = abs(res.bias), res.u_second_moment, res.method
        bias_se = u_sq_se = 0.0
    else:
        mean = draws.mean(axis=0)
        bias_norm = float(np.sqrt(sq_norm(mean - g)))
        bias_se = float(np.sqrt(np.sum(draws.var(axis=0, ddof=1)) / n_mc))
        dev_sq = sq_norm(draws - mean)
        u_sq = float(dev_sq.mean())
        u_sq_se = float(dev_sq.std(ddof=1) / math.sqrt(n_mc))
        method = "monte-carlo"

    u_norm_max = float(np.sqrt(sq_norm(draws - mean).max()))
    passed = (bias_norm <= bias_bound + 4.0 * bias_se
              and u_sq <= u_sq_bound + 4.0 * u_sq_se
              and u_norm_max <= 2.0 * lam * (1.0 + 1e-12))
    return ClipBoundReport(float(bias_norm), bias_bound, float(u_sq), u_sq_bound, u_norm_max,
                           bool(passed), lam, grad_norm, method, model.certified_p, bias_se, u_sq_se)


def default_grid_models() -> list[NoiseModel]:
    from .noise import gaussian, pareto_sphere, two_point

    return [gaussian(1.0), pareto_sphere(1.8, 1.5, 1.0), two_point(100.0, 1e-3, 1.5)]


DEFAULT_GRID_LAMBDAS = tuple(2.0**k for k in range(12))


def clip_bound_grid(models, lambdas=DEFAULT_GRID_LAMBDAS, n_mc: int = 100_000,
                    seed: int = 0) -> list[tuple[NoiseModel, ClipBoundReport]]:
    """Sweep ``lam = scale * sigma`` for each model with ``||g|| = lam / 2``.

    Each cell draws from its own stream so the sweep is order independent.
    """
    rows = []
    for i, model in enumerate(models):
        sigma = model.certified_sigma or 1.0
        for j, scale in enumerate(lambdas):
            lam = float(scale) * sigma
            rng = RngStream(seed, (i << 32) | j)
            rows.append((model, verify_clip_bounds(model, lam / 2.0, lam, n_mc, rng)))
    return rows
