"""Clipped SGD with constant schedules, a parameter-property checker and a
per-iteration ledger of every quantity the convergence analysis manipulates.

Iteration: ``x_{t+1} = x_t - eta_t * clip(grad f(x_t) + xi_t, lam_t)`` with
additive noise ``xi_t`` drawn independently of the iterate.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .clipping import clip, exact_clip_moments, has_exact_conditional_mean
from .core import Objective, RngStream, as_point, sq_norm
from .noise import NoiseModel, sample_noise

REGIMES = ("convex", "nonconvex", "manual")


class NonFiniteIterateError(FloatingPointError):
    def __init__(self, t: int, trial: int | None = None):
        where = f" in trial {trial}" if trial is not None else ""
        super().__init__(f"iterate became non-finite at t={t}{where}")
        self.t = t
        self.trial = trial


def _check_common(T, delta, sigma, p, L):
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not (sigma >= 0 and math.isfinite(sigma)):
        raise ValueError(f"sigma must be finite and non-negative, got {sigma}")
    if not 1.0 < p <= 2.0:
        raise ValueError(f"p must lie in (1, 2], got {p}")
    if not (L > 0 and math.isfinite(L)):
        raise ValueError(f"L must be positive and finite, got {L}")


@dataclass(frozen=True)
class Schedule:
    """Step size and clipping level.  Scalars, or per-step arrays in the manual regime."""

    eta: float | np.ndarray
    lam: float | np.ndarray
    regime: str
    inputs: dict = field(default_factory=dict)

    def arrays(self, T: int) -> tuple[np.ndarray, np.ndarray]:
        eta = np.broadcast_to(np.asarray(self.eta, dtype=np.float64), (T,))
        lam = np.broadcast_to(np.asarray(self.lam, dtype=np.float64), (T,))
        return eta, lam

    def to_dict(self) -> dict:
        def plain(v):
            return v.tolist() if isinstance(v, np.ndarray) else v

        return {"eta": plain(self.eta), "lambda": plain(self.lam), "regime": self.regime,
                "inputs": dict(self.inputs)}


def schedule_convex(T: int, delta: float, sigma: float, p: float, L: float, R1: float) -> Schedule:
    """``lam = max{(16T)^(1/p) sigma, sqrt(2) L R1}``, ``eta = R1 / (16 lam ln(4T/delta))``."""
    _check_common(T, delta, sigma, p, L)
    if not (R1 > 0 and math.isfinite(R1)):
        raise ValueError(f"R1 must be positive and finite, got {R1}")
    log_term = math.log(4.0 * T / delta)
    lam = max((16.0 * T) ** (1.0 / p) * sigma, math.sqrt(2.0) * L * R1)
    eta = R1 / (16.0 * lam * log_term)
    return Schedule(eta, lam, "convex",
                    {"T": int(T), "delta": delta, "sigma": sigma, "p": p, "L": L, "R1": R1})


def nonconvex_lambda_terms(T, delta, sigma, p, L, Delta1) -> tuple[float, float, float]:
    log_term = math.log(4.0 * T / delta)
    root = math.sqrt(L * Delta1)
    growth = T ** (1.0 / (3.0 * p - 2.0))
    return (
        (8.0 * log_term / root) ** (1.0 / (p - 1.0)) * growth * sigma ** (p / (p - 1.0)),
        4.0 * root,
        32.0 ** (1.0 / p) * sigma * growth,
    )


def schedule_nonconvex(T: int, delta: float, sigma: float, p: float, L: float, Delta1: float) -> Schedule:
    """Largest of three clipping levels; ``eta = sqrt(D1) T^((1-p)/(3p-2)) / (8 lam sqrt(L) ln(4T/delta))``."""
    _check_common(T, delta, sigma, p, L)
    if not (Delta1 > 0 and math.isfinite(Delta1)):
        raise ValueError(f"Delta1 must be positive and finite, got {Delta1}")
    lam = max(nonconvex_lambda_terms(T, delta, sigma, p, L, Delta1))
    eta = (math.sqrt(Delta1) * T ** ((1.0 - p) / (3.0 * p - 2.0))
           / (8.0 * lam * math.sqrt(L) * math.log(4.0 * T / delta)))
    return Schedule(eta, lam, "nonconvex",
                    {"T": int(T), "delta": delta, "sigma": sigma, "p": p, "L": L, "Delta1": Delta1})


def manual_schedule(eta, lam, **inputs) -> Schedule:
    """User-chosen step sizes and clipping levels; no convergence claim attached."""
    eta_arr = np.asarray(eta, dtype=np.float64)
    lam_arr = np.asarray(lam, dtype=np.float64)
    if np.any(~(eta_arr > 0)) or not np.all(np.isfinite(eta_arr)):
        raise ValueError("step sizes must be positive and finite")
    if np.any(~(lam_arr > 0)):
        raise ValueError("clipping levels must be positive")
    eta_v = float(eta_arr) if eta_arr.ndim == 0 else eta_arr.copy()
    lam_v = float(lam_arr) if lam_arr.ndim == 0 else lam_arr.copy()
    return Schedule(eta_v, lam_v, "manual", dict(inputs))


PROPERTY_NAMES = (
    "noise_step_floor",      # (1/L)(sigma/lam)^p <= eta
    "step_ceiling",          # eta <= 1/L
    "noise_ratio_growth",    # (sigma/lam)^p T^(p/(3p-2)) <= 1/32
    "accumulated_noise",     # T L (sigma/lam)^p lam^2 eta^2 <= Delta1/2048
)

# The first inequality is an equality when the first clipping term is the maximum.
PROPERTY_RTOL = 1e-12


@dataclass(frozen=True)
class ParameterReport:
    holds: tuple[bool, bool, bool, bool]
    slacks: tuple[float, float, float, float]

    @property
    def passed(self) -> bool:
        return all(self.holds)

    def to_dict(self) -> dict:
        out = {}
        for name, ok, slack in zip(PROPERTY_NAMES, self.holds, self.slacks):
            out[name] = {"pass": ok, "slack": slack}
        out["pass"] = self.passed
        return out


def check_parameter_properties(s: Schedule) -> ParameterReport:
    """Evaluate the four step/clip inequalities the non-convex analysis relies on.

    Works on a non-convex schedule or a scalar manual schedule carrying
    ``T, sigma, p, L, Delta1`` in its inputs.  Slack is ``rhs - lhs``.
    """
    if s.regime == "convex":
        raise ValueError("parameter properties are defined for non-convex schedules only")
    try:
        T, sigma, p, L, D1 = (s.inputs[k] for k in ("T", "sigma", "p", "L", "Delta1"))
    except KeyError as exc:
        raise ValueError(f"schedule inputs lack {exc.args[0]!r}") from None
    eta, lam = float(s.eta), float(s.lam)
    ratio = (sigma / lam) ** p
    pairs = (
        (ratio / L, eta),
        (eta, 1.0 / L),
        (ratio * T ** (p / (3.0 * p - 2.0)), 1.0 / 32.0),
        (T * L * ratio * lam**2 * eta**2, D1 / 2048.0),
    )
    holds = tuple(bool(lhs <= rhs + PROPERTY_RTOL * max(abs(lhs), abs(rhs))) for lhs, rhs in pairs)
    slacks = tuple(float(rhs - lhs) for lhs, rhs in pairs)
    return ParameterReport(holds, slacks)


@dataclass
class TrajectoryLedger:
    """Per-iteration scalars of one clipped-SGD run.

    Arrays indexed by ``t - 1``.  ``delta`` and ``r_sq`` have ``T + 1`` entries
    (through ``x_{T+1}``); per-step quantities have ``T``.  The ``*_u`` / ``*_b``
    fields are filled only when the conditional mean of the clipped gradient
    was computed exactly, and are ``None`` otherwise.
    """

    eta: np.ndarray
    lam: np.ndarray
    L: float
    delta: np.ndarray
    grad_norm_sq: np.ndarray
    theta_sq: np.ndarray
    clip_norm: np.ndarray
    clipped: np.ndarray
    smoothness_excess: float
    r_sq: np.ndarray | None = None
    theta_dist_ip: np.ndarray | None = None
    thetau_sq: np.ndarray | None = None
    thetab_sq: np.ndarray | None = None
    grad_thetau_ip: np.ndarray | None = None
    dist_thetau_ip: np.ndarray | None = None
    thetau_cond_sq: np.ndarray | None = None
    grad_thetau_cond_sq: np.ndarray | None = None
    dist_thetau_cond_sq: np.ndarray | None = None
    x: np.ndarray | None = None

    @property
    def T(self) -> int:
        return len(self.grad_norm_sq)

    @property
    def exact(self) -> bool:
        return self.thetau_sq is not None

    @property
    def r(self) -> np.ndarray | None:
        return None if self.r_sq is None else np.sqrt(self.r_sq)

    def avg_gap(self) -> float:
        """``(1/T) sum_{t<=T} Delta_t``."""
        return math.fsum(self.delta[:-1]) / self.T

    def avg_grad_sq(self) -> float:
        """``(1/T) sum_{t<=T} ||grad f(x_t)||^2``."""
        return math.fsum(self.grad_norm_sq) / self.T


_EXACT_FIELDS = ("thetau_sq", "thetab_sq", "grad_thetau_ip", "dist_thetau_ip",
                 "thetau_cond_sq", "grad_thetau_cond_sq", "dist_thetau_cond_sq")


def default_start(obj: Objective, R1: float | None = None) -> np.ndarray:
    """``x* + R1 * ones / sqrt(d)`` for convex objectives, the all-ones point otherwise."""
    if obj.is_convex and obj.x_star is not None:
        R1 = 1.0 if R1 is None else float(R1)
        return obj.x_star + R1 * np.ones(obj.dim) / math.sqrt(obj.dim)
    return np.ones(obj.dim)


def _want_exact(noise: NoiseModel, dim: int, exact: bool | None) -> bool:
    if exact is None:
        # cheap only where the conditional law is a finite enumeration
        return noise.kind == "two_point" or noise.is_degenerate
    if exact and not has_exact_conditional_mean(noise, dim):
        raise ValueError(f"no exact conditional mean for {noise.kind} noise in dimension {dim}")
    return bool(exact)


def simulate_batch(obj: Objective, noise: NoiseModel, s: Schedule, T: int, streams,
                   x1, detail: str = "scalars", exact: bool | None = None,
                   trial_offset: int = 0) -> list[TrajectoryLedger]:
    """Run one trial per stream, vectorized across trials.

    Every operation is row-wise, so a trial's ledger does not depend on which
    other trials share the batch.
    """
    if detail not in ("scalars", "full"):
        raise ValueError("ledger_detail must be 'scalars' or 'full'")
    T = int(T)
    d = obj.dim
    m = len(streams)
    x1 = as_point(x1, d)
    eta, lam = s.arrays(T)
    use_exact = _want_exact(noise, d, exact)
    xstar = obj.x_star
    L = obj.smoothness_L

    xi = np.stack([sample_noise(noise, d, st, size=T) for st in streams]) if m else np.zeros((0, T, d))
    x = np.tile(x1, (m, 1))
    delta = np.empty((m, T + 1))
    rec = {k: np.empty((m, T)) for k in ("grad_norm_sq", "theta_sq", "clip_norm")}
    clipped = np.empty((m, T), dtype=bool)
    r_sq = np.empty((m, T + 1)) if xstar is not None else None
    theta_dist = np.empty((m, T)) if xstar is not None else None
    ex = {k: np.empty((m, T)) for k in _EXACT_FIELDS} if use_exact else None
    if ex is not None and xstar is None:
        for k in ("dist_thetau_ip", "dist_thetau_cond_sq"):
            ex[k] = None
    xs = np.empty((m, T + 1, d)) if detail == "full" else None
    smooth_excess = np.full(m, -np.inf)

    # divergence is detected explicitly below, so overflow warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T + 1):
            if not np.all(np.isfinite(x)):
                bad = int(np.flatnonzero(~np.all(np.isfinite(x), axis=1))[0])
                raise NonFiniteIterateError(t + 1, trial_offset + bad)
            gap = np.atleast_1d(obj.value(x)) - obj.f_star
            delta[:, t] = gap
            if xs is not None:
                xs[:, t] = x
            if xstar is not None:
                dist = x - xstar
                r_sq[:, t] = sq_norm(dist)
            if t == T:
                break
            grad = obj.gradient(x)
            gsq = sq_norm(grad)
            rec["grad_norm_sq"][:, t] = gsq
            np.maximum(smooth_excess, gsq - 2.0 * L * gap, out=smooth_excess)
            ghat = grad + xi[:, t]
            ghat_norm = np.sqrt(sq_norm(ghat))
            c = clip(ghat, lam[t])
            theta = c - grad
            rec["theta_sq"][:, t] = sq_norm(theta)
            rec["clip_norm"][:, t] = np.sqrt(sq_norm(c))
            clipped[:, t] = ghat_norm > lam[t]
            if xstar is not None:
                theta_dist[:, t] = np.sum(theta * dist, axis=-1)
            if ex is not None:
                dirs = (grad, dist) if xstar is not None else (grad,)
                mom = exact_clip_moments(noise, grad, lam[t], dirs)
                thetau = c - mom.mean
                thetab = mom.mean - grad
                ex["thetau_sq"][:, t] = sq_norm(thetau)
                ex["thetab_sq"][:, t] = sq_norm(thetab)
                ex["grad_thetau_ip"][:, t] = np.sum(grad * thetau, axis=-1)
                ex["thetau_cond_sq"][:, t] = mom.u_sq
                ex["grad_thetau_cond_sq"][:, t] = mom.z_sq[0]
                if xstar is not None:
                    ex["dist_thetau_ip"][:, t] = np.sum(dist * thetau, axis=-1)
                    ex["dist_thetau_cond_sq"][:, t] = mom.z_sq[1]
            x = x - eta[t] * c

    ledgers = []
    for i in range(m):
        extra = {k: (v[i] if v is not None else None) for k, v in ex.items()} if ex is not None else {}
        ledgers.append(TrajectoryLedger(
            eta=np.array(eta), lam=np.array(lam), L=L, delta=delta[i],
            grad_norm_sq=rec["grad_norm_sq"][i], theta_sq=rec["theta_sq"][i],
            clip_norm=rec["clip_norm"][i], clipped=clipped[i],
            smoothness_excess=float(smooth_excess[i]),
            r_sq=None if r_sq is None else r_sq[i],
            theta_dist_ip=None if theta_dist is None else theta_dist[i],
            x=None if xs is None else xs[i], **extra))
    return ledgers


def run_clipped_sgd(obj: Objective, noise: NoiseModel, s: Schedule, T: int, rng: RngStream,
                    ledger_detail: str = "scalars", x1=None, exact: bool | None = None) -> TrajectoryLedger:
    """One clipped-SGD trajectory of ``T`` steps.

    ``x1`` defaults to :func:`default_start` (using the schedule's ``R1`` when
    present).  ``exact`` selects whether the clipped-gradient conditional mean
    is computed: ``None`` means only when it is a cheap enumeration.
    """
    if x1 is None:
        x1 = default_start(obj, s.inputs.get("R1"))
    return simulate_batch(obj, noise, s, T, [rng], x1, ledger_detail, exact)[0]


def run_vanilla_sgd(obj: Objective, noise: NoiseModel, eta, T: int, rng: RngStream,
                    ledger_detail: str = "scalars", x1=None) -> TrajectoryLedger:
    """Plain SGD, i.e. clipped SGD with an infinite clipping level."""
    s = manual_schedule(eta, math.inf)
    if x1 is None:
        x1 = default_start(obj)
    return simulate_batch(obj, noise, s, T, [rng], x1, ledger_detail, exact=False)[0]


def run_trials(obj: Objective, noise: NoiseModel, s: Schedule, T: int, base_seed: int,
               trial_ids, x1=None, detail: str = "scalars", exact: bool | None = None,
               threads: int = 1, chunk: int | None = None) -> list[TrajectoryLedger]:
    """Trials with streams ``(base_seed, i)`` for ``i`` in ``trial_ids``, split into
    batches over a thread pool.  Output is independent of ``threads`` and ``chunk``."""
    ids = [int(i) for i in trial_ids]
    if x1 is None:
        x1 = default_start(obj, s.inputs.get("R1"))
    if chunk is None:
        # keep the pre-drawn noise block near 32 MB
        chunk = max(1, min(len(ids) or 1, (1 << 22) // max(1, int(T) * obj.dim)))
    batches = [ids[k:k + chunk] for k in range(0, len(ids), chunk)]

    def work(batch):
        streams = [RngStream(base_seed, i) for i in batch]
        return simulate_batch(obj, noise, s, T, streams, x1, detail, exact, trial_offset=batch[0])

    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, batches))
    else:
        results = [work(b) for b in batches]
    return [ledger for part in results for ledger in part]


@dataclass(frozen=True)
class StepCheck:
    n_steps: int
    n_violations: int
    worst_excess: float
    first_violation: int | None

    @property
    def passed(self) -> bool:
        return self.n_violations == 0

    def to_dict(self) -> dict:
        return {"n_steps": self.n_steps, "n_violations": self.n_violations,
                "worst_excess": self.worst_excess, "first_violation": self.first_violation,
                "pass": self.passed}


def _step_check(excess: np.ndarray) -> StepCheck:
    bad = np.flatnonzero(excess > 0)
    return StepCheck(len(excess), len(bad), float(excess.max()) if len(excess) else float("-inf"),
                     int(bad[0]) + 1 if len(bad) else None)


def convex_step_excess(ledger: TrajectoryLedger) -> np.ndarray:
    """Per-step ``lhs - rhs - tol`` of the one-step convex descent inequality

    ``eta Delta_t <= R_t^2 - R_{t+1}^2 + 2 eta^2 ||theta_t||^2 - 2 eta <theta_t, x_t - x*>``

    with ``tol = 1e-9 max(1, R_t^2)``.  Positive entries are violations.
    """
    if ledger.r_sq is None:
        raise ValueError("the convex step inequality needs a known minimizer")
    eta, r_sq = ledger.eta, ledger.r_sq
    lhs = eta * ledger.delta[:-1]
    rhs = r_sq[:-1] - r_sq[1:] + 2.0 * eta**2 * ledger.theta_sq - 2.0 * eta * ledger.theta_dist_ip
    return lhs - rhs - 1e-9 * np.maximum(1.0, r_sq[:-1])


def nonconvex_step_excess(ledger: TrajectoryLedger) -> np.ndarray:
    """Per-step ``lhs - rhs - tol`` of the one-step smooth descent inequality

    ``(eta/2)||grad_t||^2 <= Delta_t - Delta_{t+1} + L eta^2 ||theta_u||^2
    + (L eta^2 - eta) <grad_t, theta_u> + (3 eta / 2) ||theta_b||^2``

    with ``tol = 1e-9 max(1, Delta_t)``.  Needs the exact decomposition.
    """
    if not ledger.exact:
        raise ValueError("the non-convex step inequality needs the exact conditional mean")
    eta, L, d = ledger.eta, ledger.L, ledger.delta
    lhs = 0.5 * eta * ledger.grad_norm_sq
    rhs = (d[:-1] - d[1:] + L * eta**2 * ledger.thetau_sq
           + (L * eta**2 - eta) * ledger.grad_thetau_ip + 1.5 * eta * ledger.thetab_sq)
    return lhs - rhs - 1e-9 * np.maximum(1.0, d[:-1])


def check_convex_steps(ledger: TrajectoryLedger) -> StepCheck:
    return _step_check(convex_step_excess(ledger))


def check_nonconvex_steps(ledger: TrajectoryLedger) -> StepCheck:
    return _step_check(nonconvex_step_excess(ledger))
