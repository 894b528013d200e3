"""Multi-trial statistics: high-probability bound checks, induction-event
monitors, an empirical Freedman tail checker and rate-exponent fits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .clipping import clip, exact_clip_moments
from .core import Objective, RngStream, kahan_cumsum
from .noise import NoiseModel, sample_noise
from .optimizer import Schedule, TrajectoryLedger, run_trials

MIN_TRIALS = 20


def _regime_of(obj: Objective, s: Schedule) -> str:
    if s.regime in ("convex", "nonconvex"):
        return s.regime
    return "convex" if obj.is_convex and obj.x_star is not None else "nonconvex"


@dataclass
class TrialEnsemble:
    obj: Objective
    noise: NoiseModel
    schedule: Schedule
    T: int
    base_seed: int
    regime: str
    metrics: np.ndarray
    ledgers: list = field(default_factory=list, repr=False)

    @property
    def M(self) -> int:
        return len(self.metrics)

    def config_echo(self) -> dict:
        return {"objective": self.obj.to_config(), "noise": self.noise.to_config(),
                "schedule": self.schedule.to_dict(), "T": self.T, "M": self.M,
                "base_seed": self.base_seed, "regime": self.regime}


def trial_metric(ledger: TrajectoryLedger, regime: str) -> float:
    """Average gap for convex runs, average squared gradient norm otherwise."""
    return ledger.avg_gap() if regime == "convex" else ledger.avg_grad_sq()


def run_ensemble(obj: Objective, noise: NoiseModel, s: Schedule, T: int, M: int, base_seed: int,
                 threads: int = 1, x1=None, exact: bool | None = None,
                 keep_ledgers: bool = True) -> TrialEnsemble:
    """``M`` independent trials on streams ``(base_seed, 1..M)``."""
    if M < 1:
        raise ValueError("an ensemble needs at least one trial")
    regime = _regime_of(obj, s)
    ledgers = run_trials(obj, noise, s, T, base_seed, range(1, M + 1), x1=x1, exact=exact,
                         threads=threads)
    metrics = np.array([trial_metric(led, regime) for led in ledgers])
    return TrialEnsemble(obj, noise, s, int(T), int(base_seed), regime, metrics,
                         ledgers if keep_ledgers else [])


def theorem_bound(regime: str, T: int, delta: float, sigma: float, p: float, L: float,
                  R1_or_Delta1: float) -> float:
    """Closed-form right-hand side of the high-probability convergence bound."""
    log_term = math.log(4.0 * T / delta)
    if regime == "convex":
        R1 = R1_or_Delta1
        return 32.0 * R1 * log_term * max(16.0 ** (1.0 / p) * T ** ((1.0 - p) / p) * sigma,
                                           math.sqrt(2.0) * L * R1 / T)
    if regime == "nonconvex":
        root = math.sqrt(R1_or_Delta1 * L)
        k = 3.0 * p - 2.0
        return 32.0 * root * log_term * max(
            (8.0 * log_term / root) ** (1.0 / (p - 1.0)) * T ** ((2.0 - 2.0 * p) / k) * sigma ** (p / (p - 1.0)),
            4.0 * root * T ** ((1.0 - 2.0 * p) / k),
            32.0 ** (1.0 / p) * sigma * T ** ((2.0 - 2.0 * p) / k),
        )
    raise ValueError(f"unknown regime {regime!r}")


def rate_exponent(regime: str, p: float) -> float:
    return (1.0 - p) / p if regime == "convex" else (2.0 - 2.0 * p) / (3.0 * p - 2.0)


def quantile_rank(M: int, q: float) -> int:
    """1-based rank of the ``ceil(q M)``-th order statistic, robust to ``q M`` landing near an integer."""
    return min(M, max(1, math.ceil(round(q * M, 9))))


def order_statistic_quantile(values, q: float) -> float:
    vals = np.sort(np.asarray(values, dtype=np.float64))
    return float(vals[quantile_rank(len(vals), q) - 1])


def quantile_ci(values, q: float, z: float = 3.0) -> tuple[float, float]:
    """Distribution-free interval for the ``q``-quantile from order statistics at ``M q -+ z sqrt(M q (1-q))``."""
    vals = np.sort(np.asarray(values, dtype=np.float64))
    M = len(vals)
    half = z * math.sqrt(M * q * (1.0 - q))
    lo = min(M, max(1, math.floor(M * q - half)))
    hi = min(M, max(1, math.ceil(M * q + half)))
    return float(vals[lo - 1]), float(vals[hi - 1])


@dataclass(frozen=True)
class BoundReport:
    empirical_quantile: float
    theorem_bound: float
    ratio: float
    passed: bool
    ci_low: float
    ci_high: float
    M: int

    def to_dict(self) -> dict:
        return {"empirical_quantile": self.empirical_quantile, "theorem_bound": self.theorem_bound,
                "ratio": self.ratio, "pass": self.passed, "ci_low": self.ci_low,
                "ci_high": self.ci_high, "M": self.M}


def bound_for(e: TrialEnsemble) -> float:
    inp = e.schedule.inputs
    scale = inp["R1"] if e.regime == "convex" else inp["Delta1"]
    return theorem_bound(e.regime, e.T, inp["delta"], inp["sigma"], inp["p"], inp["L"], scale)


def check_highprob_bound(e: TrialEnsemble, delta: float, metrics=None) -> BoundReport:
    """Compare the ``(1 - delta)`` order-statistic quantile of the per-trial metric
    with the theorem bound.  ``metrics`` overrides the ensemble's values."""
    if e.schedule.regime != e.regime:
        raise ValueError("the bound applies to ensembles run with the matching theorem schedule")
    vals = e.metrics if metrics is None else np.asarray(metrics, dtype=np.float64)
    if len(vals) < MIN_TRIALS:
        raise ValueError(f"a high-probability check needs at least {MIN_TRIALS} trials")
    q = order_statistic_quantile(vals, 1.0 - delta)
    lo, hi = quantile_ci(vals, 1.0 - delta)
    bound = bound_for(e)
    return BoundReport(q, bound, q / bound, bool(q <= bound), lo, hi, len(vals))


def convex_event_terms(ledger: TrajectoryLedger) -> np.ndarray:
    """Per-step ``2 eta^2 ||theta_t||^2 - 2 eta <theta_t, x_t - x*>``."""
    if ledger.theta_dist_ip is None:
        raise ValueError("the convex event needs a known minimizer")
    eta = ledger.eta
    return 2.0 * eta**2 * ledger.theta_sq - 2.0 * eta * ledger.theta_dist_ip


def nonconvex_event_terms(ledger: TrajectoryLedger) -> np.ndarray:
    """Per-step ``(L eta^2/2)||theta||^2 + (L eta^2 - eta)<grad, theta_u> + (eta/2)||theta_b||^2``."""
    if not ledger.exact:
        raise ValueError("the non-convex event needs the exact conditional mean of the clipped "
                         "gradient; refusing to substitute an estimate")
    eta, L = ledger.eta, ledger.L
    return (0.5 * L * eta**2 * ledger.theta_sq + (L * eta**2 - eta) * ledger.grad_thetau_ip
            + 0.5 * eta * ledger.thetab_sq)


def event_terms(ledger: TrajectoryLedger, regime: str) -> np.ndarray:
    if regime == "convex":
        return convex_event_terms(ledger)
    if regime == "nonconvex":
        return nonconvex_event_terms(ledger)
    raise ValueError(f"unknown regime {regime!r}")


def _prefix(terms: np.ndarray) -> np.ndarray:
    # entry k-1 holds the sum over t < k, for k = 1..T+1
    sums = kahan_cumsum(terms, axis=-1)
    return np.concatenate((np.zeros(terms.shape[:-1] + (1,)), sums), axis=-1)


def event_quantity(ledger: TrajectoryLedger, regime: str) -> np.ndarray:
    """Accumulated error of the induction event for ``k = 1..T+1`` (a pure function of the ledger)."""
    return _prefix(event_terms(ledger, regime))


@dataclass(frozen=True)
class EventResult:
    event_held_through: int
    held_to_end: bool
    threshold: float
    max_quantity: float

    def to_dict(self) -> dict:
        return {"event_held_through": self.event_held_through, "held_to_end": self.held_to_end,
                "threshold": self.threshold, "max_quantity": self.max_quantity}


def monitor_induction_event(ledger: TrajectoryLedger, regime: str, s: Schedule | None = None,
                            R1_or_Delta1: float | None = None) -> EventResult:
    """Largest ``k`` in ``1..T+1`` such that the accumulated error stays below
    ``R1^2`` (convex) or ``Delta1`` (non-convex) for every index up to ``k``.

    The scale defaults to the schedule input, then to the ledger's first entry.
    """
    return _event_result(event_quantity(ledger, regime), _event_threshold(ledger, regime, s, R1_or_Delta1))


def _event_threshold(ledger, regime, s, R1_or_Delta1) -> float:
    key = "R1" if regime == "convex" else "Delta1"
    if R1_or_Delta1 is None and s is not None:
        R1_or_Delta1 = s.inputs.get(key)
    if R1_or_Delta1 is None:
        R1_or_Delta1 = math.sqrt(ledger.r_sq[0]) if regime == "convex" else ledger.delta[0]
    return float(R1_or_Delta1**2 if regime == "convex" else R1_or_Delta1)


def _event_result(q: np.ndarray, thr: float) -> EventResult:
    bad = np.flatnonzero(q > thr)
    held = int(bad[0]) if len(bad) else len(q)
    return EventResult(held, held == len(q), thr, float(q.max()))


@dataclass(frozen=True)
class EventFraction:
    fraction: float
    required: float
    passed: bool
    M: int

    def to_dict(self) -> dict:
        return {"fraction": self.fraction, "required": self.required, "pass": self.passed, "M": self.M}


def event_fraction(e: TrialEnsemble, delta: float) -> EventFraction:
    """Share of trials whose event holds through ``T + 1``, against ``1 - delta - 3 sqrt(delta(1-delta)/M)``."""
    if not e.ledgers:
        raise ValueError("the ensemble was run without ledgers")
    if e.M < MIN_TRIALS:
        raise ValueError(f"an event frequency needs at least {MIN_TRIALS} trials")
    qs = _prefix(np.stack([event_terms(led, e.regime) for led in e.ledgers]))
    held = [_event_result(q, _event_threshold(led, e.regime, e.schedule, None)).held_to_end
            for q, led in zip(qs, e.ledgers)]
    frac = sum(held) / len(held)
    required = 1.0 - delta - 3.0 * math.sqrt(delta * (1.0 - delta) / len(held))
    return EventFraction(frac, required, bool(frac >= required), len(held))


class FreedmanPreconditionError(ValueError):
    """An increment exceeded its declared almost-sure bound."""


@dataclass(frozen=True)
class MdsSpec:
    """A martingale difference sequence sampler.

    ``draw(rng, n)`` returns increments ``X`` and conditional variances ``V``,
    both of shape ``(n, T)``, with ``|X| <= c`` required.
    """

    name: str
    T: int
    c: float
    draw: Callable[[RngStream, int], tuple[np.ndarray, np.ndarray]]
    fixed_trials: int | None = None


def rademacher_spec(T: int, c: float = 1.0) -> MdsSpec:
    def draw(rng, n):
        X = np.where(rng.generator.random((n, T)) < 0.5, -c, c)
        return X, np.full((n, T), c * c)

    return MdsSpec("rademacher", int(T), float(c), draw)


def zero_spec(T: int) -> MdsSpec:
    return MdsSpec("zero", int(T), 0.0, lambda rng, n: (np.zeros((n, T)), np.zeros((n, T))))


def clipped_noise_spec(model: NoiseModel, g: float, lam: float, T: int) -> MdsSpec:
    """``X_t = clip(g + xi_t, lam) - E[clip(g + xi, lam)]`` along the first axis, i.i.d. in ``t``."""
    mom = exact_clip_moments(model, [[float(g)]], lam)
    mean, var = float(mom.mean[0, 0]), float(mom.u_sq[0])

    def draw(rng, n):
        xi = sample_noise(model, 1, rng, size=n * T)
        X = (clip(g + xi, lam)[:, 0] - mean).reshape(n, T)
        return X, np.full((n, T), var)

    return MdsSpec("clipped-noise", int(T), 2.0 * float(lam), draw)


def replay_spec(ledgers: Sequence[TrajectoryLedger], regime: str, R1_or_Delta1: float) -> MdsSpec:
    """Replay the centred clipped-noise sequence a convergence proof controls.

    Non-convex: ``X_t = (eta - L eta^2) <Z_t, theta_u>`` with ``Z_t = -grad f(x_t)``
    while ``Delta_t <= 2 Delta1`` and 0 after.  Convex: ``X_t = 2 eta <Z_t, theta_u>``
    with ``Z_t = x* - x_t`` while ``R_t^2 <= 2 R1^2``.  Each trial is one replication.
    """
    if not ledgers:
        raise ValueError("nothing to replay")
    if not all(led.exact for led in ledgers):
        raise ValueError("replay needs ledgers with the exact conditional mean")
    T = ledgers[0].T
    eta_lam = max(float(np.max(led.eta * led.lam)) for led in ledgers)
    Xs, Vs = [], []
    for led in ledgers:
        eta = led.eta
        if regime == "nonconvex":
            mask = led.delta[:-1] <= 2.0 * R1_or_Delta1
            coef = eta - led.L * eta**2
            Xs.append(-coef * led.grad_thetau_ip * mask)
            Vs.append(coef**2 * led.grad_thetau_cond_sq * mask)
        elif regime == "convex":
            if led.dist_thetau_ip is None:
                raise ValueError("convex replay needs a known minimizer")
            mask = led.r_sq[:-1] <= 2.0 * R1_or_Delta1**2
            Xs.append(-2.0 * eta * led.dist_thetau_ip * mask)
            Vs.append(4.0 * eta**2 * led.dist_thetau_cond_sq * mask)
        else:
            raise ValueError(f"unknown regime {regime!r}")
    X, V = np.stack(Xs), np.stack(Vs)
    if regime == "nonconvex":
        c = 4.0 * math.sqrt(ledgers[0].L * R1_or_Delta1) * eta_lam
    else:
        # |2 eta <Z, theta_u>| <= 2 eta sqrt(2) R1 2 lam
        c = 4.0 * math.sqrt(2.0) * R1_or_Delta1 * eta_lam

    def draw(rng, n):
        if n != len(Xs):
            raise ValueError(f"replay holds {len(Xs)} trials, {n} requested")
        return X, V

    return MdsSpec(f"replay-{regime}", T, c, draw, fixed_trials=len(Xs))


def replay_thresholds(s: Schedule, regime: str) -> tuple[float, float]:
    """The deviation level ``b`` and variance budget ``F`` used by the proofs for a theorem schedule."""
    inp = s.inputs
    T, delta, sigma, p, L = inp["T"], inp["delta"], inp["sigma"], inp["p"], inp["L"]
    eta, lam = float(s.eta), float(s.lam)
    log_term = math.log(4.0 * T / delta)
    if regime == "nonconvex":
        D1 = inp["Delta1"]
        scale = math.sqrt(L * D1)
        F0 = 64.0 * L * D1 * sigma**p * lam ** (2.0 - p) * eta**2 * T
    else:
        R1 = inp["R1"]
        scale = R1
        F0 = 128.0 * R1**2 * sigma**p * lam ** (2.0 - p) * eta**2 * T
    b = (4.0 / 3.0 * scale * eta * lam + math.sqrt(16.0 * scale**2 * eta**2 * lam**2 / 9.0 + 2.0 * F0)) * log_term
    return b, F0 * log_term


@dataclass(frozen=True)
class FreedmanReport:
    empirical_prob: float
    bound: float
    passed: bool
    se: float
    trials: int

    def to_dict(self) -> dict:
        return {"empirical_prob": self.empirical_prob, "bound": self.bound, "pass": self.passed,
                "se": self.se, "trials": self.trials}


def freedman_bound(b: float, F: float, c: float) -> float:
    return min(1.0, 2.0 * math.exp(-b * b / (2.0 * F + 2.0 * c * b / 3.0)))


def freedman_tail_check(mds: MdsSpec, b: float, F: float, trials: int, rng: RngStream,
                        batch: int = 10_000) -> FreedmanReport:
    """Estimate ``P[|sum X_t| > b and sum V_t <= F]`` and compare with
    ``2 exp(-b^2 / (2F + 2cb/3))`` allowing 4 standard errors."""
    if not b > 0 or not F > 0:
        raise ValueError("b and F must be positive")
    if mds.fixed_trials is not None:
        batch = trials = mds.fixed_trials
    hits = 0
    done = 0
    tol = mds.c * (1.0 + 1e-12)
    while done < trials:
        n = min(batch, trials - done)
        X, V = mds.draw(rng, n)
        if np.any(np.abs(X) > tol):
            worst = float(np.abs(X).max())
            raise FreedmanPreconditionError(
                f"{mds.name}: increment {worst:.6g} exceeds the declared bound c={mds.c:.6g}")
        S = np.abs(X.sum(axis=1))
        hits += int(np.count_nonzero((S > b) & (V.sum(axis=1) <= F)))
        done += n
    prob = hits / trials
    se = math.sqrt(prob * (1.0 - prob) / trials)
    bound = freedman_bound(b, F, mds.c)
    return FreedmanReport(prob, bound, bool(prob <= bound + 4.0 * se), se, trials)


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    floored: bool

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r_squared": self.r_squared,
                "floored": self.floored}


LOG_FLOOR = 1e-300


def fit_rate(points) -> RateFit:
    """Least squares of ``log(metric)`` on ``log(T)``.

    Needs at least four geometrically spaced ``T``.  Non-positive metrics are
    floored at ``1e-300`` and flagged.
    """
    pts = sorted((float(t), float(m)) for t, m in points)
    if len(pts) < 4:
        raise ValueError("a rate fit needs at least four values of T")
    Ts = np.array([t for t, _ in pts])
    if np.any(Ts <= 0):
        raise ValueError("T values must be positive")
    ratios = Ts[1:] / Ts[:-1]
    if np.any(ratios <= 1.0) or not np.allclose(ratios, ratios[0], rtol=1e-9):
        raise ValueError("T values must be distinct and geometrically spaced")
    ys = np.array([m for _, m in pts])
    floored = bool(np.any(~(ys > LOG_FLOOR)))
    lx, ly = np.log(Ts), np.log(np.maximum(ys, LOG_FLOOR))
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(slope), float(intercept), r2, floored)
