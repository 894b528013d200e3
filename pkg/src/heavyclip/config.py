"""Experiment configuration: parsing, validation and the canonical hash that names run directories."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import OBJECTIVE_NAMES, Objective, objective_from_config, sq_norm
from .noise import NoiseModel, noise_from_config

CHECKS = ("lemma2", "per-step", "event", "freedman", "bound", "rate")
# checks whose outcome is guaranteed by a theorem when the code is right
PROVEN_CHECKS = ("lemma2", "per-step", "event", "freedman", "bound")
DEFAULT_RATE_TOLERANCE = {"convex": 0.15, "nonconvex": 0.20}


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    name: str
    regime: str
    objective: dict
    noise: dict
    T: list
    delta: float
    M: int
    base_seed: int
    checks: list
    x1: list | None = None
    schedule: dict | None = None
    rate_target: float | None = None
    rate_tolerance: float | None = None
    trial_csv_limit: int = 2
    _obj: Objective | None = field(default=None, repr=False, compare=False)
    _noise: NoiseModel | None = field(default=None, repr=False, compare=False)

    @property
    def obj(self) -> Objective:
        return self._obj

    @property
    def noise_model(self) -> NoiseModel:
        return self._noise

    def start_point(self) -> np.ndarray:
        from .optimizer import default_start

        if self.x1 is not None:
            return np.array(self.x1, dtype=np.float64)
        return default_start(self._obj)

    def scale(self) -> float:
        """``R1 = ||x1 - x*||`` for convex runs, ``Delta1 = f(x1) - f*`` otherwise."""
        x1 = self.start_point()
        if self.regime == "convex":
            return math.sqrt(float(sq_norm(x1 - self._obj.x_star)))
        return float(self._obj.value(x1)) - self._obj.f_star

    def to_dict(self) -> dict:
        out = {"name": self.name, "regime": self.regime, "objective": self.objective,
               "noise": self.noise, "T": list(self.T), "delta": self.delta, "M": self.M,
               "base_seed": self.base_seed, "checks": list(self.checks),
               "trial_csv_limit": self.trial_csv_limit}
        for key in ("x1", "schedule", "rate_target", "rate_tolerance"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        return out


_FIELDS = {"name", "regime", "objective", "noise", "T", "delta", "M", "base_seed", "checks",
           "x1", "schedule", "rate_target", "rate_tolerance", "trial_csv_limit"}


def _number(raw: dict, key: str, prefix: str, kind=float):
    if key not in raw:
        raise ConfigError(prefix + key, "missing")
    val = raw[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(prefix + key, f"expected a number, got {val!r}")
    if kind is int and int(val) != val:
        raise ConfigError(prefix + key, f"expected an integer, got {val!r}")
    return kind(val)


def parse_experiment(raw: dict, index: int = 0) -> ExperimentConfig:
    prefix = f"experiments[{index}]." if index >= 0 else ""
    if not isinstance(raw, dict):
        raise ConfigError(prefix.rstrip("."), "expected an object")
    extra = set(raw) - _FIELDS
    if extra:
        raise ConfigError(prefix + sorted(extra)[0], "unknown field")

    regime = raw.get("regime")
    if regime not in ("convex", "nonconvex"):
        raise ConfigError(prefix + "regime", f"expected 'convex' or 'nonconvex', got {regime!r}")

    obj_spec = raw.get("objective")
    if not isinstance(obj_spec, dict) or obj_spec.get("name") not in OBJECTIVE_NAMES:
        raise ConfigError(prefix + "objective", f"expected one of {', '.join(OBJECTIVE_NAMES)}")
    try:
        obj = objective_from_config(obj_spec)
    except (ValueError, TypeError) as exc:
        raise ConfigError(prefix + "objective", str(exc)) from None
    if regime == "convex" and not obj.is_convex:
        raise ConfigError(prefix + "regime", f"objective {obj.name} is not convex")

    if not isinstance(raw.get("noise"), dict):
        raise ConfigError(prefix + "noise", "expected an object")
    try:
        noise = noise_from_config(raw["noise"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(prefix + "noise", str(exc)) from None

    Ts = raw.get("T")
    if isinstance(Ts, int) and not isinstance(Ts, bool):
        Ts = [Ts]
    if not isinstance(Ts, list) or not Ts or not all(isinstance(t, int) and not isinstance(t, bool) for t in Ts):
        raise ConfigError(prefix + "T", "expected a non-empty list of integers")
    if any(t < 2 for t in Ts):
        raise ConfigError(prefix + "T", "every T must be at least 2")
    if Ts != sorted(set(Ts)):
        raise ConfigError(prefix + "T", "values must be strictly ascending")

    delta = _number(raw, "delta", prefix)
    if not 0.0 < delta < 1.0:
        raise ConfigError(prefix + "delta", f"must lie in (0, 1), got {delta}")
    M = _number(raw, "M", prefix, int)
    if M < 1:
        raise ConfigError(prefix + "M", "must be positive")
    seed = _number(raw, "base_seed", prefix, int) if "base_seed" in raw else 0
    if not 0 <= seed < 2**64:
        raise ConfigError(prefix + "base_seed", "must be an unsigned 64-bit integer")

    checks = raw.get("checks", ["bound"])
    if not isinstance(checks, list) or any(c not in CHECKS for c in checks):
        raise ConfigError(prefix + "checks", f"expected a subset of {', '.join(CHECKS)}")
    if len(set(checks)) != len(checks):
        raise ConfigError(prefix + "checks", "duplicate entries")
    if ("bound" in checks or "event" in checks) and M < 20:
        raise ConfigError(prefix + "M", "high-probability checks need at least 20 trials")
    needs_exact = {"freedman"} if regime == "convex" else {"per-step", "event", "freedman"}
    if needs_exact & set(checks) and not (noise.kind == "two_point" or noise.is_degenerate):
        raise ConfigError(prefix + "checks",
                          f"{', '.join(sorted(needs_exact & set(checks)))} need(s) two_point or zero noise "
                          "(exact conditional mean of the clipped gradient)")
    if "rate" in checks and len(Ts) < 4:
        raise ConfigError(prefix + "T", "a rate check needs at least four values")

    x1 = raw.get("x1")
    if x1 is not None:
        try:
            arr = np.array(x1, dtype=np.float64, ndmin=1)
        except (TypeError, ValueError):
            raise ConfigError(prefix + "x1", "expected a list of numbers") from None
        if arr.shape != (obj.dim,) or not np.all(np.isfinite(arr)):
            raise ConfigError(prefix + "x1", f"expected {obj.dim} finite coordinates")
        x1 = arr.tolist()

    sched = raw.get("schedule")
    if sched is not None:
        if not isinstance(sched, dict) or set(sched) - {"eta", "lambda"} or "eta" not in sched:
            raise ConfigError(prefix + "schedule", "expected {\"eta\": ..., \"lambda\": ...}")
        eta = _number(sched, "eta", prefix + "schedule.")
        lam = math.inf if sched.get("lambda") is None else _number(sched, "lambda", prefix + "schedule.")
        if not eta > 0 or not lam > 0:
            raise ConfigError(prefix + "schedule", "eta and lambda must be positive")
        if {"bound", "event", "freedman"} & set(checks):
            raise ConfigError(prefix + "checks", "bound, event and freedman checks need the theorem schedule")
        # a missing or infinite lambda means plain SGD
        sched = {"eta": eta, "lambda": lam if math.isfinite(lam) else None}

    rate_target = _number(raw, "rate_target", prefix) if "rate_target" in raw else None
    rate_tol = _number(raw, "rate_tolerance", prefix) if "rate_tolerance" in raw else None
    limit = _number(raw, "trial_csv_limit", prefix, int) if "trial_csv_limit" in raw else 2
    if limit < 0:
        raise ConfigError(prefix + "trial_csv_limit", "must be non-negative")

    name = raw.get("name", f"exp{max(index, 0)}")
    if not isinstance(name, str) or not name or any(ch in name for ch in "/\\ ,"):
        raise ConfigError(prefix + "name", "expected a non-empty name without spaces, commas or slashes")

    cfg = ExperimentConfig(name, regime, obj.to_config(), noise.to_config(), list(Ts), delta, M, seed,
                           list(checks), x1, sched, rate_target, rate_tol, limit, obj, noise)
    if cfg.scale() <= 0:
        raise ConfigError(prefix + "x1", "the start point must differ from the minimizer")
    return cfg


@dataclass
class RunConfig:
    experiments: list
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return {"experiments": [e.to_dict() for e in self.experiments], "output_dir": self.output_dir}

    def digest(self) -> str:
        """sha256 of the canonical JSON form; identical configs name identical run directories."""
        payload = {"experiments": [e.to_dict() for e in self.experiments]}
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse_config(data, seed_override: int | None = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a JSON object")
    if "experiments" in data:
        extra = set(data) - {"experiments", "output_dir"}
        if extra:
            raise ConfigError(sorted(extra)[0], "unknown field")
        items = data["experiments"]
        if not isinstance(items, list) or not items:
            raise ConfigError("experiments", "expected a non-empty list")
        exps = [parse_experiment(item, i) for i, item in enumerate(items)]
        out = data.get("output_dir", "runs")
    else:
        body = dict(data)
        out = body.pop("output_dir", "runs")
        exps = [parse_experiment(body, -1)]
    if not isinstance(out, str) or not out:
        raise ConfigError("output_dir", "expected a path")
    names = [e.name for e in exps]
    if len(set(names)) != len(names):
        raise ConfigError("experiments", "experiment names must be unique")
    if seed_override is not None:
        for e in exps:
            e.base_seed = int(seed_override)
    return RunConfig(exps, out)


def load_config(path: str, seed_override: int | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    return parse_config(data, seed_override)
