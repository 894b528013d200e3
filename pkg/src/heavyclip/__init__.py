"""Clipped SGD under heavy-tailed gradient noise, with checks of its high-probability guarantees."""

from .analysis import (TrialEnsemble, check_highprob_bound, event_fraction, fit_rate, freedman_tail_check,
                       monitor_induction_event, run_ensemble, theorem_bound)
from .clipping import ClipDecomposition, clip, decompose_clip, verify_clip_bounds
from .core import Objective, RngStream, builtin_objective, check_smoothness_bound
from .noise import NoiseModel, certified_moment, clipped_moment_oracle_1d, gaussian, pareto_sphere, sample_noise, two_point
from .optimizer import (Schedule, TrajectoryLedger, check_parameter_properties, manual_schedule, run_clipped_sgd,
                        run_vanilla_sgd, schedule_convex, schedule_nonconvex)

__version__ = "0.1.0"
