"""The size-biased tagged cell: a piecewise deterministic Markov process.

The tagged cell follows one lineage of the population, picking a daughter
at each fission with probability proportional to her mass ratio.  Its
multiplicative weight exp(int c(X_s)/X_s ds) corrects tagged-cell averages
back to population averages; it is tracked in log form through the exact
identity  log weight = log(X_t/X_0) + sum over jumps of log(pre/post),
so no quadrature ever runs in the hot loop.

Paths move up continuously and jump down, so a level y is first hit during
an upward flow stretch; starting at y itself, the first return requires at
least one jump.  Single-path inspection lives here; batch estimation on
top of these paths lives in ``spectral``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

from . import backend
from ._kernels_py import make_path_ops
from .errors import FlowDomainError
from .model import ModelSpec
from .rng import RngStream


@dataclass(frozen=True)
class WeightedPathState:
    """Tagged-cell state: mass, accumulated log weight, clock, jump history.

    ``jump_history`` records (time, pre-jump mass, post/pre ratio); the log
    weight always satisfies
    log_weight = log(mass/initial mass) - sum(log ratio) to within rounding.
    """

    mass: float
    log_weight: float
    time: float
    jump_history: tuple = field(default_factory=tuple)


def initial_state(x0: float) -> WeightedPathState:
    if not x0 > 0.0:
        raise FlowDomainError(f"x0 must be positive, got {x0}")
    return WeightedPathState(mass=x0, log_weight=0.0, time=0.0)


def step_pdmp(model: ModelSpec, state: WeightedPathState, rng: RngStream,
              horizon: float = math.inf) -> WeightedPathState:
    """Advance to the next jump, or to the horizon if no jump occurs first."""
    ops = make_path_ops(model)
    if ops.bmax <= 0.0 and math.isinf(horizon):
        raise FlowDomainError("fission bound is 0: supply a finite horizon")
    t, x, lw = state.time, state.mass, state.log_weight
    while True:
        dt_c = math.inf if ops.bmax <= 0.0 else rng.exponential(ops.bmax)
        t_next = t + dt_c
        if t_next >= horizon:
            xe = ops.flow_dt(x, horizon - t)
            return replace(state, mass=xe, log_weight=lw + math.log(xe / x),
                           time=horizon)
        xc = ops.flow_dt(x, dt_c)
        lw += math.log(xc / x)
        x, t = xc, t_next
        if rng.uniform() * ops.bmax < ops.B(x):
            r = ops.icdf(rng.uniform())
            k = r if rng.uniform() < r else 1.0 - r
            history = state.jump_history + ((t, x, k),)
            # the weight integral is continuous across the jump
            return WeightedPathState(mass=x * k, log_weight=lw, time=t,
                                     jump_history=history)


@dataclass(frozen=True)
class HittingSample:
    """Outcome of one hitting attempt toward a target mass level."""

    hit: bool
    hitting_time: Optional[float]
    log_weight_at_hit: Optional[float]
    truncated: bool
    integrand: float  # exp(-q H) * weight at H, or 0 when truncated


def sample_hitting(model: ModelSpec, x: float, y: float, q: float,
                   horizon: float, rng: RngStream,
                   backend_choice: Optional[str] = None) -> HittingSample:
    """One weighted hitting attempt from x toward level y.

    From x = y this samples the first *return* (the path leaves y upward
    immediately, so returning requires at least one jump).  Truncation at
    the horizon is reported, not raised; estimators decide its treatment.
    """
    if not (x > 0.0 and y > 0.0):
        raise FlowDomainError("masses must be positive")
    if not horizon > 0.0:
        raise FlowDomainError("horizon must be positive")
    hit, t_end, logw, _x_end, _jumps = backend.hitting_batch(
        model, x, y, horizon, 1, rng, backend=backend_choice)
    if hit[0]:
        h = float(t_end[0])
        lw = float(logw[0])
        return HittingSample(hit=True, hitting_time=h, log_weight_at_hit=lw,
                             truncated=False, integrand=math.exp(-q * h + lw))
    return HittingSample(hit=False, hitting_time=None, log_weight_at_hit=None,
                         truncated=True, integrand=0.0)


def dump_path_records(model: ModelSpec, x0: float, horizon: float, rng: RngStream):
    """Event records (time, mass, log_weight, kind) for one path (debug aid)."""
    from . import _kernels_py

    return _kernels_py.dump_path(make_path_ops(model), x0, horizon, rng)
