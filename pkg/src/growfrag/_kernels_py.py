"""Pure-Python Monte Carlo kernels (reference backend).

The compiled module ``growfrag._kernels`` mirrors every function here
operation-for-operation; given the same bit-generator state the two
backends must produce bit-identical output.  That contract pins down the
draw protocol:

  per thinning candidate:   u_exp, u_accept
  per accepted fission:     u_ratio, u_pick
  per spine fission:        (u_ratio, u_reject)* until accepted, then u_pick

and it also pins the arithmetic: the deterministic flow is always evaluated
as ``phi_inv(phi(x) + dt)`` and hitting times as ``phi(y) - phi(x)``, with
the family formulas written identically in both backends.

Log weights accrue from flow stretches only (log of the mass ratio per
jump-free segment); the resulting telescoped sum equals
log(X_t/X_0) + sum over jumps of log(pre/post), the exact multiplicative
weight, and is continuous across jumps.

Paths of the size-biased tagged cell flow upward continuously and jump
downward, so a level y is hit exactly when a jump-free stretch starting
below y reaches it; starting *at* y therefore yields the first return
after at least one jump.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model as _model
from .rng import RngStream

INF = float("inf")


class PathOps:
    """Scalar operations of one model, as consumed by the path kernels."""

    __slots__ = ("c", "B", "bmax", "icdf", "phi", "phi_inv", "_spec")

    def __init__(self, spec):
        self._spec = spec
        self.c = spec.growth.eval
        self.B = spec.fission.eval
        self.bmax = float(spec.fission.bound)
        self.icdf = spec.kernel.inverse_cdf
        self.phi = spec.growth.antideriv
        self.phi_inv = spec.growth.antideriv_inv

    @property
    def has_exact_flow(self):
        return self.phi is not None and self.phi_inv is not None

    def flow_dt(self, x, dt):
        if self.phi is not None:
            return self.phi_inv(self.phi(x) + dt)
        return _model.flow(self._spec, x, dt)

    def time_to(self, x, y):
        if self.phi is not None:
            return self.phi(y) - self.phi(x)
        return _model.flow_time(self._spec, x, y)


def make_path_ops(spec) -> PathOps:
    return PathOps(spec)


# ---------------------------------------------------------------------------
# hitting / first-return sampling


def _hit_one(ops: PathOps, x0, y, t0, lw0, horizon, rng: RngStream):
    """Run one path from (t0, x0, logw0) until it hits y or the horizon."""
    t, x, lw = t0, x0, lw0
    nj = 0
    bmax = ops.bmax
    while True:
        dt_c = INF if bmax <= 0.0 else -math.log1p(-rng.uniform()) / bmax
        t_next = t + dt_c
        if x < y:
            s = ops.time_to(x, y)
            if t + s <= t_next and t + s <= horizon:
                return 1, t + s, lw + math.log(y / x), y, nj
        if t_next >= horizon:
            xe = ops.flow_dt(x, horizon - t)
            return 0, horizon, lw + math.log(xe / x), xe, nj
        xc = ops.flow_dt(x, dt_c)
        lw += math.log(xc / x)
        x, t = xc, t_next
        if rng.uniform() * bmax < ops.B(x):
            rr = ops.icdf(rng.uniform())
            k = rr if rng.uniform() < rr else 1.0 - rr
            x *= k
            nj += 1


def hitting_batch(ops: PathOps, x, y, horizon, n, rng: RngStream):
    """n independent hitting attempts from x toward level y.

    Returns (hit, t_end, logw, x_end, jumps): for hit paths t_end is the
    hitting time and logw the accumulated log-weight there; for truncated
    paths the state at the horizon is reported so the attempt can be
    continued exactly.
    """
    hit = np.zeros(n, dtype=np.uint8)
    t_end = np.empty(n)
    logw = np.empty(n)
    x_end = np.empty(n)
    jumps = np.zeros(n, dtype=np.int64)
    for i in range(n):
        h, te, lw, xe, nj = _hit_one(ops, x, y, 0.0, 0.0, horizon, rng)
        hit[i] = h
        t_end[i] = te
        logw[i] = lw
        x_end[i] = xe
        jumps[i] = nj
    return hit, t_end, logw, x_end, jumps


def hitting_continue(ops: PathOps, xs, lws, y, t0, horizon, rng: RngStream):
    """Continue truncated hitting attempts from their horizon states."""
    n = len(xs)
    hit = np.zeros(n, dtype=np.uint8)
    t_end = np.empty(n)
    logw = np.empty(n)
    x_end = np.empty(n)
    jumps = np.zeros(n, dtype=np.int64)
    for i in range(n):
        h, te, lw, xe, nj = _hit_one(ops, float(xs[i]), y, t0, float(lws[i]), horizon, rng)
        hit[i] = h
        t_end[i] = te
        logw[i] = lw
        x_end[i] = xe
        jumps[i] = nj
    return hit, t_end, logw, x_end, jumps


# ---------------------------------------------------------------------------
# tagged-cell state at fixed observation times


def path_at_times(ops: PathOps, x0, ts, n, rng: RngStream):
    """(X_t, log weight_t) at each time of ``ts`` for n independent paths."""
    ts = np.asarray(ts, dtype=float)
    m = len(ts)
    xs = np.empty((n, m))
    lws = np.empty((n, m))
    jumps = np.zeros(n, dtype=np.int64)
    bmax = ops.bmax
    for i in range(n):
        t, x, lw = 0.0, x0, 0.0
        k = 0
        nj = 0
        while k < m:
            dt_c = INF if bmax <= 0.0 else -math.log1p(-rng.uniform()) / bmax
            t_next = t + dt_c
            while k < m and ts[k] <= t_next:
                xo = ops.flow_dt(x, ts[k] - t)
                lw += math.log(xo / x)
                x, t = xo, ts[k]
                xs[i, k] = xo
                lws[i, k] = lw
                k += 1
            if k >= m:
                break
            xc = ops.flow_dt(x, t_next - t)
            lw += math.log(xc / x)
            x, t = xc, t_next
            if rng.uniform() * bmax < ops.B(x):
                rr = ops.icdf(rng.uniform())
                kk = rr if rng.uniform() < rr else 1.0 - rr
                x *= kk
                nj += 1
        jumps[i] = nj
    return xs, lws, jumps


# ---------------------------------------------------------------------------
# stopping lines on the tagged cell

LINE_FIXED_TIME = 0
LINE_JUMP_COUNT = 1
LINE_FIRST_ENTRANCE = 2


def stopped_line_batch(ops: PathOps, x0, kind, p1, p2, horizon, n, rng: RngStream):
    """Stop n paths at a simple stopping line.

    kind 0: fixed time p1.  kind 1: p1-th jump.  kind 2: first entrance
    into [p1, p2).  Returns (stopped, T, x_T, logw_T, jumps); the log
    weight is the continuous accumulated weight at T (a jump occurring at
    T itself changes the mass, not the weight).
    """
    stopped = np.zeros(n, dtype=np.uint8)
    t_arr = np.empty(n)
    x_arr = np.empty(n)
    lw_arr = np.empty(n)
    jumps = np.zeros(n, dtype=np.int64)
    for i in range(n):
        s, tt, xx, lw, nj = _stopped_one(ops, x0, kind, p1, p2, horizon, rng)
        stopped[i] = s
        t_arr[i] = tt
        x_arr[i] = xx
        lw_arr[i] = lw
        jumps[i] = nj
    return stopped, t_arr, x_arr, lw_arr, jumps


def _stopped_one(ops: PathOps, x0, kind, p1, p2, horizon, rng: RngStream):
    t, x, lw = 0.0, x0, 0.0
    nj = 0
    bmax = ops.bmax
    if kind == LINE_FIRST_ENTRANCE and p1 <= x0 < p2:
        return 1, 0.0, x0, 0.0, 0
    while True:
        dt_c = INF if bmax <= 0.0 else -math.log1p(-rng.uniform()) / bmax
        t_next = t + dt_c
        t_stop = INF
        if kind == LINE_FIXED_TIME:
            t_stop = p1
        elif kind == LINE_FIRST_ENTRANCE and x < p1:
            t_stop = t + ops.time_to(x, p1)
        if t_stop <= t_next and t_stop <= horizon:
            xo = ops.flow_dt(x, t_stop - t)
            return 1, t_stop, xo, lw + math.log(xo / x), nj
        if t_next >= horizon:
            xe = ops.flow_dt(x, horizon - t)
            return 0, horizon, xe, lw + math.log(xe / x), nj
        xc = ops.flow_dt(x, dt_c)
        lw += math.log(xc / x)
        x, t = xc, t_next
        if rng.uniform() * bmax < ops.B(x):
            rr = ops.icdf(rng.uniform())
            k = rr if rng.uniform() < rr else 1.0 - rr
            x_post = x * k
            nj += 1
            # the weight is continuous across the jump: lw stays as accrued
            if kind == LINE_JUMP_COUNT and nj >= p1:
                return 1, t, x_post, lw, nj
            if kind == LINE_FIRST_ENTRANCE and p1 <= x_post < p2:
                return 1, t, x_post, lw, nj
            x = x_post


# ---------------------------------------------------------------------------
# spine (tilted tagged cell)


@dataclass
class SpineData:
    """Grid data driving the tilted simulation (shared with the compiled kernel).

    ``l_*`` interpolates log ell (harmonic weight over mass) against log
    mass, ``w_*`` interpolates the log of the expected daughter h-sum; both
    are cubic piecewise polynomials on uniform log grids, clamped constant
    outside their knots.
    """

    l_knots: np.ndarray
    l_coefs: np.ndarray
    w_knots: np.ndarray
    w_coefs: np.ndarray
    lmax: float
    btilde_max: float
    op_lo: float
    op_hi: float


def _ppoly_eval(knots, coefs, v):
    """Evaluate a scipy-layout piecewise cubic at v, clamped to the knots."""
    lo = knots[0]
    hi = knots[-1]
    if v <= lo:
        v = lo
    elif v >= hi:
        v = hi
    m = len(knots) - 1
    j = int((v - lo) / (knots[1] - lo))  # uniform knots
    if j >= m:
        j = m - 1
    s = v - knots[j]
    return ((coefs[0, j] * s + coefs[1, j]) * s + coefs[2, j]) * s + coefs[3, j]


def h_eval(sp: SpineData, x):
    """Harmonic weight h(x) = x * ell(x), ell clamped outside its grid."""
    return x * math.exp(_ppoly_eval(sp.l_knots, sp.l_coefs, math.log(x)))


def w_eval(sp: SpineData, x):
    return math.exp(_ppoly_eval(sp.w_knots, sp.w_coefs, math.log(x)))


def spine_batch(ops: PathOps, sp: SpineData, x0, horizon, burn_in,
                edges, edge_phi, max_returns, rng: RngStream):
    """One spine replicate: exact bin occupation after burn-in plus returns.

    Occupation times are exact flow durations between bin edges (computed
    from the phi values in ``edge_phi``).  The replicate stops early if the
    mass leaves [op_lo, op_hi]; callers exclude escaped replicates and
    report the count.

    Returns (occ[2, nbins], returns, n_returns_total, escaped, t_final,
    jumps, sup_mass); occ[0] covers (burn_in, t_mid], occ[1] the rest.
    """
    nbins = len(edges) - 1
    occ = np.zeros((2, nbins))
    rets = np.empty(max_returns)
    n_ret = 0
    t_mid = burn_in + 0.5 * (horizon - burn_in)
    log_e0 = math.log(edges[0])
    dlog = math.log(edges[1]) - log_e0
    t, x = 0.0, x0
    nj = 0
    sup_mass = x0
    last_cross = -1.0
    escaped = 0
    bmax = sp.btilde_max

    def accumulate(x1, x2, t1):
        # time in each bin while flowing x1 -> x2 starting at absolute t1
        t2 = t1 + (ops.phi(x2) - ops.phi(x1))
        if t2 <= burn_in:
            return
        if t1 < burn_in:
            x1 = ops.phi_inv(ops.phi(x1) + (burn_in - t1))
            t1 = burn_in
        i1 = min(max(int((math.log(x1) - log_e0) / dlog), 0), nbins - 1)
        i2 = min(max(int((math.log(x2) - log_e0) / dlog), 0), nbins - 1)
        tcur = t1
        phi1 = ops.phi(x1)
        for j in range(i1, i2 + 1):
            seg_hi_phi = edge_phi[j + 1] if j < i2 else ops.phi(x2)
            dt_bin = seg_hi_phi - phi1
            if dt_bin > 0.0:
                half = 0 if tcur < t_mid else 1
                if tcur < t_mid < tcur + dt_bin:
                    occ[0, j] += t_mid - tcur
                    occ[1, j] += tcur + dt_bin - t_mid
                else:
                    occ[half, j] += dt_bin
                tcur += dt_bin
                phi1 = seg_hi_phi

    while t < horizon:
        dt_c = INF if bmax <= 0.0 else -math.log1p(-rng.uniform()) / bmax
        t_next = min(t + dt_c, horizon)
        x_next = ops.flow_dt(x, t_next - t)
        if x_next > sp.op_hi:
            # escape: account the in-range part, then bail out
            accumulate(x, sp.op_hi, t)
            escaped = 1
            t = t + ops.time_to(x, sp.op_hi)
            x = sp.op_hi
            break
        accumulate(x, x_next, t)
        if x < x0 <= x_next:
            tc = t + ops.time_to(x, x0)
            if last_cross >= 0.0 and tc >= burn_in and last_cross >= burn_in:
                if n_ret < max_returns:
                    rets[n_ret] = tc - last_cross
                n_ret += 1
            last_cross = tc
        x, t = x_next, t_next
        if x > sup_mass:
            sup_mass = x
        if t >= horizon:
            break
        bt = w_eval(sp, x) * ops.B(x) / h_eval(sp, x)
        if rng.uniform() * bmax < bt:
            while True:
                rr = ops.icdf(rng.uniform())
                hr = h_eval(sp, rr * x)
                ho = h_eval(sp, (1.0 - rr) * x)
                if rng.uniform() * (sp.lmax * x) < hr + ho:
                    break
            x_post = rr * x if rng.uniform() * (hr + ho) < hr else (1.0 - rr) * x
            nj += 1
            x = x_post
            if x < sp.op_lo:
                escaped = 1
                break
    return occ, rets[:min(n_ret, max_returns)].copy(), n_ret, escaped, t, nj, sup_mass


# ---------------------------------------------------------------------------
# single-path dump (debugging aid behind the CLI flag)


def dump_path(ops: PathOps, x0, horizon, rng: RngStream):
    """Event records (time, mass, log_weight, kind) for one tagged-cell path."""
    records = [(0.0, x0, 0.0, "start")]
    t, x, lw = 0.0, x0, 0.0
    bmax = ops.bmax
    while True:
        dt_c = INF if bmax <= 0.0 else -math.log1p(-rng.uniform()) / bmax
        t_next = t + dt_c
        if t_next >= horizon:
            xe = ops.flow_dt(x, horizon - t)
            records.append((horizon, xe, lw + math.log(xe / x), "horizon"))
            return records
        xc = ops.flow_dt(x, dt_c)
        lw += math.log(xc / x)
        x, t = xc, t_next
        if rng.uniform() * bmax < ops.B(x):
            rr = ops.icdf(rng.uniform())
            k = rr if rng.uniform() < rr else 1.0 - rr
            records.append((t, x, lw, "pre_jump"))
            x *= k
            records.append((t, x, lw, "jump"))
