"""Verification suites tying population averages to tagged-cell functionals.

Every check states its statistic and criterion in the report and decides
pass/fail from those alone; two-estimator comparisons use the universal
3-combined-stderr rule, and checks go inconclusive (not fail) when cap or
truncation rates exceed 1 percent, to separate statistical noise from
genuine violations.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional, Sequence

import numpy as np

from . import backend as _backend
from .branching import StoppingLine, snapshot_functionals
from .branching import freeze_at as _freeze_at
from .errors import ExplosionError
from .model import ModelSpec
from .rng import RngStream
from .runner import map_batches
from .spectral import SpectralSolution
from .spine import SpineModel

SIGMAS = 3.0
CAP_RATE_INCONCLUSIVE = 0.01


@dataclass
class CheckReport:
    """Outcome of one verification check.

    The verdict is a pure function of the stated statistics and the stated
    criterion; ``details`` carries the per-item numbers for inspection.
    """

    name: str
    inputs_digest: str
    statistics: dict
    criterion: str
    verdict: str  # pass | fail | inconclusive
    runtime_s: float
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "inputs_digest": self.inputs_digest,
            "statistics": _jsonable(self.statistics),
            "criterion": self.criterion,
            "verdict": self.verdict,
            "runtime_s": self.runtime_s,
            "details": _jsonable(self.details),
        }

    def render_text(self) -> str:
        lines = [f"[{self.verdict.upper():12s}] {self.name}  ({self.runtime_s:.2f}s)",
                 f"    criterion: {self.criterion}"]
        for k, v in self.statistics.items():
            lines.append(f"    {k}: {_fmt(v)}")
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _digest(**kwargs) -> str:
    blob = json.dumps(_jsonable(kwargs), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- standard test functions -------------------------------------------------


def f_one(m):
    return np.ones_like(np.asarray(m, dtype=float))


def f_identity(m):
    return np.asarray(m, dtype=float)


def f_square(m):
    return np.asarray(m, dtype=float) ** 2


def _bump(lo, hi, scale, m):
    m = np.asarray(m, dtype=float)
    out = np.zeros_like(m)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        u = 2.0 * np.log(m / lo) / math.log(hi / lo) - 1.0
        inside = np.abs(u) < 1.0
        out[inside] = scale * np.exp(1.0 - 1.0 / (1.0 - u[inside] ** 2))
    return out


def make_bump(lo: float = 0.5, hi: float = 2.0, scale: float = 1.0) -> Callable:
    """Smooth bump supported on [lo, hi], peak value ``scale``."""
    return partial(_bump, lo, hi, scale)


def standard_test_functions(bump_lo: float = 0.5, bump_hi: float = 2.0) -> dict:
    return {"one": f_one, "identity": f_identity, "square": f_square,
            "bump": make_bump(bump_lo, bump_hi)}


# -- shared workers -----------------------------------------------------------


def _path_worker(model, x0, ts, n, seed, tag, batch, backend_choice):
    stream = RngStream(seed, tag, batch)
    xs, lws, _ = _backend.path_at_times(model, x0, np.asarray(ts, float), n, stream,
                                        backend=backend_choice)
    return xs, lws


def _path_functionals(model, x0, ts, n, seed, tag, workers, backend_choice,
                      batch_size=8192):
    jobs = []
    left, bi = n, 0
    while left > 0:
        bn = min(batch_size, left)
        jobs.append((model, x0, ts, bn, seed, tag, bi, backend_choice))
        left -= bn
        bi += 1
    outs = map_batches(_path_worker, jobs, workers)
    xs = np.concatenate([o[0] for o in outs], axis=0)
    lws = np.concatenate([o[1] for o in outs], axis=0)
    return xs, lws


def _stopped_worker(model, x0, kind, p1, p2, horizon, n, seed, tag, batch,
                    backend_choice):
    stream = RngStream(seed, tag, batch)
    return _backend.stopped_line_batch(model, x0, kind, p1, p2, horizon, n, stream,
                                       backend=backend_choice)


def _freeze_worker(model, x0, line, horizon, cap, fs, n, seed, tag, batch):
    # horizon-capped line: unfrozen individuals count at their horizon mass,
    # matching the truncated tagged-cell paths on the other side exactly
    rng = RngStream(seed, tag, batch)
    vals = np.full((n, len(fs)), np.nan)
    unfrozen = 0
    capped = 0
    for i in range(n):
        try:
            fm = _freeze_at(model, x0, line, horizon, cap=cap, rng=rng)
        except ExplosionError:
            capped += 1
            continue
        unfrozen += len(fm.unfrozen)
        masses = np.array([m for _, _, m in fm.atoms]
                          + [m for _, m in fm.unfrozen])
        for k, f in enumerate(fs):
            vals[i, k] = float(np.sum(f(masses))) if len(masses) else 0.0
    return vals, unfrozen, capped


def _two_estimator_rows(names, lhs_mean, lhs_se, rhs_mean, rhs_se):
    rows = []
    worst = 0.0
    for key, lm, ls, rm, rs in zip(names, lhs_mean, lhs_se, rhs_mean, rhs_se):
        comb = math.hypot(ls, rs)
        z = abs(lm - rm) / comb if comb > 0 else (0.0 if lm == rm else math.inf)
        worst = max(worst, z)
        rows.append({"case": key, "lhs": lm, "lhs_se": ls, "rhs": rm, "rhs_se": rs,
                     "z": z})
    return rows, worst


# -- checks -------------------------------------------------------------------


def many_to_one_check(model: ModelSpec, x0: float, fs: Optional[dict] = None,
                      ts: Sequence[float] = (0.5, 1.0, 2.0), n: int = 100000,
                      seed: int = 0, workers: int = 1, cap: int = 1_000_000,
                      backend_choice: Optional[str] = None) -> CheckReport:
    """Population average versus weighted tagged-cell average at fixed times.

    Compares E<Z_t, f> (branching simulation) against
    x0 E[f(X_t)/X_t * weight_t] (tagged cell) for every (f, t) pair.
    """
    t_start = time.time()
    fs = fs or standard_test_functions()
    ts = [float(t) for t in ts]
    names = list(fs)
    fns = [fs[k] for k in names]

    pop_vals, capped = snapshot_functionals(model, x0, ts, fns, n, seed,
                                            tag="check.m2o.pop", workers=workers,
                                            cap=cap)
    xs, lws = _path_functionals(model, x0, ts, n, seed, "check.m2o.pdmp",
                                workers, backend_choice)
    weights = x0 * np.exp(lws) / xs  # (n, T)

    rows = []
    worst = 0.0
    ok_rows = ~np.isnan(pop_vals[:, 0, 0])
    n_ok = int(ok_rows.sum())
    for j, t in enumerate(ts):
        for k, key in enumerate(names):
            lhs = pop_vals[ok_rows, j, k]
            rhs = weights[:, j] * fns[k](xs[:, j])
            row, z = _two_estimator_rows(
                [f"f={key}, t={t:g}"],
                [float(lhs.mean())], [float(lhs.std(ddof=1) / math.sqrt(len(lhs)))],
                [float(rhs.mean())], [float(rhs.std(ddof=1) / math.sqrt(len(rhs)))])
            rows.extend(row)
            worst = max(worst, z)

    cap_rate = capped / max(n, 1)
    verdict = "pass" if worst <= SIGMAS else "fail"
    if cap_rate > CAP_RATE_INCONCLUSIVE:
        verdict = "inconclusive"
    return CheckReport(
        name="many_to_one",
        inputs_digest=_digest(model=model.describe(), x0=x0, ts=ts, n=n, seed=seed),
        statistics={"worst_z": worst, "cap_rate": cap_rate, "n": n,
                    "population_rows_used": n_ok},
        criterion=f"|LHS - RHS| <= {SIGMAS:g} combined stderr for every (f, t); "
                  f"inconclusive if cap rate > {CAP_RATE_INCONCLUSIVE:g}",
        verdict=verdict,
        runtime_s=time.time() - t_start,
        details={"rows": rows},
    )


_LINE_KIND_CODE = {"fixed_time": 0, "jump_count": 1, "first_entrance": 2}


def stopping_line_check(model: ModelSpec, x0: float, line: StoppingLine,
                        fs: Optional[dict] = None, n: int = 50000,
                        horizon: float = 16.0, seed: int = 0, workers: int = 1,
                        cap: int = 1_000_000,
                        backend_choice: Optional[str] = None) -> CheckReport:
    """Frozen population measure versus the stopped weighted tagged cell.

    Both sides use the horizon-capped line min(T, horizon), itself a simple
    stopping line, so the comparison is exact with no truncation mismatch:
    lineages the horizon cut off contribute at their horizon mass, and
    unstopped tagged-cell paths contribute their horizon state.
    """
    t_start = time.time()
    fs = fs or {"one": f_one, "identity": f_identity}
    names = list(fs)
    fns = [fs[k] for k in names]

    batch_size = 1024
    jobs = []
    left, bi = n, 0
    while left > 0:
        bn = min(batch_size, left)
        jobs.append((model, x0, line, horizon, cap, fns, bn, seed,
                     "check.line.pop", bi))
        left -= bn
        bi += 1
    outs = map_batches(_freeze_worker, jobs, workers)
    pop_vals = np.concatenate([o[0] for o in outs], axis=0)
    unfrozen = sum(o[1] for o in outs)
    capped = sum(o[2] for o in outs)

    kind = _LINE_KIND_CODE[line.kind]
    p1, p2 = {"fixed_time": (line.t, 0.0), "jump_count": (float(line.k), 0.0),
              "first_entrance": (line.lo, line.hi)}[line.kind]
    jobs = []
    left, bi = n, 0
    while left > 0:
        bn = min(8192, left)
        jobs.append((model, x0, kind, p1, p2, horizon, bn, seed,
                     "check.line.pdmp", bi, backend_choice))
        left -= bn
        bi += 1
    outs = map_batches(_stopped_worker, jobs, workers)
    stopped = np.concatenate([o[0] for o in outs]).astype(bool)
    xt = np.concatenate([o[2] for o in outs])
    lwt = np.concatenate([o[3] for o in outs])

    ok_rows = ~np.isnan(pop_vals[:, 0])
    rows = []
    worst = 0.0
    for k, key in enumerate(names):
        lhs = pop_vals[ok_rows, k]
        rhs = x0 * fns[k](xt) * np.exp(lwt) / xt
        row, z = _two_estimator_rows(
            [f"f={key}"],
            [float(lhs.mean())], [float(lhs.std(ddof=1) / math.sqrt(len(lhs)))],
            [float(rhs.mean())], [float(rhs.std(ddof=1) / math.sqrt(len(rhs)))])
        rows.extend(row)
        worst = max(worst, z)

    cap_rate = capped / max(n, 1)
    trunc_rate = 1.0 - stopped.mean()
    unfrozen_rate = unfrozen / max(n, 1)
    verdict = "pass" if worst <= SIGMAS else "fail"
    if cap_rate > CAP_RATE_INCONCLUSIVE:
        verdict = "inconclusive"
    return CheckReport(
        name=f"stopping_line[{line.kind}]",
        inputs_digest=_digest(model=model.describe(), x0=x0, line=str(line), n=n,
                              seed=seed),
        statistics={"worst_z": worst, "cap_rate": cap_rate,
                    "pdmp_unstopped_rate": trunc_rate,
                    "population_unfrozen_per_run": unfrozen_rate},
        criterion=f"horizon-capped line: |LHS - RHS| <= {SIGMAS:g} combined "
                  f"stderr per f; inconclusive if cap rate exceeds "
                  f"{CAP_RATE_INCONCLUSIVE:g}",
        verdict=verdict,
        runtime_s=time.time() - t_start,
        details={"rows": rows},
    )


def martingale_check(model: ModelSpec, solution: SpectralSolution, x0: float,
                     ts: Sequence[float] = (1.0, 2.0, 4.0, 8.0), n: int = 10000,
                     seed: int = 0, workers: int = 1, cap: int = 1_000_000,
                     plateau_tol: float = 0.10,
                     condition_verdict: Optional[str] = None) -> CheckReport:
    """Constancy in t of the discounted h-weighted population mean.

    Checks E[W_t] = h(x0) at every t (W_t = e^{-lambda t} <Z_t, h>) and a
    second-moment plateau between the two largest times.  Informational
    when the tail condition did not pass.
    """
    t_start = time.time()
    lam = solution.root.lambda_hat
    interp = solution.interpolator()
    ts = sorted(float(t) for t in ts)

    vals, capped = snapshot_functionals(model, x0, ts, [interp.h], n, seed,
                                        tag="check.mart.pop", workers=workers,
                                        cap=cap)
    ok = ~np.isnan(vals[:, 0, 0])
    w = vals[ok, :, 0] * np.exp(-lam * np.asarray(ts))[None, :]
    n_ok = int(ok.sum())
    h0 = float(interp.h(x0))

    rows = []
    worst = 0.0
    for j, t in enumerate(ts):
        mean = float(w[:, j].mean())
        se = float(w[:, j].std(ddof=1) / math.sqrt(n_ok))
        z = abs(mean - h0) / se if se > 0 else math.inf
        worst = max(worst, z)
        rows.append({"t": t, "mean_W": mean, "se": se, "target": h0, "z": z})

    m2_a = float((w[:, -2] ** 2).mean())
    m2_b = float((w[:, -1] ** 2).mean())
    se_a = float((w[:, -2] ** 2).std(ddof=1) / math.sqrt(n_ok))
    se_b = float((w[:, -1] ** 2).std(ddof=1) / math.sqrt(n_ok))
    drift = abs(m2_b - m2_a) / m2_a
    drift_allow = plateau_tol + SIGMAS * math.hypot(se_a, se_b) / m2_a
    plateau_ok = drift <= drift_allow

    cap_rate = capped / max(n, 1)
    verdict = "pass" if worst <= SIGMAS and plateau_ok else "fail"
    if cap_rate > CAP_RATE_INCONCLUSIVE:
        verdict = "inconclusive"
    details = {"rows": rows, "m2_last_two": [m2_a, m2_b],
               "m2_drift": drift, "m2_drift_allowance": drift_allow}
    if condition_verdict is not None and condition_verdict != "pass":
        details["informational"] = ("tail condition verdict was "
                                    f"{condition_verdict}; report informational")
    return CheckReport(
        name="intrinsic_martingale",
        inputs_digest=_digest(model=model.describe(), x0=x0, ts=ts, n=n, seed=seed,
                              lam=lam),
        statistics={"worst_z": worst, "m2_drift": drift,
                    "m2_drift_allowance": drift_allow, "cap_rate": cap_rate,
                    "h_x0": h0},
        criterion=f"E[W_t] = h(x0) within {SIGMAS:g} stderr at every t; second "
                  f"moment drift between the two largest t <= {plateau_tol:.0%} "
                  "plus CI slack",
        verdict=verdict,
        runtime_s=time.time() - t_start,
        details=details,
    )


def strong_malthus_check(model: ModelSpec, solution: SpectralSolution,
                         nu_integral: Callable[[Callable], float], x0: float,
                         fs: Optional[dict] = None,
                         ts: Sequence[float] = (1.0, 2.0, 4.0, 8.0),
                         n: int = 10000, seed: int = 0, workers: int = 1,
                         cap: int = 1_000_000, final_tol: float = 0.05) -> CheckReport:
    """Pathwise convergence of e^{-lambda t} <Z_t, f> toward <nu, f> W_t.

    ``nu_integral`` maps a test function to its profile integral <nu, f>.
    Requires mean |R_t| to decrease along the time grid and the final
    mean |R_t| / mean W_t to drop below ``final_tol``; f should satisfy
    sup f/h <= 1 (use ``normalize_against_h``).
    """
    t_start = time.time()
    lam = solution.root.lambda_hat
    interp = solution.interpolator()
    fs = fs or {"bump": make_bump()}
    ts = sorted(float(t) for t in ts)
    names = list(fs)
    fns = [fs[k] for k in names]

    vals, capped = snapshot_functionals(model, x0, ts, fns + [interp.h], n, seed,
                                        tag="check.malthus.pop", workers=workers,
                                        cap=cap)
    ok = ~np.isnan(vals[:, 0, 0])
    n_ok = int(ok.sum())
    disc = np.exp(-lam * np.asarray(ts))[None, :]
    w = vals[ok, :, -1] * disc

    rows = []
    all_pass = True
    for k, key in enumerate(names):
        nu_f = float(nu_integral(fns[k]))
        zf = vals[ok, :, k] * disc
        resid = np.abs(zf - nu_f * w)
        means = resid.mean(axis=0)
        final_ratio = float(means[-1] / w[:, -1].mean())
        decreasing = bool(np.all(np.diff(means) <= 1e-12 + 0.05 * means[:-1]))
        ok_f = final_ratio <= final_tol and decreasing
        all_pass = all_pass and ok_f
        rows.append({"f": key, "nu_f": nu_f,
                     "mean_abs_residual": means.tolist(),
                     "final_ratio": final_ratio, "decreasing": decreasing,
                     "pass": ok_f})

    cap_rate = capped / max(n, 1)
    verdict = "pass" if all_pass else "fail"
    if cap_rate > CAP_RATE_INCONCLUSIVE:
        verdict = "inconclusive"
    return CheckReport(
        name="strong_malthus",
        inputs_digest=_digest(model=model.describe(), x0=x0, ts=ts, n=n, seed=seed,
                              lam=lam),
        statistics={"final_ratios": {r["f"]: r["final_ratio"] for r in rows},
                    "cap_rate": cap_rate, "n_used": n_ok},
        criterion=f"mean|e^(-lt)<Z,f> - <nu,f> W_t| decreasing in t and final "
                  f"ratio to mean W <= {final_tol:.0%}",
        verdict=verdict,
        runtime_s=time.time() - t_start,
        details={"rows": rows, "ts": list(ts)},
    )


def normalize_against_h(f: Callable, interp, lo: float, hi: float,
                        n_grid: int = 512) -> Callable:
    """Rescale f (down only) so that sup f/h <= 1 on [lo, hi]."""
    grid = np.geomspace(lo, hi, n_grid)
    ratio = float(np.max(f(grid) / interp.h(grid)))
    return partial(_scaled, f, 1.0 / ratio if ratio > 1.0 else 1.0)


def _scaled(f, s, m):
    return s * f(m)


# -- positivity criterion for the exponent ------------------------------------


def criterion_check_prop61(model: ModelSpec,
                           q_grid: Optional[Sequence[float]] = None,
                           x_grid: Optional[Sequence[float]] = None) -> CheckReport:
    """Search for exponent-positivity certificates on each mass tail.

    Large-mass side: q c(x)/x + B(x) E[r^q - 1] <= 0 for all grid x >= some
    x_inf.  Small-mass side: -q c(x)/x + B(x) E[(1-r)^{-q} - 1] <= 0 for all
    grid x <= some x_0.  Joint success certifies a positive Malthus
    exponent up to grid resolution; per-side failures are reported as such.
    """
    t_start = time.time()
    if q_grid is None:
        q_grid = np.geomspace(1.0 / 128.0, 16.0, 23)
    if x_grid is None:
        x_grid = np.geomspace(1e-8, 1e8, 257)
    q_grid = np.asarray(q_grid, float)
    x_grid = np.asarray(x_grid, float)

    ratio = np.array([model.growth.eval(float(x)) / x for x in x_grid])
    b_vals = np.array([model.fission.eval(float(x)) for x in x_grid])

    def find_inf_side():
        for q in q_grid:
            mom = model.kernel.expectation(lambda r: r ** q - 1.0)
            g = q * ratio + b_vals * mom
            ok = g <= 0.0
            # need a suffix of the grid entirely satisfying the inequality
            idx = len(ok) - 1
            while idx >= 0 and ok[idx]:
                idx -= 1
            if idx < len(ok) - 1:
                return float(q), float(x_grid[idx + 1]), float(mom)
        return None

    def find_zero_side():
        for q in q_grid:
            mom = model.kernel.expectation(lambda r: (1.0 - r) ** (-q) - 1.0)
            g = -q * ratio + b_vals * mom
            ok = g <= 0.0
            idx = 0
            while idx < len(ok) and ok[idx]:
                idx += 1
            if idx > 0:
                return float(q), float(x_grid[idx - 1]), float(mom)
        return None

    inf_side = find_inf_side()
    zero_side = find_zero_side()
    verdict = "pass" if inf_side and zero_side else "fail"
    stats = {}
    details = {"q_grid": q_grid.tolist(),
               "x_range": [float(x_grid[0]), float(x_grid[-1])]}
    if inf_side:
        stats["q_inf"], stats["x_inf"], _ = inf_side
        details["inf_side_moment"] = inf_side[2]
    else:
        stats["inf_side"] = "no certificate found"
    if zero_side:
        stats["q_0"], stats["x_0"], _ = zero_side
        details["zero_side_moment"] = zero_side[2]
    else:
        stats["zero_side"] = "no certificate found"
    if verdict == "pass":
        details["conclusion"] = "exponent positive, certified up to grid resolution"
    return CheckReport(
        name="exponent_positivity_criterion",
        inputs_digest=_digest(model=model.describe()),
        statistics=stats,
        criterion="both tail inequalities hold beyond some grid threshold "
                  "for some q > 0 (grid evidence only)",
        verdict=verdict,
        runtime_s=time.time() - t_start,
        details=details,
    )


# -- tightness ----------------------------------------------------------------


def _spine_marginal_worker(spine_model, x0, ts, n, seed, tag, batch):
    """Tilted-path masses at fixed times (python path; n is modest)."""
    from ._kernels_py import h_eval, make_path_ops, w_eval

    ops = make_path_ops(spine_model.base)
    sp = spine_model.data
    rng = RngStream(seed, tag, batch)
    ts = list(ts)
    out = np.empty((n, len(ts)))
    for i in range(n):
        t, x = 0.0, x0
        k = 0
        while k < len(ts):
            dt_c = math.inf if sp.btilde_max <= 0.0 else rng.exponential(sp.btilde_max)
            t_next = t + dt_c
            while k < len(ts) and ts[k] <= t_next:
                out[i, k] = ops.flow_dt(x, ts[k] - t)
                k += 1
            if k >= len(ts):
                break
            x = ops.flow_dt(x, dt_c)
            t = t_next
            bt = w_eval(sp, x) * ops.B(x) / h_eval(sp, x)
            if rng.uniform() * sp.btilde_max < bt:
                while True:
                    rr = ops.icdf(rng.uniform())
                    hr = h_eval(sp, rr * x)
                    ho = h_eval(sp, (1.0 - rr) * x)
                    if rng.uniform() * (sp.lmax * x) < hr + ho:
                        break
                x = rr * x if rng.uniform() * (hr + ho) < hr else (1.0 - rr) * x
    return out


def tightness_probe(model: ModelSpec, solution: SpectralSolution,
                    spine_model: SpineModel, x0: float,
                    ts: Sequence[float] = (1.0, 2.0, 4.0, 8.0),
                    eps: float = 0.05, n: int = 10000, n_spine: int = 4000,
                    seed: int = 0, workers: int = 1,
                    cap: int = 1_000_000) -> CheckReport:
    """Find a compact mass window holding all but eps of the h-weighted mass.

    Candidate windows come from quantiles of the h-weighted profile; the
    population statistic e^{-lambda t} E[sum h(Z_t) outside] / h(x0) is
    compared with the tilted-path marginal P(spine outside), which is the
    same quantity in disguise, and the smallest window achieving <= eps
    across the time set is reported.
    """
    t_start = time.time()
    lam = solution.root.lambda_hat
    interp = solution.interpolator()
    ts = sorted(float(t) for t in ts)
    nu = solution.nu_grid
    if nu is None:
        raise ValueError("tightness probe needs a profile in the solution")

    pi_density = nu.nu * interp.h(nu.y)
    cdf = np.concatenate([[0.0], np.cumsum(
        0.5 * (pi_density[1:] + pi_density[:-1]) * np.diff(nu.y))])
    cdf /= cdf[-1]
    qs = (0.10, 0.05, 0.025, 0.01, 0.005)
    windows = []
    for q in qs:
        lo = float(np.interp(q / 2.0, cdf, nu.y))
        hi = float(np.interp(1.0 - q / 2.0, cdf, nu.y))
        windows.append((lo, hi))

    fns = [partial(_h_outside, interp, lo, hi) for lo, hi in windows]
    vals, capped = snapshot_functionals(model, x0, ts, fns, n, seed,
                                        tag="check.tight.pop", workers=workers,
                                        cap=cap)
    ok = ~np.isnan(vals[:, 0, 0])
    h0 = float(interp.h(x0))
    disc = np.exp(-lam * np.asarray(ts))[None, :]

    jobs = [(spine_model, x0, ts, n_spine, seed, "check.tight.spine", 0)]
    spine_masses = map_batches(_spine_marginal_worker, jobs, 1)[0]

    rows = []
    best = None
    worst_z = 0.0
    for widx, (lo, hi) in enumerate(windows):
        pop_stat = vals[ok, :, widx] * disc / h0
        pop_mean = pop_stat.mean(axis=0)
        pop_se = pop_stat.std(axis=0, ddof=1) / math.sqrt(int(ok.sum()))
        outside = ((spine_masses < lo) | (spine_masses >= hi)).astype(float)
        sp_mean = outside.mean(axis=0)
        sp_se = outside.std(axis=0, ddof=1) / math.sqrt(n_spine)
        z = np.max(np.abs(pop_mean - sp_mean) / np.hypot(pop_se, sp_se))
        worst_z = max(worst_z, float(z))
        achieves = bool(np.all(pop_mean <= eps))
        rows.append({"window": [lo, hi], "pop_outside": pop_mean.tolist(),
                     "spine_outside": sp_mean.tolist(), "agreement_z": float(z),
                     "achieves_eps": achieves})
        if achieves and best is None:
            best = (lo, hi)

    cap_rate = capped / max(n, 1)
    verdict = "pass" if best is not None and worst_z <= SIGMAS else "fail"
    if cap_rate > CAP_RATE_INCONCLUSIVE:
        verdict = "inconclusive"
    return CheckReport(
        name="tightness_probe",
        inputs_digest=_digest(model=model.describe(), x0=x0, ts=ts, eps=eps,
                              seed=seed),
        statistics={"eps": eps, "smallest_window": list(best) if best else None,
                    "two_estimator_worst_z": worst_z, "cap_rate": cap_rate},
        criterion=f"some candidate window keeps the discounted h-mass outside "
                  f"below {eps:g} for every t, and the population and "
                  f"tilted-path estimates agree within {SIGMAS:g} stderr",
        verdict=verdict,
        runtime_s=time.time() - t_start,
        details={"rows": rows},
    )


def _h_outside(interp, lo, hi, m):
    m = np.asarray(m, dtype=float)
    out = interp.h(m)
    inside = (m >= lo) & (m < hi)
    out = np.where(inside, 0.0, out)
    return out
