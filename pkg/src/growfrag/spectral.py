"""Estimation of the Malthus exponent, harmonic weight and asymptotic profile.

Everything is built on weighted first-passage samples of the tagged cell.
One batch of hitting attempts from x toward y determines the return
transform  L(q) = E[exp(-q H) * weight at H; H finite]  for *every* q at
once (q only enters through the discount), so a single growing batch
serves the whole root search: that is the common-random-numbers design,
and it makes q -> Lhat(q) exactly nonincreasing and convex pathwise.

The Malthus exponent is the root of L(q) = 1 for the first-return
transform at a reference mass.  The harmonic weight is h(x) = x * L_{x,
x0}(lambda) and the profile density is 1/(h(y) c(y) |L'_{y,y}(lambda)|),
with the slope taken by central finite differences on the shared batch.

Truncated attempts are accounted by envelopes: they contribute nothing to
the lower envelope, and for q >= gamma (the sup of c(x)/x) each truncated
path contributes at most exp(-q T) * weight at T to the upper envelope.
Below gamma no upper envelope exists; the search then extends the horizon
geometrically and only trusts a "< 1" verdict once the truncated fraction
is negligible, recording that assumption in the result flags.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import backend as _backend
from .errors import IllConditionedDerivativeError, NoRootError
from .model import ModelSpec
from .rng import RngStream
from .runner import map_batches

DEFAULT_BATCH = 8192
STDERR_SIGMAS = 3.0


@dataclass(frozen=True)
class LaplaceEstimate:
    """Monte Carlo estimate of the weighted hitting transform at one q."""

    q: float
    x: float
    y: float
    mean: float
    stderr: float
    n: int
    truncated_fraction: float
    envelope: Optional[tuple[float, float]]  # (lower, upper); None above gamma only
    horizon: float

    @property
    def lower(self) -> float:
        return self.envelope[0] if self.envelope else self.mean

    @property
    def upper(self) -> Optional[float]:
        return self.envelope[1] if self.envelope else None


def _hit_worker(model, x, y, horizon, n, seed, tag, batch_idx, round_, backend_choice):
    stream = RngStream(seed, tag, batch_idx, round_)
    return _backend.hitting_batch(model, x, y, horizon, n, stream, backend=backend_choice)


def _cont_worker(model, xs, lws, y, t0, horizon, seed, tag, batch_idx, round_,
                 backend_choice):
    stream = RngStream(seed, tag, batch_idx, round_)
    return _backend.hitting_continue(model, xs, lws, y, t0, horizon, stream,
                                     backend=backend_choice)


class HittingBatch:
    """A growing batch of weighted hitting attempts from x toward y.

    Supports extension in sample count (fresh paths) and in horizon
    (truncated paths are continued exactly from their stored states).
    Batches are keyed by (seed, tag, batch index, round), so results are
    identical for any worker count.
    """

    def __init__(self, model: ModelSpec, x: float, y: float, horizon: float,
                 seed: int, tag: str, workers: int = 1,
                 backend_choice: Optional[str] = None,
                 batch_size: int = DEFAULT_BATCH):
        self.model = model
        self.x = float(x)
        self.y = float(y)
        self.horizon = float(horizon)
        self.gamma = model.gamma()
        self.seed = int(seed)
        self.tag = tag
        self.workers = workers
        self.backend_choice = backend_choice
        self.batch_size = batch_size
        self.rounds = 0
        self.cont_rounds = 0
        self.hit = np.zeros(0, dtype=np.uint8)
        self.t_end = np.zeros(0)
        self.logw = np.zeros(0)
        self.x_end = np.zeros(0)

    @classmethod
    def create(cls, model, x, y, horizon, n, seed, tag, workers=1,
               backend_choice=None, batch_size=DEFAULT_BATCH) -> "HittingBatch":
        batch = cls(model, x, y, horizon, seed, tag, workers, backend_choice, batch_size)
        batch.extend(n)
        return batch

    @property
    def n(self) -> int:
        return len(self.hit)

    @property
    def truncated_fraction(self) -> float:
        return float(1.0 - self.hit.mean()) if self.n else 1.0

    def extend(self, n_extra: int) -> None:
        sizes = []
        left = n_extra
        while left > 0:
            sizes.append(min(self.batch_size, left))
            left -= sizes[-1]
        jobs = [(self.model, self.x, self.y, self.horizon, bn, self.seed, self.tag,
                 bi, self.rounds, self.backend_choice) for bi, bn in enumerate(sizes)]
        outs = map_batches(_hit_worker, jobs, self.workers)
        self.rounds += 1
        self.hit = np.concatenate([self.hit] + [o[0] for o in outs])
        self.t_end = np.concatenate([self.t_end] + [o[1] for o in outs])
        self.logw = np.concatenate([self.logw] + [o[2] for o in outs])
        self.x_end = np.concatenate([self.x_end] + [o[3] for o in outs])

    def extend_horizon(self, new_horizon: float) -> None:
        """Continue every truncated attempt exactly up to the new horizon."""
        if new_horizon <= self.horizon:
            return
        idx = np.flatnonzero(self.hit == 0)
        t0 = self.horizon
        self.horizon = float(new_horizon)
        if len(idx) == 0:
            return
        chunks = [idx[i:i + self.batch_size] for i in range(0, len(idx), self.batch_size)]
        jobs = [(self.model, self.x_end[ch], self.logw[ch], self.y, t0, self.horizon,
                 self.seed, self.tag + ".cont", bi, self.cont_rounds, self.backend_choice)
                for bi, ch in enumerate(chunks)]
        outs = map_batches(_cont_worker, jobs, self.workers)
        self.cont_rounds += 1
        for ch, out in zip(chunks, outs):
            hit, t_end, logw, x_end, _ = out
            self.hit[ch] = hit
            self.t_end[ch] = t_end
            self.logw[ch] = logw
            self.x_end[ch] = x_end

    # -- estimation on the shared paths (q enters only via the discount)

    def evaluate(self, q: float) -> LaplaceEstimate:
        hit = self.hit.astype(bool)
        vals = np.zeros(self.n)
        with np.errstate(over="ignore"):
            vals[hit] = np.exp(-q * self.t_end[hit] + self.logw[hit])
            mean = float(vals.mean()) if self.n else 0.0
            stderr = float(vals.std(ddof=1) / math.sqrt(self.n)) if self.n > 1 else 0.0
        trunc = self.truncated_fraction
        envelope = None
        lower = mean
        if q >= self.gamma:
            # each truncated path contributes at most exp(-qT) * weight at T
            tails = np.exp(-q * self.horizon + self.logw[~hit])
            upper = mean + float(tails.sum()) / max(self.n, 1)
            envelope = (lower, upper)
        return LaplaceEstimate(q=q, x=self.x, y=self.y, mean=mean, stderr=stderr,
                               n=self.n, truncated_fraction=trunc,
                               envelope=envelope, horizon=self.horizon)

    def certify_below(self, q: float, sigmas: float = STDERR_SIGMAS) -> bool:
        """Certify L(q) > 1 by a capped lower envelope.

        Restricting hits to H <= cap still lower-bounds L; scanning dyadic
        caps tames the heavy right tail of exp(-q H + logw) near critical
        q, where the uncapped estimator has enormous variance.
        """
        hit = self.hit.astype(bool)
        t = self.t_end[hit]
        logvals = -q * t + self.logw[hit]
        cap = self.horizon
        with np.errstate(over="ignore"):
            while cap >= min(1.0, self.horizon):
                vals = np.zeros(self.n)
                sel = t <= cap
                vals[hit] = np.where(sel, np.exp(np.minimum(logvals, 700.0)), 0.0)
                mean = float(vals.mean())
                se = float(vals.std(ddof=1) / math.sqrt(self.n)) if self.n > 1 else 0.0
                if math.isfinite(mean) and math.isfinite(se) and mean - sigmas * se > 1.0:
                    return True
                cap *= 0.5
        return False

    def certify_above(self, q: float, trunc_negligible: float,
                      sigmas: float = STDERR_SIGMAS) -> tuple[bool, bool]:
        """Certify L(q) < 1; returns (certified, tail_assumed_negligible)."""
        est = self.evaluate(q)
        if not math.isfinite(est.mean):
            return False, False
        if est.upper is not None:
            return est.upper + sigmas * est.stderr < 1.0, False
        if (est.truncated_fraction <= trunc_negligible
                and est.mean + sigmas * est.stderr < 1.0):
            return True, True
        return False, False

    def fd_slope(self, q: float, dq: float) -> tuple[float, float, float]:
        """Central finite difference of Lhat at q on the shared paths.

        Returns (slope at dq, its stderr, slope at dq/2) for a Richardson
        consistency check.
        """
        hit = self.hit.astype(bool)
        t = self.t_end[hit]
        lw = self.logw[hit]
        out = []
        for d in (dq, 0.5 * dq):
            diffs = np.zeros(self.n)
            diffs[hit] = (np.exp(lw - (q + d) * t) - np.exp(lw - (q - d) * t)) / (2.0 * d)
            fd = float(diffs.mean())
            se = float(diffs.std(ddof=1) / math.sqrt(self.n)) if self.n > 1 else 0.0
            out.append((fd, se))
        return out[0][0], out[0][1], out[1][0]


# ---------------------------------------------------------------------------
# Malthus exponent


@dataclass
class MalthusResult:
    lambda_hat: float
    ci: tuple[float, float]  # final certified bracket
    stderr: float  # bracket half-width / 3 plus slope-propagated noise
    n: int
    horizon: float
    truncated_fraction: float
    L_at_root: LaplaceEstimate
    converged: bool
    flags: dict
    x0: float
    gamma: float

    @property
    def uncertainty(self) -> float:
        """Three-sigma-equivalent total uncertainty of lambda_hat."""
        return STDERR_SIGMAS * self.stderr


def malthus_exponent(model: ModelSpec, x0: float, tolerance: float = 1e-3,
                     seed: int = 0, n0: int = 8192, n_max: int = 1 << 17,
                     horizon0: float = 64.0, horizon_max: float = 16384.0,
                     bracket: Optional[tuple[float, float]] = None,
                     workers: int = 1, backend_choice: Optional[str] = None,
                     trunc_negligible: float = 1e-3,
                     tag: str = "spectral.malthus") -> MalthusResult:
    """Estimate the root of the first-return transform: L_{x0,x0}(q) = 1.

    Confidence-aware bisection on the (pathwise monotone) shared-batch
    estimate: an interval endpoint moves only when the 3-sigma band of the
    estimate excludes 1; otherwise the sample count doubles, or the horizon
    doubles when truncation dominates.  Fails with NoRootError when no
    bracket can be certified within the budget.
    """
    gamma = model.gamma()
    scale = max(abs(gamma), 10.0 * tolerance, 0.1)
    batch = HittingBatch.create(model, x0, x0, horizon0, n0, seed, tag,
                                workers, backend_choice)
    flags: dict = {}

    def classify(q: float) -> str:
        if batch.certify_below(q):
            return "below"
        above, assumed = batch.certify_above(q, trunc_negligible)
        if above:
            if assumed:
                flags["tail_assumed_negligible"] = True
            return "above"
        return "unknown"

    def grow() -> bool:
        if batch.truncated_fraction > trunc_negligible and batch.horizon < horizon_max:
            batch.extend_horizon(min(2.0 * batch.horizon, horizon_max))
            return True
        if batch.n < n_max:
            batch.extend(batch.n)
            return True
        return False

    def diagnostics() -> dict:
        qs = [gamma - 2.0 * scale, gamma, gamma + 2.0 * scale]
        return {
            "gamma": gamma,
            "n": batch.n,
            "horizon": batch.horizon,
            "truncated_fraction": batch.truncated_fraction,
            "probes": {q: batch.evaluate(q).mean for q in qs},
        }

    # bracket: L(q) < 1 certified at q_hi, L(q) > 1 certified at q_lo
    if bracket is not None:
        q_lo, q_hi = float(bracket[0]), float(bracket[1])
    else:
        q_hi = gamma + 0.25 * scale
        step = 0.25 * scale
        while True:
            c = classify(q_hi)
            if c == "above":
                break
            if c == "below":
                q_hi += step
                step *= 2.0
            elif not grow():
                raise NoRootError(
                    "could not certify L(q) < 1 within the budget", diagnostics())
            if q_hi > gamma + 64.0 * scale:
                raise NoRootError("L(q) stays above 1 far beyond gamma", diagnostics())
        step = 0.5 * scale
        q_lo = q_hi - step
        while True:
            c = classify(q_lo)
            if c == "below":
                break
            if c == "above":
                q_hi = q_lo
                q_lo -= step
                step *= 2.0
            elif not grow():
                raise NoRootError(
                    "could not certify L(q) > 1 within the budget "
                    "(no recurrence, or horizon/sample budget too small)",
                    diagnostics())
            if q_lo < gamma - 64.0 * scale:
                raise NoRootError("L(q) stays below 1 far below gamma", diagnostics())

    converged = True
    for _ in range(200):
        if q_hi - q_lo <= tolerance:
            break
        mid = 0.5 * (q_lo + q_hi)
        c = classify(mid)
        if c == "below":
            q_lo = mid
            continue
        if c == "above":
            q_hi = mid
            continue
        if grow():
            continue
        # mid is statistically unresolvable at the full budget; shrink
        # around it through the quartiles while they remain certifiable
        progress = False
        q3 = q_lo + 0.75 * (q_hi - q_lo)
        if classify(q3) == "above":
            q_hi = q3
            progress = True
        q1 = q_lo + 0.25 * (q_hi - q_lo)
        if classify(q1) == "below":
            q_lo = q1
            progress = True
        if not progress:
            flags["budget_exhausted"] = True
            converged = False
            break

    lam = 0.5 * (q_lo + q_hi)
    est = batch.evaluate(lam)
    fd, fd_se, _ = batch.fd_slope(lam, max(tolerance, 1e-3))
    slope_se = est.stderr / abs(fd) if fd < 0.0 else math.inf
    half_width = 0.5 * (q_hi - q_lo)
    stderr = half_width / 3.0 + (slope_se if math.isfinite(slope_se) else half_width)
    # the certified bracket must straddle 1 statistically (monotone Lhat)
    lo_est = batch.evaluate(q_lo)
    hi_est = batch.evaluate(q_hi)
    flags["root_supported"] = bool(
        (not math.isfinite(lo_est.mean)
         or lo_est.mean + STDERR_SIGMAS * lo_est.stderr >= 1.0)
        and hi_est.mean - STDERR_SIGMAS * hi_est.stderr <= 1.0)
    return MalthusResult(lambda_hat=lam, ci=(q_lo, q_hi), stderr=stderr, n=batch.n,
                         horizon=batch.horizon,
                         truncated_fraction=batch.truncated_fraction,
                         L_at_root=est, converged=converged, flags=flags, x0=x0,
                         gamma=gamma)


# ---------------------------------------------------------------------------
# harmonic weight on a grid


@dataclass
class HGrid:
    x: np.ndarray
    h: np.ndarray
    stderr: np.ndarray
    truncated_fraction: np.ndarray
    x0: float
    lam: float
    n: int
    horizon: float

    def ell(self) -> np.ndarray:
        return self.h / self.x


class EllInterp:
    """Positive interpolant of the harmonic weight.

    Monotone cubic through (log x, log ell) with ell held constant beyond
    the grid; h(x) = x * ell(x).  The same coefficient arrays drive the
    spine kernels, so simulated tilted dynamics and diagnostics agree.
    """

    def __init__(self, x: np.ndarray, h: np.ndarray):
        x = np.asarray(x, float)
        h = np.asarray(h, float)
        if np.any(h <= 0.0) or not np.all(np.isfinite(h)):
            from .errors import InvalidHarmonicError

            raise InvalidHarmonicError("harmonic values must be positive and finite")
        self.grid_x = x
        self.grid_h = h
        self._log_lo = math.log(x[0])
        self._log_hi = math.log(x[-1])
        self._pchip = PchipInterpolator(np.log(x), np.log(h / x))

    def ell(self, x):
        lx = np.clip(np.log(x), self._log_lo, self._log_hi)
        return np.exp(self._pchip(lx))

    def h(self, x):
        return np.asarray(x) * self.ell(x)

    @property
    def ell_max(self) -> float:
        return float(np.max(self.grid_h / self.grid_x))

    @property
    def ell_min(self) -> float:
        return float(np.min(self.grid_h / self.grid_x))


def estimate_h(model: ModelSpec, lam: float, x0: float, grid: Sequence[float],
               n: int = 20000, horizon: float = 256.0, seed: int = 0,
               workers: int = 1, backend_choice: Optional[str] = None,
               tag: str = "spectral.h") -> HGrid:
    """h(x) = x * Lhat_{x,x0}(lambda) on the grid, with per-point stderr.

    The same stream keys are reused at every grid point (common random
    numbers across the grid), which cancels most of the comparative noise
    between neighbouring points.
    """
    grid = np.asarray(grid, dtype=float)
    h = np.empty(len(grid))
    se = np.empty(len(grid))
    tf = np.empty(len(grid))
    for i, x in enumerate(grid):
        batch = HittingBatch.create(model, float(x), x0, horizon, n, seed, tag,
                                    workers, backend_choice)
        est = batch.evaluate(lam)
        h[i] = x * est.mean
        se[i] = x * est.stderr
        tf[i] = est.truncated_fraction
    return HGrid(x=grid, h=h, stderr=se, truncated_fraction=tf, x0=x0, lam=lam,
                 n=n, horizon=horizon)


# ---------------------------------------------------------------------------
# asymptotic profile by finite differences


@dataclass
class NuGrid:
    y: np.ndarray
    nu: np.ndarray
    stderr: np.ndarray
    slope: np.ndarray  # |L'| estimates per point
    richardson_rel: np.ndarray
    normalization: float  # <nu, h> after normalization (1 by construction)
    raw_scale: float  # the quadrature mass divided out
    dq: float

    def integrate(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        """<nu, f> by trapezoid on the grid."""
        return float(np.trapezoid(self.nu * f(self.y), self.y))


def estimate_nu_fd(model: ModelSpec, lam: float, h_interp: EllInterp,
                   grid: Sequence[float], n: int = 40000, dq: float = 1e-2,
                   horizon: float = 256.0, seed: int = 0, workers: int = 1,
                   backend_choice: Optional[str] = None,
                   tag: str = "spectral.nu") -> NuGrid:
    """Profile density 1/(h(y) c(y) |L'_{y,y}(lambda)|), normalized to <nu,h>=1.

    The slope comes from a central finite difference on one shared
    first-return batch per grid point; a Richardson check at dq/2 is
    recorded.  Raises IllConditionedDerivativeError when a slope estimate
    is not significantly negative at 3 sigma.
    """
    grid = np.asarray(grid, dtype=float)
    slopes = np.empty(len(grid))
    rel_se = np.empty(len(grid))
    rich = np.empty(len(grid))
    for i, y in enumerate(grid):
        batch = HittingBatch.create(model, float(y), float(y), horizon, n, seed,
                                    tag, workers, backend_choice)
        fd, fd_se, fd_half = batch.fd_slope(lam, dq)
        if not fd + STDERR_SIGMAS * fd_se < 0.0:
            raise IllConditionedDerivativeError(
                f"slope at y={y:.6g} is {fd:.3g} +- {fd_se:.3g}: not significantly "
                "negative; increase n or move the grid into the recurrent region")
        slopes[i] = abs(fd)
        rel_se[i] = fd_se / abs(fd)
        rich[i] = abs(fd - fd_half) / abs(fd)
    c_vals = np.array([model.growth.eval(float(y)) for y in grid])
    h_vals = h_interp.h(grid)
    raw = 1.0 / (h_vals * c_vals * slopes)
    z = float(np.trapezoid(raw * h_vals, grid))
    nu = raw / z
    norm = float(np.trapezoid(nu * h_vals, grid))
    return NuGrid(y=grid, nu=nu, stderr=nu * rel_se, slope=slopes,
                  richardson_rel=rich, normalization=norm, raw_scale=z, dq=dq)


# ---------------------------------------------------------------------------
# bundle


@dataclass
class SpectralSolution:
    """Root, harmonic weight and profile, with reproducibility metadata."""

    model_desc: dict
    x0: float
    root: MalthusResult
    h_grid: HGrid
    nu_grid: Optional[NuGrid]
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def lambda_hat(self) -> float:
        return self.root.lambda_hat

    def interpolator(self) -> EllInterp:
        return EllInterp(self.h_grid.x, self.h_grid.h)

    def to_document(self) -> dict:
        doc = {
            "model": self.model_desc,
            "x0": self.x0,
            "seed": self.seed,
            "lambda_hat": self.root.lambda_hat,
            "lambda_ci": list(self.root.ci),
            "lambda_stderr": self.root.stderr,
            "gamma": self.root.gamma,
            "root_n": self.root.n,
            "root_horizon": self.root.horizon,
            "root_truncated_fraction": self.root.truncated_fraction,
            "root_flags": dict(self.root.flags),
            "h_grid": {
                "x": self.h_grid.x.tolist(),
                "h": self.h_grid.h.tolist(),
                "stderr": self.h_grid.stderr.tolist(),
                "n": self.h_grid.n,
                "horizon": self.h_grid.horizon,
            },
            "meta": dict(self.meta),
        }
        if self.nu_grid is not None:
            doc["nu_grid"] = {
                "y": self.nu_grid.y.tolist(),
                "nu": self.nu_grid.nu.tolist(),
                "stderr": self.nu_grid.stderr.tolist(),
                "normalization": self.nu_grid.normalization,
                "dq": self.nu_grid.dq,
            }
        return doc


def solve_spectral(model: ModelSpec, x0: float = 1.0,
                   h_grid: Optional[Sequence[float]] = None,
                   nu_grid: Optional[Sequence[float]] = None,
                   tolerance: float = 1e-3, n_h: int = 20000, n_nu: int = 40000,
                   seed: int = 0, workers: int = 1,
                   backend_choice: Optional[str] = None,
                   with_nu: bool = True, horizon_h: float = 256.0,
                   dq: float = 1e-2, **malthus_kwargs) -> SpectralSolution:
    """Full spectral pipeline: root, then h on a grid, then the profile."""
    root = malthus_exponent(model, x0, tolerance=tolerance, seed=seed,
                            workers=workers, backend_choice=backend_choice,
                            **malthus_kwargs)
    if h_grid is None:
        h_grid = np.geomspace(0.05, 20.0, 24)
    hg = estimate_h(model, root.lambda_hat, x0, h_grid, n=n_h, horizon=horizon_h,
                    seed=seed, workers=workers, backend_choice=backend_choice)
    ng = None
    if with_nu:
        if nu_grid is None:
            nu_grid = np.geomspace(0.2, 5.0, 14)
        ng = estimate_nu_fd(model, root.lambda_hat, EllInterp(hg.x, hg.h), nu_grid,
                            n=n_nu, dq=dq, horizon=horizon_h, seed=seed,
                            workers=workers, backend_choice=backend_choice)
    return SpectralSolution(model_desc=model.describe(), x0=x0, root=root,
                            h_grid=hg, nu_grid=ng, seed=seed,
                            meta={"tolerance": tolerance, "n_h": n_h, "n_nu": n_nu})
