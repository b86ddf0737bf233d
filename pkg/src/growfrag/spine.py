"""The spine: the tagged cell tilted by the harmonic weight.

Tilting by h turns the size-biased tagged cell into a positive-recurrent
process: fissions occur at rate  B~(x) = w(x) B(x) / h(x)  with
w(x) = E[h((1-r)x) + h(r x)] over the ratio kernel, the ratio is drawn
reweighted by (h(rx) + h((1-r)x))/w(x), and the daughter of mass m is
followed with probability h(m) over the h-sum of both daughters.

Its stationary law pi gives the asymptotic profile as nu = pi / h
(normalized against h), which cross-validates the finite-difference
profile from the return transform.  With h proportional to mass the
tilted picks reduce to plain size-biased picks and the spine coincides
with the tagged cell in law; tests exploit that.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import backend as _backend
from ._kernels_py import SpineData, make_path_ops
from .errors import FlowDomainError, InvalidHarmonicError, MixingWarning
from .model import ModelSpec
from .rng import RngStream
from .runner import map_batches
from .spectral import EllInterp, HGrid, SpectralSolution

W_QUAD_NODES = 128
AUX_GRID_SIZE = 256
BTILDE_PROBE_SIZE = 2048
BTILDE_SAFETY = 1.02


def _ppoly_vec(knots, coefs, v):
    """Vectorised clamped piecewise-cubic evaluation (matches the kernels)."""
    v = np.clip(v, knots[0], knots[-1])
    j = np.clip(((v - knots[0]) / (knots[1] - knots[0])).astype(int), 0, len(knots) - 2)
    s = v - knots[j]
    return ((coefs[0, j] * s + coefs[1, j]) * s + coefs[2, j]) * s + coefs[3, j]


def _uniform_log_knots(x: np.ndarray) -> np.ndarray:
    lx = np.log(np.asarray(x, float))
    steps = np.diff(lx)
    if not np.allclose(steps, steps[0], rtol=1e-8, atol=1e-12):
        raise FlowDomainError("spine grids must be uniform in log mass")
    return lx


@dataclass
class SpineModel:
    """Tilted dynamics derived from a model and an estimated harmonic weight."""

    base: ModelSpec
    h_interp: EllInterp
    data: SpineData
    lam: float
    x0_reference: float

    def h(self, x):
        return self.h_interp.h(x)

    def w(self, x):
        """Expected daughter h-sum at a fission of mass x."""
        lx = np.log(np.asarray(x, dtype=float))
        return np.exp(_ppoly_vec(self.data.w_knots, self.data.w_coefs, lx))

    def fission_rate(self, x):
        """Tilted total fission rate w(x) B(x) / h(x)."""
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        b = np.array([self.base.fission.eval(float(v)) for v in xs])
        out = self.w(xs) * b / self.h(xs)
        return out[0] if np.isscalar(x) or np.ndim(x) == 0 else out

    def daughter_pick_probability(self, x: float, r: float) -> float:
        """Probability the spine follows the r-daughter at a fission of mass x."""
        hr = float(self.h(r * x))
        ho = float(self.h((1.0 - r) * x))
        return hr / (hr + ho)

    def describe(self) -> dict:
        return {
            "model": self.base.describe(),
            "lambda": self.lam,
            "x0_reference": self.x0_reference,
            "op_range": [self.data.op_lo, self.data.op_hi],
            "btilde_max": self.data.btilde_max,
            "ell_max": self.data.lmax,
        }


def build_spine_model(model: ModelSpec, solution: SpectralSolution | HGrid,
                      lam: Optional[float] = None) -> SpineModel:
    """Derive the tilted dynamics from an estimated harmonic weight.

    Accepts a full spectral solution or a bare h-grid.  The weight is
    interpolated log-log with constant extrapolation of h(x)/x beyond the
    grid, the daughter h-sum w is precomputed by quadrature on an
    auxiliary grid spanning one extra decade each way (the operational
    range), and the thinning bound for the tilted rate is a padded maximum
    over a fine probe grid.
    """
    if isinstance(solution, SpectralSolution):
        hg = solution.h_grid
        lam = solution.root.lambda_hat if lam is None else lam
        x0_ref = solution.x0
    else:
        hg = solution
        lam = hg.lam if lam is None else lam
        x0_ref = hg.x0
    if np.any(hg.h <= 0.0) or not np.all(np.isfinite(hg.h)):
        raise InvalidHarmonicError("estimated harmonic values must be positive")

    interp = EllInterp(hg.x, hg.h)
    l_knots = _uniform_log_knots(hg.x)
    l_coefs = np.ascontiguousarray(interp._pchip.c, dtype=float)

    op_lo = float(hg.x[0] / 10.0)
    op_hi = float(hg.x[-1] * 10.0)
    aux = np.geomspace(op_lo, op_hi, AUX_GRID_SIZE)

    kern = model.kernel
    if kern.atoms is not None:
        ratios = np.array([r for r, _ in kern.atoms])
        weights = np.array([wt for _, wt in kern.atoms])
    else:
        nodes, gw = np.polynomial.legendre.leggauss(W_QUAD_NODES)
        ratios = 0.25 * (nodes + 1.0)
        dens = np.array([kern.density(float(r)) for r in ratios])
        weights = 0.25 * gw * dens
    # w(x) = E[h(rx) + h((1-r)x)] against the ratio kernel
    hsum = interp.h(np.outer(aux, ratios)) + interp.h(np.outer(aux, 1.0 - ratios))
    w_vals = hsum @ weights
    w_pchip = PchipInterpolator(np.log(aux), np.log(w_vals))
    w_knots = _uniform_log_knots(aux)
    w_coefs = np.ascontiguousarray(w_pchip.c, dtype=float)

    lmax = interp.ell_max
    probe = np.geomspace(op_lo, op_hi, BTILDE_PROBE_SIZE)
    b_vals = np.array([model.fission.eval(float(x)) for x in probe])
    w_probe = np.exp(_ppoly_vec(w_knots, w_coefs, np.log(probe)))
    bt = w_probe * b_vals / interp.h(probe)
    btilde_max = float(bt.max()) * BTILDE_SAFETY
    # w(x) <= ell_max * x forces bt <= ell_max * B / ell on the grid
    bound = lmax * model.fission.bound / interp.ell(probe)
    if np.any(bt > bound * (1.0 + 1e-6)):
        raise InvalidHarmonicError("tilted rate exceeds its theoretical bound; "
                                   "harmonic grid is inconsistent")

    data = SpineData(l_knots=np.ascontiguousarray(l_knots), l_coefs=l_coefs,
                     w_knots=np.ascontiguousarray(w_knots), w_coefs=w_coefs,
                     lmax=lmax, btilde_max=btilde_max, op_lo=op_lo, op_hi=op_hi)
    return SpineModel(base=model, h_interp=interp, data=data, lam=float(lam),
                      x0_reference=float(x0_ref))


# ---------------------------------------------------------------------------
# simulation


@dataclass
class SpineRunSummary:
    """Merged occupation and return statistics of the tilted process."""

    bin_edges: np.ndarray
    occupation: np.ndarray  # time fraction per bin (kept replicates, post burn-in)
    occupation_halves: np.ndarray  # (2, nbins), each half normalized
    occupation_by_replicate: np.ndarray  # (kept, nbins) time fractions
    return_times: np.ndarray
    n_returns_total: int
    escaped_count: int
    replicates: int
    kept: int
    horizon: float
    burn_in: float
    sup_mass_growth: float  # mean log(sup mass)/horizon, qualitative diagnostic
    mixing_l1: float
    mixing_flag: bool

    def bin_centers(self) -> np.ndarray:
        return np.sqrt(self.bin_edges[:-1] * self.bin_edges[1:])

    def bin_widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)

    def empirical_mgf(self, eps: float) -> float:
        """E[exp(eps * return time)] estimate; finite for small eps."""
        if len(self.return_times) == 0:
            return math.nan
        return float(np.exp(eps * self.return_times).mean())


def _spine_worker(model, sp, x0, horizon, burn_in, edges, edge_phi, max_returns,
                  seed, tag, rep, backend_choice):
    stream = RngStream(seed, tag, rep)
    return _backend.spine_batch(model, sp, x0, horizon, burn_in, edges, edge_phi,
                                max_returns, stream, backend=backend_choice)


def simulate_spine(spine_model: SpineModel, x0: float, horizon: float,
                   seed: int = 0, replicates: int = 8, bins: int = 96,
                   burn_in_frac: float = 0.2, max_returns: int = 65536,
                   workers: int = 1, backend_choice: Optional[str] = None,
                   mix_tol: float = 0.1, tag: str = "spine") -> SpineRunSummary:
    """Long-run tilted simulation with exact per-bin occupation times.

    Replicates escaping the operational mass range are excluded from the
    merge and counted.  A two-half-window occupation comparison flags poor
    mixing (MixingWarning) rather than failing.
    """
    model = spine_model.base
    sp = spine_model.data
    if not sp.op_lo < x0 < sp.op_hi:
        raise FlowDomainError("x0 outside the spine operational range")
    ops = make_path_ops(model)
    if not ops.has_exact_flow:
        raise FlowDomainError("spine simulation needs a model with an exact flow "
                              "(closed-form or tabulated antiderivative)")
    edges = np.geomspace(sp.op_lo, sp.op_hi, bins + 1)
    edge_phi = np.array([ops.phi(float(e)) for e in edges])
    burn_in = burn_in_frac * horizon

    jobs = [(model, sp, x0, horizon, burn_in, edges, edge_phi, max_returns,
             seed, tag, rep, backend_choice) for rep in range(replicates)]
    outs = map_batches(_spine_worker, jobs, workers)

    kept_occ = []
    returns = []
    n_ret_total = 0
    escaped = 0
    sup_logs = []
    for occ, rets, n_ret, esc, _t_final, _nj, sup_mass in outs:
        if esc:
            escaped += 1
            continue
        kept_occ.append(occ)
        returns.append(rets)
        n_ret_total += n_ret
        sup_logs.append(math.log(sup_mass))
    if not kept_occ:
        raise FlowDomainError("every spine replicate escaped the operational range; "
                              "widen the harmonic grid")

    halves = np.sum(kept_occ, axis=0)  # (2, nbins)
    total = halves.sum()
    occupation = halves.sum(axis=0) / total
    half_norm = halves / halves.sum(axis=1, keepdims=True)
    mixing_l1 = float(np.abs(half_norm[0] - half_norm[1]).sum())
    mixing_flag = mixing_l1 > mix_tol
    if mixing_flag:
        warnings.warn(f"spine occupation halves differ by L1={mixing_l1:.3f} "
                      f"(tolerance {mix_tol}); increase the horizon", MixingWarning)
    by_rep = np.array([o.sum(axis=0) / o.sum() for o in kept_occ])
    return SpineRunSummary(
        bin_edges=edges, occupation=occupation, occupation_halves=half_norm,
        occupation_by_replicate=by_rep,
        return_times=np.concatenate(returns) if returns else np.zeros(0),
        n_returns_total=n_ret_total, escaped_count=escaped,
        replicates=replicates, kept=len(kept_occ), horizon=horizon,
        burn_in=burn_in, sup_mass_growth=float(np.mean(sup_logs) / horizon),
        mixing_l1=mixing_l1, mixing_flag=mixing_flag)


@dataclass
class SpineNuEstimate:
    """Profile from spine occupation: nu = pi / h, normalized to <nu, h> = 1."""

    y: np.ndarray
    nu: np.ndarray
    stderr: np.ndarray
    pi: np.ndarray  # stationary density estimate on the same centers
    summary: SpineRunSummary

    def integrate(self, f) -> float:
        return float(np.trapezoid(self.nu * f(self.y), self.y))


def estimate_nu_spine(spine_model: SpineModel, x0: float, horizon: float,
                      seed: int = 0, replicates: int = 8, bins: int = 96,
                      burn_in_frac: float = 0.2, workers: int = 1,
                      backend_choice: Optional[str] = None) -> SpineNuEstimate:
    """Estimate the asymptotic profile from the spine's occupation measure."""
    summary = simulate_spine(spine_model, x0, horizon, seed=seed,
                             replicates=replicates, bins=bins,
                             burn_in_frac=burn_in_frac, workers=workers,
                             backend_choice=backend_choice)
    centers = summary.bin_centers()
    widths = summary.bin_widths()
    pi = summary.occupation / widths
    h_vals = spine_model.h(centers)
    raw = pi / h_vals
    # <nu, h> = sum pi * width = 1 once divided by the occupied mass
    z = float(np.sum(summary.occupation))
    nu = raw / z
    # replicate spread, delta-method on the normalized ratio
    by_rep = summary.occupation_by_replicate / widths
    nu_rep = (by_rep / h_vals) / np.sum(summary.occupation_by_replicate, axis=1,
                                        keepdims=True)
    k = nu_rep.shape[0]
    se = nu_rep.std(axis=0, ddof=1) / math.sqrt(k) if k > 1 else np.zeros_like(nu)
    return SpineNuEstimate(y=centers, nu=nu, stderr=se, pi=pi / z, summary=summary)


# ---------------------------------------------------------------------------
# growth-ratio tail condition


@dataclass
class ConditionReport:
    """Tail check: is the growth ratio c(x)/x strictly below the exponent?"""

    verdict: str  # pass | fail | inconclusive
    tail_small_sup: float
    tail_large_sup: float
    lambda_hat: float
    lambda_ci: tuple[float, float]
    gamma_hat: float
    margin: float  # lambda ci lower bound minus the worst tail sup
    detail: str


def check_condition_main(model: ModelSpec, lam: float,
                         lam_ci: Optional[tuple[float, float]] = None,
                         x_small: float = 1e-8, x_large: float = 1e8,
                         n_grid: int = 64) -> ConditionReport:
    """Evaluate the growth-ratio tails against the estimated exponent.

    The sup over the outermost decade on each side stands in for the
    limsup; fails outright when the ratio attains its global sup in a tail
    (no strict gap is then possible, the exponent never exceeds gamma).
    """
    if lam_ci is None:
        lam_ci = (lam, lam)
    ratio = model.growth.eval
    small = np.geomspace(x_small, x_small * 10.0, n_grid)
    large = np.geomspace(x_large / 10.0, x_large, n_grid)
    sup_small = float(max(ratio(float(x)) / x for x in small))
    sup_large = float(max(ratio(float(x)) / x for x in large))
    gamma_hat = model.gamma()
    worst = max(sup_small, sup_large)
    margin = lam_ci[0] - worst
    if worst >= gamma_hat * (1.0 - 1e-9):
        verdict = "fail"
        detail = ("growth ratio attains its global sup in a tail; "
                  "no strict gap is possible")
    elif worst < lam_ci[0]:
        verdict = "pass"
        detail = f"worst tail ratio {worst:.4g} < lambda ci lower {lam_ci[0]:.4g}"
    elif worst >= lam_ci[1]:
        verdict = "fail"
        detail = f"worst tail ratio {worst:.4g} >= lambda ci upper {lam_ci[1]:.4g}"
    else:
        verdict = "inconclusive"
        detail = "lambda confidence interval straddles the tail ratio"
    return ConditionReport(verdict=verdict, tail_small_sup=sup_small,
                           tail_large_sup=sup_large, lambda_hat=lam,
                           lambda_ci=lam_ci, gamma_hat=gamma_hat, margin=margin,
                           detail=detail)
