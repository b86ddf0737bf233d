"""Growth-fragmentation model definition and the deterministic mass flow.

A model is the triple (growth rate c, fission rate B, binary fragmentation
kernel).  Masses grow along the ODE x' = c(x); a cell of mass x splits at
rate B(x) into daughters of masses (1-r)x and r*x with r drawn from the
kernel on (0, 1/2].

The flow is handled through the antiderivative phi(x) = int dz/c(z) when a
closed form is available (all built-in families provide one), which makes
hitting times exact; otherwise adaptive integration at rel-tol 1e-9 is used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .errors import FlowDomainError, FlowIntegrationError, ModelValidationError
from .rng import RngStream

DEFAULT_GRID = np.geomspace(1e-6, 1e6, 512)

# relative tolerance for numeric flow integration (closed forms are exact)
FLOW_RTOL = 1e-9


@dataclass(frozen=True)
class GrowthRate:
    """Growth field c with optional exact flow machinery.

    ``antideriv`` is an antiderivative of 1/c and ``antideriv_inv`` its
    inverse; when both are present the flow and its hitting times are
    evaluated in closed form.  ``eval`` must be positive on (0, inf) and
    c(x)/x must stay bounded (checked numerically by ``validate``).
    """

    eval: Callable[[float], float]
    antideriv: Optional[Callable[[float], float]] = None
    antideriv_inv: Optional[Callable[[float], float]] = None
    family: str = "custom"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FissionRate:
    """Fission rate B with its declared upper bound (used for thinning)."""

    eval: Callable[[float], float]
    bound: float
    family: str = "custom"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BinaryKernel:
    """Fragmentation kernel on ratios r in (0, 1/2].

    ``inverse_cdf`` maps one uniform to a ratio; every built-in kernel
    consumes exactly one uniform per sample (atoms ignore the value), which
    keeps random streams aligned across backends.  ``density`` (or
    ``atoms``) supports quadrature against the kernel.
    """

    inverse_cdf: Callable[[float], float]
    density: Optional[Callable[[float], float]] = None
    atoms: Optional[Sequence[tuple[float, float]]] = None  # (ratio, weight)
    family: str = "custom"
    params: dict = field(default_factory=dict)

    def sample(self, x: float, rng: RngStream) -> float:
        """Draw a daughter/mother ratio for a fission at mass x."""
        del x  # built-in kernels are mass-independent
        return self.inverse_cdf(rng.uniform())

    def expectation(self, f: Callable[[np.ndarray], np.ndarray], n_nodes: int = 128) -> float:
        """E[f(r)] against the kernel, by Gauss-Legendre or exact atom sum."""
        if self.atoms is not None:
            return float(sum(w * f(np.asarray(r)) for r, w in self.atoms))
        if self.density is None:
            raise ModelValidationError("kernel has neither density nor atoms for quadrature")
        nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
        r = 0.25 * (nodes + 1.0)  # map [-1,1] -> (0, 1/2)
        w = 0.25 * weights
        dens = np.array([self.density(float(v)) for v in r])
        return float(np.sum(w * dens * f(r)))


@dataclass(frozen=True)
class ModelSpec:
    """Immutable bundle (growth, fission, kernel) plus validation grid.

    ``compiled_args`` is the flat family encoding consumed by the fast
    kernels; it is None for models the compiled backend cannot represent
    (tabulated or user-supplied callables), which then run on the
    pure-Python path.
    """

    growth: GrowthRate
    fission: FissionRate
    kernel: BinaryKernel
    validation_grid: np.ndarray = field(default_factory=lambda: DEFAULT_GRID.copy())
    name: str = "custom"
    params: dict = field(default_factory=dict)
    compiled_args: Optional[tuple] = None

    def gamma(self) -> float:
        """Numeric estimate of sup c(x)/x on the validation grid."""
        grid = self.validation_grid
        return float(max(self.growth.eval(float(x)) / float(x) for x in grid))

    def describe(self) -> dict:
        return {
            "name": self.name,
            "params": dict(self.params),
            "growth": {"family": self.growth.family, **self.growth.params},
            "fission": {"family": self.fission.family, "bound": self.fission.bound,
                        **self.fission.params},
            "kernel": {"family": self.kernel.family, **self.kernel.params},
        }


# ---------------------------------------------------------------------------
# flow operations


def flow(model: ModelSpec, x0: float, t: float) -> float:
    """Mass after growing for time t from x0 with no fission.

    Closed form via the antiderivative of 1/c when the model provides it,
    else adaptive explicit integration at rel-tol 1e-9.
    """
    if not x0 > 0.0:
        raise FlowDomainError(f"x0 must be positive, got {x0}")
    if t < 0.0:
        raise FlowDomainError(f"t must be nonnegative, got {t}")
    if t == 0.0:
        return float(x0)
    g = model.growth
    if g.antideriv is not None and g.antideriv_inv is not None:
        x = g.antideriv_inv(g.antideriv(x0) + t)
    else:
        sol = integrate.solve_ivp(
            lambda _t, y: [g.eval(float(y[0]))],
            (0.0, float(t)),
            [float(x0)],
            method="RK45",
            rtol=FLOW_RTOL,
            atol=1e-12 * x0,
        )
        if not sol.success:
            raise FlowIntegrationError(f"flow integration failed: {sol.message}")
        x = float(sol.y[0, -1])
    if not math.isfinite(x) or x <= 0.0:
        raise FlowIntegrationError(f"flow produced non-finite mass from x0={x0}, t={t}")
    return float(x)


def flow_time(model: ModelSpec, x: float, y: float) -> float:
    """Time s(x, y) = int_x^y dz/c(z) for the flow to rise from x to y."""
    if not (x > 0.0 and y > 0.0):
        raise FlowDomainError("masses must be positive")
    if x > y:
        raise FlowDomainError(f"flow is increasing: need x <= y, got x={x}, y={y}")
    if x == y:
        return 0.0
    g = model.growth
    if g.antideriv is not None:
        s = g.antideriv(y) - g.antideriv(x)
    else:
        val, _err = integrate.quad(lambda z: 1.0 / g.eval(z), x, y, epsrel=FLOW_RTOL, limit=200)
        s = val
    if not math.isfinite(s) or s < 0.0:
        raise FlowIntegrationError(f"flow_time({x}, {y}) = {s} is not a valid duration")
    return float(s)


def survival_probability(model: ModelSpec, x0: float, t: float) -> float:
    """Probability of no fission before t: exp(-int_{x0}^{x(t)} B/c)."""
    if not x0 > 0.0:
        raise FlowDomainError(f"x0 must be positive, got {x0}")
    if t < 0.0:
        raise FlowDomainError(f"t must be nonnegative, got {t}")
    if t == 0.0:
        return 1.0
    xt = flow(model, x0, t)
    b, c = model.fission.eval, model.growth.eval
    val, _err = integrate.quad(lambda z: b(z) / c(z), x0, xt, epsrel=1e-10, limit=200)
    return float(math.exp(-val))


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationItem:
    name: str
    passed: bool
    value: float
    detail: str


@dataclass
class ValidationReport:
    items: list[ValidationItem]
    gamma_hat: float
    fission_bound_hat: float

    @property
    def passed(self) -> bool:
        return all(item.passed for item in self.items)

    def summary(self) -> str:
        lines = [f"gamma_hat={self.gamma_hat:.6g} fission_bound_hat={self.fission_bound_hat:.6g}"]
        for it in self.items:
            lines.append(f"[{'ok' if it.passed else 'FAIL'}] {it.name}: {it.detail}")
        return "\n".join(lines)


def _edge_trend_unbounded(ratios: np.ndarray, grid: np.ndarray) -> Optional[str]:
    """Detect c/x blowing up toward a grid edge (sup over x>0 surrogate)."""
    k = max(8, len(grid) // 16)  # roughly the outermost decade of the grid
    imax = int(np.argmax(ratios))
    if imax == 0:
        head = ratios[:k]
        if head[0] > head[-1] * 1.01:
            return "c(x)/x increases toward x -> 0"
    if imax == len(ratios) - 1:
        tail = ratios[-k:]
        if tail[-1] > tail[0] * 1.01:
            return "c(x)/x increases toward x -> inf"
    return None


def validate(model: ModelSpec, kernel_probe_draws: int = 256) -> ValidationReport:
    """Check the standing assumptions numerically on the validation grid.

    Returns failure items rather than raising; sup-type conditions are
    checked on the grid only, which is the documented surrogate for
    "for all x > 0".
    """
    grid = np.asarray(model.validation_grid, dtype=float)
    items: list[ValidationItem] = []

    c_vals = np.array([model.growth.eval(float(x)) for x in grid])
    items.append(ValidationItem(
        "growth_positive", bool(np.all(c_vals > 0.0)), float(c_vals.min()),
        f"min c on grid = {c_vals.min():.6g}"))

    ratios = c_vals / grid
    gamma_hat = float(ratios.max())
    trend = _edge_trend_unbounded(ratios, grid)
    items.append(ValidationItem(
        "growth_ratio_bounded", trend is None, gamma_hat,
        trend or f"sup c/x on grid = {gamma_hat:.6g}"))

    b_vals = np.array([model.fission.eval(float(x)) for x in grid])
    b_hat = float(b_vals.max())
    ok_low = bool(np.all(b_vals >= 0.0))
    ok_high = bool(b_hat <= model.fission.bound * (1.0 + 1e-12))
    items.append(ValidationItem(
        "fission_nonnegative", ok_low, float(b_vals.min()),
        f"min B on grid = {b_vals.min():.6g}"))
    items.append(ValidationItem(
        "fission_below_bound", ok_high, b_hat,
        f"max B on grid = {b_hat:.6g} vs declared bound {model.fission.bound:.6g}"))

    probe = RngStream(0, "model.validate.kernel_probe")
    worst = 0.0
    ok_kernel = True
    for x in (grid[0], 1.0, grid[-1]):
        for _ in range(kernel_probe_draws):
            r = model.kernel.sample(float(x), probe)
            if not (0.0 < r <= 0.5):
                ok_kernel = False
            worst = max(worst, r)
            # binary partition (1-r, r) sums to the mother mass exactly
            if abs((1.0 - r) + r - 1.0) > 1e-12:
                ok_kernel = False
    items.append(ValidationItem(
        "kernel_ratios_in_range", ok_kernel, worst,
        f"max sampled ratio = {worst:.6g} (must lie in (0, 1/2])"))

    try:
        mid = float(np.sqrt(grid[0] * grid[-1]))
        flow(model, mid, 0.1)
        items.append(ValidationItem("flow_finite", True, mid, "flow evaluates at grid center"))
    except FlowIntegrationError as exc:
        items.append(ValidationItem("flow_finite", False, float("nan"), str(exc)))

    return ValidationReport(items=items, gamma_hat=gamma_hat, fission_bound_hat=b_hat)
