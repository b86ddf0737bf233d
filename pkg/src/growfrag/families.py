"""Built-in model families and config-file loading.

Growth families (ratio = c(x)/x):
  linear      c(x) = a*x          ratio constant a
  saturating  c(x) = a*x/(1+x)    ratio a/(1+x), sup attained as x -> 0
  hump        c(x) = a*x^2/(1+x^2)  ratio a*x/(1+x^2), peak a/2 at x = 1

Fission families:
  constant    B(x) = b
  saturating  B(x) = b*x/(1+x)
  sigmoid     B(x) = b*x^2/(1+x^2)

Ratio kernels on (0, 1/2] (each consumes exactly one uniform):
  uniform     density 2
  fixed       atom at r0
  power       density theta * 2^theta * r^(theta-1)

All growth families carry a closed-form antiderivative of 1/c, so the flow
and its hitting times are exact.  The same formulas are mirrored in the
compiled kernels; keep them in sync operation-for-operation, the backends
are required to produce bit-identical paths.
"""

from __future__ import annotations

import hashlib
import json
import math
from functools import partial
from typing import Optional

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import ConfigError
from .model import DEFAULT_GRID, BinaryKernel, FissionRate, GrowthRate, ModelSpec

GROWTH_LINEAR, GROWTH_SATURATING, GROWTH_HUMP = 0, 1, 2
FISSION_CONSTANT, FISSION_SATURATING, FISSION_SIGMOID = 0, 1, 2
KERNEL_UNIFORM, KERNEL_FIXED, KERNEL_POWER = 0, 1, 2


# -- growth closed forms ----------------------------------------------------

def _linear_c(a, x):
    return a * x


def _linear_phi(a, x):
    return math.log(x) / a


def _linear_phi_inv(a, s):
    return math.exp(a * s)


def _saturating_c(a, x):
    return a * x / (1.0 + x)


def _saturating_phi(a, x):
    return (math.log(x) + x) / a


def solve_log_plus_exp(k: float) -> float:
    """Solve u + e^u = k for u (Newton; globally convergent, convex target).

    Used to invert the saturating-flow antiderivative.  The compiled
    kernels implement the identical iteration.
    """
    u = math.log(k) if k > 1.0 else k - 1.0
    for _ in range(60):
        e = math.exp(u)
        g = u + e - k
        step = g / (1.0 + e)
        u -= step
        if abs(step) <= 1e-15 * (1.0 + abs(u)):
            break
    return u


def _saturating_phi_inv(a, s):
    return math.exp(solve_log_plus_exp(a * s))


def _hump_c(a, x):
    return a * x * x / (1.0 + x * x)


def _hump_phi(a, x):
    return (x - 1.0 / x) / a


def _hump_phi_inv(a, s):
    k = a * s
    return 0.5 * (k + math.sqrt(k * k + 4.0))


_GROWTH_FAMILIES = {
    "linear": (GROWTH_LINEAR, _linear_c, _linear_phi, _linear_phi_inv),
    "saturating": (GROWTH_SATURATING, _saturating_c, _saturating_phi, _saturating_phi_inv),
    "hump": (GROWTH_HUMP, _hump_c, _hump_phi, _hump_phi_inv),
}


def make_growth(family: str, a: float) -> GrowthRate:
    if family not in _GROWTH_FAMILIES:
        raise ConfigError(f"unknown growth family {family!r}", "model.family")
    if not a > 0.0:
        raise ConfigError("growth parameter a must be positive", "model.growth.a")
    _code, c, phi, phi_inv = _GROWTH_FAMILIES[family]
    return GrowthRate(
        eval=partial(c, a),
        antideriv=partial(phi, a),
        antideriv_inv=partial(phi_inv, a),
        family=family,
        params={"a": a},
    )


# -- fission families --------------------------------------------------------

def _constant_b(b, x):
    return b


def _saturating_b(b, x):
    return b * x / (1.0 + x)


def _sigmoid_b(b, x):
    return b * x * x / (1.0 + x * x)


_FISSION_FAMILIES = {
    "constant": (FISSION_CONSTANT, _constant_b),
    "saturating": (FISSION_SATURATING, _saturating_b),
    "sigmoid": (FISSION_SIGMOID, _sigmoid_b),
}


def make_fission(family: str, b: float) -> FissionRate:
    if family not in _FISSION_FAMILIES:
        raise ConfigError(f"unknown fission family {family!r}", "model.fission.family")
    if b < 0.0:
        raise ConfigError("fission parameter b must be nonnegative", "model.fission.b")
    _code, f = _FISSION_FAMILIES[family]
    # b is the sup of every built-in shape, so it doubles as the thinning bound
    return FissionRate(eval=partial(f, b), bound=b, family=family, params={"b": b})


# -- ratio kernels -----------------------------------------------------------

def _uniform_icdf(u):
    return 0.5 * (1.0 - u)


def _uniform_density(r):
    return 2.0 if 0.0 < r <= 0.5 else 0.0


def _fixed_icdf(r0, u):
    return r0


def _power_icdf(theta, u):
    return 0.5 * (1.0 - u) ** (1.0 / theta)


def _power_density(theta, r):
    if not 0.0 < r <= 0.5:
        return 0.0
    return theta * (2.0 ** theta) * r ** (theta - 1.0)


def make_kernel(family: str, r: float = 0.5, theta: float = 1.0) -> BinaryKernel:
    if family == "uniform":
        return BinaryKernel(inverse_cdf=_uniform_icdf, density=_uniform_density,
                            family="uniform")
    if family == "fixed":
        if not 0.0 < r <= 0.5:
            raise ConfigError("fixed kernel ratio must lie in (0, 1/2]", "model.kernel.r")
        return BinaryKernel(inverse_cdf=partial(_fixed_icdf, r), atoms=[(r, 1.0)],
                            family="fixed", params={"r": r})
    if family == "power":
        if not theta > 0.0:
            raise ConfigError("power kernel shape theta must be positive", "model.kernel.theta")
        return BinaryKernel(inverse_cdf=partial(_power_icdf, theta),
                            density=partial(_power_density, theta),
                            family="power", params={"theta": theta})
    raise ConfigError(f"unknown kernel family {family!r}", "model.kernel.family")


_KERNEL_CODES = {"uniform": KERNEL_UNIFORM, "fixed": KERNEL_FIXED, "power": KERNEL_POWER}


# -- model registry ----------------------------------------------------------

MODEL_REGISTRY = {
    "linear": {
        "defaults": {"a": 0.7, "fission": "constant", "b": None, "kernel": "uniform"},
        "doc": "c(x) = a*x.  Default fission rate b = 2a (uniform kernel) makes the "
               "size-biased tagged cell recurrent, so the transform root equals a "
               "and the harmonic weight is proportional to mass.",
        "condition_note": "c/x is constant: the tail growth-ratio condition fails "
                          "(no strict gap), so profile/martingale convergence "
                          "diagnostics are informational only.",
    },
    "saturating": {
        "defaults": {"a": 1.0, "fission": "constant", "b": 1.0, "kernel": "uniform"},
        "doc": "c(x) = a*x/(1+x).  Growth ratio a/(1+x) peaks at small mass.",
        "condition_note": "c/x -> a as x -> 0: the tail condition fails at the "
                          "small-mass end; population identities still hold.",
    },
    "hump": {
        "defaults": {"a": 1.0, "fission": "sigmoid", "b": 1.0, "kernel": "uniform"},
        "doc": "c(x) = a*x^2/(1+x^2) with fission b*x^2/(1+x^2).  Growth ratio "
               "peaks at x = 1 and vanishes at both ends; the shipped default "
               "for convergence experiments.",
        "condition_note": "c/x -> 0 at both ends: the tail condition holds as "
                          "soon as the Malthus exponent is positive.",
    },
}


def make_model(name: str, a: Optional[float] = None, fission: Optional[str] = None,
               b: Optional[float] = None, kernel: Optional[str] = None,
               r: float = 0.5, theta: float = 1.0,
               validation_grid: Optional[np.ndarray] = None) -> ModelSpec:
    """Construct a built-in model family with optional overrides."""
    if name not in MODEL_REGISTRY:
        raise ConfigError(f"unknown model family {name!r}; see list-models", "model.family")
    d = MODEL_REGISTRY[name]["defaults"]
    a = d["a"] if a is None else float(a)
    fission = d["fission"] if fission is None else fission
    kernel = d["kernel"] if kernel is None else kernel
    if b is None:
        b = d["b"]
        if b is None:  # linear family couples the default rate to a
            b = 2.0 * a
    b = float(b)

    growth = make_growth(name, a)
    fiss = make_fission(fission, b)
    kern = make_kernel(kernel, r=r, theta=theta)
    grid = DEFAULT_GRID.copy() if validation_grid is None else np.asarray(validation_grid, float)

    kparam = {"uniform": 0.0, "fixed": r, "power": theta}[kernel]
    compiled_args = (
        _GROWTH_FAMILIES[name][0], float(a),
        _FISSION_FAMILIES[fission][0], float(b), float(fiss.bound),
        _KERNEL_CODES[kernel], float(kparam),
    )
    params = {"a": a, "fission": fission, "b": b, "kernel": kernel}
    if kernel == "fixed":
        params["r"] = r
    if kernel == "power":
        params["theta"] = theta
    return ModelSpec(growth=growth, fission=fiss, kernel=kern, validation_grid=grid,
                     name=name, params=params, compiled_args=compiled_args)


# -- tabulated models --------------------------------------------------------

class _TabulatedFlow:
    """Exact-ish flow machinery for a tabulated growth rate.

    The antiderivative of 1/c is accumulated with per-interval 16-point
    Gauss-Legendre quadrature on a dense log grid through the monotone
    interpolant, then inverted through a monotone cubic.  Outside the
    table, c extends linearly in x below (bounded ratio) and as a constant
    above; both extensions integrate in closed form.
    """

    def __init__(self, x_table, c_table, n_dense=4096):
        x_table = np.asarray(x_table, float)
        c_table = np.asarray(c_table, float)
        self._logc = PchipInterpolator(np.log(x_table), np.log(c_table))
        self.x_lo, self.x_hi = float(x_table[0]), float(x_table[-1])
        self.c_lo, self.c_hi = float(c_table[0]), float(c_table[-1])

        xs = np.geomspace(self.x_lo, self.x_hi, n_dense)
        nodes, weights = np.polynomial.legendre.leggauss(16)
        lo, hi = xs[:-1], xs[1:]
        mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
        pts = mid[:, None] + half[:, None] * nodes[None, :]
        inv_c = 1.0 / np.exp(self._logc(np.log(pts)))
        seg = half * (inv_c @ weights)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        self._phi_mid = PchipInterpolator(np.log(xs), s)
        self._phi_mid_inv = PchipInterpolator(s, np.log(xs))
        self.s_hi = float(s[-1])

    def c(self, x):
        if x <= self.x_lo:
            return self.c_lo * x / self.x_lo
        if x >= self.x_hi:
            return self.c_hi
        return float(np.exp(self._logc(math.log(x))))

    def phi(self, x):
        if x <= self.x_lo:
            # int dz / (c_lo z / x_lo) = (x_lo/c_lo) log(x/x_lo)
            return (self.x_lo / self.c_lo) * math.log(x / self.x_lo)
        if x >= self.x_hi:
            return self.s_hi + (x - self.x_hi) / self.c_hi
        return float(self._phi_mid(math.log(x)))

    def phi_inv(self, s):
        if s <= 0.0:
            return self.x_lo * math.exp(s * self.c_lo / self.x_lo)
        if s >= self.s_hi:
            return self.x_hi + (s - self.s_hi) * self.c_hi
        return float(math.exp(self._phi_mid_inv(s)))


class _TabulatedRate:
    """Monotone-cubic interpolation of a tabulated rate, clamped outside."""

    def __init__(self, x_table, values):
        x_table = np.asarray(x_table, float)
        values = np.asarray(values, float)
        self._interp = PchipInterpolator(np.log(x_table), values)
        self.x_lo, self.x_hi = float(x_table[0]), float(x_table[-1])
        self.v_lo, self.v_hi = float(values[0]), float(values[-1])

    def __call__(self, x):
        if x <= self.x_lo:
            return self.v_lo
        if x >= self.x_hi:
            return self.v_hi
        return float(self._interp(math.log(x)))


def make_tabulated_model(x: np.ndarray, c: np.ndarray, B: np.ndarray,
                         kernel: str = "uniform", r: float = 0.5, theta: float = 1.0,
                         validation_grid: Optional[np.ndarray] = None) -> ModelSpec:
    """Model from tables of c and B on a common mass grid.

    Runs on the pure-Python backend (no compiled encoding).
    """
    x = np.asarray(x, float)
    c = np.asarray(c, float)
    B = np.asarray(B, float)
    if x.ndim != 1 or len(x) < 4:
        raise ConfigError("tabulated model needs at least 4 grid points", "model.table.x")
    if np.any(np.diff(x) <= 0.0):
        raise ConfigError("table grid must be strictly increasing", "model.table.x")
    if len(c) != len(x) or len(B) != len(x):
        raise ConfigError("c and B tables must match the grid length", "model.table")
    if np.any(c <= 0.0):
        raise ConfigError("tabulated c must be positive", "model.table.c")
    if np.any(B < 0.0):
        raise ConfigError("tabulated B must be nonnegative", "model.table.B")

    tf = _TabulatedFlow(x, c)
    growth = GrowthRate(eval=tf.c, antideriv=tf.phi, antideriv_inv=tf.phi_inv,
                        family="tabulated", params={"n_points": len(x)})
    brate = _TabulatedRate(x, B)
    fiss = FissionRate(eval=brate, bound=float(B.max()), family="tabulated",
                       params={"n_points": len(x)})
    kern = make_kernel(kernel, r=r, theta=theta)
    if validation_grid is None:
        validation_grid = np.geomspace(x[0], x[-1], 512)
    return ModelSpec(growth=growth, fission=fiss, kernel=kern,
                     validation_grid=np.asarray(validation_grid, float),
                     name="tabulated",
                     params={"kernel": kernel, "x_lo": float(x[0]), "x_hi": float(x[-1])},
                     compiled_args=None)


# -- config ------------------------------------------------------------------

def model_from_config(section: dict) -> ModelSpec:
    """Build a ModelSpec from the ``model:`` section of a config tree."""
    if not isinstance(section, dict):
        raise ConfigError("model section must be a mapping", "model")
    family = section.get("family")
    if family is None:
        raise ConfigError("model.family is required", "model.family")
    if family == "tabulated":
        table = section.get("table")
        if not isinstance(table, dict):
            raise ConfigError("tabulated model needs model.table", "model.table")
        kern = section.get("kernel", {}) or {}
        return make_tabulated_model(
            np.asarray(table.get("x"), float),
            np.asarray(table.get("c"), float),
            np.asarray(table.get("B"), float),
            kernel=kern.get("family", "uniform"),
            r=float(kern.get("r", 0.5)),
            theta=float(kern.get("theta", 1.0)),
        )
    growth = section.get("growth", {}) or {}
    fission = section.get("fission", {}) or {}
    kern = section.get("kernel", {}) or {}
    try:
        return make_model(
            family,
            a=growth.get("a"),
            fission=fission.get("family"),
            b=fission.get("b"),
            kernel=kern.get("family"),
            r=float(kern.get("r", 0.5)),
            theta=float(kern.get("theta", 1.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "model") from exc


def config_hash(config: dict) -> str:
    """Canonical sha256 of a resolved config tree (recorded in outputs)."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
