"""Backend selection: compiled kernels when available, pure Python otherwise.

The compiled extension covers the closed-form model families; tabulated or
user-supplied models always run on the Python path.  Both paths consume
the same random streams in the same order, so switching backends does not
change results, only speed.  Force a backend with GROWFRAG_BACKEND=python
(or =compiled) or the ``backend=`` argument on the entry points.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py
from ._kernels_py import SpineData, make_path_ops
from .rng import RngStream

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built; pure-Python fallback
    _compiled = None


def compiled_available() -> bool:
    return _compiled is not None


def default_backend() -> str:
    env = os.environ.get("GROWFRAG_BACKEND")
    if env in ("python", "compiled"):
        return env
    return "compiled" if _compiled is not None else "python"


def resolve(model, backend: str | None = None) -> str:
    """Pick the backend actually used for this model."""
    choice = backend or default_backend()
    if choice == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels requested but the extension is not built")
        if model.compiled_args is None:
            choice = "python"  # model not representable in the compiled encoding
    return choice


def hitting_batch(model, x, y, horizon, n, stream: RngStream, backend=None):
    if resolve(model, backend) == "compiled":
        return _compiled.hitting_batch(model.compiled_args, x, y, horizon, n, stream.bitgen)
    return _kernels_py.hitting_batch(make_path_ops(model), x, y, horizon, n, stream)


def hitting_continue(model, xs, lws, y, t0, horizon, stream: RngStream, backend=None):
    xs = np.ascontiguousarray(xs, dtype=float)
    lws = np.ascontiguousarray(lws, dtype=float)
    if resolve(model, backend) == "compiled":
        return _compiled.hitting_continue(model.compiled_args, xs, lws, y, t0, horizon,
                                          stream.bitgen)
    return _kernels_py.hitting_continue(make_path_ops(model), xs, lws, y, t0, horizon, stream)


def path_at_times(model, x0, ts, n, stream: RngStream, backend=None):
    ts = np.ascontiguousarray(ts, dtype=float)
    if resolve(model, backend) == "compiled":
        return _compiled.path_at_times(model.compiled_args, x0, ts, n, stream.bitgen)
    return _kernels_py.path_at_times(make_path_ops(model), x0, ts, n, stream)


def stopped_line_batch(model, x0, kind, p1, p2, horizon, n, stream: RngStream, backend=None):
    if resolve(model, backend) == "compiled":
        return _compiled.stopped_line_batch(model.compiled_args, x0, kind, p1, p2,
                                            horizon, n, stream.bitgen)
    return _kernels_py.stopped_line_batch(make_path_ops(model), x0, kind, p1, p2,
                                          horizon, n, stream)


def spine_batch(model, sp: SpineData, x0, horizon, burn_in, edges, edge_phi,
                max_returns, stream: RngStream, backend=None):
    edges = np.ascontiguousarray(edges, dtype=float)
    edge_phi = np.ascontiguousarray(edge_phi, dtype=float)
    if resolve(model, backend) == "compiled":
        return _compiled.spine_batch(model.compiled_args, sp, x0, horizon, burn_in,
                                     edges, edge_phi, max_returns, stream.bitgen)
    return _kernels_py.spine_batch(make_path_ops(model), sp, x0, horizon, burn_in,
                                   edges, edge_phi, max_returns, stream)
