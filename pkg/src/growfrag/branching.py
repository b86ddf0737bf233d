"""Event-driven simulation of the cell population.

Each individual carries an Ulam-Harris label (tuple of 1-based child
indices, the founder being the empty tuple), grows along the deterministic
flow and fissions at rate B(x), sampled exactly by thinning a Poisson
clock of rate ``fission.bound``.  At a fission of mass x the daughters get
masses (1-r)x and r*x, so mass is conserved event-by-event.

The number of individuals may blow up in finite time for some models, so
runs carry a hard cap; hitting it raises ExplosionError with the partial
event log instead of silently truncating (silent truncation would bias
estimators downstream).
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._kernels_py import PathOps, make_path_ops
from .errors import ExplosionError, FlowDomainError
from .model import ModelSpec
from .rng import RngStream

DEFAULT_CAP = 1_000_000

Label = tuple[int, ...]


def format_label(label: Label) -> str:
    return ".".join(str(i) for i in label)


@dataclass(frozen=True)
class Individual:
    label: Label
    birth_time: float
    birth_mass: float
    fission_time: float  # +inf when no fission within the horizon


@dataclass(frozen=True)
class EventRecord:
    kind: str  # "fission"
    time: float
    label: Label
    mass_before: float
    ratio: float


@dataclass
class PopulationSnapshot:
    """Point measure of living cell masses at one time."""

    time: float
    atoms: list[tuple[Label, float]]

    def masses(self) -> np.ndarray:
        return np.array([m for _, m in self.atoms])

    def total_mass(self) -> float:
        return float(sum(m for _, m in self.atoms))

    def count(self) -> int:
        return len(self.atoms)


def observe(snapshot: PopulationSnapshot, f: Callable[[float], float]) -> float:
    """Integral of a test function against the snapshot point measure."""
    return float(sum(f(m) for _, m in snapshot.atoms))


@dataclass(frozen=True)
class StoppingLine:
    """Simple per-lineage freezing rule.

    kind "fixed_time" (t), "jump_count" (k), or "first_entrance" into the
    mass interval [lo, hi).  Each rule depends only on the ancestral
    trajectory up to its own value, which is what makes the frozen measure
    comparable with a stopped tagged-cell functional.
    """

    kind: str
    t: float = 0.0
    k: int = 0
    lo: float = 0.0
    hi: float = math.inf

    def __post_init__(self):
        if self.kind not in ("fixed_time", "jump_count", "first_entrance"):
            raise ValueError(f"unknown stopping line kind {self.kind!r}")
        if self.kind == "jump_count" and self.k < 1:
            raise ValueError("jump_count line needs k >= 1")
        if self.kind == "first_entrance" and not (0.0 < self.lo < self.hi):
            raise ValueError("first_entrance line needs 0 < lo < hi")


@dataclass
class PopulationResult:
    events: list[EventRecord]
    snapshots: list[PopulationSnapshot]
    individuals: list[Individual]
    n_created: int
    x0: float
    horizon: float


@dataclass
class FrozenMeasure:
    """Individuals frozen at a stopping line (and those the horizon cut off)."""

    line: StoppingLine
    atoms: list[tuple[Label, float, float]]  # (label, freeze time, mass)
    unfrozen: list[tuple[Label, float]]  # alive at horizon, line not yet triggered
    events: list[EventRecord] = field(default_factory=list)

    def observe(self, f: Callable[[float], float]) -> float:
        return float(sum(f(m) for _, _, m in self.atoms))


# ---------------------------------------------------------------------------


class _Sim:
    """Shared machinery of the plain and frozen runs."""

    def __init__(self, model: ModelSpec, x0: float, horizon: float, cap: int,
                 rng: RngStream, line: Optional[StoppingLine] = None):
        if not x0 > 0.0:
            raise FlowDomainError(f"x0 must be positive, got {x0}")
        if horizon < 0.0:
            raise FlowDomainError("horizon must be nonnegative")
        if cap < 1:
            raise ValueError("cap must be >= 1")
        self.ops: PathOps = make_path_ops(model)
        self.rng = rng
        self.horizon = horizon
        self.cap = cap
        self.line = line
        self.events: list[EventRecord] = []
        self.labels: list[Label] = []
        self.birth_t: list[float] = []
        self.birth_m: list[float] = []
        self.fission_t: list[float] = []
        self.alive: dict[int, None] = {}
        self.frozen: list[tuple[Label, float, float]] = []
        self.heap: list[tuple[float, int]] = []
        self._spawn((), 0.0, x0)

    # -- lineage bookkeeping

    def _spawn(self, label: Label, t: float, mass: float) -> None:
        if len(self.labels) >= self.cap:
            raise ExplosionError(
                f"population cap {self.cap} exceeded at t={t:.6g}",
                partial_log=self.events, n_individuals=len(self.labels))
        idx = len(self.labels)
        self.labels.append(label)
        self.birth_t.append(t)
        self.birth_m.append(mass)
        self.fission_t.append(math.inf)

        line = self.line
        if line is not None:
            if line.kind == "jump_count" and len(label) >= line.k:
                self.frozen.append((label, t, mass))
                return
            if line.kind == "first_entrance" and line.lo <= mass < line.hi:
                self.frozen.append((label, t, mass))
                return
        self.alive[idx] = None
        if self.ops.bmax > 0.0:
            dt = self.rng.exponential(self.ops.bmax)
            heapq.heappush(self.heap, (t + dt, idx))

    def _entrance_time(self, idx: int) -> float:
        # flow upcrossing into [lo, hi); jumps into the set are handled at birth
        line = self.line
        if line is None or line.kind != "first_entrance":
            return math.inf
        m = self.birth_m[idx]
        if m >= line.lo:
            return math.inf
        return self.birth_t[idx] + self.ops.time_to(m, line.lo)

    def mass_at(self, idx: int, t: float) -> float:
        return self.ops.flow_dt(self.birth_m[idx], t - self.birth_t[idx])

    # -- event loop

    def run_until(self, t_stop: float) -> None:
        """Process all candidate events up to min(t_stop, horizon)."""
        limit = min(t_stop, self.horizon)
        while self.heap and self.heap[0][0] <= limit:
            t_c, idx = heapq.heappop(self.heap)
            if idx not in self.alive:
                continue
            t_in = self._entrance_time(idx)
            if t_in <= t_c:
                del self.alive[idx]
                self.frozen.append((self.labels[idx], t_in, self.line.lo))
                continue
            x = self.mass_at(idx, t_c)
            if self.rng.uniform() * self.ops.bmax < self.ops.B(x):
                r = self.ops.icdf(self.rng.uniform())
                self.fission_t[idx] = t_c
                del self.alive[idx]
                label = self.labels[idx]
                self.events.append(EventRecord("fission", t_c, label, x, r))
                self._spawn(label + (1,), t_c, (1.0 - r) * x)
                self._spawn(label + (2,), t_c, r * x)
            else:
                dt = self.rng.exponential(self.ops.bmax)
                heapq.heappush(self.heap, (t_c + dt, idx))

    def snapshot(self, t: float) -> PopulationSnapshot:
        atoms = [(self.labels[i], self.mass_at(i, t))
                 for i in self.alive if self.birth_t[i] <= t]
        atoms.sort(key=lambda a: a[0])
        return PopulationSnapshot(time=t, atoms=atoms)

    def individuals(self) -> list[Individual]:
        return [Individual(self.labels[i], self.birth_t[i], self.birth_m[i],
                           self.fission_t[i])
                for i in range(len(self.labels))]


def simulate_population(model: ModelSpec, x0: float, horizon: float,
                        snapshot_times: Sequence[float] = (),
                        cap: int = DEFAULT_CAP,
                        rng: Optional[RngStream] = None,
                        seed: int = 0) -> PopulationResult:
    """Exact simulation of the population up to the horizon.

    Snapshots are taken at the requested times (all must lie within the
    horizon).  Deterministic given the stream: identical seeds give
    bit-identical event logs.
    """
    rng = rng if rng is not None else RngStream(seed, "branching")
    times = sorted(float(t) for t in snapshot_times)
    if times and times[-1] > horizon:
        raise FlowDomainError("snapshot times must not exceed the horizon")
    sim = _Sim(model, x0, horizon, cap, rng)
    snaps = []
    for t in times:
        sim.run_until(t)
        snaps.append(sim.snapshot(t))
    sim.run_until(horizon)
    return PopulationResult(events=sim.events, snapshots=snaps,
                            individuals=sim.individuals(),
                            n_created=len(sim.labels), x0=x0, horizon=horizon)


def freeze_at(model: ModelSpec, x0: float, line: StoppingLine, horizon: float,
              cap: int = DEFAULT_CAP, rng: Optional[RngStream] = None,
              seed: int = 0) -> FrozenMeasure:
    """Freeze each lineage the first time its own history triggers the line."""
    rng = rng if rng is not None else RngStream(seed, "branching.freeze")
    if line.kind == "fixed_time":
        if line.t > horizon:
            raise FlowDomainError("fixed-time line beyond the horizon")
        res = simulate_population(model, x0, horizon=line.t,
                                  snapshot_times=[line.t], cap=cap, rng=rng)
        atoms = [(lab, line.t, m) for lab, m in res.snapshots[0].atoms]
        return FrozenMeasure(line=line, atoms=atoms, unfrozen=[], events=res.events)

    sim = _Sim(model, x0, horizon, cap, rng, line=line)
    sim.run_until(horizon)
    # flow entrances scheduled after the last candidate but before the horizon
    if line.kind == "first_entrance":
        for idx in list(sim.alive):
            t_in = sim._entrance_time(idx)
            if t_in <= horizon:
                del sim.alive[idx]
                sim.frozen.append((sim.labels[idx], t_in, line.lo))
    unfrozen = [(sim.labels[i], sim.mass_at(i, horizon)) for i in sim.alive]
    unfrozen.sort(key=lambda a: a[0])
    frozen = sorted(sim.frozen, key=lambda a: a[0])
    return FrozenMeasure(line=line, atoms=frozen, unfrozen=unfrozen, events=sim.events)


# ---------------------------------------------------------------------------
# replicate batches


def _functional_worker(model, x0, ts, fs, n, seed, tag, batch, cap):
    rng = RngStream(seed, tag, batch)
    vals = np.full((n, len(ts), len(fs)), np.nan)
    capped = 0
    for i in range(n):
        try:
            res = simulate_population(model, x0, horizon=max(ts), snapshot_times=ts,
                                      cap=cap, rng=rng)
        except ExplosionError:
            capped += 1
            # the stream is now desynchronised for this replicate only; the
            # batch is dropped from estimates via its nan rows
            continue
        for j, snap in enumerate(res.snapshots):
            masses = snap.masses()
            for k, f in enumerate(fs):
                vals[i, j, k] = float(np.sum(f(masses))) if len(masses) else 0.0
    return vals, capped


def snapshot_functionals(model: ModelSpec, x0: float, ts: Sequence[float],
                         fs: Sequence[Callable], n: int, seed: int,
                         tag: str = "branching.functionals",
                         workers: int = 1, cap: int = DEFAULT_CAP,
                         batch_size: int = 256):
    """Per-replicate values of <Z_t, f> for each t and f.

    Returns (values array of shape (n, len(ts), len(fs)), capped count).
    Rows of replicates that hit the cap are NaN and reported.
    """
    from .runner import map_batches  # local import to avoid cycle

    ts = [float(t) for t in ts]
    jobs = [(model, x0, ts, list(fs), bn, seed, tag, bi, cap)
            for bi, bn in enumerate(_batch_sizes(n, batch_size))]
    outs = map_batches(_functional_worker, jobs, workers)
    vals = np.concatenate([o[0] for o in outs], axis=0) if outs else np.zeros((0, len(ts), len(fs)))
    capped = sum(o[1] for o in outs)
    return vals, capped


def _batch_sizes(n, batch_size):
    sizes = []
    while n > 0:
        sizes.append(min(batch_size, n))
        n -= sizes[-1]
    return sizes


# ---------------------------------------------------------------------------
# serialization (formats documented in the README; stable)

FLOAT_FMT = "%.17g"


def write_event_log(events: Sequence[EventRecord], path) -> None:
    """Line-delimited fission records: kind,time,label,mass_before,ratio."""
    with open(path, "w") as fh:
        fh.write("kind,time,label,mass_before,ratio\n")
        for ev in events:
            fh.write("%s,%s,%s,%s,%s\n" % (
                ev.kind, FLOAT_FMT % ev.time, format_label(ev.label),
                FLOAT_FMT % ev.mass_before, FLOAT_FMT % ev.ratio))


def write_snapshots_csv(snapshots: Sequence[PopulationSnapshot], path) -> None:
    with open(path, "w") as fh:
        fh.write("time,label,mass\n")
        for snap in snapshots:
            for label, mass in snap.atoms:
                fh.write("%s,%s,%s\n" % (
                    FLOAT_FMT % snap.time, format_label(label), FLOAT_FMT % mass))
