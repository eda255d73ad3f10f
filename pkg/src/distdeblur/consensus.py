"""Distributed Douglas-Rachford deblurring over overlapping blocks.

Each outer iteration has three phases:

1. every worker computes ``x_i = prox(u_i)`` of its local cost in the metric
   ``alpha_i = gamma * omega_i`` (bound constrained, budget growing with k);
2. workers swap ``(x_j, u_j)`` on shared pixels and form the weighted average
   ``zbar = sum_j omega_j (2 x_j - u_j) / sum_j omega_j`` over the co-owners;
3. ``u_i <- u_i + rho (zbar - x_i)``.

Contributions are summed in ascending block id on every worker, so all
backends (single process, threads, processes over TCP) agree bit for bit.
"""

from __future__ import annotations

import csv
import logging
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .imaging import Region, as_image, chop
from .objective import LocalObjective
from .operators import LocalBlurOperator
from .partition import BlockLayout, WeightField, build_weights, manifest_text, parse_manifest
from .psf import Psf
from .solver import SolverConfig, SolverReport, prox_local
from . import transport as tp

__all__ = [
    "DrConfig",
    "ObjectiveParams",
    "WorkerAbort",
    "WorkerState",
    "TraceRow",
    "ConvergenceTrace",
    "DrResult",
    "consensus_average",
    "initial_anchor",
    "make_states",
    "dr_iterate",
    "blend",
    "run_reference_singleprocess",
    "run_distributed",
    "BACKENDS",
]

log = logging.getLogger(__name__)

BACKENDS = ("reference", "inprocess", "socket")


@dataclass(frozen=True)
class DrConfig:
    gamma: float = 1e-3
    rho: float = 1.0
    outer_iterations: int = 25
    inner_initial: int = 10
    inner_increment: int = 10
    warm_start: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0 < self.rho < 2:
            raise ValueError(f"rho must lie in (0, 2), got {self.rho}")
        if self.outer_iterations < 1 or self.inner_initial < 0 or self.inner_increment < 0:
            raise ValueError("iteration counts must be positive")

    def budget(self, k: int) -> int:
        """Inner iterations allowed at outer iteration ``k`` (0-based); uncapped."""
        return self.inner_initial + k * self.inner_increment

    def total_budget(self) -> int:
        return sum(self.budget(k) for k in range(self.outer_iterations))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DrConfig":
        d = dict(d)
        d["solver"] = SolverConfig(**d.get("solver", {}))
        return cls(**d)


@dataclass(frozen=True)
class ObjectiveParams:
    lam: float
    delta: float = 100.0
    noise_var: float = 400.0
    isotropic: bool = True

    def __post_init__(self):
        if self.lam < 0 or self.delta <= 0 or self.noise_var <= 0:
            raise ValueError(f"invalid objective parameters {self}")

    @property
    def data_weight(self) -> float:
        return 1.0 / self.noise_var


class WorkerAbort(RuntimeError):
    """A worker failed; carries the block id, iteration and phase."""

    def __init__(self, worker, iteration, phase, cause):
        super().__init__(f"worker {worker} aborted in phase {phase} of iteration {iteration}: {cause}")
        self.worker, self.iteration, self.phase = worker, iteration, phase


def consensus_average(contributions) -> np.ndarray:
    """Weighted mean of ``(weight, value)`` pairs, accumulated in the given order."""
    num = den = None
    for w, v in contributions:
        w = np.asarray(w, dtype=np.float64)
        term = w * np.asarray(v, dtype=np.float64)
        num = term if num is None else num + term
        den = w if den is None else den + w
    if num is None:
        raise ValueError("no contributions")
    if np.any(den <= 0):
        raise ValueError("consensus weights sum to zero; layout weights are not a partition of unity")
    return num / den


class WorkerState:
    """Everything one block owns: data, operator, weights and the D-R iterates."""

    def __init__(self, layout: BlockLayout, weights: WeightField, plan: tp.ExchangePlan,
                 y: np.ndarray, psf: Psf, u0: np.ndarray, params: ObjectiveParams,
                 config: DrConfig, pad_fast: bool = False):
        i = plan.worker
        self.index = i
        self.block = layout.blocks[i]
        self.plan = plan
        self.config = config
        shape = self.block.estimate.shape
        if u0.shape != shape:
            raise ValueError(f"block {i}: initial anchor {u0.shape} != estimate region {shape}")
        op = LocalBlurOperator(psf, shape, pad_fast)
        self.objective = LocalObjective(y, op, params.data_weight, params.lam, params.delta,
                                        isotropic=params.isotropic)
        self.omega = weights[i]
        self.alpha = config.gamma * self.omega
        # neighbor weights over the shared pixels, needed for the local average
        self.neighbor_omega = {lk.neighbor: weights[lk.neighbor][lk.remote.slices] for lk in plan.links}
        # pixels both blocks actually weigh; elsewhere one side has no prox coupling
        self.co_owned = {lk.neighbor: (self.omega[lk.recv.slices] > 0) & (self.neighbor_omega[lk.neighbor] > 0)
                         for lk in plan.links}
        self.u = np.array(u0, dtype=np.float64)
        self.x = None
        self.report = None

    def prox_step(self, k: int) -> SolverReport:
        start = self.x if (self.config.warm_start and self.x is not None) else None
        self.x, self.report = prox_local(self.objective, self.u, self.alpha, self.config.budget(k),
                                         warm_start=start, config=self.config.solver)
        return self.report

    def local_cost(self) -> float:
        return self.objective.fidelity(self.x)

    def outgoing(self) -> dict:
        return {lk.neighbor: np.stack([self.x[lk.send.slices], self.u[lk.send.slices]])
                for lk in self.plan.links}

    def consensus_update(self, incoming: dict) -> float:
        """Phase 2 and 3 from the neighbors' ``(x_j, u_j)``; returns the local disagreement."""
        whole = Region.whole(self.u.shape)
        parts = [(self.index, whole, self.omega, 2.0 * self.x - self.u)]
        disagreement = 0.0
        for lk in self.plan.links:
            xj, uj = incoming[lk.neighbor]
            parts.append((lk.neighbor, lk.recv, self.neighbor_omega[lk.neighbor], 2.0 * xj - uj))
            mask = self.co_owned[lk.neighbor]
            if mask.any():
                gap = np.abs(self.x[lk.recv.slices] - xj)[mask]
                disagreement = max(disagreement, float(np.max(gap)))
        num = np.zeros(self.u.shape)
        den = np.zeros(self.u.shape)
        for _, reg, w, v in sorted(parts, key=lambda p: p[0]):
            num[reg.slices] += w * v
            den[reg.slices] += w
        if np.any(den <= 0):
            raise ValueError(f"block {self.index}: zero consensus weight")
        zbar = num / den
        self.u = self.u + self.config.rho * (zbar - self.x)
        return disagreement


@dataclass(frozen=True)
class TraceRow:
    iteration: int  # 1-based outer iteration
    block: int
    inner_iterations: int
    objective: float
    disagreement: float  # max |x_i - x_j| over shared pixels where both weights are positive


@dataclass(frozen=True)
class TimingRow:
    iteration: int
    block: int
    prox_seconds: float
    consensus_seconds: float


@dataclass
class ConvergenceTrace:
    rows: list = field(default_factory=list)
    timing: list = field(default_factory=list)

    def sort(self):
        self.rows.sort(key=lambda r: (r.iteration, r.block))
        self.timing.sort(key=lambda r: (r.iteration, r.block))

    @property
    def iterations(self) -> int:
        return max((r.iteration for r in self.rows), default=0)

    def max_disagreement(self) -> np.ndarray:
        """Global max consensus disagreement per outer iteration."""
        out = np.zeros(self.iterations)
        for r in self.rows:
            out[r.iteration - 1] = max(out[r.iteration - 1], r.disagreement)
        return out

    def objectives(self) -> np.ndarray:
        """``(iterations, blocks)`` array of local costs."""
        n = max(r.block for r in self.rows) + 1
        out = np.zeros((self.iterations, n))
        for r in self.rows:
            out[r.iteration - 1, r.block] = r.objective
        return out

    def write_csv(self, path) -> None:
        """Deterministic part of the trace; wall times go to :meth:`write_timing_csv`."""
        self.sort()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "block", "inner_iterations", "objective", "disagreement",
                        "max_disagreement"])
            maxd = self.max_disagreement()
            for r in self.rows:
                # plain floats: numpy scalars would print as np.float64(...)
                w.writerow([r.iteration, r.block, r.inner_iterations, repr(float(r.objective)),
                            repr(float(r.disagreement)), repr(float(maxd[r.iteration - 1]))])

    def write_timing_csv(self, path) -> None:
        self.sort()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "block", "prox_seconds", "consensus_seconds"])
            for r in self.timing:
                w.writerow([r.iteration, r.block, f"{r.prox_seconds:.6f}", f"{r.consensus_seconds:.6f}"])


@dataclass
class DrResult:
    image: np.ndarray  # blended estimate over the full estimate domain
    blocks: list  # final x_i per block
    trace: ConvergenceTrace


def initial_anchor(observed: np.ndarray, margin: int) -> np.ndarray:
    """Observed image extended into the estimate margin by edge replication."""
    return np.pad(observed, margin, mode="edge")


def _check_inputs(layout, observed, psfs):
    if observed.shape != layout.observed_shape:
        raise ValueError(f"observed image {observed.shape} != layout {layout.observed_shape}")
    if len(psfs) != len(layout):
        raise ValueError(f"{len(psfs)} PSFs for {len(layout)} blocks")
    for i, p in enumerate(psfs):
        if p.size != layout.psf_size:
            raise ValueError(f"PSF {i} has size {p.size}, layout expects {layout.psf_size}")


def make_states(layout, weights, observed, psfs, params, config, pad_fast=False) -> list:
    observed = as_image(observed)
    _check_inputs(layout, observed, psfs)
    u0 = initial_anchor(observed, layout.margin)
    plans = tp.build_exchange_plans(layout)
    return [
        WorkerState(layout, weights, plans[b.index], chop(observed, b.observed), psfs[b.index],
                    chop(u0, b.estimate), params, config, pad_fast)
        for b in layout.blocks
    ]


def blend(layout: BlockLayout, weights: WeightField, xs) -> np.ndarray:
    """``sum_i omega_i x_i`` on the estimate domain, accumulated in block order."""
    out = np.zeros(layout.estimate_shape)
    for b, x in zip(layout.blocks, xs):
        out[b.estimate.slices] += weights[b.index] * x
    return out


def dr_iterate(states: list, k: int):
    """One outer iteration for all workers in one process; returns the trace rows."""
    times = {}
    for s in states:
        t0 = time.perf_counter()
        s.prox_step(k)
        times[s.index] = time.perf_counter() - t0
    outgoing = {s.index: s.outgoing() for s in states}
    rows, timing = [], []
    for s in states:
        t0 = time.perf_counter()
        incoming = {j: outgoing[j][s.index] for j in s.plan.neighbors}
        d = s.consensus_update(incoming)
        rows.append(TraceRow(k + 1, s.index, s.report.iterations, float(s.local_cost()), float(d)))
        timing.append(TimingRow(k + 1, s.index, times[s.index], time.perf_counter() - t0))
    return rows, timing


def run_reference_singleprocess(layout, observed, psfs, params, config=DrConfig(),
                                weights=None, pad_fast=False) -> DrResult:
    """All workers in one process, phases executed sequentially in block order."""
    weights = build_weights(layout) if weights is None else weights
    states = make_states(layout, weights, observed, psfs, params, config, pad_fast)
    trace = ConvergenceTrace()
    for k in range(config.outer_iterations):
        rows, timing = dr_iterate(states, k)
        trace.rows += rows
        trace.timing += timing
    trace.sort()
    return DrResult(blend(layout, weights, [s.x for s in states]), [s.x for s in states], trace)


def worker_loop(state: WorkerState, endpoint, config: DrConfig) -> ConvergenceTrace:
    """The per-worker program shared by the threaded and the multi-process backends."""
    trace = ConvergenceTrace()
    for k in range(config.outer_iterations):
        phase = "prox"
        try:
            t0 = time.perf_counter()
            state.prox_step(k)
            t1 = time.perf_counter()
            phase = "barrier"
            endpoint.barrier(f"{k}:consensus")
            phase = "exchange"
            incoming = tp.exchange_halos(endpoint, state.plan, state.outgoing(), k)
            phase = "update"
            d = state.consensus_update(incoming)
            t2 = time.perf_counter()
        except WorkerAbort:
            raise
        except Exception as exc:
            raise WorkerAbort(state.index, k + 1, phase, exc) from exc
        cost = float(state.local_cost())
        trace.rows.append(TraceRow(k + 1, state.index, state.report.iterations, cost, float(d)))
        trace.timing.append(TimingRow(k + 1, state.index, t1 - t0, t2 - t1))
    return trace


def _run_threads(states, config, timeout):
    hub = tp.InProcessHub(len(states), timeout)
    traces = [None] * len(states)
    errors = []

    def target(s):
        try:
            traces[s.index] = worker_loop(s, hub.endpoint(s.index), config)
        except BaseException as exc:  # noqa: BLE001 - reported by the caller
            errors.append(exc)
            hub.abort(exc)

    threads = [threading.Thread(target=target, args=(s,), name=f"worker-{s.index}") for s in states]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        # the first failure is the root cause; the rest are wake-ups from abort
        root = next((e for e in errors if not isinstance(e.__cause__, tp.TransportError)), errors[0])
        raise root
    trace = ConvergenceTrace()
    for t in traces:
        trace.rows += t.rows
        trace.timing += t.timing
    trace.sort()
    return trace


def _socket_jobs(layout, observed, psfs, params, config, pad_fast, timeout):
    observed = as_image(observed)
    _check_inputs(layout, observed, psfs)
    u0 = initial_anchor(observed, layout.margin)
    text = manifest_text(layout)
    meta = {
        "manifest": text,
        "params": asdict(params),
        "config": config.to_dict(),
        "pad_fast": pad_fast,
        "timeout": timeout,
    }
    return [
        tp.pack(meta, {
            "y": chop(observed, b.observed),
            "psf": psfs[b.index].kernel,
            "u0": chop(u0, b.estimate),
        })
        for b in layout.blocks
    ]


def socket_worker_main(host: str, port: int) -> None:
    """Entry point of a worker process of the socket backend."""
    rank, job, _, wire = tp.connect_worker(host, port)
    meta, arrays = tp.unpack(job)
    layout, _ = parse_manifest(meta["manifest"])
    weights = build_weights(layout)
    plan = tp.build_exchange_plans(layout)[rank]
    config = DrConfig.from_dict(meta["config"])
    params = ObjectiveParams(**meta["params"])
    endpoint = wire(plan.neighbors)
    try:
        state = WorkerState(layout, weights, plan, arrays["y"], Psf(arrays["psf"]), arrays["u0"],
                            params, config, meta["pad_fast"])
        trace = worker_loop(state, endpoint, config)
    except Exception as exc:
        endpoint.fail(str(exc))
        raise
    rows = [[r.iteration, r.block, r.inner_iterations, r.objective, r.disagreement] for r in trace.rows]
    timing = [[r.iteration, r.block, r.prox_seconds, r.consensus_seconds] for r in trace.timing]
    endpoint.finish(tp.pack({"rows": rows, "timing": timing}, {"x": state.x}))
    endpoint.close()


def _run_sockets(layout, observed, psfs, params, config, pad_fast, timeout, host):
    jobs = _socket_jobs(layout, observed, psfs, params, config, pad_fast, timeout)
    bodies = tp.run_socket_job(jobs, host=host, timeout=timeout)
    xs, trace = [], ConvergenceTrace()
    for body in bodies:
        meta, arrays = tp.unpack(body)
        xs.append(arrays["x"])
        trace.rows += [TraceRow(int(a), int(b), int(c), float(d), float(e)) for a, b, c, d, e in meta["rows"]]
        trace.timing += [TimingRow(int(a), int(b), float(c), float(d)) for a, b, c, d in meta["timing"]]
    trace.sort()
    return xs, trace


def run_distributed(layout, observed, psfs, params, config=DrConfig(), transport="inprocess",
                    weights=None, pad_fast=False, timeout=tp.DEFAULT_TIMEOUT,
                    host="127.0.0.1") -> DrResult:
    """Run the D-R loop over ``transport`` (``reference``, ``inprocess`` or ``socket``)."""
    if transport not in BACKENDS:
        raise ValueError(f"unknown transport {transport!r}; expected one of {BACKENDS}")
    weights = build_weights(layout) if weights is None else weights
    if transport == "reference":
        return run_reference_singleprocess(layout, observed, psfs, params, config, weights, pad_fast)
    if transport == "inprocess":
        states = make_states(layout, weights, observed, psfs, params, config, pad_fast)
        trace = _run_threads(states, config, timeout)
        xs = [s.x for s in states]
    else:
        xs, trace = _run_sockets(layout, observed, psfs, params, config, pad_fast, timeout, host)
    return DrResult(blend(layout, weights, xs), xs, trace)
