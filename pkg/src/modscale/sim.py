"""Deterministic discrete-event serving simulator.

Requests arrive via a seeded Poisson process (or a replayed trace), are routed
to instances by a speedup-weighted shortest-queue scheduler, and are served in
continuous batches: one dynamic batch per instance, admissions at decode-step
boundaries.  Step durations come from the analytic work/communication model via
calibration constants; KV-cache memory grows per decode step and can push a
device over capacity, crashing the resident batches.  The controller runs
inline every evaluation period; executed scaling operations take effect
atomically after their transition cost elapses.

All event times are quantized to 1 ms.  Identical scenario + seed yields
bit-identical traces.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autoscaler as ctrl
from . import ops as ops_mod
from ._kernels import EMPTY_F8, EMPTY_I8, comm_units, work_units
from .domain import (
    ClusterSpec,
    DeviceUsage,
    ModelSpec,
    ModuleCatalog,
    ModuleKind,
    PlacementState,
    device_usage,
    kv_resident_layer_count,
)
from .ops import OpRecord
from .speedup import SpeedupParams


class SimError(ValueError):
    pass


# --------------------------------------------------------------------------
# Workload


@dataclass(frozen=True)
class LengthDist:
    """Integer token-length distribution: fixed value or uniform [lo, hi]."""

    kind: str  # "fixed" | "uniform"
    value: int = 0
    lo: int = 0
    hi: int = 0

    def __post_init__(self) -> None:
        if self.kind == "fixed":
            if self.value < 1:
                raise SimError("fixed length must be >= 1")
        elif self.kind == "uniform":
            if not 1 <= self.lo <= self.hi:
                raise SimError("uniform length needs 1 <= lo <= hi")
        else:
            raise SimError(f"unknown length distribution {self.kind!r}")

    @classmethod
    def fixed(cls, value: int) -> "LengthDist":
        return cls("fixed", value=value)

    @classmethod
    def uniform(cls, lo: int, hi: int) -> "LengthDist":
        return cls("uniform", lo=lo, hi=hi)

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return self.value
        return int(rng.integers(self.lo, self.hi + 1))

    def mean(self) -> float:
        return float(self.value) if self.kind == "fixed" else (self.lo + self.hi) / 2.0


@dataclass(frozen=True)
class WorkloadSpec:
    """Poisson arrivals at `rps` for `duration_s`, or an explicit timestamp trace."""

    rps: float = 10.0
    duration_s: float = 60.0
    prompt_len: LengthDist = LengthDist.fixed(128)
    gen_len: LengthDist = LengthDist.fixed(256)
    trace_arrivals_s: tuple[float, ...] | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.rps < 0:
            raise SimError("rps must be >= 0")
        if self.duration_s < 0:
            raise SimError("duration_s must be >= 0")
        if self.trace_arrivals_s is not None:
            ts = self.trace_arrivals_s
            if any(b < a for a, b in zip(ts, ts[1:])):
                raise SimError("trace timestamps must be non-decreasing")


@dataclass
class Request:
    id: int
    arrival_s: float
    prompt_len: int
    gen_len: int
    instance: int | None = None
    completion_s: float | None = None
    failed: bool = False
    requeued: bool = False
    generated: int = 0
    prefilled: bool = False

    @property
    def arrival_ms(self) -> int:
        return int(round(self.arrival_s * 1000))


def generate_arrivals(spec: WorkloadSpec, seed: int | None = None) -> list[Request]:
    """Deterministic arrival stream; identical seeds reproduce identical output."""
    effective_seed = spec.seed if spec.seed is not None else (seed if seed is not None else 0)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(effective_seed)))
    times: list[float] = []
    if spec.trace_arrivals_s is not None:
        times = [t for t in spec.trace_arrivals_s if t <= spec.duration_s]
    elif spec.rps > 0 and spec.duration_s > 0:
        t = 0.0
        while True:
            t += rng.exponential(1.0 / spec.rps)
            if t > spec.duration_s:
                break
            times.append(t)
    out = []
    for i, t in enumerate(times):
        out.append(
            Request(
                id=i,
                arrival_s=t,
                prompt_len=spec.prompt_len.sample(rng),
                gen_len=spec.gen_len.sample(rng),
            )
        )
    return out


# --------------------------------------------------------------------------
# Scheduling


def schedule(
    queue_depths: Sequence[tuple[int, int, float]],
    rng: np.random.Generator,
) -> int:
    """Pick an instance for one request: shortest queue weighted by speedup.

    `queue_depths` holds (instance_id, depth, speedup) tuples.  The score is
    depth / speedup; exact score ties are broken by a seeded draw proportional
    to speedup, so faster instances receive proportionally more load.
    """
    if not queue_depths:
        raise SimError("no instances registered")
    scored = sorted(
        ((depth / spd, iid, spd) for iid, depth, spd in queue_depths),
        key=lambda t: (t[0], t[1]),
    )
    best = scored[0][0]
    tied = [(iid, spd) for score, iid, spd in scored if score == best]
    if len(tied) == 1:
        return tied[0][0]
    total = sum(spd for _, spd in tied)
    x = rng.random() * total
    acc = 0.0
    for iid, spd in tied:
        acc += spd
        if x < acc:
            return iid
    return tied[-1][0]


# --------------------------------------------------------------------------
# Step timing


@dataclass(frozen=True)
class CalibrationParams:
    """Converts abstract work/communication units into seconds."""

    kappa_compute: float = 8e-8
    kappa_comm: float = 1e-5
    overhead_s: float = 5e-4

    def __post_init__(self) -> None:
        if self.kappa_compute <= 0 or self.kappa_comm <= 0 or self.overhead_s <= 0:
            raise SimError("calibration constants must be > 0")


@dataclass(frozen=True)
class StepArrays:
    """Placement flattened for the timing kernels."""

    layer_ptr: np.ndarray
    caps: np.ndarray
    run_min_p: np.ndarray
    run_bw: np.ndarray
    busy_devices: tuple[int, ...]
    kv_layer_count: dict[int, int]


def build_step_arrays(placement: PlacementState, cluster: ClusterSpec) -> StepArrays:
    ptr = [0]
    caps: list[float] = []
    for li in range(1, placement.n_layers + 1):
        for rep in placement.replicas_of(li):
            caps.append(cluster.device(rep.device_id).compute_gflops)
        ptr.append(len(caps))
    run_min_p: list[int] = []
    run_bw: list[float] = []
    for dev_id in sorted({r.device_id for reps in placement.replicas for r in reps}):
        for run in ops_mod.replica_runs(placement, dev_id):
            run_min_p.append(min(len(placement.replicas_of(li)) for li in run))
            run_bw.append(cluster.bandwidth(placement.original_device(run[0]), dev_id))
    return StepArrays(
        layer_ptr=np.asarray(ptr, dtype=np.int64),
        caps=np.asarray(caps, dtype=np.float64) if caps else EMPTY_F8,
        run_min_p=np.asarray(run_min_p, dtype=np.int64) if run_min_p else EMPTY_I8,
        run_bw=np.asarray(run_bw, dtype=np.float64) if run_bw else EMPTY_F8,
        busy_devices=tuple(sorted(placement.devices_used())),
        kv_layer_count=kv_resident_layer_count(placement),
    )


def step_time_s(
    arrays: StepArrays,
    d_model: int,
    bs: int,
    seq_len: int,
    calibration: CalibrationParams,
    delta: float,
    offload_fraction: float = 0.0,
    offload_multiplier: float = 2.0,
    include_overhead: bool = True,
) -> float:
    """Duration of one batch pass over the model at (bs, seq_len)."""
    if bs <= 0:
        return 0.0
    w = work_units(bs, seq_len, arrays.layer_ptr, arrays.caps, float(d_model))
    c = comm_units(bs, seq_len, arrays.run_min_p, arrays.run_bw, float(d_model))
    t = calibration.kappa_compute * w + calibration.kappa_comm * delta * c
    if include_overhead:
        t += calibration.overhead_s
    return t * (1.0 + offload_fraction * (offload_multiplier - 1.0))


@dataclass(frozen=True)
class StepOutcome:
    """One batch pass: how long it takes and how the KV cache grows."""

    duration_s: float
    kv_tokens_delta: int  # per KV-resident layer


def step_batch(
    arrays: StepArrays,
    d_model: int,
    batch: Sequence["Request"],
    phase: str,
    calibration: CalibrationParams,
    delta: float,
    offload_fraction: float = 0.0,
    offload_multiplier: float = 2.0,
) -> StepOutcome:
    """Cost of serving `batch` for one phase.

    Prefill processes the new requests' prompts in one pass (no per-step
    overhead) and deposits their prompt tokens into the KV cache; each decode
    step advances every request by one token.
    """
    if not batch:
        return StepOutcome(0.0, 0)
    if phase == "prefill":
        seq = max(r.prompt_len for r in batch)
        duration = step_time_s(
            arrays, d_model, len(batch), seq, calibration, delta,
            offload_fraction, offload_multiplier, include_overhead=False,
        )
        return StepOutcome(duration, sum(r.prompt_len for r in batch))
    if phase == "decode":
        duration = step_time_s(
            arrays, d_model, len(batch), 1, calibration, delta,
            offload_fraction, offload_multiplier, include_overhead=True,
        )
        return StepOutcome(duration, len(batch))
    raise SimError(f"unknown phase {phase!r}")


def detect_oom(memory_mb: float, capacity_mb: float) -> bool:
    """OOM when projected memory strictly exceeds capacity."""
    return memory_mb > capacity_mb


# --------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True)
class SimMetrics:
    """Windowed snapshot the controller consumes."""

    window_s: float
    completions: int
    failures: int
    violation_rate: float
    throughput_rps: float
    throughput_tok_s: float
    mean_latency_s: float
    p50_latency_s: float
    p95_latency_s: float
    p99_latency_s: float
    mean_gen_len: float
    mean_prompt_len: float
    device_mem_util: dict[int, float]
    device_busy_frac: dict[int, float]
    oom_events: int


def _percentiles(latencies: Sequence[float]) -> tuple[float, float, float, float]:
    if not latencies:
        return (0.0, 0.0, 0.0, 0.0)
    arr = np.asarray(latencies, dtype=np.float64)
    p50, p95, p99 = np.percentile(arr, [50.0, 95.0, 99.0])
    return (float(arr.mean()), float(p50), float(p95), float(p99))


# --------------------------------------------------------------------------
# Scenario containers (assembled by config.py)


@dataclass(frozen=True)
class InstanceConfig:
    id: int
    home_device: int
    max_batch_size: int = 16
    replicas: tuple[tuple[int, int], ...] = ()  # (layer, device)

    def build_placement(self, n_layers: int) -> PlacementState:
        placement = PlacementState.sequential(n_layers, self.home_device)
        for layer, dev in self.replicas:
            placement = placement.with_replica(layer, dev)
        return placement


@dataclass(frozen=True)
class SimOptions:
    oom_restart_s: float = 30.0
    drain_s: float = 30.0
    trace_window_s: float = 1.0

    def __post_init__(self) -> None:
        if self.oom_restart_s < 0 or self.drain_s < 0 or self.trace_window_s <= 0:
            raise SimError("invalid sim options")


@dataclass(frozen=True)
class Scenario:
    cluster: ClusterSpec
    model: ModelSpec
    catalog: ModuleCatalog
    workload: WorkloadSpec
    instances: tuple[InstanceConfig, ...]
    controller: ctrl.ControllerConfig = ctrl.ControllerConfig()
    controller_enabled: bool = True
    calibration: CalibrationParams = CalibrationParams()
    params: SpeedupParams = SpeedupParams()
    options: SimOptions = SimOptions()
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.instances:
            raise SimError("scenario needs at least one instance")
        ids = [i.id for i in self.instances]
        if len(set(ids)) != len(ids):
            raise SimError("instance ids must be unique")


# --------------------------------------------------------------------------
# Engine internals


@dataclass
class _Transition:
    switch_ms: int
    placement: PlacementState
    bs: int
    offload_fraction: float
    reserved_mb: dict[int, float]


class _Instance:
    def __init__(self, cfg: InstanceConfig, placement: PlacementState):
        self.id = cfg.id
        self.placement = placement
        self.max_batch_size = cfg.max_batch_size
        self.offload_fraction = 0.0
        self.queue: deque[Request] = deque()
        self.batch: list[Request] = []
        self.prefill_pending: list[Request] = []
        self.busy_until_ms: int | None = None
        self.step_kind: str | None = None
        self.step_started_ms: int = 0
        self.unavailable_until_ms: int = 0
        self.pending: _Transition | None = None
        self.arrays: StepArrays | None = None
        self.static_mb: dict[int, float] = {}
        self.speedup: float = 1.0
        self.resident_tokens: int = 0  # per KV-holding layer

    @property
    def depth(self) -> int:
        return len(self.queue) + len(self.batch)


class Engine:
    """Single-threaded deterministic event loop over one scenario."""

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.cluster = scenario.cluster
        self.model = scenario.model
        self.catalog = scenario.catalog
        self.cfg = scenario.controller
        self.calib = scenario.calibration
        self.params = scenario.params

        seed_seq = np.random.SeedSequence(scenario.seed)
        arr_seed, sched_seed = seed_seq.spawn(2)
        self.sched_rng = np.random.Generator(np.random.PCG64(sched_seed))
        self.arrivals = generate_arrivals(
            scenario.workload,
            seed=scenario.workload.seed if scenario.workload.seed is not None else scenario.seed,
        )
        self.arr_idx = 0

        self.instances: list[_Instance] = []
        for icfg in sorted(scenario.instances, key=lambda c: c.id):
            placement = icfg.build_placement(scenario.model.n_layers)
            inst = _Instance(icfg, placement)
            self._refresh_placement(inst)
            self.instances.append(inst)

        self.window_ms = max(1, int(round(scenario.options.trace_window_s * 1000)))
        self.violation_window_ms = max(1, int(round(self.cfg.violation_window_s * 1000)))
        self.eval_period_ms = max(1, int(round(self.cfg.eval_period_s * 1000)))
        self.duration_ms = int(round(scenario.workload.duration_s * 1000))
        self.hard_end_ms = self.duration_ms + int(round(scenario.options.drain_s * 1000))
        self.oom_restart_ms = int(round(scenario.options.oom_restart_s * 1000))

        self.next_ctrl_ms = self.eval_period_ms if scenario.controller_enabled else None
        self.next_window_idx = 0

        # sliding monitor state: (t_ms, latency_s, violated, gen_tokens, prompt_len, failed)
        self._completions: deque[tuple[int, float, bool, int, int, bool]] = deque()
        self._busy: dict[int, deque[tuple[int, int]]] = {d: deque() for d in self.cluster.device_ids}
        # per-window accumulation
        self._w_arrivals: dict[int, int] = {}
        self._w_latencies: dict[int, list[float]] = {}
        self._w_completions: dict[int, int] = {}
        self._w_failures: dict[int, int] = {}
        self._w_violations: dict[int, int] = {}
        self._w_tokens: dict[int, int] = {}
        self._w_oom: dict[int, int] = {}
        self._w_busy: dict[int, dict[int, int]] = {}
        self._oom_seen: set[tuple[int, int]] = set()

        self.trace_rows: list[dict] = []
        self.op_rows: list[OpRecord] = []
        self.decision_rows: list[dict] = []
        self.total_scaling_cost_s = 0.0
        self.counters = {"arrived": 0, "completed": 0, "failed": 0, "oom_events": 0}

    # -- placement plumbing ---------------------------------------------------

    def _refresh_placement(self, inst: _Instance) -> None:
        inst.arrays = build_step_arrays(inst.placement, self.cluster)
        usage = device_usage(inst.placement, self.catalog, cluster=self.cluster)
        inst.static_mb = {d: u.memory_mb for d, u in usage.items()}
        inst.speedup = self._published_speedup(inst.placement)

    def _published_speedup(self, placement: PlacementState) -> float:
        return ctrl.estimate_speedup(placement, self.cluster, self.model, self.params)

    # -- memory ---------------------------------------------------------------

    def _kv_mb(self, inst: _Instance, device_id: int) -> float:
        count = inst.arrays.kv_layer_count.get(device_id, 0)
        if not count or not inst.resident_tokens:
            return 0.0
        bytes_mb = inst.resident_tokens * self.catalog.kv_bytes_per_token_per_layer * count / 1e6
        return bytes_mb * (1.0 - inst.offload_fraction)

    def _device_memory_mb(self, device_id: int) -> float:
        total = 0.0
        for inst in self.instances:
            total += inst.static_mb.get(device_id, 0.0)
            total += self._kv_mb(inst, device_id)
            if inst.pending:
                total += inst.pending.reserved_mb.get(device_id, 0.0)
        return total

    def _usage_by_device(self) -> dict[int, DeviceUsage]:
        out = {}
        for dev in self.cluster.devices:
            mem = self._device_memory_mb(dev.id)
            comp = 0.0
            for inst in self.instances:
                usage = device_usage(inst.placement, self.catalog)
                if dev.id in usage:
                    comp += usage[dev.id].compute_gflops
            out[dev.id] = DeviceUsage(mem, comp)
        return out

    # -- monitor --------------------------------------------------------------

    def _window_of(self, t_ms: int) -> int:
        return t_ms // self.window_ms

    def _record_completion(self, t_ms: int, req: Request, violated: bool) -> None:
        latency = (t_ms - req.arrival_ms) / 1000.0
        self._completions.append((t_ms, latency, violated, req.gen_len, req.prompt_len, req.failed))
        w = self._window_of(t_ms)
        # Failed requests keep their end-to-end latency in the percentile pool:
        # a request denied after 40 s is a worse outcome than a slow response.
        self._w_latencies.setdefault(w, []).append(latency)
        if not req.failed:
            self._w_completions[w] = self._w_completions.get(w, 0) + 1
        else:
            self._w_failures[w] = self._w_failures.get(w, 0) + 1
        if violated:
            self._w_violations[w] = self._w_violations.get(w, 0) + 1

    def _record_busy(self, devices: Iterable[int], start_ms: int, end_ms: int) -> None:
        for d in devices:
            self._busy[d].append((start_ms, end_ms))
        k = start_ms // self.window_ms
        while k * self.window_ms < end_ms:
            lo = max(start_ms, k * self.window_ms)
            hi = min(end_ms, (k + 1) * self.window_ms)
            if hi > lo:
                row = self._w_busy.setdefault(k, {})
                for d in devices:
                    row[d] = row.get(d, 0) + (hi - lo)
            k += 1

    def _sliding_violation_rate(self, t_ms: int) -> float:
        lo = t_ms - self.violation_window_ms
        while self._completions and self._completions[0][0] <= lo:
            self._completions.popleft()
        if not self._completions:
            return 0.0
        total = len(self._completions)
        bad = sum(1 for rec in self._completions if rec[2])
        return bad / total

    def _sliding_busy_frac(self, device_id: int, t_ms: int) -> float:
        lo = t_ms - self.violation_window_ms
        dq = self._busy[device_id]
        while dq and dq[0][1] <= lo:
            dq.popleft()
        acc = 0
        for s, e in dq:
            acc += min(e, t_ms) - max(s, lo)
        span = min(t_ms, self.violation_window_ms)
        return min(1.0, acc / span) if span > 0 else 0.0

    def monitor_tick(self, t_ms: int) -> SimMetrics:
        """Current sliding-window metrics snapshot."""
        lo = t_ms - self.violation_window_ms
        recs = [r for r in self._completions if r[0] > lo]
        finished = [r for r in recs if not r[5]]
        lats = [r[1] for r in recs]
        mean, p50, p95, p99 = _percentiles(lats)
        window_s = min(t_ms, self.violation_window_ms) / 1000.0 or 1.0
        tokens = sum(r[3] for r in finished)
        return SimMetrics(
            window_s=window_s,
            completions=len(finished),
            failures=len(recs) - len(finished),
            violation_rate=self._sliding_violation_rate(t_ms),
            throughput_rps=len(finished) / window_s,
            throughput_tok_s=tokens / window_s,
            mean_latency_s=mean,
            p50_latency_s=p50,
            p95_latency_s=p95,
            p99_latency_s=p99,
            mean_gen_len=(sum(r[3] for r in finished) / len(finished)) if finished else 0.0,
            mean_prompt_len=(sum(r[4] for r in finished) / len(finished)) if finished else 0.0,
            device_mem_util={
                d.id: self._device_memory_mb(d.id) / d.memory_mb for d in self.cluster.devices
            },
            device_busy_frac={
                d.id: self._sliding_busy_frac(d.id, t_ms) for d in self.cluster.devices
            },
            oom_events=self.counters["oom_events"],
        )

    # -- event handlers -------------------------------------------------------

    def _commit_transitions(self, t_ms: int) -> None:
        for inst in self.instances:
            if inst.pending and inst.pending.switch_ms <= t_ms:
                tr = inst.pending
                inst.pending = None
                inst.placement = tr.placement
                inst.max_batch_size = tr.bs
                inst.offload_fraction = tr.offload_fraction
                self._refresh_placement(inst)

    def _dispatch_arrivals(self, t_ms: int) -> None:
        while self.arr_idx < len(self.arrivals) and self.arrivals[self.arr_idx].arrival_ms <= t_ms:
            req = self.arrivals[self.arr_idx]
            self.arr_idx += 1
            view = [(inst.id, inst.depth, inst.speedup) for inst in self.instances]
            target = schedule(view, self.sched_rng)
            req.instance = target
            inst = next(i for i in self.instances if i.id == target)
            inst.queue.append(req)
            self.counters["arrived"] += 1
            w = self._window_of(req.arrival_ms)
            self._w_arrivals[w] = self._w_arrivals.get(w, 0) + 1

    def _complete_steps(self, t_ms: int) -> None:
        for inst in self.instances:
            if inst.busy_until_ms is None or inst.busy_until_ms > t_ms:
                continue
            kind = inst.step_kind
            inst.busy_until_ms = None
            inst.step_kind = None
            if kind == "prefill":
                for req in inst.prefill_pending:
                    req.prefilled = True
                inst.resident_tokens += sum(r.prompt_len for r in inst.prefill_pending)
                inst.prefill_pending = []
                self._check_oom(inst, t_ms)
            elif kind == "decode":
                bs = len(inst.batch)
                inst.resident_tokens += bs
                w = self._window_of(t_ms)
                self._w_tokens[w] = self._w_tokens.get(w, 0) + bs
                done = []
                for req in inst.batch:
                    req.generated += 1
                    if req.generated >= req.gen_len:
                        done.append(req)
                for req in done:
                    inst.batch.remove(req)
                    inst.resident_tokens -= req.prompt_len + req.generated
                    req.completion_s = t_ms / 1000.0
                    latency = req.completion_s - req.arrival_s
                    violated = latency > self.cfg.slo_latency_s
                    self.counters["completed"] += 1
                    self._record_completion(t_ms, req, violated)
                self._check_oom(inst, t_ms)

    def _check_oom(self, inst: _Instance, t_ms: int) -> None:
        for dev in self.cluster.devices:
            if detect_oom(self._device_memory_mb(dev.id), dev.memory_mb):
                if (t_ms, dev.id) not in self._oom_seen:
                    self._oom_seen.add((t_ms, dev.id))
                    self.counters["oom_events"] += 1
                    w = self._window_of(t_ms)
                    self._w_oom[w] = self._w_oom.get(w, 0) + 1
                self._crash_device(dev.id, t_ms)

    def _crash_device(self, device_id: int, t_ms: int) -> None:
        for inst in self.instances:
            touches = device_id in inst.arrays.busy_devices or inst.arrays.kv_layer_count.get(
                device_id, 0
            )
            if not touches or not inst.batch:
                continue
            victims = inst.batch + inst.prefill_pending
            # prefill_pending requests are also members of batch; dedupe
            seen = set()
            ordered = [r for r in victims if not (id(r) in seen or seen.add(id(r)))]
            inst.batch = []
            inst.prefill_pending = []
            inst.resident_tokens = 0
            inst.busy_until_ms = None
            inst.step_kind = None
            inst.unavailable_until_ms = t_ms + self.oom_restart_ms
            for req in reversed(ordered):
                req.generated = 0
                req.prefilled = False
                if req.requeued:
                    req.failed = True
                    req.completion_s = t_ms / 1000.0
                    self.counters["failed"] += 1
                    self._record_completion(t_ms, req, violated=True)
                else:
                    req.requeued = True
                    inst.queue.appendleft(req)

    def _start_steps(self, t_ms: int) -> None:
        for inst in self.instances:
            if inst.busy_until_ms is not None or t_ms < inst.unavailable_until_ms:
                continue
            while len(inst.batch) < inst.max_batch_size and inst.queue:
                inst.batch.append(inst.queue.popleft())
            if not inst.batch:
                continue
            fresh = [r for r in inst.batch if not r.prefilled]
            if fresh:
                outcome = step_batch(
                    inst.arrays, self.model.d_model, fresh, "prefill", self.calib,
                    self.params.delta, inst.offload_fraction,
                    self.cfg.offload_latency_multiplier,
                )
                inst.step_kind = "prefill"
                inst.prefill_pending = fresh
            else:
                outcome = step_batch(
                    inst.arrays, self.model.d_model, inst.batch, "decode", self.calib,
                    self.params.delta, inst.offload_fraction,
                    self.cfg.offload_latency_multiplier,
                )
                inst.step_kind = "decode"
            dur_ms = max(1, int(math.ceil(outcome.duration_s * 1000 - 1e-9)))
            inst.step_started_ms = t_ms
            inst.busy_until_ms = t_ms + dur_ms
            self._record_busy(inst.arrays.busy_devices, t_ms, inst.busy_until_ms)

    # -- controller -----------------------------------------------------------

    def _pressure_view(self, inst: _Instance, t_ms: int) -> ctrl.PressureView:
        extra = {}
        for dev in self.cluster.devices:
            own = inst.static_mb.get(dev.id, 0.0) + self._kv_mb(inst, dev.id)
            extra[dev.id] = max(0.0, self._device_memory_mb(dev.id) - own)
        return ctrl.PressureView(
            cluster=self.cluster,
            model=self.model,
            catalog=self.catalog,
            violation_rate=self._sliding_violation_rate(t_ms),
            busy_fraction={d: self._sliding_busy_frac(d, t_ms) for d in self.cluster.device_ids},
            kv_tokens=float(inst.resident_tokens),
            active_batch=len(inst.batch),
            mean_prompt_len=self.sc.workload.prompt_len.mean(),
            mean_gen_len=self.sc.workload.gen_len.mean(),
            extra_memory_mb=extra,
            lookahead_s=self.cfg.oom_lookahead_s,
            delta=self.params.delta,
            kappa_compute=self.calib.kappa_compute,
            kappa_comm=self.calib.kappa_comm,
            step_overhead_s=self.calib.overhead_s,
            offload_multiplier=self.cfg.offload_latency_multiplier,
        )

    def _controller_tick(self, t_ms: int) -> None:
        ready = [inst for inst in self.instances if inst.pending is None]
        if not ready:
            return
        views = [
            ctrl.InstanceView(
                instance_id=inst.id,
                placement=inst.placement,
                bs=inst.max_batch_size,
                offload_fraction=inst.offload_fraction,
                view=self._pressure_view(inst, t_ms),
            )
            for inst in ready
        ]
        decision = ctrl.controller_step(
            views, self.cluster, self.model, self.catalog, self.cfg, self.params,
            self._usage_by_device(),
        )
        if decision.trigger == "none":
            return
        inst = next(i for i in self.instances if i.id == decision.instance_id)
        phased = list(decision.ops)
        effective = (
            phased
            or decision.placement != inst.placement
            or (decision.bs is not None and decision.bs != inst.max_batch_size)
            or (
                decision.offload_fraction is not None
                and decision.offload_fraction != inst.offload_fraction
            )
        )
        if not effective:
            # nothing left to try (e.g. bs already floored); log the attempt only
            self.decision_rows.append(
                {
                    "tick_ms": t_ms,
                    "trigger": decision.trigger,
                    "instance": decision.instance_id,
                    "n_ops": 0,
                    "sp_before": decision.speedup_before,
                    "sp_after": decision.speedup_after,
                    "bs_before": decision.bs_before,
                    "bs_after": decision.bs,
                    "resolved": decision.resolved,
                    "cost_s": 0.0,
                }
            )
            return
        op_costs = [p.cost for p in phased]
        total = ops_mod.aggregate_cost(
            [p.op for p in phased], op_costs, ops_mod.DEFAULT_COST_MODEL, self.cfg.cost_mode
        )
        switch_ms = t_ms + max(1, int(math.ceil(total.time_s * 1000 - 1e-9)))
        old_static = inst.static_mb
        new_usage = device_usage(decision.placement, self.catalog)
        old_kv_count = inst.arrays.kv_layer_count
        new_kv_count = kv_resident_layer_count(decision.placement)
        kv_per_layer_mb = (
            inst.resident_tokens * self.catalog.kv_bytes_per_token_per_layer / 1e6
        ) * (1.0 - inst.offload_fraction)
        reserved: dict[int, float] = {}
        for dev in self.cluster.device_ids:
            delta_static = new_usage.get(dev, DeviceUsage()).memory_mb - old_static.get(dev, 0.0)
            delta_kv = (new_kv_count.get(dev, 0) - old_kv_count.get(dev, 0)) * kv_per_layer_mb
            amount = max(0.0, delta_static) + max(0.0, delta_kv)
            if amount > 0:
                reserved[dev] = amount
        inst.pending = _Transition(
            switch_ms=switch_ms,
            placement=decision.placement,
            bs=decision.bs if decision.bs is not None else inst.max_batch_size,
            offload_fraction=(
                decision.offload_fraction
                if decision.offload_fraction is not None
                else inst.offload_fraction
            ),
            reserved_mb=reserved,
        )
        for p in phased:
            if isinstance(p.op, ctrl.PerformanceReduction):
                self.op_rows.append(
                    OpRecord(t_ms, "performance_reduction", 0, None, None,
                             p.cost.time_s, p.cost.transient_memory_mb, p.phase,
                             f"bs={p.op.new_bs},offload={p.op.new_offload_fraction}")
                )
            else:
                src = None
                if isinstance(p.op, ops_mod.MigrateLayer):
                    src = inst.placement.original_device(p.op.layer)
                elif isinstance(p.op, ops_mod.MigrateSubModule):
                    if p.op.kind is ModuleKind.KV_CACHE:
                        src = inst.placement.kv_device(p.op.layer)
                    else:
                        prev = inst.placement.override_device(p.op.layer, p.op.kind)
                        src = prev if prev is not None else inst.placement.original_device(p.op.layer)
                self.op_rows.append(
                    OpRecord.from_op(t_ms, p.op, p.cost, src_device=src, phase=p.phase)
                )
        self.total_scaling_cost_s += total.time_s
        self.decision_rows.append(
            {
                "tick_ms": t_ms,
                "trigger": decision.trigger,
                "instance": decision.instance_id,
                "n_ops": len(phased),
                "sp_before": decision.speedup_before,
                "sp_after": decision.speedup_after,
                "bs_before": decision.bs_before,
                "bs_after": decision.bs,
                "resolved": decision.resolved,
                "cost_s": total.time_s,
            }
        )

    # -- trace ----------------------------------------------------------------

    def _emit_windows_until(self, end_exclusive_ms: int) -> None:
        while (self.next_window_idx + 1) * self.window_ms <= end_exclusive_ms:
            self._emit_window(self.next_window_idx)
            self.next_window_idx += 1

    def _emit_window(self, k: int) -> None:
        w_s = self.window_ms / 1000.0
        lats = self._w_latencies.get(k, [])
        mean, p50, p95, p99 = _percentiles(lats)
        completions = self._w_completions.get(k, 0)
        failures = self._w_failures.get(k, 0)
        violations = self._w_violations.get(k, 0)
        denom = completions + failures
        busy = self._w_busy.get(k, {})
        in_flight = (
            self.counters["arrived"] - self.counters["completed"] - self.counters["failed"]
        )
        row: dict = {
            "tick_ms": k * self.window_ms,
            "rps_in": self._w_arrivals.get(k, 0) / w_s,
            "throughput_rps": completions / w_s,
            "throughput_tok_s": self._w_tokens.get(k, 0) / w_s,
            "completions": completions,
            "failures": failures,
            "violations": violations,
            "violation_rate": (violations / denom) if denom else 0.0,
            "mean_latency_s": mean,
            "p50_latency_s": p50,
            "p95_latency_s": p95,
            "p99_latency_s": p99,
            "oom_events": self._w_oom.get(k, 0),
            "arrived_total": self.counters["arrived"],
            "completed_total": self.counters["completed"],
            "failed_total": self.counters["failed"],
            "in_flight": in_flight,
        }
        for dev in self.cluster.devices:
            row[f"mem_util_{dev.id}"] = self._device_memory_mb(dev.id) / dev.memory_mb
            row[f"busy_{dev.id}"] = min(1.0, busy.get(dev.id, 0) / self.window_ms)
        self.trace_rows.append(row)
        for store in (self._w_latencies, self._w_completions, self._w_failures,
                      self._w_violations, self._w_tokens, self._w_oom, self._w_busy,
                      self._w_arrivals):
            store.pop(k, None)

    # -- main loop ------------------------------------------------------------

    def _drained(self) -> bool:
        if self.arr_idx < len(self.arrivals):
            return False
        for inst in self.instances:
            if inst.batch or inst.queue or inst.busy_until_ms is not None or inst.pending:
                return False
        return True

    def run(self) -> "RunResult":
        t = 0
        final_t = 0
        while True:
            self._emit_windows_until(t)
            self._commit_transitions(t)
            self._dispatch_arrivals(t)
            self._complete_steps(t)
            self._start_steps(t)
            if self.next_ctrl_ms is not None and t == self.next_ctrl_ms:
                self._controller_tick(t)
                self.next_ctrl_ms += self.eval_period_ms
            final_t = t
            if t >= self.hard_end_ms:
                break
            if t >= self.duration_ms and self._drained():
                break
            candidates: list[int] = []
            if self.arr_idx < len(self.arrivals):
                candidates.append(self.arrivals[self.arr_idx].arrival_ms)
            for inst in self.instances:
                if inst.busy_until_ms is not None:
                    candidates.append(inst.busy_until_ms)
                if inst.pending is not None:
                    candidates.append(inst.pending.switch_ms)
                if inst.unavailable_until_ms > t and (inst.queue or inst.batch):
                    candidates.append(inst.unavailable_until_ms)
            if self.next_ctrl_ms is not None and self.next_ctrl_ms <= self.hard_end_ms:
                candidates.append(self.next_ctrl_ms)
            next_window_end = (self.next_window_idx + 1) * self.window_ms
            if next_window_end <= self.hard_end_ms:
                candidates.append(next_window_end)
            candidates = [c for c in candidates if c > t]
            if not candidates:
                break
            t = min(min(candidates), self.hard_end_ms)
        self._emit_windows_until(final_t + self.window_ms)
        return self._result(final_t)

    def _result(self, final_t_ms: int) -> "RunResult":
        rows = self.trace_rows
        total_completions = sum(r["completions"] for r in rows)
        total_failures = sum(r["failures"] for r in rows)
        total_violations = sum(r["violations"] for r in rows)
        total_outcomes = total_completions + total_failures

        def weighted(field_name: str) -> float:
            # latency stats pool completed and failed requests alike
            num = sum(r[field_name] * (r["completions"] + r["failures"]) for r in rows)
            return num / total_outcomes if total_outcomes else 0.0

        summary = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.sc.seed,
            "duration_s": self.sc.workload.duration_s,
            "final_t_s": final_t_ms / 1000.0,
            "arrived": self.counters["arrived"],
            "completed": self.counters["completed"],
            "failed": self.counters["failed"],
            "in_flight_end": (
                self.counters["arrived"] - self.counters["completed"] - self.counters["failed"]
            ),
            "mean_throughput_rps": (
                sum(r["throughput_rps"] for r in rows) / len(rows) if rows else 0.0
            ),
            "mean_throughput_tok_s": (
                sum(r["throughput_tok_s"] for r in rows) / len(rows) if rows else 0.0
            ),
            "mean_latency_s": weighted("mean_latency_s"),
            "p95_latency_s": weighted("p95_latency_s"),
            "violation_rate": (
                total_violations / (total_completions + total_failures)
                if (total_completions + total_failures)
                else 0.0
            ),
            "oom_events": self.counters["oom_events"],
            "total_scaling_cost_s": self.total_scaling_cost_s,
            "n_scaling_ops": len(self.op_rows),
            "final_placements": {
                str(inst.id): list(inst.placement.p_vector()) for inst in self.instances
            },
        }
        return RunResult(tuple(rows), tuple(self.op_rows), tuple(self.decision_rows), summary)


SCHEMA_VERSION = "1.0"


@dataclass(frozen=True)
class RunResult:
    trace_rows: tuple[dict, ...]
    op_rows: tuple[OpRecord, ...]
    decision_rows: tuple[dict, ...]
    summary: dict


def run(scenario: Scenario) -> RunResult:
    """Execute one scenario end to end; deterministic under (scenario, seed)."""
    return Engine(scenario).run()
