"""Scaling decision logic: greedy layer replication, three-phase pressure relief,
and the threshold-driven controller that arbitrates between them.

Scale-up greedily replicates layers into vacant devices, preferring candidates
that extend contiguous layer runs (fewer span boundaries); every executed
replication must strictly improve the estimated speedup.  Scale-down relieves a
pressured device in three escalating phases: migrate sub-modules/layers away,
evict co-located replicas, and finally reduce batch size while offloading KV.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import ops as ops_mod
from ._kernels import comm_units, work_units
from .domain import (
    ClusterSpec,
    DeviceUsage,
    ModelSpec,
    ModuleCatalog,
    ModuleKind,
    PlacementState,
    device_usage,
    kv_resident_layer_count,
    vacancy_rate,
)
from .ops import (
    EvictReplica,
    InfeasibleOpError,
    MigrateLayer,
    MigrateSubModule,
    OpCostModel,
    OpError,
    ReplicateLayer,
    ScalingOp,
    TransitionCost,
)
from .speedup import BatchAssignment, SpeedupParams, gamma_for_cluster, speedup, speedup_homo


class NoDestinationError(RuntimeError):
    """No device can host the module; the caller tries the next candidate."""


@dataclass(frozen=True)
class ControllerConfig:
    """Thresholds and step sizes for the closed control loop.

    Scale-up triggers when a device's resource vacancy rate exceeds ``t_up``;
    scale-down when the windowed SLO violation rate exceeds ``t_down`` or a
    device is projected to run out of memory.
    """

    t_up: float = 0.3
    t_down: float = 0.05
    slo_latency_s: float = 10.0
    violation_window_s: float = 10.0
    replica_size_mb: float = 861.0  # one layer's footprint plus KV headroom
    bs_step: int = 5
    eval_period_s: float = 1.0
    mem_pressure: float = 0.9
    compute_pressure: float = 0.9
    oom_lookahead_s: float = 5.0
    max_migration_candidates: int = 4
    offload_step: float = 0.25
    offload_latency_multiplier: float = 2.0
    vacancy_scope: str = "device"  # or "cluster": gate scale-up on the mean vacancy
    scale_up_enabled: bool = True
    cost_mode: str = "batched"

    def __post_init__(self) -> None:
        if not 0.0 <= self.t_down <= 1.0:
            raise ValueError("t_down must be in [0, 1]")
        if not 0.0 < self.t_up <= 1.0:
            raise ValueError("t_up must be in (0, 1]")
        if self.bs_step < 1:
            raise ValueError("bs_step must be >= 1")
        if self.replica_size_mb <= 0:
            raise ValueError("replica_size_mb must be > 0")
        if self.vacancy_scope not in ("device", "cluster"):
            raise ValueError("vacancy_scope must be 'device' or 'cluster'")


@dataclass(frozen=True)
class PressureView:
    """Snapshot of one instance's load the controller reasons over.

    ``extra_memory_mb`` is per-device memory the instance's own placement does
    not account for (other instances, reservations).  KV projections are
    analytic: tokens/s per layer equals the active batch over the decode step
    time, bounded by the steady-state cache of a full batch.
    """

    cluster: ClusterSpec
    model: ModelSpec
    catalog: ModuleCatalog
    violation_rate: float = 0.0
    busy_fraction: Mapping[int, float] = field(default_factory=dict)
    kv_tokens: float = 0.0               # resident tokens per KV-holding layer
    active_batch: int = 0
    mean_prompt_len: float = 0.0
    mean_gen_len: float = 0.0
    extra_memory_mb: Mapping[int, float] = field(default_factory=dict)
    lookahead_s: float = 5.0
    delta: float = 1.0
    kappa_compute: float = 8e-8
    kappa_comm: float = 1e-5
    step_overhead_s: float = 5e-4
    offload_multiplier: float = 2.0

    def static_memory_mb(self, placement: PlacementState, device_id: int) -> float:
        usage = device_usage(placement, self.catalog, cluster=self.cluster)
        return usage[device_id].memory_mb if device_id in usage else 0.0

    def kv_memory_mb(
        self, placement: PlacementState, device_id: int, offload_fraction: float
    ) -> float:
        count = kv_resident_layer_count(placement).get(device_id, 0)
        bytes_mb = self.kv_tokens * self.catalog.kv_bytes_per_token_per_layer * count / 1e6
        return bytes_mb * (1.0 - offload_fraction)

    def current_memory_mb(
        self, placement: PlacementState, device_id: int, offload_fraction: float = 0.0
    ) -> float:
        return (
            self.static_memory_mb(placement, device_id)
            + self.kv_memory_mb(placement, device_id, offload_fraction)
            + self.extra_memory_mb.get(device_id, 0.0)
        )

    def decode_step_s(self, placement: PlacementState, bs: int, offload_fraction: float) -> float:
        if bs <= 0:
            return 0.0
        layer_ptr, caps, run_min_p, run_bw = _flatten(placement, self.cluster)
        w = work_units(bs, 1, layer_ptr, caps, float(self.model.d_model))
        c = comm_units(bs, 1, run_min_p, run_bw, float(self.model.d_model))
        t = self.kappa_compute * w + self.kappa_comm * self.delta * c + self.step_overhead_s
        return t * (1.0 + offload_fraction * (self.offload_multiplier - 1.0))

    def projected_memory_mb(
        self,
        placement: PlacementState,
        device_id: int,
        bs: int,
        offload_fraction: float = 0.0,
    ) -> float:
        """Current memory plus KV growth over the lookahead, capped at steady state."""
        current_kv = self.kv_memory_mb(placement, device_id, offload_fraction)
        base = self.static_memory_mb(placement, device_id) + self.extra_memory_mb.get(device_id, 0.0)
        count = kv_resident_layer_count(placement).get(device_id, 0)
        active = min(self.active_batch, bs) if bs > 0 else 0
        if count == 0 or active <= 0:
            return base + current_kv
        step_s = self.decode_step_s(placement, active, offload_fraction)
        if step_s <= 0:
            return base + current_kv
        rate_mb_s = (
            active * self.catalog.kv_bytes_per_token_per_layer * count / 1e6 / step_s
        ) * (1.0 - offload_fraction)
        steady_mb = (
            bs * (self.mean_prompt_len + self.mean_gen_len)
            * self.catalog.kv_bytes_per_token_per_layer * count / 1e6
        ) * (1.0 - offload_fraction)
        projected_kv = min(current_kv + rate_mb_s * self.lookahead_s, max(steady_mb, current_kv))
        return base + projected_kv

    def kv_mb_by_layer(self, offload_fraction: float = 0.0) -> dict[int, float]:
        per_layer = self.kv_tokens * self.catalog.kv_bytes_per_token_per_layer / 1e6
        per_layer *= 1.0 - offload_fraction
        return {li: per_layer for li in range(1, self.model.n_layers + 1)}


def _flatten(placement: PlacementState, cluster: ClusterSpec):
    """Flatten a placement into the kernel arrays (see sim.build_step_arrays)."""
    from .sim import build_step_arrays

    arrays = build_step_arrays(placement, cluster)
    return arrays.layer_ptr, arrays.caps, arrays.run_min_p, arrays.run_bw


def estimate_speedup(
    placement: PlacementState,
    cluster: ClusterSpec,
    model: ModelSpec,
    params: SpeedupParams,
) -> float:
    """Published per-instance speedup: closed form when the cluster is
    homogeneous (or gamma is pinned), the general model otherwise."""
    if params.gamma is not None or cluster.is_homogeneous():
        gamma = (
            params.gamma
            if params.gamma is not None
            else gamma_for_cluster(cluster, model, params.delta)
        )
        return speedup_homo(placement.p_vector(), gamma)
    assignment = BatchAssignment.even(placement, params.base_batch, params.seq_len)
    return speedup(placement, assignment, cluster, model, params)


def get_eligible_nodes(
    cluster: ClusterSpec,
    usage_by_device: Mapping[int, DeviceUsage],
    cfg: ControllerConfig,
) -> list[int]:
    """Devices worth replicating into: vacancy above t_up and room for one replica,
    ordered by descending vacancy rate (ties by ascending id)."""
    rates: dict[int, float] = {}
    free: dict[int, float] = {}
    for dev in cluster.devices:
        u = usage_by_device.get(dev.id, DeviceUsage())
        rates[dev.id] = vacancy_rate(u, dev)
        free[dev.id] = dev.memory_mb - u.memory_mb
    if cfg.vacancy_scope == "cluster":
        mean = sum(rates.values()) / len(rates)
        if mean <= cfg.t_up:
            return []
        pool = [d for d in rates if free[d] >= cfg.replica_size_mb]
    else:
        pool = [
            d for d, v in rates.items()
            if v > cfg.t_up and free[d] >= cfg.replica_size_mb
        ]
    return sorted(pool, key=lambda d: (-rates[d], d))


def sort_candidates_by_continuity(
    placement: PlacementState,
    dst_device: int,
    max_replicas: int,
    n_layers: int | None = None,
) -> list[int]:
    """Layers without a copy on the destination, scored by the contiguous run
    they would join there; longest run first, ties by ascending layer id."""
    if max_replicas <= 0:
        return []
    n = n_layers or placement.n_layers
    present = {
        li for li in range(1, n + 1) if placement.has_copy_on(li, dst_device)
    }
    candidates = [
        li for li in range(1, n + 1)
        if li not in present and not placement.overridden_kinds(li)
    ]

    def run_length(layer: int) -> int:
        length = 1
        lo = layer - 1
        while lo in present:
            length += 1
            lo -= 1
        hi = layer + 1
        while hi in present:
            length += 1
            hi += 1
        return length

    candidates.sort(key=lambda li: (-run_length(li), li))
    return candidates[:max_replicas]


@dataclass(frozen=True)
class ScaleUpResult:
    placement: PlacementState
    speedup_before: float
    speedup_after: float
    executed: tuple[tuple[ScalingOp, TransitionCost], ...]
    speedup_trace: tuple[float, ...]


def scale_up(
    placement: PlacementState,
    cluster: ClusterSpec,
    model: ModelSpec,
    catalog: ModuleCatalog,
    cfg: ControllerConfig,
    params: SpeedupParams,
    usage_by_device: Mapping[int, DeviceUsage] | None = None,
    cost_model: OpCostModel = ops_mod.DEFAULT_COST_MODEL,
) -> ScaleUpResult:
    """Greedy scale-up: walk eligible devices, try continuity-sorted candidate
    layers, and replicate whenever the simulated speedup strictly improves.

    `usage_by_device` should be the aggregate view (all instances, KV,
    reservations); memory the placement itself does not explain is treated as
    foreign load during feasibility checks.
    """
    if usage_by_device is None:
        usage_by_device = device_usage(placement, catalog, cluster=cluster)

    homo = params.gamma is not None or cluster.is_homogeneous()
    if homo:
        gamma = params.gamma if params.gamma is not None else gamma_for_cluster(
            cluster, model, params.delta
        )

        def evaluate(p: PlacementState) -> float:
            return speedup_homo(p.p_vector(), gamma)
    else:
        def evaluate(p: PlacementState) -> float:
            assignment = BatchAssignment.even(p, params.base_batch, params.seq_len)
            return speedup(p, assignment, cluster, model, params)

    sp_best = evaluate(placement)
    sp_before = sp_best
    trace = [sp_best]
    working = placement
    executed: list[tuple[ScalingOp, TransitionCost]] = []
    used_mb = {d: u.memory_mb for d, u in usage_by_device.items()}

    for dev_id in get_eligible_nodes(cluster, usage_by_device, cfg):
        dev = cluster.device(dev_id)
        available = dev.memory_mb - used_mb.get(dev_id, 0.0)
        max_replicas = int(available // cfg.replica_size_mb)
        if max_replicas <= 0:
            continue
        candidates = sort_candidates_by_continuity(working, dev_id, max_replicas)
        for layer_id in candidates:
            trial = working.with_replica(layer_id, dev_id)
            sp = evaluate(trial)
            if sp > sp_best:
                op = ReplicateLayer(layer_id, dev_id)
                try:
                    working, cost = ops_mod.apply(
                        working, op, catalog, cluster,
                        cost_model=cost_model,
                        extra_used_mb={
                            d: max(0.0, used_mb.get(d, 0.0)
                                   - _static_mb(working, catalog, d))
                            for d in cluster.device_ids
                        },
                    )
                except InfeasibleOpError:
                    continue
                executed.append((op, cost))
                used_mb[dev_id] = used_mb.get(dev_id, 0.0) + catalog.decoder_layer_mb
                sp_best = sp
                trace.append(sp_best)
    return ScaleUpResult(working, sp_before, sp_best, tuple(executed), tuple(trace))


def _static_mb(placement: PlacementState, catalog: ModuleCatalog, device_id: int) -> float:
    usage = device_usage(placement, catalog)
    return usage[device_id].memory_mb if device_id in usage else 0.0


def is_violating(
    device_id: int,
    cfg: ControllerConfig,
    placement: PlacementState,
    view: PressureView,
    bs: int,
    offload_fraction: float = 0.0,
) -> bool:
    """True when the windowed SLO violation rate exceeds t_down or the device's
    projected memory reaches capacity (OOM-imminent)."""
    if view.violation_rate > cfg.t_down:
        return True
    cap = view.cluster.device(device_id).memory_mb
    return view.projected_memory_mb(placement, device_id, bs, offload_fraction) >= cap


@dataclass(frozen=True)
class MigrationCandidate:
    layer: int
    kind: ModuleKind
    with_kv: bool = False


def filter_modules(
    placement: PlacementState,
    src_device: int,
    view: PressureView,
    cfg: ControllerConfig,
    bs: int,
    offload_fraction: float = 0.0,
) -> list[MigrationCandidate]:
    """Migration candidates on the pressured device, ordered by pressure type.

    Memory-bound: KV caches first, then whole layers (with KV).  Compute-bound:
    FFN then attention projections, then whole layers.  Both: whole layers.
    Returns a bounded prefix, never the full model.
    """
    cap = view.cluster.device(src_device).memory_mb
    projected = view.projected_memory_mb(placement, src_device, bs, offload_fraction)
    mem_bound = projected >= cap * cfg.mem_pressure
    comp_bound = view.busy_fraction.get(src_device, 0.0) >= cfg.compute_pressure
    if not mem_bound and not comp_bound:
        return []

    originals = [li for li in placement.original_layers_on(src_device)]
    unreplicated = [li for li in originals if len(placement.replicas_of(li)) == 1]
    out: list[MigrationCandidate] = []
    if mem_bound and comp_bound:
        out.extend(MigrationCandidate(li, ModuleKind.DECODER_LAYER, with_kv=True)
                   for li in originals)
    elif mem_bound:
        kv_here = [
            li for li in range(1, placement.n_layers + 1)
            if placement.kv_device(li) == src_device
            and len(placement.replicas_of(li)) == 1
        ]
        out.extend(MigrationCandidate(li, ModuleKind.KV_CACHE) for li in kv_here)
        out.extend(MigrationCandidate(li, ModuleKind.DECODER_LAYER, with_kv=True)
                   for li in originals)
    else:
        for li in unreplicated:
            for kind in (ModuleKind.FFN_PROJ_GATE, ModuleKind.FFN_PROJ_UP,
                         ModuleKind.FFN_PROJ_DOWN):
                if placement.override_device(li, kind) is None:
                    out.append(MigrationCandidate(li, kind))
        for li in unreplicated:
            for kind in (ModuleKind.ATTN_PROJ_Q, ModuleKind.ATTN_PROJ_K,
                         ModuleKind.ATTN_PROJ_V, ModuleKind.ATTN_PROJ_O):
                if placement.override_device(li, kind) is None:
                    out.append(MigrationCandidate(li, kind))
        out.extend(MigrationCandidate(li, ModuleKind.DECODER_LAYER, with_kv=False)
                   for li in originals)
    return out[: cfg.max_migration_candidates]


def find_optimal_destination(
    cluster: ClusterSpec,
    candidate: MigrationCandidate,
    placement: PlacementState,
    catalog: ModuleCatalog,
    view: PressureView,
    src_device: int,
    bs: int,
    offload_fraction: float = 0.0,
) -> int:
    """Feasible device maximizing post-migration vacancy; ties by ascending id."""
    if candidate.kind is ModuleKind.KV_CACHE:
        mem_mb = view.kv_mb_by_layer(offload_fraction).get(candidate.layer, 0.0)
        gflops = 0.0
    else:
        mem_mb = catalog.static_memory_mb(candidate.kind)
        gflops = catalog.compute_gflops_ref(candidate.kind)
        if candidate.kind is ModuleKind.DECODER_LAYER and candidate.with_kv:
            mem_mb += view.kv_mb_by_layer(offload_fraction).get(candidate.layer, 0.0)
    if mem_mb <= 0:
        mem_mb = 1e-9  # zero-size KV still needs a residence

    static = device_usage(placement, catalog, cluster=cluster)
    best: tuple[float, int] | None = None
    for dev in cluster.devices:
        if dev.id == src_device:
            continue
        if candidate.kind is ModuleKind.DECODER_LAYER and placement.has_copy_on(
            candidate.layer, dev.id
        ):
            continue
        mem_now = view.current_memory_mb(placement, dev.id, offload_fraction)
        comp_now = static[dev.id].compute_gflops if dev.id in static else 0.0
        post_mem = mem_now + mem_mb
        post_comp = comp_now + gflops
        if post_mem >= dev.memory_mb or post_comp >= dev.compute_gflops:
            continue
        vac = min(
            (dev.memory_mb - post_mem) / dev.memory_mb,
            (dev.compute_gflops - post_comp) / dev.compute_gflops,
        )
        key = (-vac, dev.id)
        if best is None or key < best:
            best = key
    if best is None:
        raise NoDestinationError(f"no feasible destination for {candidate}")
    return best[1]


@dataclass(frozen=True)
class PerformanceReduction:
    """Phase-3 action: lower the batch cap and offload a KV fraction off-device."""

    new_bs: int
    new_offload_fraction: float


@dataclass(frozen=True)
class PhasedOp:
    phase: int
    op: ScalingOp | PerformanceReduction
    cost: TransitionCost


@dataclass(frozen=True)
class ScaleDownResult:
    placement: PlacementState
    bs: int
    offload_fraction: float
    ops: tuple[PhasedOp, ...]
    resolved: bool


def sort_evictees(placement: PlacementState, device_id: int) -> list[int]:
    """Reverse of the replication priority: shortest runs first, ties by
    descending layer id."""
    runs = ops_mod.replica_runs(placement, device_id)
    scored = [(len(run), li) for run in runs for li in run]
    scored.sort(key=lambda t: (t[0], -t[1]))
    return [li for _, li in scored]


def scale_down(
    placement: PlacementState,
    cluster: ClusterSpec,
    model: ModelSpec,
    catalog: ModuleCatalog,
    cfg: ControllerConfig,
    view: PressureView,
    src_device: int,
    bs: int,
    offload_fraction: float = 0.0,
    cost_model: OpCostModel = ops_mod.DEFAULT_COST_MODEL,
) -> ScaleDownResult:
    """Three-phase pressure relief; returns as soon as the violation clears.

    Phase 1 migrates filtered modules to their best destinations; phase 2
    evicts co-located replicas; phase 3 steps the batch size down (floored at
    1) while offloading KV.  Best effort: the final state is returned even if
    still violating.
    """
    cur_bs = bs
    cur_off = offload_fraction
    working = placement
    executed: list[PhasedOp] = []

    def violating(p: PlacementState, b: int, off: float) -> bool:
        return is_violating(src_device, cfg, p, view, b, off)

    if not violating(working, cur_bs, cur_off):
        return ScaleDownResult(working, cur_bs, cur_off, (), resolved=True)

    # Phase 1: module migration.
    for cand in filter_modules(working, src_device, view, cfg, cur_bs, cur_off):
        try:
            dst = find_optimal_destination(
                cluster, cand, working, catalog, view, src_device, cur_bs, cur_off
            )
        except NoDestinationError:
            continue
        if cand.kind is ModuleKind.DECODER_LAYER:
            op: ScalingOp = MigrateLayer(cand.layer, dst, with_kv=cand.with_kv)
        else:
            op = MigrateSubModule(cand.layer, cand.kind, dst)
        try:
            working, cost = ops_mod.apply(
                working, op, catalog, cluster,
                cost_model=cost_model,
                extra_used_mb=view.extra_memory_mb,
                kv_mb_by_layer=view.kv_mb_by_layer(cur_off),
            )
        except OpError:
            continue
        executed.append(PhasedOp(1, op, cost))
        if not violating(working, cur_bs, cur_off):
            return ScaleDownResult(working, cur_bs, cur_off, tuple(executed), resolved=True)

    # Phase 2: replica eviction.
    for layer_id in sort_evictees(working, src_device):
        op = EvictReplica(layer_id, src_device)
        working, cost = ops_mod.apply(working, op, catalog, cluster, cost_model=cost_model)
        executed.append(PhasedOp(2, op, cost))
        if not violating(working, cur_bs, cur_off):
            return ScaleDownResult(working, cur_bs, cur_off, tuple(executed), resolved=True)

    # Phase 3: performance reduction, committed each iteration.
    while violating(working, cur_bs, cur_off):
        new_bs = max(1, cur_bs - cfg.bs_step)
        new_off = min(1.0, cur_off + cfg.offload_step)
        if new_bs == cur_bs and new_off == cur_off:
            break
        cur_bs, cur_off = new_bs, new_off
        executed.append(
            PhasedOp(
                3,
                PerformanceReduction(cur_bs, cur_off),
                TransitionCost(cost_model.coordination_time_s, 0.0),
            )
        )
    resolved = not violating(working, cur_bs, cur_off)
    return ScaleDownResult(working, cur_bs, cur_off, tuple(executed), resolved)


@dataclass(frozen=True)
class InstanceView:
    """What the controller sees of one serving instance."""

    instance_id: int
    placement: PlacementState
    bs: int
    offload_fraction: float
    view: PressureView


@dataclass(frozen=True)
class ControllerDecision:
    trigger: str  # "scale_down" | "scale_up" | "none"
    instance_id: int | None = None
    placement: PlacementState | None = None
    bs: int | None = None
    offload_fraction: float | None = None
    ops: tuple = ()
    speedup_before: float | None = None
    speedup_after: float | None = None
    bs_before: int | None = None
    resolved: bool | None = None


def controller_step(
    instances: Sequence[InstanceView],
    cluster: ClusterSpec,
    model: ModelSpec,
    catalog: ModuleCatalog,
    cfg: ControllerConfig,
    params: SpeedupParams,
    usage_by_device: Mapping[int, DeviceUsage],
    cost_model: OpCostModel = ops_mod.DEFAULT_COST_MODEL,
) -> ControllerDecision:
    """One evaluation of the control loop: scale-down beats scale-up, one action
    per step; the caller republishes the returned placement to the scheduler."""
    # Scale-down scan: most-overshooting (instance, device) pair first.
    worst: tuple[float, int, int] | None = None
    for inst in instances:
        for dev_id in sorted(inst.placement.devices_used()):
            if is_violating(dev_id, cfg, inst.placement, inst.view, inst.bs,
                            inst.offload_fraction):
                cap = cluster.device(dev_id).memory_mb
                overshoot = inst.view.projected_memory_mb(
                    inst.placement, dev_id, inst.bs, inst.offload_fraction
                ) / cap
                key = (-overshoot, inst.instance_id, dev_id)
                if worst is None or key < worst:
                    worst = key
    if worst is not None:
        _, inst_id, dev_id = worst
        inst = next(i for i in instances if i.instance_id == inst_id)
        result = scale_down(
            inst.placement, cluster, model, catalog, cfg, inst.view,
            src_device=dev_id, bs=inst.bs, offload_fraction=inst.offload_fraction,
            cost_model=cost_model,
        )
        return ControllerDecision(
            trigger="scale_down",
            instance_id=inst_id,
            placement=result.placement,
            bs=result.bs,
            offload_fraction=result.offload_fraction,
            ops=result.ops,
            speedup_before=estimate_speedup(inst.placement, cluster, model, params),
            speedup_after=estimate_speedup(result.placement, cluster, model, params),
            bs_before=inst.bs,
            resolved=result.resolved,
        )

    if cfg.scale_up_enabled:
        rates = [
            vacancy_rate(usage_by_device.get(d.id, DeviceUsage()), d)
            for d in cluster.devices
        ]
        triggered = (
            max(rates) > cfg.t_up
            if cfg.vacancy_scope == "device"
            else sum(rates) / len(rates) > cfg.t_up
        )
        if triggered:
            for inst in instances:
                result = scale_up(
                    inst.placement, cluster, model, catalog, cfg, params,
                    usage_by_device=usage_by_device,
                    cost_model=cost_model,
                )
                if result.executed:
                    return ControllerDecision(
                        trigger="scale_up",
                        instance_id=inst.instance_id,
                        placement=result.placement,
                        bs=inst.bs,
                        offload_fraction=inst.offload_fraction,
                        ops=tuple(PhasedOp(0, op, cost) for op, cost in result.executed),
                        speedup_before=result.speedup_before,
                        speedup_after=result.speedup_after,
                        bs_before=inst.bs,
                        resolved=True,
                    )
    return ControllerDecision(trigger="none")
