"""Scaling-operation engine: replicate, migrate, evict, batch splitting, costs.

Operation costs interpolate a measured anchor table (seconds and transient MB
by moved-layer count) plus a fixed coordination cost whenever the replica
topology changes.  All placement edits are pure: `apply` returns a new
placement and never mutates its input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence, Union

from .domain import (
    ClusterSpec,
    DomainError,
    ModuleCatalog,
    ModuleKind,
    PlacementState,
    device_usage,
)


class OpError(ValueError):
    pass


class InfeasibleOpError(OpError):
    """Destination lacks memory; carries the shortfall in MB."""

    def __init__(self, message: str, shortfall_mb: float):
        super().__init__(message)
        self.shortfall_mb = shortfall_mb


class MissingReplicaError(OpError):
    pass


class BatchApplyError(OpError):
    """An op inside a batch failed; the original placement stands."""

    def __init__(self, index: int, cause: Exception):
        super().__init__(f"op {index} failed: {cause}")
        self.index = index
        self.cause = cause


@dataclass(frozen=True)
class ReplicateLayer:
    layer: int
    dst_device: int


@dataclass(frozen=True)
class MigrateLayer:
    layer: int
    dst_device: int
    with_kv: bool = True


@dataclass(frozen=True)
class MigrateSubModule:
    layer: int
    kind: ModuleKind
    dst_device: int


@dataclass(frozen=True)
class EvictReplica:
    layer: int
    device: int


ScalingOp = Union[ReplicateLayer, MigrateLayer, MigrateSubModule, EvictReplica]


@dataclass(frozen=True)
class TransitionCost:
    time_s: float
    transient_memory_mb: float

    def __add__(self, other: "TransitionCost") -> "TransitionCost":
        return TransitionCost(
            self.time_s + other.time_s,
            self.transient_memory_mb + other.transient_memory_mb,
        )


# Measured single-op anchors: (layer count, replication s, migration s, transient MB).
DEFAULT_ANCHORS: tuple[tuple[int, float, float, float], ...] = (
    (1, 0.2987, 0.2492, 1107.0),
    (10, 0.3581, 0.3181, 6579.0),
    (20, 0.3826, 0.3426, 12659.0),
    (30, 0.4947, 0.3947, 18739.0),
    (40, 0.8938, 0.8138, 24819.0),
)

DEFAULT_COORDINATION_S = 0.0391


def _interp(x: float, xs: Sequence[float], ys: Sequence[float]) -> float:
    """Piecewise-linear with linear extrapolation beyond the last segment."""
    if x <= xs[0]:
        return ys[0]
    for i in range(1, len(xs)):
        if x <= xs[i]:
            f = (x - xs[i - 1]) / (xs[i] - xs[i - 1])
            return ys[i - 1] + f * (ys[i] - ys[i - 1])
    slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
    return ys[-1] + slope * (x - xs[-1])


@dataclass(frozen=True)
class OpCostModel:
    anchors: tuple[tuple[int, float, float, float], ...] = DEFAULT_ANCHORS
    coordination_time_s: float = DEFAULT_COORDINATION_S

    def __post_init__(self) -> None:
        if len(self.anchors) < 2:
            raise OpError("cost model needs at least two anchors")
        prev = None
        for row in self.anchors:
            if prev is not None:
                if not all(row[i] > prev[i] for i in range(4)):
                    raise OpError("anchor columns must be strictly increasing in layer count")
            if row[2] > row[1]:
                raise OpError("migration must not cost more time than replication")
            prev = row
        if self.coordination_time_s < 0:
            raise OpError("coordination_time_s must be >= 0")

    def _cols(self, idx: int) -> tuple[list[float], list[float]]:
        xs = [float(a[0]) for a in self.anchors]
        ys = [float(a[idx]) for a in self.anchors]
        return xs, ys

    def replication_time_s(self, layer_count: float) -> float:
        return _interp(max(1.0, layer_count), *self._cols(1))

    def migration_time_s(self, layer_count: float) -> float:
        return _interp(max(1.0, layer_count), *self._cols(2))

    def transient_memory_mb(self, layer_count: float) -> float:
        return _interp(max(1.0, layer_count), *self._cols(3))


DEFAULT_COST_MODEL = OpCostModel()


def split_batch(bs: int, p: int) -> list[int]:
    """Even integer split: the first p - (bs mod p) replicas get floor(bs/p), the rest ceil."""
    if bs < 0:
        raise OpError("bs must be >= 0")
    if p < 1:
        raise OpError("p must be >= 1")
    q, r = divmod(bs, p)
    return [q] * (p - r) + [q + 1] * r


def _free_memory_mb(
    placement: PlacementState,
    device_id: int,
    catalog: ModuleCatalog,
    cluster: ClusterSpec,
    extra_used_mb: Mapping[int, float],
) -> float:
    usage = device_usage(placement, catalog, cluster=cluster)
    used = usage[device_id].memory_mb if device_id in usage else 0.0
    return cluster.device(device_id).memory_mb - used - extra_used_mb.get(device_id, 0.0)


def apply(
    placement: PlacementState,
    op: ScalingOp,
    catalog: ModuleCatalog,
    cluster: ClusterSpec,
    cost_model: OpCostModel = DEFAULT_COST_MODEL,
    extra_used_mb: Mapping[int, float] | None = None,
    kv_mb_by_layer: Mapping[int, float] | None = None,
) -> tuple[PlacementState, TransitionCost]:
    """Apply one scaling op; returns the new placement and its transition cost.

    `extra_used_mb` carries per-device memory the placement itself does not
    know about (other instances, live KV, in-flight reservations) so the
    feasibility check sees the whole device.  `kv_mb_by_layer` sizes KV moves.
    """
    extra_used_mb = extra_used_mb or {}
    kv_mb_by_layer = kv_mb_by_layer or {}

    def check_fits(dst: int, needed_mb: float) -> None:
        free = _free_memory_mb(placement, dst, catalog, cluster, extra_used_mb)
        if needed_mb > free:
            raise InfeasibleOpError(
                f"device {dst} lacks {needed_mb - free:.1f} MB for {op}",
                shortfall_mb=needed_mb - free,
            )

    if isinstance(op, ReplicateLayer):
        if not cluster.has_device(op.dst_device):
            raise OpError(f"unknown destination device {op.dst_device}")
        check_fits(op.dst_device, catalog.decoder_layer_mb)
        try:
            new_placement = placement.with_replica(op.layer, op.dst_device)
        except DomainError as exc:
            raise OpError(str(exc)) from exc
        cost = TransitionCost(
            cost_model.replication_time_s(1) + cost_model.coordination_time_s,
            cost_model.transient_memory_mb(1),
        )
        return new_placement, cost

    if isinstance(op, MigrateLayer):
        if not cluster.has_device(op.dst_device):
            raise OpError(f"unknown destination device {op.dst_device}")
        kv_mb = kv_mb_by_layer.get(op.layer, 0.0) if op.with_kv else 0.0
        check_fits(op.dst_device, catalog.decoder_layer_mb + kv_mb)
        try:
            new_placement = placement.with_original_device(
                op.layer, op.dst_device, keep_kv_on_source=not op.with_kv
            )
        except DomainError as exc:
            raise OpError(str(exc)) from exc
        cost = TransitionCost(
            cost_model.migration_time_s(1) + cost_model.coordination_time_s,
            cost_model.transient_memory_mb(1) + kv_mb,
        )
        return new_placement, cost

    if isinstance(op, MigrateSubModule):
        if not cluster.has_device(op.dst_device):
            raise OpError(f"unknown destination device {op.dst_device}")
        if op.kind is ModuleKind.DECODER_LAYER:
            raise OpError("whole layers move via MigrateLayer")
        if op.kind is ModuleKind.KV_CACHE:
            moved_mb = kv_mb_by_layer.get(op.layer, 0.0)
        else:
            moved_mb = catalog.static_memory_mb(op.kind)
        check_fits(op.dst_device, moved_mb)
        try:
            new_placement = placement.with_override(op.layer, op.kind, op.dst_device)
        except DomainError as exc:
            raise OpError(str(exc)) from exc
        # No replica topology change, so no coordination round; cost scales with
        # the moved fraction of a single-layer transfer.
        frac = moved_mb / catalog.decoder_layer_mb
        cost = TransitionCost(
            cost_model.migration_time_s(1) * frac,
            cost_model.transient_memory_mb(1) * frac,
        )
        return new_placement, cost

    if isinstance(op, EvictReplica):
        try:
            new_placement = placement.without_replica(op.layer, op.device)
        except DomainError as exc:
            raise MissingReplicaError(str(exc)) from exc
        return new_placement, TransitionCost(cost_model.coordination_time_s, 0.0)

    raise OpError(f"unknown op {op!r}")


def batch_apply(
    placement: PlacementState,
    ops: Sequence[ScalingOp],
    catalog: ModuleCatalog,
    cluster: ClusterSpec,
    cost_model: OpCostModel = DEFAULT_COST_MODEL,
    extra_used_mb: Mapping[int, float] | None = None,
    kv_mb_by_layer: Mapping[int, float] | None = None,
    cost_mode: str = "batched",
) -> tuple[PlacementState, TransitionCost, list[TransitionCost]]:
    """Left-fold of `apply`, transactional: any failure leaves the input untouched.

    ``cost_mode='batched'`` re-prices consecutive same-kind, same-destination
    layer transfers as one k-layer transfer (the anchor table's reading);
    ``'sequential'`` simply sums the single-op costs.
    """
    if cost_mode not in ("batched", "sequential"):
        raise OpError(f"unknown cost_mode {cost_mode!r}")
    working = placement
    per_op: list[TransitionCost] = []
    for i, op in enumerate(ops):
        try:
            working, cost = apply(
                working, op, catalog, cluster,
                cost_model=cost_model,
                extra_used_mb=extra_used_mb,
                kv_mb_by_layer=kv_mb_by_layer,
            )
        except OpError as exc:
            raise BatchApplyError(i, exc) from exc
        per_op.append(cost)

    total = aggregate_cost(ops, per_op, cost_model, cost_mode)
    return working, total, per_op


def aggregate_cost(
    ops: Sequence,
    per_op: Sequence[TransitionCost],
    cost_model: OpCostModel = DEFAULT_COST_MODEL,
    cost_mode: str = "batched",
) -> TransitionCost:
    """Total cost of an op sequence.

    In ``batched`` mode, consecutive replications or migrations into the same
    device are re-priced as one k-layer transfer from the anchor table; other
    entries keep their individual costs.  ``sequential`` sums everything.
    """
    if cost_mode not in ("batched", "sequential"):
        raise OpError(f"unknown cost_mode {cost_mode!r}")
    if cost_mode == "sequential" or not ops:
        return TransitionCost(sum(c.time_s for c in per_op),
                              sum(c.transient_memory_mb for c in per_op))
    total_time = 0.0
    total_mem = 0.0
    i = 0
    while i < len(ops):
        op = ops[i]
        group_kind = type(op)
        if group_kind in (ReplicateLayer, MigrateLayer):
            j = i
            while (
                j + 1 < len(ops)
                and type(ops[j + 1]) is group_kind
                and ops[j + 1].dst_device == op.dst_device
            ):
                j += 1
            k = j - i + 1
            if group_kind is ReplicateLayer:
                total_time += cost_model.replication_time_s(k) + cost_model.coordination_time_s
                total_mem += cost_model.transient_memory_mb(k)
            else:
                kv_extra = sum(
                    per_op[x].transient_memory_mb - cost_model.transient_memory_mb(1)
                    for x in range(i, j + 1)
                )
                total_time += cost_model.migration_time_s(k) + cost_model.coordination_time_s
                total_mem += cost_model.transient_memory_mb(k) + kv_extra
            i = j + 1
        else:
            total_time += per_op[i].time_s
            total_mem += per_op[i].transient_memory_mb
            i += 1
    return TransitionCost(total_time, total_mem)


def replica_runs(placement: PlacementState, device_id: int) -> list[list[int]]:
    """Maximal contiguous runs of layer indices replicated (non-original) on the device."""
    layers = placement.replica_layers_on(device_id)
    runs: list[list[int]] = []
    for li in layers:
        if runs and runs[-1][-1] == li - 1:
            runs[-1].append(li)
        else:
            runs.append([li])
    return runs


@dataclass(frozen=True)
class OpRecord:
    """Structured, append-only op-log row."""

    tick_ms: int
    kind: str
    layer: int
    src_device: int | None
    dst_device: int | None
    time_s: float
    transient_mb: float
    phase: int | None = None
    detail: str = ""

    @classmethod
    def from_op(
        cls,
        tick_ms: int,
        op: ScalingOp,
        cost: TransitionCost,
        src_device: int | None = None,
        phase: int | None = None,
    ) -> "OpRecord":
        if isinstance(op, ReplicateLayer):
            kind, layer, dst, detail = "replicate_layer", op.layer, op.dst_device, ""
        elif isinstance(op, MigrateLayer):
            kind, layer, dst = "migrate_layer", op.layer, op.dst_device
            detail = "with_kv" if op.with_kv else "without_kv"
        elif isinstance(op, MigrateSubModule):
            kind, layer, dst, detail = "migrate_submodule", op.layer, op.dst_device, op.kind.value
        elif isinstance(op, EvictReplica):
            kind, layer, dst, detail = "evict_replica", op.layer, None, ""
            src_device = op.device
        else:
            raise OpError(f"unknown op {op!r}")
        return cls(tick_ms, kind, layer, src_device, dst, cost.time_s,
                   cost.transient_memory_mb, phase, detail)
