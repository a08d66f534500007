"""Core data model: devices, clusters, transformer geometry, module catalogs, placements.

Every quantity the rest of the package reasons about (memory in MB, compute in
GFLOP or GFLOP/s, bandwidth in MB/s) is defined by the types in this module.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence


class DomainError(ValueError):
    """Invalid domain object or operation on one."""


class UnknownDeviceError(DomainError):
    """A device id that does not exist in the cluster."""


class ModuleKind(enum.Enum):
    """Unit of replication/migration inside one decoder layer (or the layer itself)."""

    ATTN_PROJ_Q = "attn_proj_q"
    ATTN_PROJ_K = "attn_proj_k"
    ATTN_PROJ_V = "attn_proj_v"
    ATTN_PROJ_O = "attn_proj_o"
    SELF_ATTENTION = "self_attention"
    FFN_PROJ_GATE = "ffn_proj_gate"
    FFN_PROJ_UP = "ffn_proj_up"
    FFN_PROJ_DOWN = "ffn_proj_down"
    DECODER_LAYER = "decoder_layer"
    KV_CACHE = "kv_cache"

    @property
    def is_attn_projection(self) -> bool:
        return self in _ATTN_PROJECTIONS

    @property
    def is_ffn_projection(self) -> bool:
        return self in _FFN_PROJECTIONS

    @property
    def has_static_memory(self) -> bool:
        # KV cache memory is dynamic (a function of resident tokens).
        return self is not ModuleKind.KV_CACHE


_ATTN_PROJECTIONS = frozenset(
    {ModuleKind.ATTN_PROJ_Q, ModuleKind.ATTN_PROJ_K, ModuleKind.ATTN_PROJ_V, ModuleKind.ATTN_PROJ_O}
)
_FFN_PROJECTIONS = frozenset(
    {ModuleKind.FFN_PROJ_GATE, ModuleKind.FFN_PROJ_UP, ModuleKind.FFN_PROJ_DOWN}
)


@dataclass(frozen=True)
class DeviceSpec:
    """One accelerator: compute capacity in GFLOP/s, memory capacity in MB."""

    id: int
    compute_gflops: float
    memory_mb: float

    def __post_init__(self) -> None:
        if self.compute_gflops <= 0:
            raise DomainError(f"device {self.id}: compute_gflops must be > 0")
        if self.memory_mb <= 0:
            raise DomainError(f"device {self.id}: memory_mb must be > 0")


@dataclass(frozen=True)
class ClusterSpec:
    """Devices plus the pairwise bandwidth matrix (MB/s), index-aligned to `devices`."""

    devices: tuple[DeviceSpec, ...]
    bandwidth_mbps: tuple[tuple[float, ...], ...]

    _index: dict = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self) -> None:
        if not self.devices:
            raise DomainError("cluster needs at least one device")
        ids = [d.id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise DomainError("device ids must be unique within a cluster")
        n = len(self.devices)
        bw = self.bandwidth_mbps
        if len(bw) != n or any(len(row) != n for row in bw):
            raise DomainError("bandwidth matrix shape must match device count")
        off_max = 0.0
        diag_min = math.inf
        for i in range(n):
            for j in range(n):
                v = bw[i][j]
                if v <= 0:
                    raise DomainError("all bandwidth entries must be > 0")
                if bw[i][j] != bw[j][i]:
                    raise DomainError("bandwidth matrix must be symmetric")
                if i == j:
                    diag_min = min(diag_min, v)
                else:
                    off_max = max(off_max, v)
        if n > 1 and diag_min < off_max:
            raise DomainError("intra-device bandwidth must be >= every inter-device entry")
        object.__setattr__(self, "_index", {d.id: i for i, d in enumerate(self.devices)})

    @classmethod
    def uniform(
        cls,
        devices: Sequence[DeviceSpec],
        link_mbps: float,
        intra_mbps: float | None = None,
        overrides: Mapping[tuple[int, int], float] | None = None,
    ) -> "ClusterSpec":
        """Uniform inter-device bandwidth with optional symmetric per-pair overrides."""
        intra = intra_mbps if intra_mbps is not None else max(
            link_mbps, *( [o for o in (overrides or {}).values()] or [link_mbps] )
        )
        idx = {d.id: i for i, d in enumerate(devices)}
        n = len(devices)
        m = [[intra if i == j else link_mbps for j in range(n)] for i in range(n)]
        for (a, b), v in (overrides or {}).items():
            ia, ib = idx[a], idx[b]
            m[ia][ib] = v
            m[ib][ia] = v
        return cls(tuple(devices), tuple(tuple(row) for row in m))

    def device(self, device_id: int) -> DeviceSpec:
        try:
            return self.devices[self._index[device_id]]
        except KeyError:
            raise UnknownDeviceError(f"unknown device id {device_id}") from None

    def has_device(self, device_id: int) -> bool:
        return device_id in self._index

    def bandwidth(self, a: int, b: int) -> float:
        try:
            return self.bandwidth_mbps[self._index[a]][self._index[b]]
        except KeyError as exc:
            raise UnknownDeviceError(f"unknown device id {exc.args[0]}") from None

    @property
    def device_ids(self) -> tuple[int, ...]:
        return tuple(d.id for d in self.devices)

    def is_homogeneous(self) -> bool:
        """Uniform compute capacity and uniform inter-device bandwidth."""
        caps = {d.compute_gflops for d in self.devices}
        if len(caps) != 1:
            return False
        n = len(self.devices)
        off = {self.bandwidth_mbps[i][j] for i in range(n) for j in range(n) if i != j}
        return len(off) <= 1

    def common_compute_gflops(self) -> float:
        caps = {d.compute_gflops for d in self.devices}
        if len(caps) != 1:
            raise DomainError("cluster is not compute-homogeneous")
        return caps.pop()

    def common_link_mbps(self) -> float:
        n = len(self.devices)
        off = {self.bandwidth_mbps[i][j] for i in range(n) for j in range(n) if i != j}
        if len(off) != 1:
            raise DomainError("cluster does not have a single inter-device bandwidth")
        return off.pop()


@dataclass(frozen=True)
class ModelSpec:
    """Transformer geometry. `d_model` is the hidden size, `d_ff` the FFN width."""

    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    dtype_bytes: int = 2

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise DomainError("n_layers must be >= 1")
        if self.d_model <= 0 or self.d_ff <= 0 or self.n_heads <= 0:
            raise DomainError("model dimensions must be > 0")
        if self.d_model % self.n_heads != 0:
            raise DomainError("d_model must be divisible by n_heads")
        if self.dtype_bytes <= 0:
            raise DomainError("dtype_bytes must be > 0")


# Reference inference configuration the catalog's compute numbers were measured at.
REF_BATCH_SIZE = 1
REF_SEQ_LEN = 256


@dataclass(frozen=True)
class ModuleCatalog:
    """Per-module static memory (MB) and compute (GFLOPs at bs=1, l=256).

    Defaults are measured values for a 13B-class model (d=5120, d_ff=13824,
    bf16).  Compute scales linearly in batch size and sequence length from the
    reference configuration; KV-cache memory is dynamic and tracked separately
    via `kv_bytes_per_token_per_layer`.
    """

    attn_projection_mb: float = 50.0
    attn_projection_gflops: float = 13.42
    self_attention_mb: float = 200.0
    self_attention_gflops: float = 55.02
    ffn_projection_mb: float = 135.0
    ffn_projection_gflops: float = 36.24
    decoder_layer_mb: float = 605.0
    decoder_layer_gflops: float = 127.5
    kv_bytes_per_token_per_layer: float = 20480.0

    def __post_init__(self) -> None:
        vals = (
            self.attn_projection_mb,
            self.attn_projection_gflops,
            self.self_attention_mb,
            self.self_attention_gflops,
            self.ffn_projection_mb,
            self.ffn_projection_gflops,
            self.decoder_layer_mb,
            self.decoder_layer_gflops,
            self.kv_bytes_per_token_per_layer,
        )
        if any(v <= 0 for v in vals):
            raise DomainError("catalog entries must be > 0")
        # A full layer holds one attention block plus three FFN projections
        # (plus normalization); it cannot weigh less than its parts.
        parts = self.self_attention_mb + 3 * self.ffn_projection_mb
        if self.decoder_layer_mb + 1e-9 < parts:
            raise DomainError("decoder layer memory must cover attention + 3 FFN projections")
        if not math.isclose(self.self_attention_mb, 4 * self.attn_projection_mb, rel_tol=1e-6):
            raise DomainError("self-attention memory must equal 4x one projection")

    @classmethod
    def from_model(cls, model: ModelSpec, seq_len_ref: int = REF_SEQ_LEN) -> "ModuleCatalog":
        """Analytic catalog for an arbitrary geometry (GEMM flops, weight bytes)."""
        d, dff, b = model.d_model, model.d_ff, model.dtype_bytes
        proj_mb = d * d * b / 1e6
        proj_gf = 2.0 * seq_len_ref * d * d / 1e9
        attn_mb = 4 * proj_mb
        # Four projection GEMMs plus the QK^T and AV score matmuls.
        attn_gf = 4 * proj_gf + 4.0 * seq_len_ref * seq_len_ref * d / 1e9
        ffn_mb = d * dff * b / 1e6
        ffn_gf = 2.0 * seq_len_ref * d * dff / 1e9
        layer_mb = attn_mb + 3 * ffn_mb + 2 * d * b / 1e6
        layer_gf = attn_gf + 3 * ffn_gf
        return cls(
            attn_projection_mb=proj_mb,
            attn_projection_gflops=proj_gf,
            self_attention_mb=attn_mb,
            self_attention_gflops=attn_gf,
            ffn_projection_mb=ffn_mb,
            ffn_projection_gflops=ffn_gf,
            decoder_layer_mb=layer_mb,
            decoder_layer_gflops=layer_gf,
            kv_bytes_per_token_per_layer=2.0 * d * b,
        )

    def static_memory_mb(self, kind: ModuleKind) -> float:
        if kind.is_attn_projection:
            return self.attn_projection_mb
        if kind.is_ffn_projection:
            return self.ffn_projection_mb
        if kind is ModuleKind.SELF_ATTENTION:
            return self.self_attention_mb
        if kind is ModuleKind.DECODER_LAYER:
            return self.decoder_layer_mb
        return 0.0  # KV cache: dynamic

    def compute_gflops_ref(self, kind: ModuleKind) -> float:
        if kind.is_attn_projection:
            return self.attn_projection_gflops
        if kind.is_ffn_projection:
            return self.ffn_projection_gflops
        if kind is ModuleKind.SELF_ATTENTION:
            return self.self_attention_gflops
        if kind is ModuleKind.DECODER_LAYER:
            return self.decoder_layer_gflops
        return 0.0

    def compute_gflops(self, kind: ModuleKind, batch_size: float, seq_len: float) -> float:
        """Compute cost scaled linearly in bs and l from the reference config."""
        scale = (batch_size * seq_len) / (REF_BATCH_SIZE * REF_SEQ_LEN)
        return self.compute_gflops_ref(kind) * scale


@dataclass(frozen=True)
class Replica:
    device_id: int
    is_original: bool = False


# Override kinds that occupy the same parameters and therefore conflict.
_OVERRIDE_CONFLICTS = {
    ModuleKind.SELF_ATTENTION: _ATTN_PROJECTIONS,
}


@dataclass(frozen=True)
class PlacementState:
    """Per-layer replica lists plus sub-module location overrides.

    Layers are 1-based.  Index 0 of each replica tuple is always the original
    copy.  Overrides relocate a sub-module (projection, attention block, or KV
    cache) of an *unreplicated* layer; replication operates on whole layers.
    """

    replicas: tuple[tuple[Replica, ...], ...]
    overrides: tuple[tuple[int, ModuleKind, int], ...] = ()

    _override_map: dict = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self) -> None:
        if not self.replicas:
            raise DomainError("placement needs at least one layer")
        for li, reps in enumerate(self.replicas, start=1):
            if not reps:
                raise DomainError(f"layer {li} has no replica")
            if sum(1 for r in reps if r.is_original) != 1:
                raise DomainError(f"layer {li} must have exactly one original replica")
            if not reps[0].is_original:
                raise DomainError(f"layer {li}: original replica must be first")
            devs = [r.device_id for r in reps]
            if len(set(devs)) != len(devs):
                raise DomainError(f"layer {li} has multiple copies on one device")
        omap: dict[tuple[int, ModuleKind], int] = {}
        for layer, kind, dev in self.overrides:
            if not 1 <= layer <= len(self.replicas):
                raise DomainError(f"override references unknown layer {layer}")
            if kind is ModuleKind.DECODER_LAYER:
                raise DomainError("whole layers move via migration, not overrides")
            if len(self.replicas[layer - 1]) > 1:
                raise DomainError(f"layer {layer} is replicated and cannot carry overrides")
            if (layer, kind) in omap:
                raise DomainError(f"duplicate override for layer {layer} {kind.value}")
            omap[(layer, kind)] = dev
        for layer, kind, _ in self.overrides:
            for blocker, blocked in _OVERRIDE_CONFLICTS.items():
                if kind in blocked and (layer, blocker) in omap:
                    raise DomainError(
                        f"layer {layer}: {kind.value} conflicts with {blocker.value} override"
                    )
        object.__setattr__(self, "_override_map", omap)

    @classmethod
    def sequential(cls, n_layers: int, device_of_layer) -> "PlacementState":
        """All-original placement; `device_of_layer` is an id or a callable layer->id."""
        if callable(device_of_layer):
            devs = [device_of_layer(i) for i in range(1, n_layers + 1)]
        else:
            devs = [device_of_layer] * n_layers
        return cls(tuple((Replica(d, is_original=True),) for d in devs))

    @property
    def n_layers(self) -> int:
        return len(self.replicas)

    def replicas_of(self, layer: int) -> tuple[Replica, ...]:
        return self.replicas[layer - 1]

    def original_device(self, layer: int) -> int:
        return self.replicas[layer - 1][0].device_id

    def p_vector(self) -> tuple[int, ...]:
        return tuple(len(reps) for reps in self.replicas)

    def is_sequential(self) -> bool:
        return all(len(reps) == 1 for reps in self.replicas) and not self.overrides

    def override_device(self, layer: int, kind: ModuleKind) -> int | None:
        return self._override_map.get((layer, kind))

    def kv_device(self, layer: int) -> int:
        """Device holding the layer's KV cache (original device unless overridden)."""
        dev = self._override_map.get((layer, ModuleKind.KV_CACHE))
        return dev if dev is not None else self.original_device(layer)

    def has_copy_on(self, layer: int, device_id: int) -> bool:
        return any(r.device_id == device_id for r in self.replicas[layer - 1])

    def overridden_kinds(self, layer: int) -> tuple[ModuleKind, ...]:
        return tuple(k for (li, k) in self._override_map if li == layer)

    def devices_used(self) -> frozenset[int]:
        used = {r.device_id for reps in self.replicas for r in reps}
        used.update(dev for _, _, dev in self.overrides)
        used.update(self.kv_device(i) for i in range(1, self.n_layers + 1))
        return frozenset(used)

    def replica_layers_on(self, device_id: int) -> tuple[int, ...]:
        """Layers with a non-original replica on the device, ascending."""
        return tuple(
            li
            for li, reps in enumerate(self.replicas, start=1)
            if any(r.device_id == device_id and not r.is_original for r in reps)
        )

    def original_layers_on(self, device_id: int) -> tuple[int, ...]:
        return tuple(
            li
            for li, reps in enumerate(self.replicas, start=1)
            if reps[0].device_id == device_id
        )

    # -- structural edits (return new placements) -----------------------------

    def with_replica(self, layer: int, device_id: int) -> "PlacementState":
        if self.has_copy_on(layer, device_id):
            raise DomainError(f"layer {layer} already has a copy on device {device_id}")
        if self.overridden_kinds(layer):
            raise DomainError(f"layer {layer} carries overrides and cannot be replicated")
        reps = list(self.replicas)
        reps[layer - 1] = reps[layer - 1] + (Replica(device_id),)
        return PlacementState(tuple(reps), self.overrides)

    def without_replica(self, layer: int, device_id: int) -> "PlacementState":
        row = self.replicas[layer - 1]
        if row[0].device_id == device_id:
            raise DomainError(f"layer {layer}: cannot evict the original replica")
        if not any(r.device_id == device_id for r in row[1:]):
            raise DomainError(f"layer {layer} has no replica on device {device_id}")
        reps = list(self.replicas)
        reps[layer - 1] = tuple(r for r in row if r.device_id != device_id)
        return PlacementState(tuple(reps), self.overrides)

    def with_original_device(
        self, layer: int, device_id: int, keep_kv_on_source: bool = False
    ) -> "PlacementState":
        row = self.replicas[layer - 1]
        src = row[0].device_id
        if device_id == src:
            raise DomainError(f"layer {layer} original already on device {device_id}")
        if any(r.device_id == device_id for r in row):
            raise DomainError(f"layer {layer} already has a copy on device {device_id}")
        reps = list(self.replicas)
        reps[layer - 1] = (Replica(device_id, is_original=True),) + row[1:]
        overrides = [o for o in self.overrides]
        if keep_kv_on_source:
            if len(row) > 1:
                raise DomainError("cannot detach KV from a replicated layer")
            current_kv = self.kv_device(layer)
            overrides = [o for o in overrides if not (o[0] == layer and o[1] is ModuleKind.KV_CACHE)]
            overrides.append((layer, ModuleKind.KV_CACHE, current_kv))
        else:
            # KV follows the layer: drop any explicit residency override.
            overrides = [o for o in overrides if not (o[0] == layer and o[1] is ModuleKind.KV_CACHE)]
        return PlacementState(tuple(reps), tuple(sorted(overrides, key=_override_key)))

    def with_override(self, layer: int, kind: ModuleKind, device_id: int) -> "PlacementState":
        kept = [o for o in self.overrides if not (o[0] == layer and o[1] is kind)]
        kept.append((layer, kind, device_id))
        return PlacementState(self.replicas, tuple(sorted(kept, key=_override_key)))


def _override_key(entry: tuple[int, ModuleKind, int]):
    return (entry[0], entry[1].value, entry[2])


def derive_parallelism_vector(placement: PlacementState) -> tuple[int, ...]:
    """Per-layer replica counts [p_1..p_n]; all ones for the sequential baseline."""
    return placement.p_vector()


@dataclass(frozen=True)
class DeviceUsage:
    memory_mb: float = 0.0
    compute_gflops: float = 0.0

    def __add__(self, other: "DeviceUsage") -> "DeviceUsage":
        return DeviceUsage(self.memory_mb + other.memory_mb,
                           self.compute_gflops + other.compute_gflops)


def device_usage(
    placement: PlacementState,
    catalog: ModuleCatalog,
    kv_tokens: Mapping[int, float] | None = None,
    cluster: ClusterSpec | None = None,
) -> dict[int, DeviceUsage]:
    """Aggregate static module memory/compute per device, plus dynamic KV memory.

    `kv_tokens` maps device id -> resident tokens per KV-resident layer on that
    device.  Usage is additive across placements, so multi-instance totals are
    obtained by summing per-instance results.
    """
    kv_tokens = kv_tokens or {}
    if cluster is not None:
        for dev in list(placement.devices_used()) + list(kv_tokens):
            if not cluster.has_device(dev):
                raise UnknownDeviceError(f"unknown device id {dev}")

    mem: dict[int, float] = {}
    comp: dict[int, float] = {}

    def add(dev: int, m: float, c: float) -> None:
        mem[dev] = mem.get(dev, 0.0) + m
        comp[dev] = comp.get(dev, 0.0) + c

    layer_mb = catalog.decoder_layer_mb
    layer_gf = catalog.decoder_layer_gflops
    for li in range(1, placement.n_layers + 1):
        moved_mb = 0.0
        moved_gf = 0.0
        for kind in placement.overridden_kinds(li):
            if kind is ModuleKind.KV_CACHE:
                continue
            k_mb = catalog.static_memory_mb(kind)
            k_gf = catalog.compute_gflops_ref(kind)
            add(placement.override_device(li, kind), k_mb, k_gf)
            moved_mb += k_mb
            moved_gf += k_gf
        base = placement.original_device(li)
        # Measured layer compute is not exactly the sum of its parts; never go negative.
        add(base, max(0.0, layer_mb - moved_mb), max(0.0, layer_gf - moved_gf))
        for rep in placement.replicas_of(li)[1:]:
            add(rep.device_id, layer_mb, layer_gf)

    kv_layer_count: dict[int, int] = {}
    for li in range(1, placement.n_layers + 1):
        dev = placement.kv_device(li)
        kv_layer_count[dev] = kv_layer_count.get(dev, 0) + 1
    for dev, tokens in kv_tokens.items():
        count = kv_layer_count.get(dev, 0)
        if count and tokens:
            add(dev, tokens * catalog.kv_bytes_per_token_per_layer * count / 1e6, 0.0)

    all_devs = set(mem) | set(comp)
    return {d: DeviceUsage(mem.get(d, 0.0), comp.get(d, 0.0)) for d in sorted(all_devs)}


def kv_resident_layer_count(placement: PlacementState) -> dict[int, int]:
    """Number of layers whose KV cache resides on each device."""
    out: dict[int, int] = {}
    for li in range(1, placement.n_layers + 1):
        dev = placement.kv_device(li)
        out[dev] = out.get(dev, 0) + 1
    return out


def vacancy_rate(usage: DeviceUsage, spec: DeviceSpec) -> float:
    """Fraction of the device still free, taking the tighter of memory and compute.

    A device only has room for more work if both dimensions have slack, so the
    rate is min over the two, clamped to [0, 1].
    """
    mem_free = (spec.memory_mb - usage.memory_mb) / spec.memory_mb
    comp_free = (spec.compute_gflops - usage.compute_gflops) / spec.compute_gflops
    return min(1.0, max(0.0, min(mem_free, comp_free)))


@dataclass(frozen=True)
class BatchAssignment:
    """Per-replica batch shares bs_ij plus the shared sequence length l.

    Shares are real-valued: the analytic speedup paths use exact even splits,
    while the simulator rounds through integer splitting separately.
    """

    shares: tuple[tuple[float, ...], ...]
    seq_len: float

    def __post_init__(self) -> None:
        if self.seq_len < 0:
            raise DomainError("seq_len must be >= 0")
        for li, row in enumerate(self.shares, start=1):
            for s in row:
                if s < 0:
                    raise DomainError(f"layer {li}: negative batch share")

    @classmethod
    def even(cls, placement: PlacementState, batch_size: float, seq_len: float) -> "BatchAssignment":
        """Exact even split of `batch_size` across each layer's replicas."""
        rows = tuple(
            tuple(batch_size / len(reps) for _ in reps) for reps in placement.replicas
        )
        return cls(rows, seq_len)

    def layer_total(self, layer: int) -> float:
        return sum(self.shares[layer - 1])
