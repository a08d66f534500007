"""Analytic replication speedup model plus a brute-force oracle for small instances.

The model estimates abstract compute work W(P) and replication communication
T(P) for a placement; their ratio against the sequential baseline gives the
speedup S(P).  For homogeneous clusters with even batch splits the closed form
``speedup_homo`` applies, parameterized by the cluster constant gamma.
Work/communication units are abstract: they correlate with wall time but are
converted to seconds only by the simulator's calibration constants.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Sequence

from .domain import (
    BatchAssignment,
    ClusterSpec,
    DomainError,
    ModelSpec,
    ModuleCatalog,
    PlacementState,
    device_usage,
)


class SpeedupError(ValueError):
    pass


class ZeroWorkloadError(SpeedupError):
    """W(P) + T(P) == 0: the speedup ratio is undefined."""


class SearchSpaceError(SpeedupError):
    """Brute-force enumeration would exceed the configured bound."""


@dataclass(frozen=True)
class SpeedupParams:
    """Model constants: delta scales per-boundary communication; gamma, when
    set, short-circuits to the homogeneous closed form."""

    delta: float = 1.0
    gamma: float | None = None
    seq_len: float = 256.0
    base_batch: float = 15.0

    def __post_init__(self) -> None:
        if self.delta <= 0:
            raise SpeedupError("delta must be > 0")
        if self.gamma is not None and not 0.0 <= self.gamma:
            raise SpeedupError("gamma must be >= 0")
        if self.gamma is not None and self.gamma >= 1.0:
            warnings.warn(
                "gamma >= 1 makes replication never profitable",
                RuntimeWarning,
                stacklevel=2,
            )


def gamma_for_cluster(cluster: ClusterSpec, model: ModelSpec, delta: float) -> float:
    """gamma = delta * C / (d * B) for a homogeneous cluster."""
    c = cluster.common_compute_gflops()
    if len(cluster.devices) > 1:
        b = cluster.common_link_mbps()
    else:
        b = cluster.bandwidth_mbps[0][0]
    return delta * c / (model.d_model * b)


def _check_assignment(placement: PlacementState, assignment: BatchAssignment) -> None:
    if len(assignment.shares) != placement.n_layers:
        raise SpeedupError(
            f"assignment covers {len(assignment.shares)} layers, placement has {placement.n_layers}"
        )
    for li in range(1, placement.n_layers + 1):
        if len(assignment.shares[li - 1]) != len(placement.replicas_of(li)):
            raise SpeedupError(f"layer {li}: assignment entry missing for some replica")


def compute_W(
    placement: PlacementState,
    assignment: BatchAssignment,
    cluster: ClusterSpec,
    model: ModelSpec,
) -> float:
    """Per-layer compute load, taking each layer's slowest replica: sum_i max_j d^2 bs_ij l / C_ij."""
    _check_assignment(placement, assignment)
    d2 = float(model.d_model) ** 2
    l = assignment.seq_len
    total = 0.0
    for li in range(1, placement.n_layers + 1):
        reps = placement.replicas_of(li)
        shares = assignment.shares[li - 1]
        total += max(
            d2 * share * l / cluster.device(rep.device_id).compute_gflops
            for rep, share in zip(reps, shares)
        )
    return total


def compute_T(
    placement: PlacementState,
    assignment: BatchAssignment,
    cluster: ClusterSpec,
    model: ModelSpec,
    params: SpeedupParams,
) -> float:
    """Replication communication: delta * sum over non-original replicas of d bs_ij l / B_ij.

    B_ij is the bandwidth between the device hosting layer i's original copy
    and the device of replica j.  The sequential baseline has no such terms.
    """
    _check_assignment(placement, assignment)
    d = float(model.d_model)
    l = assignment.seq_len
    total = 0.0
    for li in range(1, placement.n_layers + 1):
        reps = placement.replicas_of(li)
        if len(reps) == 1:
            continue
        shares = assignment.shares[li - 1]
        orig_dev = reps[0].device_id
        for rep, share in zip(reps[1:], shares[1:]):
            total += d * share * l / cluster.bandwidth(orig_dev, rep.device_id)
    return params.delta * total


def speedup(
    placement: PlacementState,
    assignment: BatchAssignment,
    cluster: ClusterSpec,
    model: ModelSpec,
    params: SpeedupParams,
) -> float:
    """S(P) = W(P0) / (W(P) + T(P)); exactly 1.0 at the sequential baseline."""
    w = compute_W(placement, assignment, cluster, model)
    t = compute_T(placement, assignment, cluster, model, params)
    denom = w + t
    if denom == 0.0:
        raise ZeroWorkloadError("degenerate zero workload: W(P) + T(P) == 0")
    d2 = float(model.d_model) ** 2
    l = assignment.seq_len
    w0 = 0.0
    for li in range(1, placement.n_layers + 1):
        total_bs = assignment.layer_total(li)
        cap = cluster.device(placement.original_device(li)).compute_gflops
        w0 += d2 * total_bs * l / cap
    return w0 / denom


def speedup_homo(p: Sequence[int], gamma: float, n: int | None = None) -> float:
    """Closed form for homogeneous clusters: 1 / (gamma + (1-gamma)/n * sum 1/p_i)."""
    if n is None:
        n = len(p)
    if n == 0 or len(p) == 0:
        raise SpeedupError("empty parallelism vector")
    if n != len(p):
        raise SpeedupError(f"n={n} does not match |P|={len(p)}")
    if any(pi < 1 for pi in p):
        raise SpeedupError("all p_i must be >= 1")
    recip = sum(1.0 / pi for pi in p)
    return 1.0 / (gamma + (1.0 - gamma) * (recip / n))


@dataclass(frozen=True)
class OracleResult:
    placement: PlacementState
    speedup: float
    evaluated: int


def oracle_best_strategy(
    placement: PlacementState,
    cluster: ClusterSpec,
    model: ModelSpec,
    params: SpeedupParams,
    replica_size_mb: float,
    max_total_replicas: int,
    catalog: ModuleCatalog | None = None,
    max_search: int = 1_000_000,
) -> OracleResult:
    """Exhaustively enumerate replica additions and return the best placement.

    Feasibility is static: each device can take floor(free_memory / replica_size)
    additional replicas, at most one copy of a layer per device.  Ties break by
    fewer total replicas, then lexicographically smaller parallelism vector.
    """
    catalog = catalog or ModuleCatalog()
    if replica_size_mb <= 0:
        raise SpeedupError("replica_size_mb must be > 0")
    usage = device_usage(placement, catalog, cluster=cluster)
    n = placement.n_layers

    per_device: list[tuple[int, list[tuple[int, ...]]]] = []
    space = 1
    for dev in cluster.devices:
        used = usage.get(dev.id)
        free = dev.memory_mb - (used.memory_mb if used else 0.0)
        cap = int(free // replica_size_mb)
        cap = min(cap, max_total_replicas)
        layers = [li for li in range(1, n + 1)
                  if not placement.has_copy_on(li, dev.id) and not placement.overridden_kinds(li)]
        combos: list[tuple[int, ...]] = [()]
        for k in range(1, min(cap, len(layers)) + 1):
            combos.extend(itertools.combinations(layers, k))
        per_device.append((dev.id, combos))
        space *= len(combos)
        if space > max_search:
            raise SearchSpaceError(
                f"search space exceeds {max_search} assignments; shrink the instance"
            )

    best: tuple[float, int, tuple[int, ...]] | None = None
    best_placement = placement
    evaluated = 0
    for combo in itertools.product(*(combos for _, combos in per_device)):
        total = sum(len(c) for c in combo)
        if total > max_total_replicas:
            continue
        trial = placement
        ok = True
        for (dev_id, _), layers in zip(per_device, combo):
            for li in layers:
                try:
                    trial = trial.with_replica(li, dev_id)
                except DomainError:
                    ok = False
                    break
            if not ok:
                break
        if not ok:
            continue
        assignment = BatchAssignment.even(trial, params.base_batch, params.seq_len)
        s = speedup(trial, assignment, cluster, model, params)
        evaluated += 1
        key = (-s, total, trial.p_vector())
        if best is None or key < best:
            best = key
            best_placement = trial
    assert best is not None  # the empty combination always evaluates
    return OracleResult(best_placement, -best[0], evaluated)
