"""modscale: module-level autoscaling simulator and decision library for LLM serving.

Replicates and migrates decoder-layer-granularity modules across a simulated
device cluster, estimates replication speedup analytically, and drives a
monitor/controller/scheduler loop over a deterministic discrete-event serving
simulation.
"""

from .autoscaler import (
    ControllerConfig,
    PressureView,
    controller_step,
    filter_modules,
    find_optimal_destination,
    get_eligible_nodes,
    is_violating,
    scale_down,
    scale_up,
    sort_candidates_by_continuity,
)
from .domain import (
    BatchAssignment,
    ClusterSpec,
    DeviceSpec,
    DeviceUsage,
    ModelSpec,
    ModuleCatalog,
    ModuleKind,
    PlacementState,
    Replica,
    derive_parallelism_vector,
    device_usage,
    vacancy_rate,
)
from .ops import (
    EvictReplica,
    MigrateLayer,
    MigrateSubModule,
    OpCostModel,
    ReplicateLayer,
    TransitionCost,
    apply,
    batch_apply,
    replica_runs,
    split_batch,
)
from .sim import (
    CalibrationParams,
    Engine,
    InstanceConfig,
    LengthDist,
    Request,
    RunResult,
    Scenario,
    SimMetrics,
    SimOptions,
    StepOutcome,
    WorkloadSpec,
    detect_oom,
    generate_arrivals,
    run,
    schedule,
    step_batch,
)
from .speedup import (
    SpeedupParams,
    compute_T,
    compute_W,
    gamma_for_cluster,
    oracle_best_strategy,
    speedup,
    speedup_homo,
)

__version__ = "0.1.0"
