import pytest

from modscale.autoscaler import (
    ControllerConfig,
    InstanceView,
    MigrationCandidate,
    NoDestinationError,
    PressureView,
    controller_step,
    filter_modules,
    find_optimal_destination,
    get_eligible_nodes,
    is_violating,
    scale_down,
    scale_up,
    sort_candidates_by_continuity,
    sort_evictees,
)
from modscale.domain import (
    ClusterSpec,
    DeviceSpec,
    DeviceUsage,
    ModelSpec,
    ModuleCatalog,
    ModuleKind,
    PlacementState,
    device_usage,
)
from modscale.ops import EvictReplica, MigrateSubModule
from modscale.speedup import SpeedupParams, oracle_best_strategy

from conftest import make_cluster, make_model, seq_placement


def make_view(cluster, model, **kw):
    defaults = dict(catalog=ModuleCatalog())
    defaults.update(kw)
    return PressureView(cluster=cluster, model=model, **defaults)


class TestEligibleNodes:
    def test_all_full(self):
        cluster = make_cluster(2, memory_mb=10000.0)
        usage = {0: DeviceUsage(10000.0, 0.0), 1: DeviceUsage(10000.0, 0.0)}
        assert get_eligible_nodes(cluster, usage, ControllerConfig()) == []

    def test_ordering_with_tie(self):
        # vacancies {0: 0.6, 1: 0.1, 2: 0.6}, t_up 0.3 -> [0, 2]
        cluster = make_cluster(3, memory_mb=10000.0)
        usage = {
            0: DeviceUsage(4000.0, 0.0),
            1: DeviceUsage(9000.0, 0.0),
            2: DeviceUsage(4000.0, 0.0),
        }
        cfg = ControllerConfig(t_up=0.3)
        assert get_eligible_nodes(cluster, usage, cfg) == [0, 2]

    def test_free_memory_below_replica_size_excluded(self):
        cluster = make_cluster(1, memory_mb=1000.0)
        usage = {0: DeviceUsage(500.0, 0.0)}  # vacancy 0.5 but free 500 < r
        cfg = ControllerConfig(t_up=0.3, replica_size_mb=861.0)
        assert get_eligible_nodes(cluster, usage, cfg) == []


class TestContinuitySort:
    def test_extending_runs_win(self):
        p = seq_placement(8, device=0)
        for li in (3, 4):
            p = p.with_replica(li, 1)
        # candidates 2 and 5 both complete a run of 3; 2 wins the tie; 7 scores 1
        out = sort_candidates_by_continuity(p, 1, max_replicas=8)
        assert out[:2] == [2, 5]
        assert out.index(2) < out.index(7) and out.index(5) < out.index(7)

    def test_empty_device_orders_by_layer_id(self):
        p = seq_placement(5, device=0)
        assert sort_candidates_by_continuity(p, 1, max_replicas=2) == [1, 2]

    def test_zero_budget(self):
        p = seq_placement(5, device=0)
        assert sort_candidates_by_continuity(p, 1, max_replicas=0) == []

    def test_layers_present_excluded(self):
        p = seq_placement(3, device=0).with_replica(2, 1)
        assert 2 not in sort_candidates_by_continuity(p, 1, max_replicas=3)


class TestScaleUp:
    def test_no_eligible_devices_noop(self, catalog):
        cluster = make_cluster(1, memory_mb=3000.0)  # only the home device
        model = make_model(2)
        p = seq_placement(2, device=0)
        cfg = ControllerConfig()
        res = scale_up(p, cluster, model, catalog, cfg, SpeedupParams(gamma=0.1))
        assert res.placement == p
        assert res.speedup_after == res.speedup_before == 1.0
        assert res.executed == ()

    def test_single_replica_hand_value(self, catalog):
        devices = [DeviceSpec(0, 312000.0, 40960.0), DeviceSpec(1, 312000.0, 1000.0)]
        cluster = ClusterSpec.uniform(devices, 25000.0, 200000.0)
        model = make_model(2)
        p = seq_placement(2, device=0)
        cfg = ControllerConfig(replica_size_mb=861.0)
        res = scale_up(p, cluster, model, catalog, cfg, SpeedupParams(gamma=0.1))
        assert res.placement.p_vector() == (2, 1)
        assert res.speedup_before == 1.0
        assert res.speedup_after == pytest.approx(1 / 0.775)

    def test_strictly_increasing_trace_and_idempotence(self, catalog):
        cluster = make_cluster(3, memory_mb=5000.0)
        model = make_model(4)
        p = seq_placement(4, device=0)
        cfg = ControllerConfig(replica_size_mb=861.0)
        params = SpeedupParams(gamma=0.2)
        res = scale_up(p, cluster, model, catalog, cfg, params)
        assert all(b > a for a, b in zip(res.speedup_trace, res.speedup_trace[1:]))
        again = scale_up(res.placement, cluster, model, catalog, cfg, params)
        assert again.placement == res.placement
        assert again.executed == ()

    def test_memory_feasible_after(self, catalog):
        devices = [DeviceSpec(0, 312000.0, 10000.0), DeviceSpec(1, 312000.0, 2500.0),
                   DeviceSpec(2, 312000.0, 2500.0)]
        cluster = ClusterSpec.uniform(devices, 25000.0, 200000.0)
        model = make_model(6)
        p = seq_placement(6, device=0)
        cfg = ControllerConfig(replica_size_mb=861.0)
        res = scale_up(p, cluster, model, catalog, cfg, SpeedupParams(gamma=0.1))
        usage = device_usage(res.placement, catalog, cluster=cluster)
        for dev in cluster.devices:
            if dev.id in usage:
                assert usage[dev.id].memory_mb <= dev.memory_mb

    def test_never_beaten_by_oracle(self, catalog):
        devices = [DeviceSpec(0, 10.0, 20000.0), DeviceSpec(1, 10.0, 2000.0),
                   DeviceSpec(2, 10.0, 1400.0)]
        cluster = ClusterSpec.uniform(devices, 5.0, 50.0)
        model = make_model(3, d_model=64, n_heads=8)
        p = seq_placement(3, device=0)
        cfg = ControllerConfig(replica_size_mb=650.0)
        params = SpeedupParams(delta=0.5, base_batch=8, seq_len=64)
        greedy = scale_up(p, cluster, model, catalog, cfg, params)
        oracle = oracle_best_strategy(p, cluster, model, params, 650.0, 6, catalog=catalog)
        assert 1.0 <= greedy.speedup_after <= oracle.speedup + 1e-9


class TestIsViolating:
    def test_quiet_state(self):
        cluster = make_cluster(1)
        model = make_model(4)
        view = make_view(cluster, model)
        p = seq_placement(4, device=0)
        assert not is_violating(0, ControllerConfig(), p, view, bs=16)

    def test_violation_rate_threshold(self):
        cluster = make_cluster(1)
        model = make_model(4)
        view = make_view(cluster, model, violation_rate=0.3)
        p = seq_placement(4, device=0)
        assert is_violating(0, ControllerConfig(t_down=0.1), p, view, bs=16)

    def test_oom_imminent(self):
        cluster = make_cluster(1)  # 40960 MB
        model = make_model(4)
        view = make_view(cluster, model, extra_memory_mb={0: 39000.0})
        p = seq_placement(4, device=0)  # static 2420 -> 41420 >= 40960
        assert is_violating(0, ControllerConfig(), p, view, bs=16)


class TestFilterModules:
    def test_memory_bound_prefers_kv(self):
        cluster = make_cluster(2, memory_mb=30000.0)
        model = make_model(4)
        p = seq_placement(4, device=0)
        view = make_view(cluster, model, kv_tokens=350000.0)
        out = filter_modules(p, 0, view, ControllerConfig(), bs=16)
        assert out[0].kind is ModuleKind.KV_CACHE

    def test_compute_bound_prefers_projections(self):
        cluster = make_cluster(2)
        model = make_model(4)
        p = seq_placement(4, device=0)
        view = make_view(cluster, model, busy_fraction={0: 0.97})
        out = filter_modules(p, 0, view, ControllerConfig(max_migration_candidates=8), bs=16)
        kinds = [c.kind for c in out]
        assert kinds[0].is_ffn_projection
        assert all(not k.is_attn_projection for k in kinds[:3])
        assert ModuleKind.KV_CACHE not in kinds

    def test_both_bound_moves_whole_layers(self):
        cluster = make_cluster(2, memory_mb=30000.0)
        model = make_model(4)
        p = seq_placement(4, device=0)
        view = make_view(cluster, model, kv_tokens=350000.0, busy_fraction={0: 0.97})
        out = filter_modules(p, 0, view, ControllerConfig(), bs=16)
        assert out[0].kind is ModuleKind.DECODER_LAYER
        assert out[0].with_kv

    def test_no_pressure_empty(self):
        cluster = make_cluster(2)
        model = make_model(4)
        p = seq_placement(4, device=0)
        assert filter_modules(p, 0, make_view(cluster, model), ControllerConfig(), bs=16) == []

    def test_bounded_prefix(self):
        cluster = make_cluster(2, memory_mb=30000.0)
        model = make_model(12)
        p = seq_placement(12, device=0)
        view = make_view(cluster, model, kv_tokens=200000.0)
        out = filter_modules(p, 0, view, ControllerConfig(max_migration_candidates=4), bs=16)
        assert len(out) <= 4


class TestFindOptimalDestination:
    def test_single_feasible(self):
        devices = [DeviceSpec(0, 1000.0, 10000.0), DeviceSpec(1, 1000.0, 10000.0),
                   DeviceSpec(2, 1000.0, 650.0)]
        cluster = ClusterSpec.uniform(devices, 10.0, 100.0)
        model = make_model(4)
        p = seq_placement(4, device=0)
        view = make_view(cluster, model, extra_memory_mb={2: 100.0})
        cand = MigrationCandidate(1, ModuleKind.DECODER_LAYER, with_kv=False)
        dst = find_optimal_destination(cluster, cand, p, ModuleCatalog(), view, 0, bs=16)
        assert dst == 1

    def test_maximizes_post_vacancy(self):
        devices = [DeviceSpec(0, 1000.0, 10000.0), DeviceSpec(1, 1000.0, 10000.0),
                   DeviceSpec(2, 1000.0, 10000.0)]
        cluster = ClusterSpec.uniform(devices, 10.0, 100.0)
        model = make_model(4)
        p = seq_placement(4, device=0)
        view = make_view(cluster, model, extra_memory_mb={1: 5000.0, 2: 2000.0})
        cand = MigrationCandidate(1, ModuleKind.DECODER_LAYER, with_kv=False)
        dst = find_optimal_destination(cluster, cand, p, ModuleCatalog(), view, 0, bs=16)
        assert dst == 2

    def test_none_feasible(self):
        devices = [DeviceSpec(0, 1000.0, 10000.0), DeviceSpec(1, 1000.0, 700.0)]
        cluster = ClusterSpec.uniform(devices, 10.0, 100.0)
        model = make_model(4)
        p = seq_placement(4, device=0)
        view = make_view(cluster, model, extra_memory_mb={1: 200.0})
        cand = MigrationCandidate(1, ModuleKind.DECODER_LAYER, with_kv=False)
        with pytest.raises(NoDestinationError):
            find_optimal_destination(cluster, cand, p, ModuleCatalog(), view, 0, bs=16)


class TestSortEvictees:
    def test_reverse_priority(self):
        p = seq_placement(8, device=0)
        for li in (2, 3, 4, 7):
            p = p.with_replica(li, 1)
        # runs: [2,3,4] and [7]; shortest first, then descending layer id
        assert sort_evictees(p, 1) == [7, 4, 3, 2]


def phase1_setup():
    cluster = make_cluster(2, memory_mb=30000.0)
    model = make_model(4)
    placement = seq_placement(4, device=0)
    view = make_view(cluster, model, kv_tokens=350000.0)  # 7168 MB per layer
    return cluster, model, placement, view


def phase2_setup():
    cluster = make_cluster(2, memory_mb=10000.0)
    model = make_model(4)
    placement = seq_placement(4, device=1)
    for li in (1, 2, 3):
        placement = placement.with_replica(li, 0)
    view = make_view(cluster, model, extra_memory_mb={0: 8900.0})
    return cluster, model, placement, view


def phase3_setup():
    cluster = make_cluster(1, memory_mb=24500.0)
    model = make_model(40)
    placement = seq_placement(40, device=0)
    view = make_view(
        cluster, model, kv_tokens=3000.0, active_batch=16,
        mean_prompt_len=128.0, mean_gen_len=256.0,
    )
    return cluster, model, placement, view


class TestScaleDown:
    def test_not_violating_is_noop(self):
        cluster = make_cluster(2)
        model = make_model(4)
        p = seq_placement(4, device=0)
        res = scale_down(p, cluster, model, ModuleCatalog(), ControllerConfig(),
                         make_view(cluster, model), src_device=0, bs=16)
        assert res.resolved and res.ops == () and res.bs == 16

    def test_phase1_kv_migration_resolves(self):
        cluster, model, placement, view = phase1_setup()
        res = scale_down(placement, cluster, model, ModuleCatalog(), ControllerConfig(),
                         view, src_device=0, bs=16)
        assert res.resolved
        assert res.bs == 16
        assert [p.phase for p in res.ops] == [1]
        assert isinstance(res.ops[0].op, MigrateSubModule)
        assert res.ops[0].op.kind is ModuleKind.KV_CACHE
        assert res.placement.kv_device(res.ops[0].op.layer) == 1

    def test_phase2_evictions_resolve(self):
        cluster, model, placement, view = phase2_setup()
        res = scale_down(placement, cluster, model, ModuleCatalog(), ControllerConfig(),
                         view, src_device=0, bs=16)
        assert res.resolved
        phases = [p.phase for p in res.ops]
        assert phases == [2, 2]
        assert all(isinstance(p.op, EvictReplica) for p in res.ops)
        # originals on device 1 untouched
        assert all(res.placement.original_device(li) == 1 for li in range(1, 5))

    def test_phase3_reduces_batch_with_floor(self):
        cluster, model, placement, view = phase3_setup()
        cfg = ControllerConfig(bs_step=5)
        res = scale_down(placement, cluster, model, ModuleCatalog(), cfg,
                         view, src_device=0, bs=16)
        assert res.resolved
        assert all(p.phase == 3 for p in res.ops)
        assert res.bs >= 1
        assert res.bs == 1  # engineered to need the full reduction
        assert res.offload_fraction == 1.0
        assert len(res.ops) <= -(-16 // 5)  # ceil(bs / step)

    def test_phase_order_never_inverts(self):
        for setup in (phase1_setup, phase2_setup, phase3_setup):
            cluster, model, placement, view = setup()
            res = scale_down(placement, cluster, model, ModuleCatalog(), ControllerConfig(),
                             view, src_device=0, bs=16)
            phases = [p.phase for p in res.ops]
            assert phases == sorted(phases)

    def test_termination_bound(self):
        cluster, model, placement, view = phase2_setup()
        cfg = ControllerConfig(bs_step=5)
        res = scale_down(placement, cluster, model, ModuleCatalog(), cfg,
                         view, src_device=0, bs=16)
        candidates = cfg.max_migration_candidates
        replicas = len(placement.replica_layers_on(0))
        assert len(res.ops) <= candidates + replicas + -(-16 // 5)


class TestControllerStep:
    def _instances(self, cluster, model, placement, view, bs=16):
        return [InstanceView(instance_id=0, placement=placement, bs=bs,
                             offload_fraction=0.0, view=view)]

    def test_quiescent_noop(self):
        cluster = make_cluster(2, memory_mb=10000.0)
        model = make_model(4)
        p = seq_placement(4, device=0)
        view = make_view(cluster, model)
        usage = {0: DeviceUsage(8000.0, 0.0), 1: DeviceUsage(8000.0, 0.0)}
        decision = controller_step(self._instances(cluster, model, p, view), cluster,
                                   model, ModuleCatalog(), ControllerConfig(t_up=0.3),
                                   SpeedupParams(gamma=0.1), usage)
        assert decision.trigger == "none"

    def test_vacancy_triggers_scale_up(self):
        cluster = make_cluster(2, memory_mb=10000.0)
        model = make_model(4)
        p = seq_placement(4, device=0)
        view = make_view(cluster, model)
        usage = {0: DeviceUsage(2420.0, 0.0), 1: DeviceUsage(0.0, 0.0)}
        decision = controller_step(self._instances(cluster, model, p, view), cluster,
                                   model, ModuleCatalog(), ControllerConfig(t_up=0.3),
                                   SpeedupParams(gamma=0.1), usage)
        assert decision.trigger == "scale_up"
        assert decision.speedup_after > decision.speedup_before

    def test_scale_down_takes_priority(self):
        cluster, model, placement, view = phase1_setup()
        usage = {0: DeviceUsage(31092.0, 0.0), 1: DeviceUsage(0.0, 0.0)}
        decision = controller_step(self._instances(cluster, model, placement, view),
                                   cluster, model, ModuleCatalog(),
                                   ControllerConfig(t_up=0.3), SpeedupParams(gamma=0.1),
                                   usage)
        assert decision.trigger == "scale_down"
        assert decision.resolved
