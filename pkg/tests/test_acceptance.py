"""Acceptance suite: one test per release criterion, each printing a PASS line
with its observed numbers so `pytest -s tests/test_acceptance.py` doubles as a
report."""

import itertools
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from modscale.autoscaler import ControllerConfig, scale_up
from modscale.cli import _apply_cell
from modscale.config import scenario_from_dict
from modscale.domain import (
    BatchAssignment,
    ClusterSpec,
    DeviceSpec,
    ModelSpec,
    ModuleCatalog,
    PlacementState,
    Replica,
    device_usage,
)
from modscale.ops import DEFAULT_ANCHORS, OpCostModel
from modscale.outputs import write_result
from modscale.sim import (
    CalibrationParams,
    InstanceConfig,
    LengthDist,
    Scenario,
    SimOptions,
    WorkloadSpec,
    run,
)
from modscale.speedup import (
    SpeedupParams,
    gamma_for_cluster,
    oracle_best_strategy,
    speedup,
    speedup_homo,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def elapsed(t0):
    return time.perf_counter() - t0


def report(n, budget_s, took_s, detail):
    print(f"PASS criterion {n} ({took_s:.2f}s / budget {budget_s:.0f}s): {detail}")


def test_criterion_01_closed_form_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(100):
        gamma = float(rng.uniform(0.0, 1.0))
        n = int(rng.integers(1, 65))
        worst = max(worst, abs(speedup_homo([1] * n, gamma) - 1.0))
    assert worst < 1e-12
    worst_p = 0.0
    for p in range(1, 17):
        worst_p = max(worst_p, abs(speedup_homo([p] * 8, 0.0) - p))
    assert worst_p < 1e-12
    took = elapsed(t0)
    assert took < 1.0
    report(1, 1, took, f"identity error {worst:.2e}, amdahl error {worst_p:.2e}")


def test_criterion_02_general_model_reduces_to_closed_form():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        p_vec = rng.integers(1, 9, size=n)
        delta = float(rng.uniform(0.05, 5.0))
        d_model = int(rng.choice([2, 16, 128, 1024, 5120]))
        bs = float(rng.uniform(1.0, 64.0))
        seq = float(rng.uniform(1.0, 512.0))
        cap = float(rng.uniform(1.0, 1e5))
        bw = float(rng.uniform(1.0, 1e5))
        n_dev = int(p_vec.max()) + 1
        devices = [DeviceSpec(i, cap, 1e12) for i in range(n_dev)]
        cluster = ClusterSpec.uniform(devices, bw, bw * 2)
        model = ModelSpec(n_layers=n, d_model=d_model, d_ff=d_model, n_heads=1)
        rows = []
        for pi in p_vec:
            row = [Replica(0, is_original=True)]
            row += [Replica(j + 1) for j in range(int(pi) - 1)]
            rows.append(tuple(row))
        placement = PlacementState(tuple(rows))
        assignment = BatchAssignment.even(placement, bs, seq)
        params = SpeedupParams(delta=delta, base_batch=bs, seq_len=seq)
        s = speedup(placement, assignment, cluster, model, params)
        s_homo = speedup_homo([int(x) for x in p_vec], gamma_for_cluster(cluster, model, delta))
        worst = max(worst, abs(s - s_homo))
    assert worst < 1e-9
    took = elapsed(t0)
    assert took < 10.0
    report(2, 10, took, f"1000 random configs, max |general - closed form| = {worst:.2e}")


def test_criterion_03_module_table_consistency():
    t0 = time.perf_counter()
    d, d_ff, l, dtype = 5120, 13824, 256, 2
    proj_gflops = 2 * l * d * d / 1e9
    proj_mb = d * d * dtype / 1e6
    ffn_gflops = 2 * l * d * d_ff / 1e9
    ffn_mb = d * d_ff * dtype / 1e6
    assert proj_gflops == pytest.approx(13.42, rel=0.001)
    assert ffn_gflops == pytest.approx(36.24, rel=0.001)
    catalog = ModuleCatalog()
    for derived, tabulated in (
        (proj_gflops, catalog.attn_projection_gflops),
        (proj_mb, catalog.attn_projection_mb),
        (ffn_gflops, catalog.ffn_projection_gflops),
        (ffn_mb, catalog.ffn_projection_mb),
    ):
        assert abs(derived - tabulated) / tabulated < 0.10
    took = elapsed(t0)
    assert took < 1.0
    report(
        3, 1, took,
        f"proj {proj_gflops:.2f} GF / {proj_mb:.1f} MB, ffn {ffn_gflops:.2f} GF / "
        f"{ffn_mb:.1f} MB agree with the measured table within 10%",
    )


def test_criterion_04_greedy_monotonicity_and_feasibility():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    executed_total = 0
    for trial in range(200):
        n_dev = int(rng.integers(2, 5))
        n_layers = int(rng.integers(2, 9))
        home_mem = 605.0 * n_layers + float(rng.uniform(500, 4000))
        devices = [DeviceSpec(0, 312000.0, home_mem)]
        devices += [
            DeviceSpec(i, 312000.0, float(rng.uniform(300.0, 4000.0)))
            for i in range(1, n_dev)
        ]
        cluster = ClusterSpec.uniform(devices, 25000.0, 200000.0)
        model = ModelSpec(n_layers=n_layers, d_model=5120, d_ff=13824, n_heads=40)
        placement = PlacementState.sequential(n_layers, 0)
        cfg = ControllerConfig(replica_size_mb=float(rng.uniform(605.0, 1400.0)))
        gamma = float(rng.uniform(0.0, 0.9))
        res = scale_up(placement, cluster, model, ModuleCatalog(), cfg,
                       SpeedupParams(gamma=gamma))
        trace = res.speedup_trace
        assert all(b > a for a, b in zip(trace, trace[1:])), f"trial {trial}"
        usage = device_usage(res.placement, ModuleCatalog(), cluster=cluster)
        for dev in cluster.devices:
            if dev.id in usage:
                assert usage[dev.id].memory_mb <= dev.memory_mb, f"trial {trial}"
        executed_total += len(res.executed)
    took = elapsed(t0)
    assert took < 30.0
    report(4, 30, took,
           f"200 random clusters, {executed_total} replications, all strictly "
           f"improving and memory-feasible")


def test_criterion_05_greedy_vs_exhaustive_oracle():
    t0 = time.perf_counter()
    gaps = []
    cases = 0
    for n_layers, n_spare, spare_mem, gamma in itertools.product(
        (2, 3, 4), (1, 2), (650.0, 1300.0, 1900.0), (0.05, 0.3, 0.7)
    ):
        devices = [DeviceSpec(0, 312000.0, 40960.0)]
        devices += [DeviceSpec(i + 1, 312000.0, spare_mem) for i in range(n_spare)]
        cluster = ClusterSpec.uniform(devices, 25000.0, 200000.0)
        model = ModelSpec(n_layers=n_layers, d_model=5120, d_ff=13824, n_heads=40)
        # delta chosen so the derived cluster constant equals the target gamma
        delta = gamma * model.d_model * 25000.0 / 312000.0
        params = SpeedupParams(delta=delta, base_batch=16, seq_len=64)
        placement = PlacementState.sequential(n_layers, 0)
        cfg = ControllerConfig(replica_size_mb=605.0)
        greedy = scale_up(placement, cluster, model, ModuleCatalog(), cfg, params)
        oracle = oracle_best_strategy(placement, cluster, model, params, 605.0,
                                      max_total_replicas=3 * n_spare,
                                      catalog=ModuleCatalog())
        assert 1.0 - 1e-12 <= greedy.speedup_after <= oracle.speedup + 1e-9
        usage = device_usage(greedy.placement, ModuleCatalog(), cluster=cluster)
        for dev in cluster.devices:
            if dev.id in usage:
                assert usage[dev.id].memory_mb <= dev.memory_mb
        gaps.append(oracle.speedup - greedy.speedup_after)
        cases += 1
    took = elapsed(t0)
    assert took < 60.0
    report(5, 60, took,
           f"{cases} exhaustive instances, gap mean {np.mean(gaps):.4f} "
           f"max {np.max(gaps):.4f}, zero feasibility violations")


def test_criterion_06_scale_down_phase_discipline():
    from test_autoscaler import phase1_setup, phase2_setup, phase3_setup
    from modscale.autoscaler import scale_down

    t0 = time.perf_counter()
    resolved_in = []
    for setup, expect_phase in ((phase1_setup, 1), (phase2_setup, 2), (phase3_setup, 3)):
        cluster, model, placement, view = setup()
        res = scale_down(placement, cluster, model, ModuleCatalog(), ControllerConfig(),
                         view, src_device=0, bs=16)
        assert res.resolved
        phases = [p.phase for p in res.ops]
        assert phases == sorted(phases), "phase order inverted"
        assert max(phases) == expect_phase
        assert res.bs >= 1
        resolved_in.append(max(phases))
    took = elapsed(t0)
    assert took < 10.0
    report(6, 10, took,
           f"three constructed overloads resolved in phases {resolved_in}, "
           f"no order inversions, batch floor respected")


def test_criterion_07_replication_trend_reproduction():
    t0 = time.perf_counter()
    base = yaml.safe_load((CONFIGS / "sweep_base.yaml").read_text())
    layer_counts = (0, 15, 20, 25, 30)
    results = {}
    for rps in (10.0, 30.0, 50.0):
        for k in layer_counts:
            tree = _apply_cell(base, {"workload.rps": rps,
                                      "replicated_layers": k, "dop": 2})
            summary = run(scenario_from_dict(tree)).summary
            results[(rps, k)] = summary
    at50 = [results[(50.0, k)]["mean_throughput_tok_s"] for k in layer_counts]
    assert all(b > a for a, b in zip(at50, at50[1:])), at50
    p95_base = results[(50.0, 0)]["p95_latency_s"]
    p95_rep30 = results[(50.0, 30)]["p95_latency_s"]
    assert p95_base >= 2.0 * p95_rep30, (p95_base, p95_rep30)
    # the replicated config's p95 also grows strictly slower across the sweep
    base_slope = p95_base - results[(10.0, 0)]["p95_latency_s"]
    rep_slope = p95_rep30 - results[(10.0, 30)]["p95_latency_s"]
    assert rep_slope < base_slope
    took = elapsed(t0)
    assert took < 300.0
    report(7, 300, took,
           f"throughput at 50 rps strictly increasing {['%.0f' % x for x in at50]} tok/s; "
           f"baseline p95 {p95_base:.2f}s >= 2x replicated-30 p95 {p95_rep30:.2f}s")


def migration_benefit_scenario(controller_enabled: bool) -> Scenario:
    devices = [DeviceSpec(0, 312000.0, 25350.0), DeviceSpec(1, 312000.0, 25350.0)]
    cluster = ClusterSpec.uniform(devices, 25000.0, 200000.0)
    model = ModelSpec(n_layers=40, d_model=5120, d_ff=13824, n_heads=40)
    return Scenario(
        cluster=cluster,
        model=model,
        catalog=ModuleCatalog(),
        workload=WorkloadSpec(rps=30.0, duration_s=60.0,
                              prompt_len=LengthDist.fixed(16),
                              gen_len=LengthDist.fixed(64)),
        instances=(InstanceConfig(id=0, home_device=0, max_batch_size=32),),
        controller=ControllerConfig(slo_latency_s=10.0),
        controller_enabled=controller_enabled,
        calibration=CalibrationParams(kappa_compute=1e-7, kappa_comm=1e-5,
                                      overhead_s=5e-3),
        options=SimOptions(oom_restart_s=10.0, drain_s=30.0),
        seed=21,
    )


def test_criterion_08_migration_prevents_latency_cliff():
    t0 = time.perf_counter()
    off = run(migration_benefit_scenario(False)).summary, None
    on_result = run(migration_benefit_scenario(True))
    on = on_result.summary
    p95_off = off[0]["p95_latency_s"]
    p95_on = on["p95_latency_s"]
    assert off[0]["oom_events"] >= 1
    assert p95_on <= 0.5 * p95_off, (p95_on, p95_off)
    migrations = [r for r in on_result.op_rows if r.kind == "migrate_layer"]
    assert migrations, "expected decoder-layer migrations in the controller run"
    took = elapsed(t0)
    assert took < 120.0
    report(8, 120, took,
           f"p95 {p95_off:.2f}s without the controller vs {p95_on:.2f}s with it "
           f"({p95_off / p95_on:.1f}x), {len(migrations)} layer migrations")


def oom_scenario(controller_enabled: bool) -> Scenario:
    devices = [DeviceSpec(0, 312000.0, 1214.0), DeviceSpec(1, 312000.0, 40960.0)]
    cluster = ClusterSpec.uniform(devices, 25000.0, 200000.0)
    model = ModelSpec(n_layers=2, d_model=5120, d_ff=13824, n_heads=40)
    return Scenario(
        cluster=cluster,
        model=model,
        catalog=ModuleCatalog(),
        workload=WorkloadSpec(rps=1.0, duration_s=1.0,
                              trace_arrivals_s=(0.0, 0.0, 0.0, 0.0),
                              prompt_len=LengthDist.fixed(8),
                              gen_len=LengthDist.fixed(32)),
        instances=(InstanceConfig(id=0, home_device=0, max_batch_size=4),),
        controller=ControllerConfig(compute_pressure=1.01),
        controller_enabled=controller_enabled,
        calibration=CalibrationParams(kappa_compute=8e-8, kappa_comm=1e-5,
                                      overhead_s=0.2),
        options=SimOptions(oom_restart_s=1.0, drain_s=15.0),
        seed=11,
    )


def test_criterion_09_oom_avoidance():
    t0 = time.perf_counter()
    off = run(oom_scenario(False)).summary
    on = run(oom_scenario(True)).summary
    assert off["oom_events"] >= 1
    assert on["oom_events"] == 0
    took = elapsed(t0)
    assert took < 60.0
    report(9, 60, took,
           f"engineered KV crossing: {off['oom_events']} OOM events without the "
           f"controller, 0 with it")


def test_criterion_10_cost_model_fidelity():
    t0 = time.perf_counter()
    m = OpCostModel()
    for layers, repl, migr, mem in DEFAULT_ANCHORS:
        assert m.replication_time_s(layers) == repl
        assert m.migration_time_s(layers) == migr
        assert m.transient_memory_mb(layers) == mem
    ratio = m.replication_time_s(40) / m.replication_time_s(1)
    assert abs(ratio - 2.99) / 2.99 < 0.01
    slope = (m.transient_memory_mb(40) - m.transient_memory_mb(1)) / 39
    assert abs(slope - 608.0) / 608.0 < 0.01
    took = elapsed(t0)
    assert took < 1.0
    report(10, 1, took,
           f"five anchors exact, time(40)/time(1) = {ratio:.4f}, "
           f"memory slope {slope:.1f} MB/layer")


def test_criterion_11_byte_identical_reruns(tmp_path):
    t0 = time.perf_counter()
    tree = yaml.safe_load((CONFIGS / "quickstart.yaml").read_text())
    tree["workload"]["duration_s"] = 10.0
    scenario = scenario_from_dict(tree)
    dirs = []
    for name in ("a", "b"):
        out = tmp_path / name
        write_result(run(scenario), out, fmt="csv")
        dirs.append(out)
    compared = []
    for fname in ("trace.csv", "ops.csv", "decisions.csv", "summary.json"):
        b0 = (dirs[0] / fname).read_bytes()
        b1 = (dirs[1] / fname).read_bytes()
        assert b0 == b1, f"{fname} differs between reruns"
        compared.append(fname)
    took = elapsed(t0)
    assert took < 30.0
    report(11, 30, took, f"byte-identical reruns across {compared}")
