"""Scenario configuration: a human-editable YAML tree, strictly validated.

Sections: cluster, model, catalog (optional), workload, instances, controller,
calibration, speedup, sim, seed.  Unknown keys are rejected with the offending
path so typos fail loudly.  See the CLI module docstring / README for the full
schema.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping

import yaml

from . import sim as sim_mod
from .autoscaler import ControllerConfig
from .domain import ClusterSpec, DeviceSpec, ModelSpec, ModuleCatalog
from .sim import (
    CalibrationParams,
    InstanceConfig,
    LengthDist,
    Scenario,
    SimOptions,
    WorkloadSpec,
)
from .speedup import SpeedupParams


class ConfigError(ValueError):
    """Invalid scenario config; message carries the field path."""


def _require_mapping(node: Any, path: str) -> dict:
    if not isinstance(node, Mapping):
        raise ConfigError(f"{path}: expected a mapping, got {type(node).__name__}")
    return dict(node)


def _check_keys(node: Mapping, allowed: set[str], path: str) -> None:
    unknown = set(node) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")


def _get(node: Mapping, key: str, path: str, required: bool = True, default: Any = None) -> Any:
    if key not in node:
        if required:
            raise ConfigError(f"{path}: missing required key '{key}'")
        return default
    return node[key]


def _number(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    return float(value)


def _integer(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    return value


def load_scenario_file(path: str | Path) -> Scenario:
    p = Path(path)
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: YAML parse error: {exc}") from exc
    if raw is None:
        raise ConfigError(f"{p}: empty config")
    return scenario_from_dict(raw)


TOP_KEYS = {
    "seed", "cluster", "model", "catalog", "workload", "instances",
    "controller", "calibration", "speedup", "sim",
}


def scenario_from_dict(raw: Mapping) -> Scenario:
    root = _require_mapping(raw, "config")
    _check_keys(root, TOP_KEYS, "config")
    for section in ("cluster", "model", "workload", "instances"):
        if section not in root:
            raise ConfigError(f"config: missing required section '{section}'")

    seed = _integer(root.get("seed", 0), "seed")
    cluster = _parse_cluster(_require_mapping(root["cluster"], "cluster"))
    model = _parse_model(_require_mapping(root["model"], "model"))
    catalog = _parse_catalog(root.get("catalog"), model)
    workload = _parse_workload(_require_mapping(root["workload"], "workload"))
    instances = _parse_instances(root["instances"], cluster, model)
    controller, enabled = _parse_controller(root.get("controller"))
    calibration = _parse_calibration(root.get("calibration"))
    params = _parse_speedup(root.get("speedup"))
    options = _parse_sim(root.get("sim"))
    try:
        return Scenario(
            cluster=cluster,
            model=model,
            catalog=catalog,
            workload=workload,
            instances=instances,
            controller=controller,
            controller_enabled=enabled,
            calibration=calibration,
            params=params,
            options=options,
            seed=seed,
        )
    except (ValueError, sim_mod.SimError) as exc:
        raise ConfigError(str(exc)) from exc


def _parse_cluster(node: Mapping) -> ClusterSpec:
    _check_keys(node, {"devices", "bandwidth"}, "cluster")
    devices_node = _get(node, "devices", "cluster")
    if not isinstance(devices_node, list) or not devices_node:
        raise ConfigError("cluster.devices: expected a non-empty list")
    devices = []
    for i, d in enumerate(devices_node):
        path = f"cluster.devices[{i}]"
        d = _require_mapping(d, path)
        _check_keys(d, {"id", "compute_gflops", "memory_mb"}, path)
        devices.append(
            DeviceSpec(
                id=_integer(_get(d, "id", path), f"{path}.id"),
                compute_gflops=_number(_get(d, "compute_gflops", path), f"{path}.compute_gflops"),
                memory_mb=_number(_get(d, "memory_mb", path), f"{path}.memory_mb"),
            )
        )
    bw = _require_mapping(_get(node, "bandwidth", "cluster"), "cluster.bandwidth")
    _check_keys(bw, {"link_mbps", "intra_mbps", "overrides"}, "cluster.bandwidth")
    link = _number(_get(bw, "link_mbps", "cluster.bandwidth"), "cluster.bandwidth.link_mbps")
    intra = bw.get("intra_mbps")
    intra = _number(intra, "cluster.bandwidth.intra_mbps") if intra is not None else None
    overrides = {}
    for i, o in enumerate(bw.get("overrides") or []):
        path = f"cluster.bandwidth.overrides[{i}]"
        o = _require_mapping(o, path)
        _check_keys(o, {"a", "b", "mbps"}, path)
        overrides[(_integer(o["a"], path), _integer(o["b"], path))] = _number(o["mbps"], path)
    try:
        return ClusterSpec.uniform(devices, link, intra, overrides)
    except ValueError as exc:
        raise ConfigError(f"cluster: {exc}") from exc


def _parse_model(node: Mapping) -> ModelSpec:
    _check_keys(node, {"n_layers", "d_model", "d_ff", "n_heads", "dtype_bytes"}, "model")
    try:
        return ModelSpec(
            n_layers=_integer(_get(node, "n_layers", "model"), "model.n_layers"),
            d_model=_integer(_get(node, "d_model", "model"), "model.d_model"),
            d_ff=_integer(_get(node, "d_ff", "model"), "model.d_ff"),
            n_heads=_integer(_get(node, "n_heads", "model"), "model.n_heads"),
            dtype_bytes=_integer(node.get("dtype_bytes", 2), "model.dtype_bytes"),
        )
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc


_CATALOG_KEYS = {
    "attn_projection_mb", "attn_projection_gflops",
    "self_attention_mb", "self_attention_gflops",
    "ffn_projection_mb", "ffn_projection_gflops",
    "decoder_layer_mb", "decoder_layer_gflops",
    "kv_bytes_per_token_per_layer", "derive",
}


def _parse_catalog(node: Any, model: ModelSpec) -> ModuleCatalog:
    if node is None:
        return ModuleCatalog()
    node = _require_mapping(node, "catalog")
    _check_keys(node, _CATALOG_KEYS, "catalog")
    if node.get("derive") == "from_model":
        rest = {k: v for k, v in node.items() if k != "derive"}
        base = ModuleCatalog.from_model(model)
        if rest:
            raise ConfigError("catalog: 'derive' cannot be combined with explicit entries")
        return base
    kwargs = {}
    for key in node:
        kwargs[key] = _number(node[key], f"catalog.{key}")
    try:
        return ModuleCatalog(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"catalog: {exc}") from exc


def _parse_length(node: Any, path: str) -> LengthDist:
    if isinstance(node, int) and not isinstance(node, bool):
        return LengthDist.fixed(node)
    node = _require_mapping(node, path)
    _check_keys(node, {"min", "max"}, path)
    return LengthDist.uniform(
        _integer(_get(node, "min", path), f"{path}.min"),
        _integer(_get(node, "max", path), f"{path}.max"),
    )


def _parse_workload(node: Mapping) -> WorkloadSpec:
    _check_keys(node, {"rps", "duration_s", "prompt_len", "gen_len", "trace", "seed"}, "workload")
    trace = node.get("trace")
    if trace is not None:
        if not isinstance(trace, list):
            raise ConfigError("workload.trace: expected a list of timestamps")
        trace = tuple(_number(t, f"workload.trace[{i}]") for i, t in enumerate(trace))
    try:
        return WorkloadSpec(
            rps=_number(node.get("rps", 0.0), "workload.rps"),
            duration_s=_number(_get(node, "duration_s", "workload"), "workload.duration_s"),
            prompt_len=_parse_length(node.get("prompt_len", 128), "workload.prompt_len"),
            gen_len=_parse_length(node.get("gen_len", 256), "workload.gen_len"),
            trace_arrivals_s=trace,
            seed=_integer(node["seed"], "workload.seed") if "seed" in node else None,
        )
    except sim_mod.SimError as exc:
        raise ConfigError(f"workload: {exc}") from exc


def _expand_layers(node: Any, path: str) -> list[int]:
    if isinstance(node, int) and not isinstance(node, bool):
        return [node]
    if isinstance(node, list) and len(node) == 2 and all(isinstance(x, int) for x in node):
        lo, hi = node
        if lo > hi:
            raise ConfigError(f"{path}: layer range [{lo}, {hi}] is empty")
        return list(range(lo, hi + 1))
    raise ConfigError(f"{path}: expected a layer id or [first, last] range")


def _parse_instances(node: Any, cluster: ClusterSpec, model: ModelSpec) -> tuple[InstanceConfig, ...]:
    if not isinstance(node, list) or not node:
        raise ConfigError("instances: expected a non-empty list")
    out = []
    for i, inst in enumerate(node):
        path = f"instances[{i}]"
        inst = _require_mapping(inst, path)
        _check_keys(inst, {"id", "device", "max_batch_size", "replicate"}, path)
        home = _integer(_get(inst, "device", path), f"{path}.device")
        if not cluster.has_device(home):
            raise ConfigError(f"{path}.device: unknown device {home}")
        replicas: list[tuple[int, int]] = []
        for j, r in enumerate(inst.get("replicate") or []):
            rpath = f"{path}.replicate[{j}]"
            r = _require_mapping(r, rpath)
            _check_keys(r, {"layer", "layers", "device"}, rpath)
            dev = _integer(_get(r, "device", rpath), f"{rpath}.device")
            if not cluster.has_device(dev):
                raise ConfigError(f"{rpath}.device: unknown device {dev}")
            if ("layer" in r) == ("layers" in r):
                raise ConfigError(f"{rpath}: give exactly one of 'layer' or 'layers'")
            layers = _expand_layers(r.get("layer", r.get("layers")), rpath)
            for li in layers:
                if not 1 <= li <= model.n_layers:
                    raise ConfigError(f"{rpath}: layer {li} outside 1..{model.n_layers}")
                replicas.append((li, dev))
        out.append(
            InstanceConfig(
                id=_integer(_get(inst, "id", path), f"{path}.id"),
                home_device=home,
                max_batch_size=_integer(inst.get("max_batch_size", 16), f"{path}.max_batch_size"),
                replicas=tuple(replicas),
            )
        )
    return tuple(out)


_CONTROLLER_KEYS = {
    "enabled", "t_up", "t_down", "slo_latency_s", "violation_window_s", "replica_size_mb",
    "bs_step", "eval_period_s", "mem_pressure", "compute_pressure", "oom_lookahead_s",
    "max_migration_candidates", "offload_step", "offload_latency_multiplier",
    "vacancy_scope", "scale_up_enabled", "cost_mode",
}


def _parse_controller(node: Any) -> tuple[ControllerConfig, bool]:
    if node is None:
        return ControllerConfig(), True
    node = _require_mapping(node, "controller")
    _check_keys(node, _CONTROLLER_KEYS, "controller")
    enabled = node.get("enabled", True)
    if not isinstance(enabled, bool):
        raise ConfigError("controller.enabled: expected a boolean")
    kwargs: dict[str, Any] = {}
    for key in node:
        if key == "enabled":
            continue
        value = node[key]
        if key in ("bs_step", "max_migration_candidates"):
            kwargs[key] = _integer(value, f"controller.{key}")
        elif key in ("vacancy_scope", "cost_mode"):
            if not isinstance(value, str):
                raise ConfigError(f"controller.{key}: expected a string")
            kwargs[key] = value
        elif key == "scale_up_enabled":
            if not isinstance(value, bool):
                raise ConfigError("controller.scale_up_enabled: expected a boolean")
            kwargs[key] = value
        else:
            kwargs[key] = _number(value, f"controller.{key}")
    try:
        return ControllerConfig(**kwargs), enabled
    except ValueError as exc:
        raise ConfigError(f"controller: {exc}") from exc


def _parse_calibration(node: Any) -> CalibrationParams:
    if node is None:
        return CalibrationParams()
    node = _require_mapping(node, "calibration")
    _check_keys(node, {"kappa_compute", "kappa_comm", "overhead_s"}, "calibration")
    try:
        return CalibrationParams(
            **{k: _number(v, f"calibration.{k}") for k, v in node.items()}
        )
    except sim_mod.SimError as exc:
        raise ConfigError(f"calibration: {exc}") from exc


def _parse_speedup(node: Any) -> SpeedupParams:
    if node is None:
        return SpeedupParams()
    node = _require_mapping(node, "speedup")
    _check_keys(node, {"delta", "gamma", "seq_len", "base_batch"}, "speedup")
    try:
        return SpeedupParams(
            delta=_number(node.get("delta", 1.0), "speedup.delta"),
            gamma=_number(node["gamma"], "speedup.gamma") if "gamma" in node else None,
            seq_len=_number(node.get("seq_len", 256), "speedup.seq_len"),
            base_batch=_number(node.get("base_batch", 15), "speedup.base_batch"),
        )
    except ValueError as exc:
        raise ConfigError(f"speedup: {exc}") from exc


def _parse_sim(node: Any) -> SimOptions:
    if node is None:
        return SimOptions()
    node = _require_mapping(node, "sim")
    _check_keys(node, {"oom_restart_s", "drain_s", "trace_window_s"}, "sim")
    try:
        return SimOptions(**{k: _number(v, f"sim.{k}") for k, v in node.items()})
    except sim_mod.SimError as exc:
        raise ConfigError(f"sim: {exc}") from exc


def scenario_to_dict(sc: Scenario) -> dict:
    """Round-trippable plain-dict form of a scenario (for sweeps and echoes)."""
    n = len(sc.cluster.devices)
    off = sorted(
        {
            sc.cluster.bandwidth_mbps[i][j]
            for i in range(n)
            for j in range(n)
            if i != j
        }
    )
    link = off[0] if off else sc.cluster.bandwidth_mbps[0][0]
    overrides = []
    for i in range(n):
        for j in range(i + 1, n):
            if sc.cluster.bandwidth_mbps[i][j] != link:
                overrides.append(
                    {
                        "a": sc.cluster.devices[i].id,
                        "b": sc.cluster.devices[j].id,
                        "mbps": sc.cluster.bandwidth_mbps[i][j],
                    }
                )
    intra = min(sc.cluster.bandwidth_mbps[i][i] for i in range(n))
    workload: dict[str, Any] = {
        "rps": sc.workload.rps,
        "duration_s": sc.workload.duration_s,
        "prompt_len": _length_to_node(sc.workload.prompt_len),
        "gen_len": _length_to_node(sc.workload.gen_len),
    }
    if sc.workload.trace_arrivals_s is not None:
        workload["trace"] = list(sc.workload.trace_arrivals_s)
    if sc.workload.seed is not None:
        workload["seed"] = sc.workload.seed
    out = {
        "seed": sc.seed,
        "cluster": {
            "devices": [
                {"id": d.id, "compute_gflops": d.compute_gflops, "memory_mb": d.memory_mb}
                for d in sc.cluster.devices
            ],
            "bandwidth": {
                "link_mbps": link,
                "intra_mbps": intra,
                **({"overrides": overrides} if overrides else {}),
            },
        },
        "model": {
            "n_layers": sc.model.n_layers,
            "d_model": sc.model.d_model,
            "d_ff": sc.model.d_ff,
            "n_heads": sc.model.n_heads,
            "dtype_bytes": sc.model.dtype_bytes,
        },
        "catalog": {
            "attn_projection_mb": sc.catalog.attn_projection_mb,
            "attn_projection_gflops": sc.catalog.attn_projection_gflops,
            "self_attention_mb": sc.catalog.self_attention_mb,
            "self_attention_gflops": sc.catalog.self_attention_gflops,
            "ffn_projection_mb": sc.catalog.ffn_projection_mb,
            "ffn_projection_gflops": sc.catalog.ffn_projection_gflops,
            "decoder_layer_mb": sc.catalog.decoder_layer_mb,
            "decoder_layer_gflops": sc.catalog.decoder_layer_gflops,
            "kv_bytes_per_token_per_layer": sc.catalog.kv_bytes_per_token_per_layer,
        },
        "workload": workload,
        "instances": [
            {
                "id": ic.id,
                "device": ic.home_device,
                "max_batch_size": ic.max_batch_size,
                **(
                    {"replicate": [{"layer": li, "device": dv} for li, dv in ic.replicas]}
                    if ic.replicas
                    else {}
                ),
            }
            for ic in sc.instances
        ],
        "controller": {
            "enabled": sc.controller_enabled,
            "t_up": sc.controller.t_up,
            "t_down": sc.controller.t_down,
            "slo_latency_s": sc.controller.slo_latency_s,
            "violation_window_s": sc.controller.violation_window_s,
            "replica_size_mb": sc.controller.replica_size_mb,
            "bs_step": sc.controller.bs_step,
            "eval_period_s": sc.controller.eval_period_s,
            "mem_pressure": sc.controller.mem_pressure,
            "compute_pressure": sc.controller.compute_pressure,
            "oom_lookahead_s": sc.controller.oom_lookahead_s,
            "max_migration_candidates": sc.controller.max_migration_candidates,
            "offload_step": sc.controller.offload_step,
            "offload_latency_multiplier": sc.controller.offload_latency_multiplier,
            "vacancy_scope": sc.controller.vacancy_scope,
            "scale_up_enabled": sc.controller.scale_up_enabled,
            "cost_mode": sc.controller.cost_mode,
        },
        "calibration": {
            "kappa_compute": sc.calibration.kappa_compute,
            "kappa_comm": sc.calibration.kappa_comm,
            "overhead_s": sc.calibration.overhead_s,
        },
        "speedup": {
            "delta": sc.params.delta,
            **({"gamma": sc.params.gamma} if sc.params.gamma is not None else {}),
            "seq_len": sc.params.seq_len,
            "base_batch": sc.params.base_batch,
        },
        "sim": {
            "oom_restart_s": sc.options.oom_restart_s,
            "drain_s": sc.options.drain_s,
            "trace_window_s": sc.options.trace_window_s,
        },
    }
    return out


def _length_to_node(dist: LengthDist):
    if dist.kind == "fixed":
        return dist.value
    return {"min": dist.lo, "max": dist.hi}


def dump_scenario_yaml(sc: Scenario, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(scenario_to_dict(sc), sort_keys=False))
