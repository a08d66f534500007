"""Command-line front end.

Subcommands::

    modscale run <scenario.yaml> --out DIR [--seed N] [--format csv|json]
    modscale sweep <sweep.yaml> --out DIR [--jobs K]
    modscale verify-oracle <scenario.yaml>
    modscale explain-speedup --p "2,2,1,1" --gamma 0.2

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 acceptance-check
failure in verify-oracle.

Scenario schema (YAML; unknown keys rejected)::

    seed: 7
    cluster:
      devices: [{id: 0, compute_gflops: 312000, memory_mb: 40960}, ...]
      bandwidth: {link_mbps: 25000, intra_mbps: 200000,
                  overrides: [{a: 0, b: 1, mbps: 50000}]}
    model: {n_layers: 40, d_model: 5120, d_ff: 13824, n_heads: 40, dtype_bytes: 2}
    catalog: {...}            # optional; defaults to the measured 13B table,
                              # or `derive: from_model` for analytic values
    workload: {rps: 10, duration_s: 60, prompt_len: 128, gen_len: 256}
                              # prompt_len/gen_len: int or {min: a, max: b};
                              # `trace: [t0, t1, ...]` replays exact arrivals
    instances:
      - {id: 0, device: 0, max_batch_size: 16,
         replicate: [{layers: [1, 10], device: 1}]}
    controller: {enabled: true, t_up: 0.3, t_down: 0.05, slo_latency_s: 10, ...}
    calibration: {kappa_compute: 8.0e-8, kappa_comm: 1.0e-5, overhead_s: 5.0e-4}
    speedup: {delta: 1.0}     # optional gamma overrides the derived value
    sim: {oom_restart_s: 30, drain_s: 30, trace_window_s: 1}

Sweep schema::

    base: scenario.yaml       # path relative to the sweep file, or inline map
    repetitions: 5
    max_cells: 256
    axes:
      workload.rps: [10, 30, 50]          # any dotted scenario path
      replicated_layers: [0, 15, 20, 30]  # first k layers of instance 0
      dop: [2]                            # replicas per replicated layer
      replica_devices: [[1, 2, 3]]        # targets for generated replicas
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Mapping

import yaml

from . import outputs
from .config import ConfigError, load_scenario_file, scenario_from_dict
from .domain import device_usage
from .sim import run as run_sim
from .speedup import SearchSpaceError, oracle_best_strategy, speedup_homo

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SearchSpaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modscale", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(required=True)

    p_run = sub.add_parser("run", help="execute one scenario")
    p_run.add_argument("config")
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_run.add_argument("--format", choices=("csv", "json"), default="csv")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a scenario grid")
    p_sweep.add_argument("spec")
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.set_defaults(func=cmd_sweep)

    p_oracle = sub.add_parser("verify-oracle", help="compare greedy scale-up to brute force")
    p_oracle.add_argument("config")
    p_oracle.add_argument("--max-total-replicas", type=int, default=6)
    p_oracle.set_defaults(func=cmd_verify_oracle)

    p_explain = sub.add_parser("explain-speedup", help="break down the closed-form speedup")
    p_explain.add_argument("--p", required=True, help="comma-separated replica counts")
    p_explain.add_argument("--gamma", type=float, required=True)
    p_explain.set_defaults(func=cmd_explain)
    return parser


def cmd_run(args) -> int:
    scenario = load_scenario_file(args.config)
    if args.seed is not None:
        scenario = dataclasses.replace(scenario, seed=args.seed)
    result = run_sim(scenario)
    files = outputs.write_result(result, args.out, fmt=args.format)
    print(f"wrote {len(files)} files to {args.out}")
    for key in ("mean_throughput_rps", "mean_latency_s", "p95_latency_s",
                "violation_rate", "oom_events", "total_scaling_cost_s"):
        print(f"  {key}: {result.summary[key]}")
    return EXIT_OK


# -- sweep ------------------------------------------------------------------

SWEEP_KEYS = {"base", "axes", "repetitions", "max_cells", "seed"}
SPECIAL_AXES = {"replicated_layers", "dop", "replica_devices"}


def _load_sweep(path: Path) -> dict:
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML parse error: {exc}") from exc
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: expected a mapping")
    unknown = set(raw) - SWEEP_KEYS
    if unknown:
        raise ConfigError(f"sweep: unknown key(s) {sorted(unknown)}")
    if "base" not in raw or "axes" not in raw:
        raise ConfigError("sweep: missing required key 'base' or 'axes'")
    axes = raw["axes"]
    if not isinstance(axes, Mapping) or not axes:
        raise ConfigError("sweep.axes: expected a non-empty mapping")
    for name, values in axes.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.axes.{name}: expected a non-empty list")
    return dict(raw)


def _set_path(tree: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        if part.isdigit():
            node = node[int(part)]
        else:
            node = node.setdefault(part, {})
    last = parts[-1]
    if last.isdigit():
        node[int(last)] = value
    else:
        node[last] = value


def _apply_cell(base: dict, assignment: dict[str, Any]) -> dict:
    tree = json.loads(json.dumps(base))  # deep copy of plain data
    plain = {k: v for k, v in assignment.items() if k not in SPECIAL_AXES}
    special = {k: v for k, v in assignment.items() if k in SPECIAL_AXES}
    for dotted, value in plain.items():
        _set_path(tree, dotted, value)
    k = special.get("replicated_layers", 0)
    dop = special.get("dop", 2)
    if k:
        instances = tree.get("instances") or []
        if not instances:
            raise ConfigError("sweep: replicated_layers needs at least one instance")
        inst = instances[0]
        devices = special.get("replica_devices")
        if devices is None:
            home = inst.get("device")
            devices = [d["id"] for d in tree["cluster"]["devices"] if d["id"] != home]
        if not devices:
            raise ConfigError("sweep: no devices available for generated replicas")
        if dop - 1 > len(devices):
            raise ConfigError("sweep: dop-1 exceeds available replica devices")
        entries = []
        n_dev = len(devices)
        for li in range(1, k + 1):
            # Block assignment keeps replicated layer runs contiguous per device.
            base_idx = (li - 1) * n_dev // k
            for j in range(dop - 1):
                entries.append({"layer": li, "device": devices[(base_idx + j) % n_dev]})
        inst["replicate"] = (inst.get("replicate") or []) + entries
    return tree


def _run_cell(payload: tuple[dict, dict, int, str]) -> tuple[dict, int, dict | None, str]:
    tree, assignment, seed, out_dir = payload
    try:
        tree = dict(tree)
        tree["seed"] = seed
        scenario = scenario_from_dict(tree)
        result = run_sim(scenario)
        outputs.write_result(result, out_dir, fmt="csv")
        return assignment, seed, result.summary, ""
    except Exception as exc:  # cell failures are recorded, the sweep continues
        return assignment, seed, None, f"{type(exc).__name__}: {exc}"


AGG_METRICS = (
    "mean_throughput_rps", "mean_throughput_tok_s", "mean_latency_s",
    "p95_latency_s", "violation_rate", "oom_events",
)


def cmd_sweep(args) -> int:
    spec_path = Path(args.spec)
    spec = _load_sweep(spec_path)
    base = spec["base"]
    if isinstance(base, str):
        base_path = (spec_path.parent / base).resolve()
        base_tree = yaml.safe_load(base_path.read_text())
    else:
        base_tree = json.loads(json.dumps(dict(base)))
    scenario_from_dict(_apply_cell(base_tree, {}))  # validate the base eagerly

    axes = spec["axes"]
    reps = int(spec.get("repetitions", 5))
    max_cells = int(spec.get("max_cells", 256))
    base_seed = int(spec.get("seed", base_tree.get("seed", 0)))

    names = list(axes)
    cells: list[dict[str, Any]] = [{}]
    for name in names:
        cells = [dict(c, **{name: v}) for c in cells for v in axes[name]]
    if len(cells) > max_cells:
        raise ConfigError(f"sweep: {len(cells)} cells exceed max_cells={max_cells}")

    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    jobs = []
    for ci, cell in enumerate(cells):
        for rep in range(reps):
            seed = base_seed + 1000 * ci + rep
            cell_dir = out_root / f"cell_{ci:03d}_rep_{rep}"
            jobs.append((_apply_cell(base_tree, cell), cell, seed, str(cell_dir)))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]

    failures = [(a, s, err) for a, s, _, err in results if err]
    by_cell: dict[str, list[dict]] = {}
    for assignment, _, summary, err in results:
        if summary is not None:
            by_cell.setdefault(json.dumps(assignment, sort_keys=True), []).append(summary)

    agg_rows = []
    for ci, cell in enumerate(cells):
        key = json.dumps(cell, sort_keys=True)
        summaries = by_cell.get(key, [])
        row: dict[str, Any] = {name: cell[name] for name in names}
        row["runs"] = len(summaries)
        for metric in AGG_METRICS:
            vals = [s[metric] for s in summaries]
            row[f"{metric}_mean"] = statistics.fmean(vals) if vals else None
            row[f"{metric}_stdev"] = (
                statistics.stdev(vals) if len(vals) > 1 else 0.0 if vals else None
            )
        agg_rows.append(row)

    fields = [str(n) for n in names] + ["runs"] + [
        f"{m}_{s}" for m in AGG_METRICS for s in ("mean", "stdev")
    ]
    (out_root / "sweep_summary.json").write_text(
        json.dumps({"schema_version": outputs.SCHEMA_VERSION, "rows": agg_rows}, indent=1)
    )
    with open(out_root / "sweep_summary.csv", "w", newline="") as fh:
        fh.write(f"# schema_version={outputs.SCHEMA_VERSION}\n")
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in agg_rows:
            writer.writerow({k: row.get(k) for k in fields})

    print(f"{len(cells)} cells x {reps} reps -> {len(jobs)} runs, {len(failures)} failed")
    if failures:
        for assignment, seed, err in failures:
            print(f"  FAILED {assignment} seed={seed}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# -- verify-oracle ------------------------------------------------------------


def cmd_verify_oracle(args) -> int:
    from .autoscaler import scale_up

    scenario = load_scenario_file(args.config)
    inst = scenario.instances[0]
    placement = inst.build_placement(scenario.model.n_layers)
    usage = device_usage(placement, scenario.catalog, cluster=scenario.cluster)

    greedy = scale_up(
        placement, scenario.cluster, scenario.model, scenario.catalog,
        scenario.controller, scenario.params, usage_by_device=usage,
    )
    oracle = oracle_best_strategy(
        placement, scenario.cluster, scenario.model, scenario.params,
        scenario.controller.replica_size_mb, args.max_total_replicas,
        catalog=scenario.catalog,
    )
    gap = oracle.speedup - greedy.speedup_after
    monotone = all(b > a for a, b in zip(greedy.speedup_trace, greedy.speedup_trace[1:]))
    final_usage = device_usage(greedy.placement, scenario.catalog, cluster=scenario.cluster)
    feasible = all(
        final_usage[d].memory_mb <= scenario.cluster.device(d).memory_mb
        for d in final_usage
    )
    print("greedy speedup:   ", f"{greedy.speedup_after:.6f}")
    print("oracle speedup:   ", f"{oracle.speedup:.6f}")
    print("gap (oracle-greedy):", f"{gap:.6f}")
    print("greedy P:", list(greedy.placement.p_vector()))
    print("oracle P:", list(oracle.placement.p_vector()))
    print("oracle evaluations:", oracle.evaluated)
    print("monotone speedup trace:", "PASS" if monotone else "FAIL")
    print("memory feasible:       ", "PASS" if feasible else "FAIL")
    ok = monotone and feasible and gap >= -1e-9 and greedy.speedup_after >= 1.0 - 1e-12
    print("overall:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_explain(args) -> int:
    try:
        p = [int(x) for x in args.p.replace(" ", "").split(",") if x]
    except ValueError as exc:
        raise ConfigError(f"--p: {exc}") from None
    if not p:
        raise ConfigError("--p: empty parallelism vector")
    gamma = args.gamma
    n = len(p)
    recip = sum(1.0 / pi for pi in p)
    s = speedup_homo(p, gamma)
    print(f"P = {p}  (n = {n})")
    print(f"sum(1/p_i)        = {recip:.6f}")
    print(f"gamma             = {gamma:.6f}")
    print(f"(1-gamma)/n * sum = {(1 - gamma) / n * recip:.6f}")
    print(f"speedup           = {s:.4f}")
    if gamma > 0:
        print(f"asymptote 1/gamma = {1.0 / gamma:.4f}")
    else:
        print("asymptote 1/gamma = inf")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
