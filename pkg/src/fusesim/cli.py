"""Command-line entry point: ``fusesim {attn-verify,kernel-sim,microbench,serve-sim}``.

Exit status is 0 on success, 1 when a verification suite fails and 2 for
usage, configuration or input errors.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from fusesim import config as cfgmod
from fusesim.decomp import HybridBatchSpec, PrefillSpec, fused_config
from fusesim.errors import ConfigError, FuseSimError
from fusesim.gpusim import (
    CSV_COLUMNS,
    ExecutionStrategy,
    csv_row,
    make_microbench,
    oracle_runtime,
    plan_hybrid,
    simulate,
    write_trace,
)
from fusesim.serving import (
    METRIC_COLUMNS,
    ChunkedHybrid,
    PrefillPrioritized,
    Request,
    TokenDist,
    calibrate_cost_model,
    generate_trace,
    metrics_row,
    run_serving,
)
from fusesim.verify import causality_suite, oracle_suite, split_suite

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _write_csv(path: Path, columns, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _run_jobs(fn, jobs: list, threads: int) -> list:
    """Run ``fn`` over ``jobs``; results keep the job order."""
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


# -- attn-verify ------------------------------------------------------------


def cmd_attn_verify(cfg: dict, out: Path) -> int:
    a = cfg["attn_verify"]
    rng = np.random.default_rng(cfg["seed"])
    common = dict(head_dims=tuple(a["head_dims"]), tolerance=a["tolerance"])
    results = [
        oracle_suite(rng, a["instances"], a["max_chunk"], a["max_context"], tiles=tuple(a["tiles"]),
                     mask_shift=a["fault_mask_shift"], **common),
        split_suite(rng, a["instances"], a["max_context"], max_splits=a["max_splits"], **common),
        causality_suite(rng, a["instances"], a["max_chunk"], a["max_context"], tiles=tuple(a["tiles"]),
                        mask_shift=a["fault_mask_shift"], **common),
    ]
    print(f"{'suite':<20} {'instances':>9} {'failures':>8} {'max_rel_err':>12}  result")
    for r in results:
        print(f"{r.name:<20} {r.instances:>9} {r.failures:>8} {r.max_error:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    rows = [
        {"suite": r.name, "instances": r.instances, "failures": r.failures,
         "max_rel_error": f"{r.max_error:.6e}", "passed": int(r.passed)}
        for r in results
    ]
    _write_csv(out, ("suite", "instances", "failures", "max_rel_error", "passed"), rows)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# -- kernel-sim -------------------------------------------------------------


def _kernel_job(job):
    gpu, run_id, batch, label, ctas, splits, want_trace = job
    strategy = ExecutionStrategy.parse(label)
    if strategy.kind != "smaware":
        options = [None]
    elif ctas == "best":
        options = [2, 4] if gpu.max_ctas_per_sm >= 4 else [2]
    elif ctas == "auto":
        options = ["auto"]
    else:
        options = [ctas]
    split_rules = ("limited", "vanilla") if splits == "best" else (splits,)
    if strategy.kind != "smaware":
        split_rules = split_rules[:1]
    best = None
    for n, rule in itertools.product(options, split_rules):
        if n is None:
            config = None
        elif n == "auto":
            auto = plan_hybrid(batch, gpu, strategy)[0].config
            config = fused_config(gpu, auto.ctas_per_sm, prefill_splits=rule)
        else:
            config = fused_config(gpu, n, prefill_splits=rule)
        decomp, launches = plan_hybrid(batch, gpu, strategy, config)
        res = simulate(gpu, launches, strategy, trace=want_trace)
        if best is None or res.makespan < best[0].makespan:
            best = (res, decomp.config.ctas_per_sm, oracle_runtime(gpu, launches))
    res, n, oracle = best
    return csv_row(run_id, strategy, n, res, oracle), (res if want_trace else None)


def _kernel_points(cfg: dict, shape):
    ks = cfg["kernel_sim"]
    if ks["mode"] == "chunks":
        n_chunks = -(-ks["prompt_len"] // ks["chunk_size"])
        chunks = ks["chunks"] if ks["chunks"] is not None else range(n_chunks)
        for bs in ks["decode_batch_sizes"]:
            for c in chunks:
                end = min((c + 1) * ks["chunk_size"], ks["prompt_len"])
                pre = PrefillSpec(end - c * ks["chunk_size"], end)
                yield f"bs{bs}-c{c:03d}", HybridBatchSpec(pre, (ks["decode_context"],) * bs, shape)
    else:
        for ctx in ks["sweep_contexts"]:
            for chunk in ks["sweep_chunks"]:
                for bs in ks["sweep_batch_sizes"]:
                    if chunk > ctx:
                        continue
                    yield f"ctx{ctx}-cs{chunk}-bs{bs}", HybridBatchSpec(PrefillSpec(chunk, ctx), (ctx,) * bs, shape)


def cmd_kernel_sim(cfg: dict, out: Path, trace: bool) -> int:
    ks = cfg["kernel_sim"]
    gpu, shape = cfgmod.gpu_from(cfg), cfgmod.shape_from(cfg)
    points = list(_kernel_points(cfg, shape))
    jobs = [
        (gpu, run_id, batch, label, ks["ctas_per_sm"], ks["prefill_splits"], trace)
        for run_id, batch in points
        for label in ks["strategies"]
    ]
    results = _run_jobs(_kernel_job, jobs, cfg["threads"])
    rows = [r for r, _ in results]
    _write_csv(out, CSV_COLUMNS, rows)
    if trace:
        tpath = out.with_suffix(".trace.tsv")
        tpath.write_text("run_id\ttime\tsm\tevent\ttask\top\n")
        for (row, res), job in zip(results, jobs):
            write_trace(tpath, res, f"{row['run_id']}/{job[3]}")
    speedups = []
    if ks["mode"] == "sweep":
        speedups = _write_speedups(rows, out.with_name(out.stem + "_speedup.csv"))
    if cfg["report"]["figures"]:
        from fusesim import plotting

        if ks["mode"] == "chunks":
            plotting.plot_kernel_chunks(rows, out.with_suffix(".png"))
        elif speedups:
            plotting.plot_speedups(speedups, out.with_name(out.stem + "_speedup.png"))
    return EXIT_OK


def _write_speedups(rows: list[dict], path: Path) -> list[float]:
    """Serial / fused speedup per sweep point (needs serial and an smaware strategy)."""
    by_point: dict[str, dict] = {}
    for r in rows:
        slot = by_point.setdefault(r["run_id"], {})
        if r["strategy"] == "serial":
            slot["serial"] = float(r["makespan"])
        elif r["strategy"] == "smaware":
            slot["smaware"] = min(float(r["makespan"]), slot.get("smaware", math.inf))
    out_rows, speedups = [], []
    for run_id, v in by_point.items():
        if "serial" in v and "smaware" in v:
            s = v["serial"] / v["smaware"]
            speedups.append(s)
            out_rows.append({"run_id": run_id, "serial": f"{v['serial']:.6f}",
                             "smaware": f"{v['smaware']:.6f}", "speedup": f"{s:.6f}"})
    if out_rows:
        _write_csv(path, ("run_id", "serial", "smaware", "speedup"), out_rows)
    return speedups


# -- microbench -------------------------------------------------------------


def _micro_job(job):
    gpu, ci, array_len, label = job
    launches = make_microbench(ci, array_len, gpu)
    strategy = ExecutionStrategy.parse(label)
    res = simulate(gpu, launches, strategy)
    row = csv_row(f"ci{ci}", strategy, gpu.max_ctas_per_sm, res, oracle_runtime(gpu, launches))
    return {"compute_iters": ci, **row}


def cmd_microbench(cfg: dict, out: Path) -> int:
    mb = cfg["microbench"]
    gpu = cfgmod.gpu_from(cfg)
    jobs = [(gpu, ci, mb["array_len"], s) for ci in mb["compute_iters"] for s in mb["strategies"]]
    rows = _run_jobs(_micro_job, jobs, cfg["threads"])
    _write_csv(out, ("compute_iters",) + CSV_COLUMNS, rows)
    if cfg["report"]["figures"]:
        from fusesim import plotting

        plotting.plot_microbench(rows, out.with_suffix(".png"))
    return EXIT_OK


# -- serve-sim --------------------------------------------------------------


def read_trace_file(path: str) -> list[Request]:
    """CSV with columns arrival_time, prefill_tokens, decode_tokens."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            reqs = [
                Request(float(r["arrival_time"]), int(r["prefill_tokens"]), int(r["decode_tokens"]))
                for r in reader
            ]
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read trace {path}: {exc}") from None
    if not reqs:
        raise ConfigError(f"trace {path} holds no requests")
    return sorted(reqs, key=lambda r: r.arrival_time)


def cmd_serve_sim(cfg: dict, out: Path) -> int:
    sv = cfg["serve"]
    gpu, shape = cfgmod.gpu_from(cfg), cfgmod.shape_from(cfg)
    cost = calibrate_cost_model(
        gpu, shape, cfg["model"]["params_per_layer"], sv["attention_fraction"], sv["reference_context"],
        sv["reference_chunk"], sv["reference_decodes"], sv["decode_reference_cost"], sv["context_bucket"],
        sv["decode_bucket"],
    )
    policies = {
        "prefill_prioritized": PrefillPrioritized(sv["max_batch"]),
        "chunked_hybrid": ChunkedHybrid(sv["chunk_size"], sv["max_batch"], sv["token_budget"]),
    }
    if sv["trace_file"]:
        traces = [("trace", read_trace_file(sv["trace_file"]))]
    else:
        pre, dec = TokenDist(**sv["prefill"]), TokenDist(**sv["decode"])
        traces = [(q, generate_trace(q, sv["num_requests"], pre, dec, cfg["seed"])) for q in sv["qps"]]
    rows = []
    for qps, trace in traces:
        for name in sv["policies"]:
            for fused in sv["fused"]:
                m, _ = run_serving(trace, policies[name], cost, fused, shape,
                                   tuple(sv["stall_thresholds"]), keep_records=False)
                rows.append(metrics_row(qps, policies[name], fused, m))
    _write_csv(out, METRIC_COLUMNS, rows)
    if cfg["report"]["figures"]:
        from fusesim import plotting

        plotting.plot_serving(rows, out.with_suffix(".png"))
    return EXIT_OK


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusesim", description="Fused prefill/decode attention simulator.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("attn-verify", "check tiled and split-K attention against the dense reference"),
        ("kernel-sim", "simulate hybrid-batch attention under each execution strategy"),
        ("microbench", "compute-bound vs memory-bound fusion microbenchmark"),
        ("serve-sim", "request-level serving simulation"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML config file (defaults apply to missing keys)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output CSV path (default: <command>.csv)")
        p.add_argument("--trace", action="store_true", help="dump the dispatch event trace")
        p.add_argument("--strategies", help="comma-separated strategy list, e.g. serial,smaware:proportional")
        p.add_argument("--threads", type=int, help="worker processes for sweeps")
    return parser


def _apply_overrides(cfg: dict, args) -> dict:
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    if args.strategies:
        labels = [s.strip() for s in args.strategies.split(",") if s.strip()]
        for label in labels:
            ExecutionStrategy.parse(label)
        cfg["kernel_sim"]["strategies"] = labels
        cfg["microbench"]["strategies"] = labels
    cfgmod.validate(cfg)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(cfgmod.load_config(args.config), args)
    except (FuseSimError, ValueError) as exc:
        print(f"fusesim: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print("# resolved config")
    print(cfgmod.dump_config(cfg), end="")
    print("# end resolved config")
    out = Path(args.out or f"{args.command.replace('-', '_')}.csv")
    try:
        if args.command == "attn-verify":
            status = cmd_attn_verify(cfg, out)
        elif args.command == "kernel-sim":
            status = cmd_kernel_sim(cfg, out, args.trace)
        elif args.command == "microbench":
            status = cmd_microbench(cfg, out)
        else:
            status = cmd_serve_sim(cfg, out)
    except FuseSimError as exc:
        print(f"fusesim: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"fusesim: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"# wrote {out}")
    return status


if __name__ == "__main__":
    sys.exit(main())
