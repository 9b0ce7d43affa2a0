"""Optional PNG figures drawn from the CSV rows the CLI writes."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"figure.dpi": 120, "axes.grid": True, "grid.alpha": 0.3, "font.size": 9})
    return plt


def _label(row: dict) -> str:
    return f"{row['strategy']}:{row['policy']}" if row.get("policy") else row["strategy"]


def plot_kernel_chunks(rows: list[dict], path: Path) -> Path:
    """Makespan per chunk index, one line per (strategy, decode batch)."""
    plt = _pyplot()
    series = defaultdict(list)
    for r in rows:
        batch, chunk = r["run_id"].split("-")
        series[(_label(r), batch)].append((int(chunk[1:]), float(r["makespan"])))
    fig, ax = plt.subplots(figsize=(7, 4))
    for (label, batch), pts in sorted(series.items()):
        xs, ys = zip(*sorted(pts))
        ax.plot(xs, ys, marker=".", label=f"{label} {batch}")
    ax.set_xlabel("chunk index")
    ax.set_ylabel("makespan (us)")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_speedups(speedups: list[float], path: Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(speedups, bins=20, color="tab:blue", edgecolor="white")
    ax.axvline(1.0, color="k", lw=0.8)
    ax.set_xlabel("serial / fused makespan")
    ax.set_ylabel("sweep points")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_microbench(rows: list[dict], path: Path) -> Path:
    """Makespan normalised to the oracle against compute iterations."""
    plt = _pyplot()
    series = defaultdict(list)
    for r in rows:
        series[_label(r)].append((int(r["compute_iters"]), float(r["makespan"]) / float(r["oracle"])))
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for label, pts in sorted(series.items()):
        xs, ys = zip(*sorted(pts))
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("compute iterations")
    ax.set_ylabel("makespan / oracle")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_serving(rows: list[dict], path: Path) -> Path:
    """Median and p99 TBT per configuration."""
    plt = _pyplot()
    labels = [f"{r['policy']}{'+fused' if int(r['fused']) else ''}\nqps={r['qps']}" for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    for ax, metric in zip(axes, ("ttft", "tbt")):
        p50 = [float(r[f"{metric}_p50"]) for r in rows]
        p99 = [float(r[f"{metric}_p99"]) for r in rows]
        x = range(len(rows))
        ax.bar([i - 0.2 for i in x], p50, width=0.4, label="p50")
        ax.bar([i + 0.2 for i in x], p99, width=0.4, label="p99")
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, fontsize=6)
        ax.set_yscale("log")
        ax.set_title(metric.upper())
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
