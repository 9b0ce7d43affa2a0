"""Request-level serving simulation: prefill-prioritized vs chunked hybrid batching.

Iteration costs come from the kernel simulator (attention) plus a linear term
for the rest of the model.  Time is expressed in calibrated units where a
reference decode-only iteration costs 50; stall thresholds use the same units.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from fusesim.attention import ModelShape
from fusesim.decomp import HybridBatchSpec, PrefillSpec
from fusesim.errors import ConfigError, DomainError
from fusesim.gpusim import FULL_SEARCH, GpuSpec, Serial, best_smaware, simulate_hybrid


@dataclass(frozen=True)
class Request:
    arrival_time: float
    prefill_tokens: int
    decode_tokens: int

    def __post_init__(self):
        if self.prefill_tokens < 1 or self.decode_tokens < 1:
            raise DomainError("a request needs at least one prefill and one decode token")


@dataclass(frozen=True)
class TokenDist:
    """Token-count distribution: ``fixed`` (value=mean), ``uniform`` [lo, hi] or ``lognormal``.

    ``lognormal`` is parameterised by its arithmetic mean and log-space sigma,
    then clipped to [lo, hi].
    """

    kind: str = "fixed"
    mean: float = 1024
    sigma: float = 0.5
    lo: int = 1
    hi: int = 1 << 20

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "lognormal"):
            raise ConfigError(f"unknown distribution {self.kind!r}")
        if self.lo < 1 or self.hi < self.lo:
            raise ConfigError("need 1 <= lo <= hi")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "fixed":
            x = np.full(n, self.mean)
        elif self.kind == "uniform":
            x = rng.uniform(self.lo, self.hi + 1, size=n)
        else:
            mu = math.log(self.mean) - self.sigma**2 / 2
            x = rng.lognormal(mu, self.sigma, size=n)
        return np.clip(np.floor(x), self.lo, self.hi).astype(np.int64)


@dataclass(frozen=True)
class PrefillPrioritized:
    """Run each queued prompt whole, before any decode iteration."""

    max_batch: int = 256
    name: str = "prefill_prioritized"


@dataclass(frozen=True)
class ChunkedHybrid:
    """One prefill chunk of the head-of-line prompt plus every active decode."""

    chunk_size: int = 1024
    max_batch: int = 256
    token_budget: int | None = None
    name: str = "chunked_hybrid"

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if self.token_budget is not None and self.token_budget < self.chunk_size:
            raise ConfigError("token_budget must be >= chunk_size")


@dataclass
class IterationRecord:
    t_start: float
    t_end: float
    batch: HybridBatchSpec
    prefill_progress: dict[int, int]
    decode_progress: dict[int, int]


@dataclass
class Metrics:
    ttft_p50: float
    ttft_p99: float
    tbt_p50: float
    tbt_p99: float
    latency_p50: float
    latency_p99: float
    stall_pct_at: dict[float, float]
    throughput: float


def percentile(samples, p: float) -> float:
    """Nearest-rank percentile (1-based index ``ceil(p/100 * n)`` of the sorted samples)."""
    data = sorted(samples)
    if not data:
        raise DomainError("percentile of an empty sample")
    if not 0 <= p <= 100:
        raise DomainError("p must lie in [0, 100]")
    rank = max(1, math.ceil(p / 100 * len(data)))
    return data[rank - 1]


def generate_trace(
    qps: float, n: int, prefill_dist: TokenDist, decode_dist: TokenDist, seed: int = 0
) -> list[Request]:
    """Poisson arrivals (``qps`` per 1000 time units) with sampled token counts.

    ``qps = inf`` puts every arrival at time zero (offline mode).
    """
    if qps <= 0:
        raise DomainError("qps must be positive")
    rng = np.random.default_rng(seed)
    if math.isinf(qps):
        arrivals = np.zeros(n)
    else:
        arrivals = np.cumsum(rng.exponential(1000.0 / qps, size=n))
    pre = prefill_dist.sample(rng, n)
    dec = decode_dist.sample(rng, n)
    return [Request(float(a), int(p), int(d)) for a, p, d in zip(arrivals, pre, dec)]


# --------------------------------------------------------------------------
# iteration cost


@dataclass
class CostModel:
    """Iteration cost = w_fixed + w_tok * tokens + attention, times ``scale``.

    Raw costs are in simulator microseconds; ``scale`` converts them to the
    calibrated serving units.  Attention is simulated on a grid: the mean
    decode context rounds to ``context_bucket`` tokens, the prefill chunk
    rounds up to ``chunk_bucket`` tokens, and decode counts between multiples
    of ``decode_bucket`` are interpolated linearly.
    """

    gpu: GpuSpec
    shape: ModelShape
    w_fixed: float
    w_tok: float
    scale: float = 1.0
    context_bucket: int = 512
    chunk_bucket: int = 128
    decode_bucket: int = 8
    _cache: dict = field(default_factory=dict, repr=False)

    def signature(self, batch: HybridBatchSpec) -> tuple:
        p = batch.prefill
        pre = None
        if p is not None:
            # tail chunks of a prompt round up to whole prefill tiles
            pre = (-(-p.chunk_size // self.chunk_bucket) * self.chunk_bucket, p.position_offset)
        if batch.decodes:
            mean_ctx = sum(batch.decodes) / len(batch.decodes)
            ctx = max(1, int(round(mean_ctx / self.context_bucket))) * self.context_bucket
        else:
            ctx = 0
        return pre, len(batch.decodes), ctx

    def _grid(self, pre, n_dec: int, ctx: int, fused: bool) -> float:
        if pre is None and n_dec == 0:
            return 0.0
        key = (pre, n_dec, ctx, fused and pre is not None and n_dec > 0)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        rep = HybridBatchSpec(
            PrefillSpec(pre[0], pre[0] + pre[1], pre[1]) if pre else None,
            tuple([ctx] * n_dec),
            self.shape,
        )
        if key[3]:
            cost = best_smaware(rep, self.gpu, **FULL_SEARCH).makespan
        else:
            cost = simulate_hybrid(rep, self.gpu, Serial).makespan
        self._cache[key] = cost
        return cost

    def attention_raw(self, batch: HybridBatchSpec, fused: bool) -> float:
        """Attention makespan, linear in the decode count between grid points."""
        pre, n_dec, ctx = self.signature(batch)
        lo = n_dec - n_dec % self.decode_bucket
        if lo == n_dec:
            return self._grid(pre, n_dec, ctx, fused)
        w = (n_dec - lo) / self.decode_bucket
        hi_cost = self._grid(pre, lo + self.decode_bucket, ctx, fused)
        return (1 - w) * self._grid(pre, lo, ctx, fused) + w * hi_cost

    def linear_raw(self, batch: HybridBatchSpec) -> float:
        tokens = len(batch.decodes) + (batch.prefill.chunk_size if batch.prefill else 0)
        return self.w_fixed + self.w_tok * tokens

    def __call__(self, batch: HybridBatchSpec, fused: bool) -> float:
        return self.scale * (self.linear_raw(batch) + self.attention_raw(batch, fused))

    def attention_fraction(self, batch: HybridBatchSpec, fused: bool = False) -> float:
        a = self.attention_raw(batch, fused)
        return a / (a + self.linear_raw(batch))


def iteration_cost(batch: HybridBatchSpec, fused: bool, model: CostModel) -> float:
    return model(batch, fused)


def calibrate_cost_model(
    gpu: GpuSpec,
    shape: ModelShape,
    params_per_layer: float,
    attention_fraction: float = 0.6,
    reference_context: int = 16384,
    reference_chunk: int = 1024,
    reference_decodes: int = 32,
    decode_reference_cost: float = 50.0,
    context_bucket: int = 512,
    decode_bucket: int = 8,
) -> CostModel:
    """Derive linear weights and the time scale from the hardware and model size.

    ``w_fixed`` is the time to stream one layer's weights.  ``w_tok`` is then
    set so attention makes up ``attention_fraction`` of the reference hybrid
    batch (one chunk at the reference context plus ``reference_decodes``
    decodes of the same context).  The scale makes the matching decode-only
    iteration cost ``decode_reference_cost``.
    """
    if not 0 < attention_fraction < 1:
        raise ConfigError("attention_fraction must lie in (0, 1)")
    model = CostModel(
        gpu, shape, params_per_layer / gpu.mem_bandwidth_total, 0.0, 1.0, context_bucket, decode_bucket=decode_bucket
    )
    hybrid = HybridBatchSpec(
        PrefillSpec(reference_chunk, reference_context),
        tuple([reference_context] * reference_decodes),
        shape,
    )
    attn = model.attention_raw(hybrid, fused=False)
    linear = attn * (1 - attention_fraction) / attention_fraction
    tokens = reference_chunk + reference_decodes
    model.w_tok = max(0.0, (linear - model.w_fixed) / tokens)
    if model.w_tok == 0.0:
        model.w_fixed = linear
    decode_only = HybridBatchSpec(None, tuple([reference_context] * reference_decodes), shape)
    model.scale = decode_reference_cost / (model.linear_raw(decode_only) + model.attention_raw(decode_only, False))
    return model


# --------------------------------------------------------------------------
# request-level loop


@dataclass
class _Live:
    idx: int
    req: Request
    prefilled: int = 0
    decoded: int = 0
    token_times: list[float] = field(default_factory=list)


def _pick_prefill_prioritized(waiting: deque, active: list, policy) -> tuple:
    if waiting:
        live = waiting[0]
        return live, live.req.prefill_tokens - live.prefilled, []
    return None, 0, active[: policy.max_batch]


def _pick_hybrid(waiting: deque, active: list, policy: ChunkedHybrid) -> tuple:
    decodes = active[: policy.max_batch]
    if not waiting or len(active) >= policy.max_batch:
        return None, 0, decodes
    budget = policy.chunk_size
    if policy.token_budget is not None:
        budget = min(budget, policy.token_budget - len(decodes))
    if budget < 1:
        return None, 0, decodes
    live = waiting[0]
    return live, min(budget, live.req.prefill_tokens - live.prefilled), decodes


def run_serving(
    trace: list[Request],
    policy,
    iteration_cost_fn: Callable[[HybridBatchSpec, bool], float],
    fused: bool,
    shape: ModelShape,
    stall_thresholds: tuple[float, ...] = (200.0, 500.0),
    keep_records: bool = True,
) -> tuple[Metrics, list[IterationRecord]]:
    """Replay ``trace`` under ``policy``; returns metrics and per-iteration records.

    A request's last prefill chunk produces its first output token; each of
    its ``decode_tokens`` decode iterations then produces one more.
    """
    if not trace:
        raise DomainError("empty trace")
    if any(b.arrival_time < a.arrival_time for a, b in zip(trace, trace[1:])):
        raise DomainError("trace must be sorted by arrival time")
    if isinstance(policy, PrefillPrioritized):
        pick = _pick_prefill_prioritized
    elif isinstance(policy, ChunkedHybrid):
        pick = _pick_hybrid
    else:
        raise ConfigError(f"unknown policy {policy!r}")

    lives = [_Live(i, r) for i, r in enumerate(trace)]
    pending = deque(lives)
    waiting: deque[_Live] = deque()
    active: list[_Live] = []
    finish: dict[int, float] = {}
    records: list[IterationRecord] = []
    t = 0.0
    while pending or waiting or active:
        while pending and pending[0].req.arrival_time <= t:
            waiting.append(pending.popleft())
        if not waiting and not active:
            t = max(t, pending[0].req.arrival_time)
            continue
        pre_live, chunk, decodes = pick(waiting, active, policy)
        prefill = None
        if pre_live is not None:
            prefill = PrefillSpec(chunk, pre_live.prefilled + chunk, pre_live.prefilled)
        batch = HybridBatchSpec(
            prefill, tuple(d.req.prefill_tokens + d.decoded for d in decodes), shape
        )
        cost = iteration_cost_fn(batch, fused)
        t_end = t + cost
        if keep_records:
            records.append(
                IterationRecord(
                    t, t_end, batch,
                    {pre_live.idx: chunk} if pre_live else {},
                    {d.idx: 1 for d in decodes},
                )
            )
        for d in decodes:
            d.decoded += 1
            d.token_times.append(t_end)
        still = []
        for d in active:
            if d.decoded >= d.req.decode_tokens:
                finish[d.idx] = t_end
            else:
                still.append(d)
        active = still
        if pre_live is not None:
            pre_live.prefilled += chunk
            if pre_live.prefilled == pre_live.req.prefill_tokens:
                waiting.popleft()
                pre_live.token_times.append(t_end)
                active.append(pre_live)
        t = t_end

    return _metrics(lives, finish, stall_thresholds), records


def _metrics(lives: list[_Live], finish: dict[int, float], thresholds) -> Metrics:
    ttft = [lv.token_times[0] - lv.req.arrival_time for lv in lives]
    lat = [finish[lv.idx] - lv.req.arrival_time for lv in lives]
    gaps = [np.diff(lv.token_times) for lv in lives]
    tbt = np.concatenate(gaps) if gaps else np.zeros(0)
    worst = [g.max() if g.size else 0.0 for g in gaps]
    span = max(finish.values()) - min(lv.req.arrival_time for lv in lives)
    return Metrics(
        ttft_p50=percentile(ttft, 50),
        ttft_p99=percentile(ttft, 99),
        tbt_p50=percentile(tbt, 50) if tbt.size else 0.0,
        tbt_p99=percentile(tbt, 99) if tbt.size else 0.0,
        latency_p50=percentile(lat, 50),
        latency_p99=percentile(lat, 99),
        stall_pct_at={th: sum(w > th for w in worst) / len(lives) for th in thresholds},
        throughput=1000.0 * len(lives) / span if span > 0 else math.inf,
    )


METRIC_COLUMNS = (
    "qps", "policy", "fused", "chunk_size", "ttft_p50", "ttft_p99", "tbt_p50", "tbt_p99",
    "lat_p50", "lat_p99", "stall200", "stall500", "throughput",
)


def metrics_row(qps: float, policy, fused: bool, m: Metrics) -> dict:
    return {
        "qps": qps,
        "policy": policy.name,
        "fused": int(fused),
        "chunk_size": getattr(policy, "chunk_size", ""),
        "ttft_p50": f"{m.ttft_p50:.6f}",
        "ttft_p99": f"{m.ttft_p99:.6f}",
        "tbt_p50": f"{m.tbt_p50:.6f}",
        "tbt_p99": f"{m.tbt_p99:.6f}",
        "lat_p50": f"{m.latency_p50:.6f}",
        "lat_p99": f"{m.latency_p99:.6f}",
        "stall200": f"{m.stall_pct_at.get(200.0, float('nan')):.6f}",
        "stall500": f"{m.stall_pct_at.get(500.0, float('nan')):.6f}",
        "throughput": f"{m.throughput:.6f}",
    }
