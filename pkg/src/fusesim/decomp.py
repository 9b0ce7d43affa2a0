"""Turn a hybrid batch into CTA-sized work units with abstract costs.

Cost units: one compute unit is one multiply-accumulate, one memory unit is one
tensor element moved between HBM and the SM.  The simulator only consumes
ratios of these, so element width is folded into the bandwidth figure.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

from fusesim.attention import ModelShape, split_ranges
from fusesim.errors import ConfigError, DomainError

if TYPE_CHECKING:
    from fusesim.gpusim import GpuSpec


class Op(enum.IntEnum):
    PREFILL = 0
    DECODE = 1

    def other(self) -> "Op":
        return Op.DECODE if self is Op.PREFILL else Op.PREFILL


@dataclass(frozen=True)
class PrefillSpec:
    chunk_size: int
    context_len: int
    position_offset: int | None = None

    def __post_init__(self):
        if self.chunk_size < 1:
            raise DomainError("chunk_size must be >= 1")
        if self.position_offset is None:
            object.__setattr__(self, "position_offset", self.context_len - self.chunk_size)
        if self.position_offset < 0 or self.position_offset + self.chunk_size > self.context_len:
            raise DomainError(
                f"chunk [{self.position_offset}, {self.position_offset + self.chunk_size}) "
                f"does not fit a {self.context_len}-token prompt"
            )

    @property
    def kv_len(self) -> int:
        """Keys visible to the last row of the chunk."""
        return self.position_offset + self.chunk_size


@dataclass(frozen=True)
class HybridBatchSpec:
    prefill: PrefillSpec | None
    decodes: tuple[int, ...]
    shape: ModelShape

    def __post_init__(self):
        object.__setattr__(self, "decodes", tuple(int(n) for n in self.decodes))
        if self.prefill is None and not self.decodes:
            raise DomainError("a batch needs a prefill chunk or at least one decode")
        if any(n < 1 for n in self.decodes):
            raise DomainError("decode context lengths must be >= 1")


@dataclass(frozen=True)
class TileConfig:
    prefill_tile_q: int = 128
    decode_tile_q: int = 16
    tile_kv: int = 64
    warps_per_cta: int = 4
    ctas_per_sm: int = 2
    shared_mem_per_cta: int = 0
    virtual_decode: bool = True
    # "limited" caps splits at two waves, "vanilla" uses the FlashDecoding
    # occupancy heuristic, "none" disables KV splitting of the prefill.
    prefill_splits: str = "limited"
    # unit of a "wave" when limiting splits: one CTA per SM, or every slot
    wave_unit: str = "sm"

    def __post_init__(self):
        if self.decode_tile_q not in (16, 64, 128):
            raise ConfigError(f"decode_tile_q must be 16, 64 or 128, got {self.decode_tile_q}")
        if self.ctas_per_sm not in (2, 4):
            raise ConfigError(f"ctas_per_sm must be 2 or 4, got {self.ctas_per_sm}")
        if self.warps_per_cta < 1 or self.prefill_tile_q < 1 or self.tile_kv < 1:
            raise ConfigError("tile sizes and warps_per_cta must be positive")
        if self.prefill_splits not in ("limited", "vanilla", "none"):
            raise ConfigError(f"unknown prefill_splits policy {self.prefill_splits!r}")
        if self.wave_unit not in ("sm", "slot"):
            raise ConfigError(f"unknown wave_unit {self.wave_unit!r}")


@dataclass(frozen=True, slots=True)
class CtaTask:
    op: Op
    task_id: int
    request_id: int
    kv_head: int
    q_tile: int
    kv_split: tuple[int, int]
    compute_work: float
    memory_work: float
    barrier_segments: int = 1
    is_virtual: bool = False
    warps: int = 4
    shared_mem: int = 0
    # index of the launch-level CTA this task belongs to; virtual decode tasks
    # of one parent share it and run together in one slot
    cta: int = -1

    def __post_init__(self):
        if self.compute_work < 0 or self.memory_work < 0:
            raise DomainError("work must be non-negative")
        if self.is_virtual and self.op is not Op.DECODE:
            raise DomainError("only decode tasks can be virtual")


@dataclass
class WorkDecomposition:
    prefill_tasks: list[CtaTask]
    decode_tasks: list[CtaTask]
    config: TileConfig
    prefill_splits: int = field(default=1)

    @property
    def tasks(self) -> list[CtaTask]:
        return self.prefill_tasks + self.decode_tasks

    def num_ctas(self, op: Op) -> int:
        tasks = self.prefill_tasks if op is Op.PREFILL else self.decode_tasks
        return len({t.cta for t in tasks})


def flash_attention_config(gpu: "GpuSpec") -> TileConfig:
    """Tiling of the stock, separately launched prefill and decode kernels."""
    return TileConfig(
        prefill_tile_q=128,
        decode_tile_q=64,
        tile_kv=64,
        warps_per_cta=4,
        ctas_per_sm=2,
        shared_mem_per_cta=gpu.shared_mem_per_sm // 2,
        virtual_decode=False,
        prefill_splits="vanilla",
    )


def fused_config(gpu: "GpuSpec", ctas_per_sm: int, **overrides) -> TileConfig:
    """Fused-kernel tiling for a given number of CTAs per SM.

    Shared memory is divided evenly between co-resident CTAs, so 4 CTAs/SM
    halve the prefill tile length relative to 2 CTAs/SM.  Warps per CTA stay
    at 4 in both cases.
    """
    base = dict(
        prefill_tile_q=128 if ctas_per_sm == 2 else 64,
        decode_tile_q=16,
        tile_kv=64,
        warps_per_cta=4,
        ctas_per_sm=ctas_per_sm,
        shared_mem_per_cta=gpu.shared_mem_per_sm // ctas_per_sm,
        virtual_decode=True,
        prefill_splits="limited",
    )
    base.update(overrides)
    return TileConfig(**base)


def _serial_estimate(tasks, gpu) -> float:
    if not tasks:
        return 0.0
    compute = sum(t.compute_work for t in tasks) / (gpu.num_sms * gpu.compute_rate_per_sm)
    memory = sum(t.memory_work for t in tasks) / gpu.mem_bandwidth_total
    return max(compute, memory)


def select_tile_config(batch: HybridBatchSpec, gpu: "GpuSpec") -> TileConfig:
    """Pick 2 CTAs/SM for prefill-dominant batches and 4 otherwise."""
    many = 4 if gpu.max_ctas_per_sm >= 4 else 2
    if batch.prefill is None:
        return fused_config(gpu, many)
    probe = fused_config(gpu, 2, prefill_splits="none", virtual_decode=False)
    prefill_cost = _serial_estimate(decompose_prefill(batch, probe, gpu), gpu)
    decode_cost = _serial_estimate(decompose_decode(batch, probe), gpu)
    return fused_config(gpu, 2 if prefill_cost >= decode_cost else many)


def decompose_decode(batch: HybridBatchSpec, config: TileConfig, first_cta: int = 0) -> list[CtaTask]:
    """One CTA per (request, kv head), optionally cut into per-warp virtual CTAs."""
    shape = batch.shape
    d, g = shape.head_dim, shape.group_size
    rows = math.ceil(g / config.decode_tile_q) * config.decode_tile_q  # zero-padded q tile
    parts = config.warps_per_cta if config.virtual_decode else 1
    smem = config.shared_mem_per_cta // parts
    warps = 1 if config.virtual_decode else config.warps_per_cta
    tasks: list[CtaTask] = []
    cta = first_cta
    for r, n in enumerate(batch.decodes):
        ranges = split_ranges(n, parts) if parts > 1 else [(0, n)]
        for h in range(shape.num_kv_heads):
            for lo, hi in ranges:
                length = hi - lo
                tasks.append(
                    CtaTask(
                        op=Op.DECODE,
                        task_id=len(tasks),
                        request_id=r,
                        kv_head=h,
                        q_tile=0,
                        kv_split=(lo, hi),
                        compute_work=2.0 * rows * length * d,
                        memory_work=2.0 * length * d,
                        barrier_segments=max(1, math.ceil(length / config.tile_kv)),
                        is_virtual=parts > 1,
                        warps=warps,
                        shared_mem=smem,
                        cta=cta,
                    )
                )
            cta += 1
    return tasks


def limit_prefill_splits(natural_parallelism: int, gpu: "GpuSpec", config: TileConfig | None = None) -> int:
    """Largest split count whose CTAs fit in two full waves (at least 1)."""
    if natural_parallelism < 1:
        raise DomainError("natural_parallelism must be >= 1")
    wave = gpu.num_sms
    if config is not None and config.wave_unit == "slot":
        wave *= config.ctas_per_sm
    return max(1, (2 * wave) // natural_parallelism)


def vanilla_prefill_splits(natural_parallelism: int, gpu: "GpuSpec", config: TileConfig, num_kv_blocks: int) -> int:
    """FlashDecoding-style occupancy heuristic, without any fused-kernel limit.

    Splits only when the unsplit grid covers less than 80% of the slots, then
    takes the smallest split count whose wave efficiency is within 85% of the
    best one (up to 128 splits).
    """
    slots = gpu.num_sms * config.ctas_per_sm
    if natural_parallelism >= 0.8 * slots:
        return 1
    max_splits = max(1, min(128, slots, num_kv_blocks))
    eff = []
    for s in range(1, max_splits + 1):
        waves = natural_parallelism * s / slots
        eff.append(waves / math.ceil(waves))
    best = max(eff)
    for s, e in enumerate(eff, start=1):
        if e >= 0.85 * best:
            return s
    return 1


def _visible_overlap(rows_pos: np.ndarray, lo: int, hi: int) -> int:
    """Sum over rows of |[0, pos] ∩ [lo, hi)|."""
    return int(np.clip(np.minimum(hi, rows_pos + 1) - lo, 0, None).sum())


def prefill_splits_for(batch: HybridBatchSpec, config: TileConfig, gpu: "GpuSpec") -> int:
    p = batch.prefill
    q_tiles = math.ceil(p.chunk_size / config.prefill_tile_q)
    natural = q_tiles * batch.shape.num_kv_heads
    # no split may be narrower than one kv block of the shortest q tile
    first_tile_keys = p.position_offset + min(config.prefill_tile_q, p.chunk_size)
    max_useful = max(1, math.ceil(first_tile_keys / config.tile_kv))
    if config.prefill_splits == "none":
        s = 1
    elif config.prefill_splits == "limited":
        s = limit_prefill_splits(natural, gpu, config)
    else:
        s = vanilla_prefill_splits(natural, gpu, config, math.ceil(p.kv_len / config.tile_kv))
    return min(s, max_useful)


def decompose_prefill(
    batch: HybridBatchSpec, config: TileConfig, gpu: "GpuSpec", splits: int | None = None
) -> list[CtaTask]:
    """q_tiles x kv_heads x kv_splits CTAs for the prefill chunk.

    Each q tile splits its own visible key range ``[0, tile_end)``; every split
    re-reads the q tile, so total KV traffic is independent of the split count.
    """
    p = batch.prefill
    if p is None:
        return []
    shape = batch.shape
    d, g = shape.head_dim, shape.group_size
    tq = config.prefill_tile_q
    q_tiles = math.ceil(p.chunk_size / tq)
    if splits is None:
        splits = prefill_splits_for(batch, config, gpu)
    tasks: list[CtaTask] = []
    for t in range(q_tiles):
        a = t * tq
        b = min(a + tq, p.chunk_size)
        pos = p.position_offset + np.arange(a, b)
        tile_end = p.position_offset + b
        ranges = split_ranges(tile_end, min(splits, tile_end))
        overlaps = [_visible_overlap(pos, lo, hi) for lo, hi in ranges]
        for h in range(shape.num_kv_heads):
            for s, (lo, hi) in enumerate(ranges):
                tasks.append(
                    CtaTask(
                        op=Op.PREFILL,
                        task_id=len(tasks),
                        request_id=0,
                        kv_head=h,
                        q_tile=t,
                        kv_split=(lo, hi),
                        compute_work=2.0 * g * overlaps[s] * d,
                        memory_work=2.0 * (hi - lo) * d + (b - a) * g * d,
                        barrier_segments=max(1, math.ceil((hi - lo) / config.tile_kv)),
                        warps=config.warps_per_cta,
                        shared_mem=config.shared_mem_per_cta,
                        cta=len(tasks),
                    )
                )
    return tasks


def decompose_hybrid(batch: HybridBatchSpec, gpu: "GpuSpec", config: TileConfig | None = None) -> WorkDecomposition:
    if config is None:
        config = select_tile_config(batch, gpu)
    splits = prefill_splits_for(batch, config, gpu) if batch.prefill is not None else 0
    prefill = decompose_prefill(batch, config, gpu, splits=splits) if splits else []
    decode = decompose_decode(batch, config)
    return WorkDecomposition(prefill, decode, config, prefill_splits=splits)


def with_config(batch: HybridBatchSpec, gpu: "GpuSpec", **changes) -> WorkDecomposition:
    """Decompose with the automatically selected config, adjusted by ``changes``."""
    return decompose_hybrid(batch, gpu, replace(select_tile_config(batch, gpu), **changes))
