"""Event-driven fluid simulation of CTAs sharing SM compute and HBM bandwidth.

Each resident task drains its compute work at an equal share of its SM's
compute rate and its memory work at an equal share of the GPU's total
bandwidth (processor sharing, with optional per-task caps that depend on how
many warps the task has).  A task finishes when both kinds of work are gone;
the freed slot is then refilled according to the execution strategy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fusesim.decomp import (
    CtaTask,
    HybridBatchSpec,
    Op,
    TileConfig,
    WorkDecomposition,
    decompose_hybrid,
    flash_attention_config,
    select_tile_config,
)
from fusesim.errors import ConfigError, DomainError

STRATEGY_KINDS = ("serial", "streams", "cta", "warp", "intra", "smaware")
POLICIES = ("fifty_fifty", "proportional")


@dataclass(frozen=True)
class GpuSpec:
    """Simulated machine.  Rates are per microsecond in package cost units."""

    num_sms: int = 108
    compute_rate_per_sm: float = 1.0
    mem_bandwidth_total: float = 108.0
    max_ctas_per_sm: int = 2
    shared_mem_per_sm: int = 164 * 1024
    # A task with w warps may use at most min(1, w / n) of its SM's compute
    # and w / n of its SM's fair slice of bandwidth.  None disables the cap.
    compute_warps_to_saturate: int | None = None
    memory_warps_to_saturate: int | None = None

    def __post_init__(self):
        if min(self.num_sms, self.max_ctas_per_sm, self.shared_mem_per_sm) < 1:
            raise ConfigError("num_sms, max_ctas_per_sm and shared_mem_per_sm must be positive")
        if self.compute_rate_per_sm <= 0 or self.mem_bandwidth_total <= 0:
            raise ConfigError("rates must be positive")

    @classmethod
    def a100(cls, max_ctas_per_sm: int = 4, **kw) -> "GpuSpec":
        """A100-like ratios: 156 TMAC/s of tensor compute and 1 T elements/s of HBM
        (fp16), expressed per microsecond."""
        params = dict(
            num_sms=108,
            compute_rate_per_sm=156e6 / 108,
            mem_bandwidth_total=1e6,
            max_ctas_per_sm=max_ctas_per_sm,
            shared_mem_per_sm=164 * 1024,
            compute_warps_to_saturate=4,
            memory_warps_to_saturate=8,
        )
        params.update(kw)
        return cls(**params)

    @property
    def compute_total(self) -> float:
        return self.num_sms * self.compute_rate_per_sm


@dataclass
class KernelLaunch:
    tasks: list[CtaTask]
    shared_mem_per_cta: int = 0
    stream_id: int = 0
    name: str = ""


@dataclass(frozen=True)
class ExecutionStrategy:
    kind: str
    segments: int | None = None
    policy: str = "fifty_fifty"

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy {self.kind!r}")
        if self.segments is not None and self.segments < 1:
            raise ConfigError("segments must be >= 1")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}")

    @property
    def label(self) -> str:
        if self.kind == "smaware":
            return f"smaware:{self.policy}"
        if self.kind == "intra" and self.segments is not None:
            return f"intra:{self.segments}"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "ExecutionStrategy":
        """``serial``, ``streams``, ``cta``, ``warp``, ``intra[:N]``, ``smaware[:policy]``."""
        kind, _, arg = text.strip().lower().partition(":")
        if kind == "intra":
            return cls("intra", segments=int(arg) if arg else None)
        if kind == "smaware":
            return cls("smaware", policy=arg or "fifty_fifty")
        if arg:
            raise ConfigError(f"strategy {kind!r} takes no argument")
        return cls(kind)


Serial = ExecutionStrategy("serial")
StreamsParallel = ExecutionStrategy("streams")
CtaParallel = ExecutionStrategy("cta")
WarpParallel = ExecutionStrategy("warp")


def IntraThread(segments: int | None = None) -> ExecutionStrategy:
    return ExecutionStrategy("intra", segments=segments)


def SmAware(policy: str = "fifty_fifty") -> ExecutionStrategy:
    return ExecutionStrategy("smaware", policy=policy)


@dataclass
class SimResult:
    makespan: float
    per_op_finish: dict[Op, float]
    compute_utilization: float
    bandwidth_utilization: float
    waves_used: int
    quantized_ctas: int
    per_sm_colocation_trace: list[list[tuple[float, int, int]]]
    assignments: list[list[tuple[float, Op, int, int, bool]]]
    drained_compute: float = 0.0
    drained_memory: float = 0.0
    events: list[tuple[float, int, str, int, str]] = field(default_factory=list)


def oracle_runtime(gpu: GpuSpec, launches: list[KernelLaunch]) -> float:
    """Perfect-overlap bound: the busier of the two resources at full rate."""
    tasks = [t for launch in launches for t in launch.tasks]
    if not tasks:
        raise DomainError("no tasks")
    compute = sum(t.compute_work for t in tasks) / gpu.compute_total
    memory = sum(t.memory_work for t in tasks) / gpu.mem_bandwidth_total
    return max(compute, memory)


# --------------------------------------------------------------------------
# SM-aware CTA scheduling


@dataclass
class SchedulerState:
    num_sms: int
    prefill_ctas: int
    decode_ctas: int
    prefill_ratio: int = 1
    decode_ratio: int = 1
    sm_ctr: list[int] = field(default_factory=list)
    cta_assign: list[int] = field(default_factory=lambda: [0, 0])

    def __post_init__(self):
        if not self.sm_ctr:
            self.sm_ctr = [0] * self.num_sms
        self._pattern = ticket_pattern(self.prefill_ratio, self.decode_ratio)

    def total(self, op: Op) -> int:
        return self.prefill_ctas if op is Op.PREFILL else self.decode_ctas

    def remaining(self, op: Op) -> int:
        return self.total(op) - self.cta_assign[op]


def ticket_pattern(prefill_ratio: int, decode_ratio: int) -> list[Op]:
    """Op for each ticket in one cycle: prefill for tickets below ``prefill_ratio``."""
    if prefill_ratio < 1 or decode_ratio < 1:
        raise DomainError("ratios must be >= 1")
    return [Op.PREFILL] * prefill_ratio + [Op.DECODE] * decode_ratio


def proportional_ratio(prefill_ctas: int, decode_ctas: int) -> tuple[int, int]:
    """prefill:decode CTA counts reduced by their gcd (1:1 if either is empty)."""
    if prefill_ctas < 1 or decode_ctas < 1:
        return 1, 1
    g = math.gcd(prefill_ctas, decode_ctas)
    return prefill_ctas // g, decode_ctas // g


def sm_aware_assign(sm_id: int, state: SchedulerState) -> tuple[Op, int] | None:
    """Bind the next CTA landing on ``sm_id`` to an op and an op-local CTA id."""
    if state.remaining(Op.PREFILL) <= 0 and state.remaining(Op.DECODE) <= 0:
        return None
    ticket = state.sm_ctr[sm_id] % len(state._pattern)
    state.sm_ctr[sm_id] += 1
    op = state._pattern[ticket]
    if state.remaining(op) <= 0:
        op = op.other()
    cta_id = state.cta_assign[op]
    state.cta_assign[op] += 1
    return op, cta_id


# --------------------------------------------------------------------------
# simulation internals


class _Part:
    __slots__ = ("task", "op", "slices", "k", "idx", "warps", "unit_uid")

    def __init__(self, task, slices, warps):
        self.unit_uid = -1
        self.task = task
        self.op = task.op
        self.slices = slices
        self.k = 0
        self.idx = -1
        self.warps = warps


class _Unit:
    __slots__ = ("parts", "sync", "sm", "smem", "uid", "ops")

    def __init__(self, parts, sync, smem, uid):
        self.parts = parts
        self.sync = sync
        self.smem = smem
        self.uid = uid
        self.sm = -1
        self.ops = tuple(sorted({p.op for p in parts}))


def _slices(task: CtaTask, n: int) -> list[tuple[float, float]]:
    return [(task.compute_work / n, task.memory_work / n)] * n


def _group_ctas(tasks: list[CtaTask]) -> list[list[CtaTask]]:
    groups: dict[int, list[CtaTask]] = {}
    for t in tasks:
        groups.setdefault(t.cta if t.cta >= 0 else -1 - t.task_id, []).append(t)
    return list(groups.values())


def _plain_unit(tasks, smem, uid):
    return _Unit([_Part(t, _slices(t, 1), t.warps) for t in tasks], False, smem, uid)


def _fill_rates(rate, mask, cap, group, capacity, ngroups):
    """Max-min fair split of each group's capacity among ``mask`` members."""
    sel = np.flatnonzero(mask)
    if sel.size == 0:
        return
    g = group[sel]
    c = cap[sel]
    left = np.full(ngroups, capacity, dtype=float) if np.isscalar(capacity) else capacity.copy()
    free = np.ones(sel.size, dtype=bool)
    out = np.zeros(sel.size)
    while True:
        n = np.bincount(g[free], minlength=ngroups)
        share = left / np.maximum(n, 1)
        s = share[g]
        capped = free & (c < s)
        if not capped.any():
            out[free] = s[free]
            break
        out[capped] = c[capped]
        left -= np.bincount(g[capped], weights=c[capped], minlength=ngroups)
        free &= ~capped
    rate[sel] = out


class _Engine:
    def __init__(self, gpu: GpuSpec, units_total: int, record_events: bool, rng=None):
        self.gpu = gpu
        self.t = 0.0
        self.rng = rng
        self.record = record_events
        self.events: list = []
        self.sm_units = [0] * gpu.num_sms
        self.sm_smem = [0] * gpu.num_sms
        self.sm_mix = [[0, 0] for _ in range(gpu.num_sms)]
        self.coloc = [[(0.0, 0, 0)] for _ in range(gpu.num_sms)]
        self.assignments: list[list] = [[] for _ in range(gpu.num_sms)]
        n = max(units_total, 1) * 8
        self.c = np.zeros(n)
        self.m = np.zeros(n)
        self.c_cap = np.full(n, np.inf)
        self.m_cap = np.full(n, np.inf)
        self.sm = np.zeros(n, dtype=np.int64)
        self.live = np.zeros(n, dtype=bool)
        self.parts: list[_Part | None] = [None] * n
        self.n_parts = 0
        self.units: dict[int, _Unit] = {}
        self.finish = {Op.PREFILL: 0.0, Op.DECODE: 0.0}
        self.drained_c = 0.0
        self.drained_m = 0.0
        self.max_units = gpu.max_ctas_per_sm

    def _grow(self):
        n = len(self.c) * 2
        for name in ("c", "m"):
            arr = np.zeros(n)
            arr[: len(getattr(self, name))] = getattr(self, name)
            setattr(self, name, arr)
        for name in ("c_cap", "m_cap"):
            arr = np.full(n, np.inf)
            arr[: len(getattr(self, name))] = getattr(self, name)
            setattr(self, name, arr)
        sm = np.zeros(n, dtype=np.int64)
        sm[: len(self.sm)] = self.sm
        self.sm = sm
        live = np.zeros(n, dtype=bool)
        live[: len(self.live)] = self.live
        self.live = live
        self.parts.extend([None] * (n - len(self.parts)))

    # -- slots ---------------------------------------------------------
    def capacity(self, smem: int) -> int:
        if smem > self.gpu.shared_mem_per_sm:
            raise ConfigError(
                f"CTA needs {smem} B of shared memory, SM has {self.gpu.shared_mem_per_sm} B"
            )
        by_smem = self.gpu.shared_mem_per_sm // smem if smem > 0 else self.max_units
        return max(1, min(self.max_units, by_smem))

    def pick_sm(self, slots_per_sm: int) -> int | None:
        """Least-loaded SM with a free slot, ties to the lowest id."""
        loads = self.sm_units
        best = min(loads)
        if best >= slots_per_sm:
            return None
        if self.rng is None:
            return loads.index(best)
        cands = [i for i, v in enumerate(loads) if v == best]
        return int(self.rng.choice(cands))

    def place(self, unit: _Unit, sm_id: int, pools_nonempty: bool = False):
        unit.sm = sm_id
        self.units[unit.uid] = unit
        self.sm_units[sm_id] += 1
        self.sm_smem[sm_id] += unit.smem
        for op in unit.ops:
            self.sm_mix[sm_id][op] += 1
        mix = self.sm_mix[sm_id]
        self.coloc[sm_id].append((self.t, mix[0], mix[1]))
        self.assignments[sm_id].append((self.t, unit.ops[0], mix[0], mix[1], pools_nonempty))
        for p in unit.parts:
            self._start_slice(p, sm_id)
            if self.record:
                self.events.append((self.t, sm_id, "start", p.task.task_id, p.op.name.lower()))
        self._settle(unit)

    def _start_slice(self, p: _Part, sm_id: int):
        if p.k >= len(p.slices):
            return
        if p.idx < 0:
            if self.n_parts >= len(self.c):
                self._grow()
            p.idx = self.n_parts
            self.n_parts += 1
            self.parts[p.idx] = p
            gpu = self.gpu
            if gpu.compute_warps_to_saturate:
                self.c_cap[p.idx] = gpu.compute_rate_per_sm * min(1.0, p.warps / gpu.compute_warps_to_saturate)
            if gpu.memory_warps_to_saturate:
                per_sm = gpu.mem_bandwidth_total / gpu.num_sms
                self.m_cap[p.idx] = per_sm * p.warps / gpu.memory_warps_to_saturate
        c, m = p.slices[p.k]
        self.c[p.idx] = c
        self.m[p.idx] = m
        self.sm[p.idx] = sm_id
        self.live[p.idx] = True

    def _part_idle(self, p: _Part) -> bool:
        return p.k >= len(p.slices) or (self.c[p.idx] <= 0 and self.m[p.idx] <= 0)

    def _settle(self, unit: _Unit):
        """Advance slices of parts whose current slice is drained."""
        while True:
            if unit.sync:
                if not all(self._part_idle(p) for p in unit.parts):
                    return
                moved = False
                for p in unit.parts:
                    if p.k < len(p.slices):
                        p.k += 1
                        if p.k < len(p.slices):
                            self._start_slice(p, unit.sm)
                            moved = True
                        else:
                            self._part_done(p, unit.sm)
                if not moved:
                    break
            else:
                for p in unit.parts:
                    if p.k < len(p.slices) and self._part_idle(p):
                        p.k += 1
                        self._part_done(p, unit.sm)
                if any(p.k < len(p.slices) for p in unit.parts):
                    return
                break
        self._complete(unit)

    def _part_done(self, p: _Part, sm_id: int):
        self.live[p.idx] = False
        self.finish[p.op] = max(self.finish[p.op], self.t)
        if self.record:
            self.events.append((self.t, sm_id, "finish", p.task.task_id, p.op.name.lower()))

    def _complete(self, unit: _Unit):
        """Release the unit's slot once every part has finished."""
        sm_id = unit.sm
        del self.units[unit.uid]
        self.sm_units[sm_id] -= 1
        self.sm_smem[sm_id] -= unit.smem
        for op in unit.ops:
            self.sm_mix[sm_id][op] -= 1
        mix = self.sm_mix[sm_id]
        self.coloc[sm_id].append((self.t, mix[0], mix[1]))

    # -- fluid step ----------------------------------------------------
    def step(self) -> bool:
        n = self.n_parts
        live = self.live[:n]
        if not live.any():
            return False
        c, m = self.c[:n], self.m[:n]
        want_c = live & (c > 0)
        want_m = live & (m > 0)
        rc = np.zeros(n)
        rm = np.zeros(n)
        gpu = self.gpu
        _fill_rates(rc, want_c, self.c_cap[:n], self.sm[:n], gpu.compute_rate_per_sm, gpu.num_sms)
        _fill_rates(rm, want_m, self.m_cap[:n], np.zeros(n, dtype=np.int64), gpu.mem_bandwidth_total, 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = np.where(want_c, c / rc, np.inf)
            tm = np.where(want_m, m / rm, np.inf)
        dt = min(tc.min(), tm.min())
        if not math.isfinite(dt):
            raise RuntimeError("simulation stalled: live work with zero rate")
        dc = rc * dt
        dm = rm * dt
        self.drained_c += float(np.minimum(dc, c).sum())
        self.drained_m += float(np.minimum(dm, m).sum())
        c -= dc
        m -= dm
        # snap the finishing resource(s) and rounding residue to exactly zero
        c[(tc <= dt) | (c <= 1e-12 * np.maximum(dc, 1.0))] = 0.0
        m[(tm <= dt) | (m <= 1e-12 * np.maximum(dm, 1.0))] = 0.0
        np.maximum(c, 0.0, out=c)
        np.maximum(m, 0.0, out=m)
        self.t += dt
        done_units = {self.parts[i].unit_uid for i in np.flatnonzero(live & (c <= 0) & (m <= 0))}
        for uid in sorted(done_units):
            unit = self.units.get(uid)
            if unit is not None:
                self._settle(unit)
        return True


def _units_for(launch: KernelLaunch, smem: int, start_uid: int) -> list[_Unit]:
    return [_plain_unit(g, smem, start_uid + i) for i, g in enumerate(_group_ctas(launch.tasks))]


def _tag(units):
    for u in units:
        for p in u.parts:
            p.unit_uid = u.uid
    return units


class _Queue:
    def __init__(self, units):
        self.units = list(units)
        self.pos = 0

    def empty(self):
        return self.pos >= len(self.units)

    def pop(self, sm_id=None):
        if self.empty():
            return None
        u = self.units[self.pos]
        self.pos += 1
        return u


class _RoundRobin:
    def __init__(self, queues):
        self.queues = queues
        self.turn = 0

    def empty(self):
        return all(q.empty() for q in self.queues)

    def pop(self, sm_id=None):
        for _ in range(len(self.queues)):
            q = self.queues[self.turn % len(self.queues)]
            self.turn += 1
            if not q.empty():
                return q.pop()
        return None


class _SmAwareSource:
    def __init__(self, state: SchedulerState, units_by_op):
        self.state = state
        self.units_by_op = units_by_op

    def empty(self):
        return self.state.remaining(Op.PREFILL) <= 0 and self.state.remaining(Op.DECODE) <= 0

    def both_pools(self):
        return self.state.remaining(Op.PREFILL) > 0 and self.state.remaining(Op.DECODE) > 0

    def pop(self, sm_id):
        got = sm_aware_assign(sm_id, self.state)
        if got is None:
            return None
        op, cta_id = got
        return self.units_by_op[op][cta_id]


def _fused_units(a: list[list[CtaTask]], b: list[list[CtaTask]], kind: str, segments, smem) -> list[_Unit]:
    units = []
    for i in range(max(len(a), len(b))):
        tasks = (a[i] if i < len(a) else []) + (b[i] if i < len(b) else [])
        if kind == "warp":
            parts = [_Part(t, _slices(t, 1), max(1, t.warps // 2)) for t in tasks]
            units.append(_Unit(parts, False, smem, i))
        else:
            parts = [_Part(t, _slices(t, segments or t.barrier_segments), t.warps) for t in tasks]
            units.append(_Unit(parts, True, smem, i))
    return units


def _waves(n_units: int, slots_total: int) -> tuple[int, int]:
    return math.ceil(n_units / slots_total), n_units % slots_total


def _result(eng: _Engine, gpu: GpuSpec, launches, waves, quantized) -> SimResult:
    makespan = eng.t
    tc = sum(t.compute_work for l in launches for t in l.tasks)
    tm = sum(t.memory_work for l in launches for t in l.tasks)
    return SimResult(
        makespan=makespan,
        per_op_finish=dict(eng.finish),
        compute_utilization=tc / (gpu.compute_total * makespan) if makespan > 0 else 0.0,
        bandwidth_utilization=tm / (gpu.mem_bandwidth_total * makespan) if makespan > 0 else 0.0,
        waves_used=waves,
        quantized_ctas=quantized,
        per_sm_colocation_trace=eng.coloc,
        assignments=eng.assignments,
        drained_compute=eng.drained_c,
        drained_memory=eng.drained_m,
        events=eng.events,
    )


def _drive(eng: _Engine, source, slots: int, pools_fn=None):
    while True:
        while True:
            sm_id = eng.pick_sm(slots)
            if sm_id is None:
                break
            pools = pools_fn() if pools_fn else False
            unit = source.pop(sm_id)
            if unit is None:
                break
            _tag([unit])
            eng.place(unit, sm_id, pools)
        if not eng.step() and source.empty():
            break


def simulate(
    gpu: GpuSpec,
    launches: list[KernelLaunch],
    strategy: ExecutionStrategy,
    seed: int = 0,
    *,
    randomize_dispatch: bool = False,
    trace: bool = False,
) -> SimResult:
    """Simulate ``launches`` under ``strategy`` and return timing and traces.

    Fused strategies (warp, intra, smaware) expect the prefill launch first
    and the decode launch second.
    """
    launches = [l for l in launches if l.tasks]
    if not launches:
        raise DomainError("no tasks to simulate")
    rng = np.random.default_rng(seed) if randomize_dispatch else None
    kind = strategy.kind

    if kind == "serial":
        parts = [simulate(gpu, [l], CtaParallel, seed, randomize_dispatch=randomize_dispatch, trace=trace) for l in launches]
        offset = 0.0
        finish = {Op.PREFILL: 0.0, Op.DECODE: 0.0}
        events, coloc, assigns = [], [[] for _ in range(gpu.num_sms)], [[] for _ in range(gpu.num_sms)]
        for r in parts:
            for op, f in r.per_op_finish.items():
                if f > 0:
                    finish[op] = offset + f
            events += [(offset + e[0],) + e[1:] for e in r.events]
            for i in range(gpu.num_sms):
                coloc[i] += [(offset + x[0],) + x[1:] for x in r.per_sm_colocation_trace[i]]
                assigns[i] += [(offset + x[0],) + x[1:] for x in r.assignments[i]]
            offset += r.makespan
        makespan = sum(r.makespan for r in parts)
        tc = sum(t.compute_work for l in launches for t in l.tasks)
        tm = sum(t.memory_work for l in launches for t in l.tasks)
        return SimResult(
            makespan=makespan,
            per_op_finish=finish,
            compute_utilization=tc / (gpu.compute_total * makespan),
            bandwidth_utilization=tm / (gpu.mem_bandwidth_total * makespan),
            waves_used=sum(r.waves_used for r in parts),
            quantized_ctas=sum(r.quantized_ctas for r in parts),
            per_sm_colocation_trace=coloc,
            assignments=assigns,
            drained_compute=sum(r.drained_compute for r in parts),
            drained_memory=sum(r.drained_memory for r in parts),
            events=events,
        )

    if kind in ("streams", "cta"):
        probe = _Engine(gpu, 1, False)
        slots = min(probe.capacity(l.shared_mem_per_cta) for l in launches)
        uid = 0
        queues = []
        for l in launches:
            units = _units_for(l, l.shared_mem_per_cta, uid)
            uid += len(units)
            queues.append(_Queue(units))
        source = _RoundRobin(queues) if kind == "streams" else _Chain(queues)
        eng = _Engine(gpu, uid, trace, rng)
        _drive(eng, source, slots)
        total = sum(len(q.units) for q in queues)
        return _result(eng, gpu, launches, *_waves(total, slots * gpu.num_sms))

    if len(launches) != 2:
        # a fused kernel with only one op degenerates to that kernel alone
        return simulate(gpu, launches, CtaParallel, seed, randomize_dispatch=randomize_dispatch, trace=trace)
    pre, dec = launches
    smem = max(pre.shared_mem_per_cta, dec.shared_mem_per_cta)
    probe = _Engine(gpu, 1, False)
    slots = probe.capacity(smem)
    ga, gb = _group_ctas(pre.tasks), _group_ctas(dec.tasks)

    if kind in ("warp", "intra"):
        units = _fused_units(ga, gb, kind, strategy.segments, smem)
        eng = _Engine(gpu, len(units), trace, rng)
        _drive(eng, _Queue(units), slots)
        return _result(eng, gpu, launches, *_waves(len(units), slots * gpu.num_sms))

    # SM-aware
    units_p = [_plain_unit(g, smem, i) for i, g in enumerate(ga)]
    units_d = [_plain_unit(g, smem, len(ga) + i) for i, g in enumerate(gb)]
    if strategy.policy == "proportional":
        ratio = proportional_ratio(len(units_p), len(units_d))
    else:
        ratio = (1, 1)
    state = SchedulerState(gpu.num_sms, len(units_p), len(units_d), *ratio)
    source = _SmAwareSource(state, {Op.PREFILL: units_p, Op.DECODE: units_d})
    eng = _Engine(gpu, len(units_p) + len(units_d), trace, rng)
    _drive(eng, source, slots, pools_fn=source.both_pools)
    res = _result(eng, gpu, launches, *_waves(len(units_p) + len(units_d), slots * gpu.num_sms))
    res.scheduler_state = state
    return res


class _Chain:
    """Concatenated submission order across launches."""

    def __init__(self, queues):
        self.queues = queues

    def empty(self):
        return all(q.empty() for q in self.queues)

    def pop(self, sm_id=None):
        for q in self.queues:
            if not q.empty():
                return q.pop()
        return None


def launches_for(decomp: WorkDecomposition) -> list[KernelLaunch]:
    smem = decomp.config.shared_mem_per_cta
    return [
        KernelLaunch(decomp.prefill_tasks, smem, 0, "prefill"),
        KernelLaunch(decomp.decode_tasks, smem, 1, "decode"),
    ]


def plan_hybrid(
    batch: HybridBatchSpec, gpu: GpuSpec, strategy: ExecutionStrategy, config: TileConfig | None = None
) -> tuple[WorkDecomposition, list[KernelLaunch]]:
    """Decompose a hybrid batch the way ``strategy`` would launch it.

    Baselines run the stock separate kernels; the SM-aware fused kernel uses
    the automatically selected fused tiling unless ``config`` is given.
    """
    if config is None:
        config = select_tile_config(batch, gpu) if strategy.kind == "smaware" else flash_attention_config(gpu)
    decomp = decompose_hybrid(batch, gpu, config)
    return decomp, launches_for(decomp)


def simulate_hybrid(
    batch: HybridBatchSpec, gpu: GpuSpec, strategy: ExecutionStrategy, config: TileConfig | None = None, **kw
) -> SimResult:
    _, launches = plan_hybrid(batch, gpu, strategy, config)
    return simulate(gpu, launches, strategy, **kw)


def best_smaware(
    batch: HybridBatchSpec,
    gpu: GpuSpec,
    policy: str | None = "fifty_fifty",
    splits: tuple[str, ...] = ("limited",),
    **overrides,
) -> SimResult:
    """SM-aware fused run under the fastest of 2 or 4 CTAs/SM.

    ``policy=None`` also searches both ticket policies; ``splits`` lists the
    prefill split rules to try.  Candidates that decompose identically, or
    whose proportional ratio is 1:1, are simulated once.
    """
    from fusesim.decomp import fused_config

    options = [2, 4] if gpu.max_ctas_per_sm >= 4 else [2]
    policies = POLICIES if policy is None else (policy,)
    seen: set = set()
    best = None
    for sp in splits:
        for n in options:
            config = fused_config(gpu, n, prefill_splits=sp, **overrides)
            decomp = decompose_hybrid(batch, gpu, config)
            key = (n, decomp.prefill_splits)
            if key in seen:
                continue
            seen.add(key)
            launches = launches_for(decomp)
            ratio = proportional_ratio(decomp.num_ctas(Op.PREFILL), decomp.num_ctas(Op.DECODE))
            for pol in policies:
                if pol == "proportional" and ratio == (1, 1) and "fifty_fifty" in policies:
                    continue
                res = simulate(gpu, launches, SmAware(pol))
                if best is None or res.makespan < best.makespan:
                    best = res
    return best


FULL_SEARCH = dict(policy=None, splits=("limited", "vanilla"))


MICROBENCH_MEMORY_ITERS = 25


def make_microbench(
    compute_iters: int, array_len: int = 4096, gpu: GpuSpec | None = None, num_ctas: int | None = None
) -> list[KernelLaunch]:
    """A compute-only and a memory-only kernel, equal in serial runtime at 100 iterations.

    The compute kernel repeatedly scales its slice of an array (one barrier
    per iteration); the memory kernel repeatedly adds three arrays
    (two reads and a write per element, ``MICROBENCH_MEMORY_ITERS`` passes).
    """
    if compute_iters < 1 or array_len < 1:
        raise DomainError("compute_iters and array_len must be >= 1")
    gpu = gpu or GpuSpec.a100()
    n = num_ctas or gpu.num_sms * gpu.max_ctas_per_sm
    mem_per_cta = 3.0 * array_len * MICROBENCH_MEMORY_ITERS
    # at 100 iterations: n * 100 * per_iter / compute_total == n * mem_per_cta / bandwidth
    per_iter = mem_per_cta * gpu.compute_total / (100.0 * gpu.mem_bandwidth_total)
    compute = [
        CtaTask(Op.PREFILL, i, i, 0, 0, (0, array_len), compute_iters * per_iter, 2.0 * array_len,
                barrier_segments=compute_iters, cta=i)
        for i in range(n)
    ]
    memory = [
        CtaTask(Op.DECODE, i, i, 0, 0, (0, array_len), 1.0 * array_len * MICROBENCH_MEMORY_ITERS, mem_per_cta,
                barrier_segments=MICROBENCH_MEMORY_ITERS, cta=i)
        for i in range(n)
    ]
    return [KernelLaunch(compute, 0, 0, "compute"), KernelLaunch(memory, 0, 1, "memory")]


CSV_COLUMNS = (
    "run_id", "strategy", "policy", "ctas_per_sm", "makespan", "oracle",
    "compute_util", "bw_util", "waves", "quantized_ctas",
)


def csv_row(run_id: str, strategy: ExecutionStrategy, ctas_per_sm: int, result: SimResult, oracle: float) -> dict:
    return {
        "run_id": run_id,
        "strategy": strategy.kind if strategy.kind == "smaware" else strategy.label,
        "policy": strategy.policy if strategy.kind == "smaware" else "",
        "ctas_per_sm": ctas_per_sm,
        "makespan": f"{result.makespan:.6f}",
        "oracle": f"{oracle:.6f}",
        "compute_util": f"{result.compute_utilization:.6f}",
        "bw_util": f"{result.bandwidth_utilization:.6f}",
        "waves": result.waves_used,
        "quantized_ctas": result.quantized_ctas,
    }


def write_trace(path, result: SimResult, run_id: str = "") -> None:
    """One line per dispatch/finish: ``time sm_id event task_id op``."""
    with open(path, "a") as fh:
        for t, sm, event, task, op in result.events:
            fh.write(f"{run_id}\t{t:.6f}\t{sm}\t{event}\t{task}\t{op}\n")
