"""Randomized verification suites for the attention kernels.

Each suite draws its instances from a seeded generator and returns a
:class:`SuiteResult`; the CLI prints them and the test-suite asserts on them.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from fusesim.attention import (
    DecodeQuery,
    KVCache,
    ModelShape,
    QueryChunk,
    decode_attention_splitk,
    merge_partials,
    naive_attention_heads,
    tiled_prefill_attention,
)


@dataclass
class SuiteResult:
    name: str
    instances: int
    failures: int
    max_error: float

    @property
    def passed(self) -> bool:
        return self.failures == 0


def rel_error(out: np.ndarray, ref: np.ndarray) -> float:
    """max |out - ref| / max |ref|."""
    denom = float(np.max(np.abs(ref)))
    return float(np.max(np.abs(out - ref))) / (denom if denom > 0 else 1.0)


def _shape(rng, head_dims) -> ModelShape:
    hk = int(rng.choice([1, 2]))
    g = int(rng.choice([1, 2, 4]))
    return ModelShape(hk * g, hk, int(rng.choice(head_dims)))


def _instance(rng, max_chunk, max_context, head_dims, extra_keys=0):
    shape = _shape(rng, head_dims)
    m = int(rng.integers(1, max_chunk + 1))
    n = int(rng.integers(m, max(m, max_context - extra_keys) + 1))
    off = n - m
    d = shape.head_dim
    q = rng.standard_normal((m, shape.num_q_heads, d))
    k = rng.standard_normal((n + extra_keys, shape.num_kv_heads, d))
    v = rng.standard_normal((n + extra_keys, shape.num_kv_heads, d))
    return shape, QueryChunk(q, off), KVCache(k, v)


def oracle_suite(
    rng: np.random.Generator,
    instances: int,
    max_chunk: int = 64,
    max_context: int = 2048,
    head_dims=(4, 8, 64),
    tiles=(1, 8, 16, 64, 128),
    tolerance: float = 1e-10,
    mask_shift: int = 0,
    reference_dtype=np.float64,
) -> SuiteResult:
    """Tiled prefill attention against the dense reference.

    The reference runs in ``reference_dtype``; float64 keeps large suites
    fast (BLAS), ``np.longdouble`` gives a few extra digits.
    """
    worst, fails = 0.0, 0
    for _ in range(instances):
        shape, chunk, cache = _instance(rng, max_chunk, max_context, head_dims)
        tq, tk = int(rng.choice(tiles)), int(rng.choice(tiles))
        out = tiled_prefill_attention(chunk, cache, shape, tq, tk, _mask_shift=mask_shift)
        ref = naive_attention_heads(chunk.q, cache, shape, chunk.position_offset, reference_dtype)
        err = rel_error(out, ref)
        worst = max(worst, err)
        fails += not err <= tolerance
    return SuiteResult("oracle_equivalence", instances, fails, worst)


def causality_suite(
    rng: np.random.Generator,
    instances: int,
    max_chunk: int = 64,
    max_context: int = 2048,
    head_dims=(4, 8, 64),
    tiles=(1, 8, 16, 64, 128),
    tolerance: float = 1e-10,
    mask_shift: int = 0,
) -> SuiteResult:
    """Perturbing keys after a row's position must not change that row."""
    worst, fails = 0.0, 0
    for _ in range(instances):
        shape, chunk, cache = _instance(rng, max_chunk, max_context, head_dims, extra_keys=8)
        tq, tk = int(rng.choice(tiles)), int(rng.choice(tiles))
        row = int(rng.integers(0, chunk.chunk_len))
        cut = chunk.position_offset + row + 1
        k2, v2 = cache.k.copy(), cache.v.copy()
        k2[cut:] = rng.standard_normal(k2[cut:].shape) * 10
        v2[cut:] = rng.standard_normal(v2[cut:].shape) * 10
        a = tiled_prefill_attention(chunk, cache, shape, tq, tk, _mask_shift=mask_shift)[: row + 1]
        b = tiled_prefill_attention(chunk, KVCache(k2, v2), shape, tq, tk, _mask_shift=mask_shift)[: row + 1]
        err = rel_error(b, a)
        worst = max(worst, err)
        fails += not err <= tolerance
    return SuiteResult("causality", instances, fails, worst)


def split_suite(
    rng: np.random.Generator,
    instances: int,
    max_context: int = 2048,
    head_dims=(4, 8, 64),
    max_splits: int = 8,
    tolerance: float = 1e-10,
) -> SuiteResult:
    """Merged split-K outputs agree across split counts and merge orders."""
    worst, fails = 0.0, 0
    for _ in range(instances):
        shape = _shape(rng, head_dims)
        n = int(rng.integers(max_splits, max_context + 1))
        d = shape.head_dim
        q = DecodeQuery(rng.standard_normal((1, shape.num_q_heads, d)))
        cache = KVCache(rng.standard_normal((n, shape.num_kv_heads, d)), rng.standard_normal((n, shape.num_kv_heads, d)))
        outs = []
        for s in range(1, max_splits + 1):
            parts = decode_attention_splitk(q, cache, shape, s)
            merged = merge_partials(parts)
            if s <= 4:
                for perm in itertools.permutations(parts):
                    if not np.array_equal(merge_partials(list(perm)), merged):
                        fails += 1
                        worst = max(worst, rel_error(merge_partials(list(perm)), merged))
            outs.append(merged)
        ref = naive_attention_heads(q.q, cache, shape)[0]
        errs = [rel_error(a, b) for a, b in itertools.combinations(outs, 2)]
        errs.append(rel_error(outs[0], ref))
        err = max(errs)
        worst = max(worst, err)
        fails += not err <= tolerance
    return SuiteResult("split_invariance", instances, fails, worst)
