"""Reference and tiled attention for prefill chunks and decode queries.

Everything here is a pure function of its inputs.  Arrays follow the layout
``[tokens, heads, head_dim]``; grouped-query attention maps several query heads
onto one key/value head.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from fusesim.errors import DimensionError, DomainError, InconsistentStateError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelShape:
    num_q_heads: int
    num_kv_heads: int
    head_dim: int
    scale: float | None = None

    def __post_init__(self):
        if self.num_q_heads < 1 or self.num_kv_heads < 1:
            raise DomainError("head counts must be positive")
        if self.num_q_heads % self.num_kv_heads:
            raise DomainError(
                f"num_q_heads={self.num_q_heads} is not a multiple of num_kv_heads={self.num_kv_heads}"
            )
        if self.head_dim < 1:
            raise DomainError("head_dim must be >= 1")
        if self.scale is None:
            object.__setattr__(self, "scale", float(np.sqrt(self.head_dim)))
        if self.scale <= 0:
            raise DomainError("scale must be positive")

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads


@dataclass(frozen=True)
class KVCache:
    k: np.ndarray  # [context_len, num_kv_heads, head_dim]
    v: np.ndarray

    def __post_init__(self):
        if self.k.shape != self.v.shape or self.k.ndim != 3:
            raise DimensionError(f"K {self.k.shape} and V {self.v.shape} must share a 3-d shape")

    @property
    def context_len(self) -> int:
        return self.k.shape[0]


@dataclass(frozen=True)
class QueryChunk:
    q: np.ndarray  # [chunk_len, num_q_heads, head_dim]
    position_offset: int = 0

    def __post_init__(self):
        if self.q.ndim != 3:
            raise DimensionError("Q must be [chunk_len, num_q_heads, head_dim]")
        if self.position_offset < 0:
            raise DomainError("position_offset must be >= 0")

    @property
    def chunk_len(self) -> int:
        return self.q.shape[0]


@dataclass(frozen=True)
class DecodeQuery:
    q: np.ndarray  # [1, num_q_heads, head_dim]

    def __post_init__(self):
        if self.q.ndim != 3 or self.q.shape[0] != 1:
            raise DimensionError("a decode query holds exactly one token")


@dataclass(frozen=True)
class AttentionPartial:
    """Partial attention result over a half-open key range.

    ``o`` is already softmax-normalised within ``kv_range``; ``lse`` is the
    row-wise log-sum-exp of the scaled scores over that range.
    """

    o: np.ndarray  # [rows, head_dim]
    lse: np.ndarray  # [rows]
    kv_range: tuple[int, int]


def gqa_kv_head(q_head: int, shape: ModelShape) -> int:
    if not 0 <= q_head < shape.num_q_heads:
        raise IndexError(f"q_head {q_head} outside [0, {shape.num_q_heads})")
    return q_head // shape.group_size


def attention_weights(q, k, scale, causal_offset=None, dtype=np.longdouble):
    """Dense softmax(QK^T/scale) with the causal mask, extended precision by default."""
    q = np.asarray(q, dtype=dtype)
    k = np.asarray(k, dtype=dtype)
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise DimensionError(f"incompatible Q {q.shape} and K {k.shape}")
    m, n = q.shape[0], k.shape[0]
    if m < 1 or n < 1:
        raise DimensionError("need at least one query and one key")
    scores = (q @ k.T) / dtype(scale)
    if causal_offset is not None:
        if causal_offset < 0:
            raise DomainError("causal_offset < 0 masks every key of row 0")
        visible = np.arange(n)[None, :] <= causal_offset + np.arange(m)[:, None]
        scores = np.where(visible, scores, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    return w / w.sum(axis=1, keepdims=True)


def naive_attention(q, k, v, scale, causal_offset=None, dtype=np.longdouble) -> np.ndarray:
    """Dense attention ``softmax(QK^T/scale) V`` for a single head.

    ``causal_offset`` lets query row ``i`` see keys ``0..causal_offset+i``.
    """
    v = np.asarray(v, dtype=dtype)
    if v.ndim != 2 or v.shape[0] != np.shape(k)[0]:
        raise DimensionError(f"V {v.shape} does not match K {np.shape(k)}")
    w = attention_weights(q, k, scale, causal_offset, dtype)
    return (w @ v).astype(np.float64)


def naive_attention_heads(
    q, cache: KVCache, shape: ModelShape, causal_offset=None, dtype=np.longdouble
) -> np.ndarray:
    """Multi-head wrapper around :func:`naive_attention` using the GQA mapping."""
    out = np.empty(q.shape, dtype=np.float64)
    for h in range(shape.num_q_heads):
        g = gqa_kv_head(h, shape)
        out[:, h] = naive_attention(q[:, h], cache.k[:, g], cache.v[:, g], shape.scale, causal_offset, dtype)
    return out


def repeat_kv(cache: KVCache, shape: ModelShape) -> KVCache:
    """Materialise one K/V head per query head (MHA layout)."""
    return KVCache(
        np.repeat(cache.k, shape.group_size, axis=1),
        np.repeat(cache.v, shape.group_size, axis=1),
    )


def _check_layout(q, cache, shape):
    if q.shape[1:] != (shape.num_q_heads, shape.head_dim):
        raise DimensionError(f"Q {q.shape} does not match {shape}")
    if cache.k.shape[1:] != (shape.num_kv_heads, shape.head_dim):
        raise DimensionError(f"cache {cache.k.shape} does not match {shape}")


def tiled_prefill_attention(
    chunk: QueryChunk,
    cache: KVCache,
    shape: ModelShape,
    tile_q: int,
    tile_kv: int,
    dtype=np.float64,
    *,
    _mask_shift: int = 0,
) -> np.ndarray:
    """Causal attention of a prefill chunk against the whole cache, tile by tile.

    Streams over key tiles with a running row max, running denominator and a
    rescaled accumulator, so no score matrix larger than one tile exists.
    ``_mask_shift`` deliberately corrupts the causal mask (fault injection).
    """
    if tile_q < 1 or tile_kv < 1:
        raise DomainError("tile sizes must be >= 1")
    _check_layout(chunk.q, cache, shape)
    m, off = chunk.chunk_len, chunk.position_offset
    if cache.context_len < off + m:
        raise InconsistentStateError(
            f"cache holds {cache.context_len} tokens but chunk needs {off + m}"
        )
    hk, g, d = shape.num_kv_heads, shape.group_size, shape.head_dim
    n_tiles = -(-m // tile_q)
    padded = n_tiles * tile_q
    inv_scale = dtype(1.0 / shape.scale)
    # Every q tile runs the same kv-tile loop, so they are processed as a batch:
    # q becomes [kv_head, q_tile, group * tile_q, d].  A key tile that is fully
    # masked for a q tile leaves that tile's running state bitwise unchanged.
    q = np.zeros((padded, hk, g, d), dtype=dtype)
    q[:m] = chunk.q.astype(dtype).reshape(m, hk, g, d)
    q = q.reshape(n_tiles, tile_q, hk, g, d).transpose(2, 0, 3, 1, 4).reshape(hk, n_tiles, g * tile_q, d)
    k = np.ascontiguousarray(cache.k.astype(dtype).transpose(1, 2, 0))[:, None]  # [hk, 1, d, n]
    v = np.ascontiguousarray(cache.v.astype(dtype).transpose(1, 0, 2))[:, None]  # [hk, 1, n, d]
    row_pos = (off + _mask_shift + np.arange(padded)).reshape(n_tiles, tile_q)
    row_pos = np.tile(row_pos, (1, g))  # matches the (group, token) row order
    stop = min(off + m + _mask_shift, cache.context_len)

    run_max = np.full((hk, n_tiles, g * tile_q, 1), -np.inf, dtype=dtype)
    denom = np.zeros_like(run_max)
    acc = np.zeros((hk, n_tiles, g * tile_q, d), dtype=dtype)
    for j0 in range(0, stop, tile_kv):
        j1 = min(j0 + tile_kv, cache.context_len)
        s = np.matmul(q, k[..., j0:j1]) * inv_scale
        if j1 - 1 > off + _mask_shift:
            hidden = np.arange(j0, j1)[None, None, :] > row_pos[:, :, None]
            s = np.where(hidden, -np.inf, s)
        new_max = np.maximum(run_max, s.max(axis=-1, keepdims=True))
        p = np.exp(s - new_max)
        alpha = np.exp(run_max - new_max)
        denom = alpha * denom + p.sum(axis=-1, keepdims=True)
        acc = alpha * acc + np.matmul(p, v[:, :, j0:j1])
        run_max = new_max
    out = (acc / denom).reshape(hk, n_tiles, g, tile_q, d).transpose(1, 3, 0, 2, 4)
    return out.reshape(padded, shape.num_q_heads, d)[:m].astype(np.float64)


def split_ranges(n: int, num_splits: int) -> list[tuple[int, int]]:
    """Partition ``[0, n)`` into contiguous ranges whose lengths differ by <= 1."""
    base, extra = divmod(n, num_splits)
    ranges, start = [], 0
    for i in range(num_splits):
        stop = start + base + (1 if i < extra else 0)
        ranges.append((start, stop))
        start = stop
    return ranges


def _logsumexp(x, axis=-1):
    mx = x.max(axis=axis, keepdims=True)
    return (mx + np.log(np.exp(x - mx).sum(axis=axis, keepdims=True))).squeeze(axis)


def decode_attention_splitk(
    q: DecodeQuery, cache: KVCache, shape: ModelShape, num_splits: int
) -> list[AttentionPartial]:
    """Split-K decode attention: one exact partial per contiguous key range."""
    _check_layout(q.q, cache, shape)
    n = cache.context_len
    if n == 0:
        raise DomainError("decode attention over an empty cache")
    if num_splits < 1:
        raise DomainError("num_splits must be >= 1")
    if num_splits > n:
        log.warning("num_splits=%d exceeds context_len=%d; using %d", num_splits, n, n)
        num_splits = n
    hk, g, d = shape.num_kv_heads, shape.group_size, shape.head_dim
    qh = q.q[0].astype(np.float64).reshape(hk, g, d)
    parts = []
    for lo, hi in split_ranges(n, num_splits):
        k = cache.k[lo:hi].astype(np.float64).transpose(1, 2, 0)  # [hk, d, len]
        v = cache.v[lo:hi].astype(np.float64).transpose(1, 0, 2)  # [hk, len, d]
        s = np.matmul(qh, k) / shape.scale  # [hk, g, len]
        lse = _logsumexp(s)
        o = np.matmul(np.exp(s - lse[..., None]), v)
        parts.append(
            AttentionPartial(o.reshape(shape.num_q_heads, d), lse.reshape(shape.num_q_heads), (lo, hi))
        )
    return parts


def merge_partials(parts: list[AttentionPartial]) -> np.ndarray:
    """Combine split-K partials with the log-sum-exp rule.

    Parts are summed in ascending ``kv_range`` order, so the result is
    bitwise identical for any permutation of the input list.
    """
    if not parts:
        raise DomainError("nothing to merge")
    ordered = sorted(parts, key=lambda p: p.kv_range)
    for prev, nxt in zip(ordered, ordered[1:]):
        if nxt.kv_range[0] < prev.kv_range[1]:
            raise InconsistentStateError(f"overlapping ranges {prev.kv_range} and {nxt.kv_range}")
    if len(ordered) == 1:
        return ordered[0].o
    lse = np.stack([p.lse for p in ordered])  # [parts, rows]
    total = _logsumexp(lse, axis=0)
    out = np.zeros_like(ordered[0].o, dtype=np.float64)
    for p, w_lse in zip(ordered, lse):
        out = out + np.exp(w_lse - total)[:, None] * p.o
    return out
