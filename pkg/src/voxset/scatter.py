"""Segment reductions over voxel membership.

Every reduction runs on rows stably sorted by segment id, so within a
segment the rows are combined in ascending original point index. That
fixed order is what makes outputs reproducible bit-for-bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import DiffArray, make_op

__all__ = [
    "SegmentTable", "EmptySegmentsError", "build_segments",
    "scatter_sum", "scatter_max", "scatter_mean", "scatter_softmax", "gather_segments",
    "segment_outer_sum", "segment_readout",
]

# rows per block in the fused kernels; keeps the c x k x d temporaries in cache
CHUNK = 4096


class EmptySegmentsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SegmentTable:
    """Point-to-voxel assignment with dense ids ordered by first occurrence."""

    seg_of_point: np.ndarray
    voxel_coords: np.ndarray
    counts: np.ndarray
    order: np.ndarray = field(repr=False)
    starts: np.ndarray = field(repr=False)

    @property
    def m(self) -> int:
        return len(self.counts)

    @property
    def n(self) -> int:
        return len(self.seg_of_point)


def _row_keys(coords: np.ndarray) -> np.ndarray:
    shifted = coords - coords.min(axis=0)
    span = shifted.max(axis=0) + 1
    if np.prod(span.astype(np.float64)) < 2**62:
        return (shifted[:, 0] * span[1] + shifted[:, 1]) * span[2] + shifted[:, 2]
    _, inv = np.unique(coords, axis=0, return_inverse=True)
    return inv.reshape(-1)


def build_segments(voxel_coords_per_point) -> SegmentTable:
    coords = np.asarray(voxel_coords_per_point, dtype=np.int64).reshape(-1, 3)
    n = len(coords)
    if n < 1:
        raise EmptySegmentsError("cannot build segments from zero points")
    keys = _row_keys(coords)
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    seg = rank[inverse]
    first_sorted = np.sort(first)
    counts = np.bincount(seg, minlength=len(first))
    order = np.argsort(seg, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    return SegmentTable(seg, coords[first_sorted], counts, order, starts)


def _check(x: DiffArray, seg: SegmentTable):
    if x.shape[0] == 0:
        raise EmptySegmentsError("scatter over an empty input")
    if x.shape[0] != seg.n:
        raise ValueError(f"input has {x.shape[0]} rows but segment table covers {seg.n} points")


def _segment_sum(data: np.ndarray, seg: SegmentTable) -> np.ndarray:
    return np.add.reduceat(data[seg.order], seg.starts, axis=0)


def scatter_sum(x: DiffArray, seg: SegmentTable) -> DiffArray:
    _check(x, seg)
    ids = seg.seg_of_point
    return make_op(_segment_sum(x.data, seg), (x,), lambda g: (g[ids],))


def scatter_mean(x: DiffArray, seg: SegmentTable) -> DiffArray:
    _check(x, seg)
    ids = seg.seg_of_point
    shape = (-1,) + (1,) * (x.ndim - 1)
    cnt = seg.counts.reshape(shape).astype(x.dtype)
    out = _segment_sum(x.data, seg) / cnt
    return make_op(out, (x,), lambda g: ((g / cnt)[ids],))


def scatter_max(x: DiffArray, seg: SegmentTable) -> DiffArray:
    """Per-segment maximum; on ties the lowest point index receives the gradient."""
    _check(x, seg)
    ids = seg.seg_of_point
    srt = x.data[seg.order]
    out = np.maximum.reduceat(srt, seg.starts, axis=0)
    hit = srt == out[ids[seg.order]]
    pos = np.arange(seg.n).reshape((-1,) + (1,) * (x.ndim - 1))
    first = np.minimum.reduceat(np.where(hit, pos, seg.n), seg.starts, axis=0)
    winner = seg.order[first]

    def vjp(g):
        gx = np.zeros_like(x.data)
        flat_gx = gx.reshape(seg.n, -1)
        cols = np.broadcast_to(np.arange(flat_gx.shape[1]), (seg.m, flat_gx.shape[1]))
        flat_gx[winner.reshape(seg.m, -1), cols] = g.reshape(seg.m, -1)
        return (gx,)

    return make_op(out, (x,), vjp)


def scatter_softmax(logits: DiffArray, seg: SegmentTable) -> DiffArray:
    """Softmax over the points of each segment, independently per column."""
    _check(logits, seg)
    ids = seg.seg_of_point
    srt = logits.data[seg.order]
    mx = np.maximum.reduceat(srt, seg.starts, axis=0)
    e = np.exp(logits.data - mx[ids])
    y = e / _segment_sum(e, seg)[ids]

    def vjp(g):
        gy = g * y
        return (gy - y * _segment_sum(gy, seg)[ids],)

    return make_op(y, (logits,), vjp)


def gather_segments(x: DiffArray, seg: SegmentTable) -> DiffArray:
    """Broadcast per-segment rows back to points (adjoint of scatter_sum)."""
    if x.shape[0] != seg.m:
        raise ValueError(f"expected {seg.m} segment rows, got {x.shape[0]}")
    return make_op(x.data[seg.seg_of_point], (x,), lambda g: (_segment_sum(g, seg),))


def _outer_sum(w: np.ndarray, v: np.ndarray, seg: SegmentTable) -> np.ndarray:
    """``out[s] = sum over points i of segment s of outer(w[i], v[i])``, blockwise."""
    out = np.zeros((seg.m, w.shape[1], v.shape[1]), dtype=np.result_type(w, v))
    ids = seg.seg_of_point[seg.order]
    for a in range(0, seg.n, CHUNK):
        rows = seg.order[a:a + CHUNK]
        part = ids[a:a + CHUNK]
        cut = np.flatnonzero(np.r_[True, part[1:] != part[:-1]])
        # each segment id occurs in one run per block, so the += indices are distinct
        out[part[cut]] += np.add.reduceat(w[rows][:, :, None] * v[rows][:, None, :], cut, axis=0)
    return out


def _per_point_contract(g: np.ndarray, seg: SegmentTable, v: np.ndarray, spec: str) -> np.ndarray:
    """``einsum(spec, g[seg_of_point], v)`` without materializing the gathered block."""
    ids = seg.seg_of_point
    blocks = [np.einsum(spec, g[ids[a:a + CHUNK]], v[a:a + CHUNK]) for a in range(0, seg.n, CHUNK)]
    return np.concatenate(blocks)


def segment_outer_sum(w: DiffArray, v: DiffArray, seg: SegmentTable) -> DiffArray:
    """``m x k x d`` sums of per-point outer products ``w[i] v[i]^T`` within each segment.

    Equals ``scatter_sum(einsum("nk,nd->nkd", w, v), seg)`` without the ``n x k x d``
    intermediate.
    """
    _check(w, seg)
    _check(v, seg)
    out = _outer_sum(w.data, v.data, seg)

    def vjp(g):
        gw = _per_point_contract(g, seg, v.data, "nkd,nd->nk") if w.requires_grad else None
        gv = _per_point_contract(g, seg, w.data, "nkd,nk->nd") if v.requires_grad else None
        return gw, gv

    return make_op(out, (w, v), vjp)


def segment_readout(keys: DiffArray, values: DiffArray, query: DiffArray, seg: SegmentTable) -> DiffArray:
    """Per-point attention over the ``k`` slots of its segment.

    ``keys`` and ``values`` are ``m x k x d``, ``query`` is ``n x d``. Point ``i``
    in segment ``s`` gets ``softmax_k(keys[s] @ query[i]) @ values[s]``, the same
    as gathering the slots to every point and contracting, without the two
    ``n x k x d`` gathers.
    """
    _check(query, seg)
    if keys.shape[0] != seg.m or values.shape[0] != seg.m:
        raise ValueError(f"expected {seg.m} segment rows, got {keys.shape[0]} and {values.shape[0]}")
    ids = seg.seg_of_point
    kd, vd, qd = keys.data, values.data, query.data
    attn = np.empty((seg.n, kd.shape[1]), dtype=np.result_type(kd, qd))
    out = np.empty((seg.n, vd.shape[2]), dtype=np.result_type(vd, attn))
    for a in range(0, seg.n, CHUNK):
        blk = ids[a:a + CHUNK]
        lg = np.einsum("ckd,cd->ck", kd[blk], qd[a:a + CHUNK])
        lg -= lg.max(axis=1, keepdims=True)
        e = np.exp(lg)
        e /= e.sum(axis=1, keepdims=True)
        attn[a:a + CHUNK] = e
        out[a:a + CHUNK] = np.einsum("ck,ckd->cd", e, vd[blk])

    def vjp(g):
        ga = _per_point_contract(vd, seg, g, "nkd,nd->nk")
        gl = attn * (ga - (ga * attn).sum(axis=1, keepdims=True))
        gk = _outer_sum(gl, qd, seg) if keys.requires_grad else None
        gv = _outer_sum(attn, g, seg) if values.requires_grad else None
        gq = _per_point_contract(kd, seg, gl, "nkd,nk->nd") if query.requires_grad else None
        return gk, gv, gq

    return make_op(out, (keys, values, query), vjp)
