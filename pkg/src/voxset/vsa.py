"""Voxel set attention: latent-code encoder, sparse ConvFFN, per-point decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import diffcore as dc
from .diffcore import BatchNormState, DiffArray
from .scatter import SegmentTable, scatter_softmax, segment_outer_sum, segment_readout

__all__ = [
    "VsaParams", "HiddenFeatures", "ConfigError", "DuplicateCoordsError",
    "init_vsa_params", "fourier_pe", "inject_pe", "neighbor_table", "conv_offsets",
    "sparse_group_conv",
    "vsa_encode", "conv_ffn", "vsa_decode", "vsa_attention", "vsa_block",
    "naive_vsa_oracle", "dense_conv_ffn_oracle",
]


class ConfigError(ValueError):
    pass


class DuplicateCoordsError(ValueError):
    pass


@dataclass
class VsaParams:
    latent: DiffArray        # k x d
    w_key: DiffArray         # d_in x d
    w_value: DiffArray       # d_in x d
    w_query: DiffArray       # d_in x d
    w_dec_key: DiffArray     # d x d
    w_dec_value: DiffArray   # d x d
    w_out: DiffArray         # d x d
    ffn_w1: DiffArray        # taps x k x d x d
    ffn_b1: DiffArray        # k x d
    ffn_w2: DiffArray
    ffn_b2: DiffArray
    w_pe: DiffArray          # 3*L_pe x d_in
    b_pe: DiffArray          # d_in
    bn_gamma: DiffArray      # d
    bn_beta: DiffArray       # d
    w_res: DiffArray | None = None   # d_in x d, only when widths differ
    bn_state: BatchNormState | None = None
    pe_bandwidth: int = 64

    @property
    def k(self) -> int:
        return self.latent.shape[0]

    @property
    def d(self) -> int:
        return self.latent.shape[1]

    def arrays(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, DiffArray):
                out[f.name] = v
        return out

    def with_arrays(self, **arrays) -> "VsaParams":
        return replace(self, **arrays)


@dataclass
class HiddenFeatures:
    per_voxel: DiffArray     # m x k x d
    coords: np.ndarray       # m x 3 voxel coordinates


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return DiffArray(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_vsa_params(d_in: int, d_out: int, k: int = 8, pe_bandwidth: int = 64, rng=None,
                    dtype=np.float64, zero_out: bool = False) -> VsaParams:
    if k < 1:
        raise ConfigError("need at least one latent code")
    if pe_bandwidth < 2 or pe_bandwidth % 2:
        raise ConfigError(f"PE bandwidth must be even and >= 2, got {pe_bandwidth}")
    rng = np.random.default_rng(rng)
    d = d_out
    taps = len(conv_offsets())
    p = VsaParams(
        latent=DiffArray(rng.normal(0.0, 0.02, size=(k, d)).astype(dtype), requires_grad=True),
        w_key=_uniform(rng, (d_in, d), d_in, dtype),
        w_value=_uniform(rng, (d_in, d), d_in, dtype),
        w_query=_uniform(rng, (d_in, d), d_in, dtype),
        w_dec_key=_uniform(rng, (d, d), d, dtype),
        w_dec_value=_uniform(rng, (d, d), d, dtype),
        w_out=(DiffArray(np.zeros((d, d), dtype=dtype), requires_grad=True) if zero_out
               else _uniform(rng, (d, d), d, dtype)),
        ffn_w1=_uniform(rng, (taps, k, d, d), taps * d, dtype),
        ffn_b1=DiffArray(np.zeros((k, d), dtype=dtype), requires_grad=True),
        ffn_w2=_uniform(rng, (taps, k, d, d), taps * d, dtype),
        ffn_b2=DiffArray(np.zeros((k, d), dtype=dtype), requires_grad=True),
        w_pe=_uniform(rng, (3 * pe_bandwidth, d_in), 3 * pe_bandwidth, dtype),
        b_pe=DiffArray(np.zeros(d_in, dtype=dtype), requires_grad=True),
        bn_gamma=DiffArray(np.ones(d, dtype=dtype), requires_grad=True),
        bn_beta=DiffArray(np.zeros(d, dtype=dtype), requires_grad=True),
        w_res=_uniform(rng, (d_in, d), d_in, dtype) if d_in != d_out else None,
        bn_state=BatchNormState(d, dtype=dtype),
        pe_bandwidth=pe_bandwidth,
    )
    return p


def fourier_pe(local_xyz, bandwidth: int = 64) -> np.ndarray:
    """Sin/cos features of in-voxel coordinates.

    Per axis there are ``bandwidth // 2`` frequencies ``2**j``; the axis block
    holds all sines then all cosines. Width is ``3 * bandwidth``.
    """
    if bandwidth < 2 or bandwidth % 2:
        raise ConfigError(f"PE bandwidth must be even and >= 2, got {bandwidth}")
    x = np.asarray(local_xyz, dtype=np.float64).reshape(-1, 3)
    freqs = 2.0 ** np.arange(bandwidth // 2)
    blocks = []
    for a in range(3):
        arg = x[:, a:a + 1] * (freqs * np.pi)
        blocks.append(np.sin(arg))
        blocks.append(np.cos(arg))
    return np.concatenate(blocks, axis=1)


def inject_pe(x: DiffArray, local_xyz, params: VsaParams, pe=None) -> DiffArray:
    """Add the projected Fourier embedding; ``pe`` may carry a precomputed embedding."""
    if pe is None:
        pe = fourier_pe(local_xyz, params.pe_bandwidth)
    return x + (DiffArray(np.asarray(pe, dtype=x.dtype)) @ params.w_pe + params.b_pe)


def conv_offsets() -> np.ndarray:
    """3x3x1 kernel footprint over X and Y."""
    return np.array([(dx, dy, 0) for dx in (-1, 0, 1) for dy in (-1, 0, 1)], dtype=np.int64)


def neighbor_table(coords: np.ndarray, offsets: np.ndarray | None = None) -> np.ndarray:
    """``m x taps`` row index of each active neighbour, -1 where the site is empty."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    offsets = conv_offsets() if offsets is None else offsets
    lo = coords.min(axis=0) - 1
    span = coords.max(axis=0) - lo + 2

    def key(c):
        s = c - lo
        return (s[..., 0] * span[1] + s[..., 1]) * span[2] + s[..., 2]

    keys = key(coords)
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    if len(sk) > 1 and np.any(sk[1:] == sk[:-1]):
        raise DuplicateCoordsError("segment table corrupted: duplicate voxel coordinates")
    q = key(coords[:, None, :] + offsets[None, :, :])
    pos = np.clip(np.searchsorted(sk, q), 0, len(sk) - 1)
    return np.where(sk[pos] == q, order[pos], -1)


def vsa_encode(x: DiffArray, params: VsaParams, seg: SegmentTable) -> HiddenFeatures:
    keys = x @ params.w_key
    values = x @ params.w_value
    logits = dc.einsum("nd,kd->nk", keys, params.latent)
    weights = scatter_softmax(logits, seg)
    return HiddenFeatures(segment_outer_sum(weights, values, seg), seg.voxel_coords)


def sparse_group_conv(h: DiffArray, w: DiffArray, b: DiffArray, nbr: np.ndarray,
                      symmetric: bool = True) -> DiffArray:
    """Submanifold grouped convolution: one d x d kernel per tap and latent group.

    ``h`` is ``m x k x d``, ``w`` is ``taps x k x d x d``, ``nbr`` comes from
    :func:`neighbor_table`. Missing neighbours contribute zero. ``symmetric``
    asserts that tap ``t`` and tap ``taps - 1 - t`` are opposite offsets, as
    with :func:`conv_offsets`.
    """
    m, k, d = h.shape
    taps, _, _, f = w.shape
    padded = np.concatenate([h.data, np.zeros((1, k, d), dtype=h.dtype)])
    safe = np.where(nbr < 0, m, nbr)
    cols = padded[safe].transpose(2, 0, 1, 3).reshape(k, m, taps * d)     # k x m x (taps*d)
    wk = w.data.transpose(1, 0, 2, 3).reshape(k, taps * d, f)
    out = np.matmul(cols, wk).transpose(1, 0, 2) + b.data

    def vjp(g):
        gk = np.ascontiguousarray(g.transpose(1, 0, 2))                   # k x m x f
        gw = np.matmul(cols.transpose(0, 2, 1), gk).reshape(k, taps, d, f).transpose(1, 0, 2, 3)
        gcols = np.matmul(gk, wk.transpose(0, 2, 1)).reshape(k, m, taps, d).transpose(1, 2, 0, 3)
        if symmetric:
            # site i feeds site nbr[i, t] through the mirrored tap, so gather instead of scatter
            gpad = np.concatenate([gcols, np.zeros((1, taps, k, d), dtype=g.dtype)])
            gh = gpad[safe[:, ::-1], np.arange(taps)].sum(axis=1)
        else:
            gpad = np.zeros((m + 1, k, d), dtype=g.dtype)
            np.add.at(gpad, safe.reshape(-1), gcols.reshape(m * taps, k, d))
            gh = gpad[:m]
        return gh, gw, g.sum(axis=0)

    return dc.make_op(out, (h, w, b), vjp)


def conv_ffn(h: HiddenFeatures, params: VsaParams) -> HiddenFeatures:
    nbr = neighbor_table(h.coords)
    y = dc.relu(sparse_group_conv(h.per_voxel, params.ffn_w1, params.ffn_b1, nbr))
    y = sparse_group_conv(y, params.ffn_w2, params.ffn_b2, nbr)
    return HiddenFeatures(h.per_voxel + y, h.coords)


def vsa_decode(x: DiffArray, h_hat: HiddenFeatures, params: VsaParams,
               seg: SegmentTable) -> DiffArray:
    if h_hat.per_voxel.shape[0] != seg.m:
        raise dc.DimensionError(f"hidden features cover {h_hat.per_voxel.shape[0]} voxels, "
                                f"segment table has {seg.m}")
    # keys and values are projected per voxel, m/n times cheaper than per point
    keys = dc.einsum("mkd,de->mke", h_hat.per_voxel, params.w_dec_key)
    values = dc.einsum("mkd,de->mke", h_hat.per_voxel, params.w_dec_value)
    return segment_readout(keys, values, x @ params.w_query, seg)


def vsa_attention(x: DiffArray, local_xyz, seg: SegmentTable, params: VsaParams,
                  pe=None) -> DiffArray:
    xp = inject_pe(x, local_xyz, params, pe)
    return vsa_decode(xp, conv_ffn(vsa_encode(xp, params, seg), params), params, seg)


def vsa_block(x: DiffArray, local_xyz, seg: SegmentTable, params: VsaParams,
              train: bool = True, pe=None) -> DiffArray:
    """Residual VSA block followed by batch norm."""
    attended = vsa_attention(x, local_xyz, seg, params, pe) @ params.w_out
    skip = x if params.w_res is None else x @ params.w_res
    return dc.batchnorm1d(skip + attended, params.bn_gamma, params.bn_beta,
                          params.bn_state, train=train)


def dense_conv_ffn_oracle(per_voxel: np.ndarray, coords: np.ndarray, params: VsaParams) -> np.ndarray:
    """ConvFFN evaluated on a materialized dense grid, read back at active sites."""
    coords = np.asarray(coords, dtype=np.int64)
    lo = coords.min(axis=0) - 1
    shape = tuple(coords.max(axis=0) - lo + 2)
    m, k, d = per_voxel.shape
    active = np.zeros(shape, dtype=bool)
    idx = tuple((coords - lo).T)
    active[idx] = True
    offs = conv_offsets()

    def conv(grid, w, b):
        out = np.zeros_like(grid)
        for t, (dx, dy, dz) in enumerate(offs):
            shifted = np.zeros_like(grid)
            src = grid[max(dx, 0): shape[0] + min(dx, 0), max(dy, 0): shape[1] + min(dy, 0)]
            shifted[max(-dx, 0): shape[0] + min(-dx, 0), max(-dy, 0): shape[1] + min(-dy, 0)] = src
            for g in range(k):
                out[..., g, :] += shifted[..., g, :] @ w[t, g]
        out += b
        # submanifold: only active sites exist
        return out * active[..., None, None]

    grid = np.zeros(shape + (k, d))
    grid[idx] = per_voxel
    y = np.maximum(conv(grid, params.ffn_w1.data, params.ffn_b1.data), 0.0)
    y = conv(y, params.ffn_w2.data, params.ffn_b2.data)
    return per_voxel + y[idx]


def naive_vsa_oracle(x, local_xyz, seg: SegmentTable, params: VsaParams) -> np.ndarray:
    """Per-voxel loop reference for inject_pe -> encode -> ConvFFN -> decode."""
    x = np.asarray(x.data if isinstance(x, DiffArray) else x, dtype=np.float64)
    local = np.asarray(local_xyz, dtype=np.float64)
    n = len(x)
    half = params.pe_bandwidth // 2
    w_pe, b_pe = params.w_pe.data, params.b_pe.data
    xp = np.empty_like(x)
    for i in range(n):
        feat = []
        for a in range(3):
            args = [(2.0 ** j * math.pi) * local[i, a] for j in range(half)]
            feat += [math.sin(v) for v in args] + [math.cos(v) for v in args]
        xp[i] = x[i] + np.asarray(feat) @ w_pe + b_pe

    k, d = params.k, params.d
    lat = params.latent.data
    wk, wv, wq = params.w_key.data, params.w_value.data, params.w_query.data
    members = [[] for _ in range(seg.m)]
    for i, j in enumerate(seg.seg_of_point):
        members[j].append(i)

    hidden = np.zeros((seg.m, k, d))
    for j, pts in enumerate(members):
        xs = xp[pts]
        logits = (xs @ wk) @ lat.T                     # points x k
        logits = logits - logits.max(axis=0)
        e = np.exp(logits)
        attn = e / e.sum(axis=0)
        hidden[j] = attn.T @ (xs @ wv)

    site = {tuple(c): j for j, c in enumerate(seg.voxel_coords.tolist())}
    offs = conv_offsets()

    def conv(src, w, b):
        out = np.zeros_like(src)
        for j, c in enumerate(seg.voxel_coords.tolist()):
            acc = b.copy()
            for t, o in enumerate(offs.tolist()):
                nb = site.get((c[0] + o[0], c[1] + o[1], c[2] + o[2]))
                if nb is None:
                    continue
                for g in range(k):
                    acc[g] += src[nb, g] @ w[t, g]
            out[j] = acc
        return out

    y = np.maximum(conv(hidden, params.ffn_w1.data, params.ffn_b1.data), 0.0)
    refined = hidden + conv(y, params.ffn_w2.data, params.ffn_b2.data)

    out = np.zeros((n, d))
    for i in range(n):
        h = refined[seg.seg_of_point[i]]
        keys = h @ params.w_dec_key.data
        vals = h @ params.w_dec_value.data
        a = keys @ (xp[i] @ wq)
        a = np.exp(a - a.max())
        a /= a.sum()
        out[i] = a @ vals
    return out
