"""Stacked MLP + VSA feature extractor, BEV soft-pooling and the two-stride BEV CNN."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import BatchNormState, DiffArray
from .pcio import PointCloud, VoxelGridSpec, local_coords, voxelize
from .scatter import SegmentTable, build_segments, scatter_softmax, scatter_sum
from .vsa import VsaParams, fourier_pe, init_vsa_params, vsa_block

__all__ = [
    "BackboneConfig", "BevGrid", "SceneGeometry", "MlpParams", "ConvBN", "BackboneParams",
    "BevParams", "prepare_geometry", "init_backbone_params", "init_bev_params",
    "voxset_backbone", "bev_softpool", "bev_cnn",
]

log = logging.getLogger(__name__)

KITTI_RANGE = (0.0, -40.0, -3.0, 70.4, 40.0, 1.0)


@dataclass(frozen=True)
class BackboneConfig:
    point_range: tuple = KITTI_RANGE
    base_voxel: tuple = (0.32, 0.32, 4.0)
    block_dims: tuple = (16, 32, 64, 128)
    latent_k: int = 8
    pe_bandwidth: int = 64
    pillar_size: float = 0.36
    bev_widths: tuple = (64, 64)
    in_features: int = 4

    def __post_init__(self):
        dims = tuple(self.block_dims)
        if len(dims) < 1 or any(b <= a for a, b in zip(dims, dims[1:])):
            raise ValueError(f"block_dims must be strictly increasing, got {dims}")
        if self.latent_k < 1:
            raise ValueError("latent_k must be >= 1")
        if self.pe_bandwidth < 2 or self.pe_bandwidth % 2:
            raise ValueError(f"pe_bandwidth must be even and >= 2, got {self.pe_bandwidth}")
        extent = [h - l for l, h in zip(self.point_range[:3], self.point_range[3:])]
        if any(e <= 0 for e in extent):
            raise ValueError(f"empty point range {self.point_range}")
        top = self.stage_voxel_sizes()[-1]
        if top[0] > extent[0] or top[1] > extent[1]:
            raise ValueError("last-stage voxels are larger than the grid range")

    @classmethod
    def waymo(cls, **kw) -> "BackboneConfig":
        return cls(point_range=(-75.2, -75.2, -2.0, 75.2, 75.2, 4.0), base_voxel=(0.32, 0.32, 6.0), **kw)

    @property
    def num_stages(self) -> int:
        return len(self.block_dims)

    @property
    def out_dim(self) -> int:
        return self.block_dims[-1]

    def stage_voxel_sizes(self) -> list:
        bx, by, bz = self.base_voxel
        return [(bx * 2 ** s, by * 2 ** s, bz) for s in range(len(self.block_dims))]

    def grid_spec(self, stage: int = 0) -> VoxelGridSpec:
        return VoxelGridSpec.from_range(self.point_range, self.stage_voxel_sizes()[stage])

    def pillar_spec(self) -> VoxelGridSpec:
        ez = self.point_range[5] - self.point_range[2]
        return VoxelGridSpec.from_range(self.point_range, (self.pillar_size, self.pillar_size, ez))

    @property
    def bev_shape(self) -> tuple:
        ex = self.point_range[3] - self.point_range[0]
        ey = self.point_range[4] - self.point_range[1]
        return (int(math.ceil(ex / self.pillar_size - 1e-9)), int(math.ceil(ey / self.pillar_size - 1e-9)))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class BevGrid:
    features: DiffArray      # H x W x C
    cell_size: float
    origin: tuple
    padded: tuple = (0, 0)

    @property
    def shape(self):
        return self.features.shape


@dataclass
class SceneGeometry:
    """Everything about a cloud that does not depend on learned weights."""

    inputs: np.ndarray
    segments: list
    local: list
    pillar_seg: SegmentTable
    pillar_cells: np.ndarray
    pe: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.inputs)


def prepare_geometry(pc: PointCloud, cfg: BackboneConfig, with_pe: bool = False) -> SceneGeometry:
    """Segment tables, local coordinates and pillar layout of one cloud.

    ``with_pe`` also caches the Fourier embeddings (about 1.5 KB per point
    per stage), worthwhile when the same cloud is run many times.
    """
    segs, locs = [], []
    for s in range(cfg.num_stages):
        spec = cfg.grid_spec(s)
        segs.append(build_segments(voxelize(pc, spec)))
        locs.append(local_coords(pc, spec))
    inputs = np.column_stack([locs[0], pc.intensity])
    pspec = cfg.pillar_spec()
    pvox = voxelize(pc, pspec)
    pvox[:, 2] = 0
    pseg = build_segments(pvox)
    w = cfg.bev_shape[1]
    cells = pseg.voxel_coords[:, 0] * w + pseg.voxel_coords[:, 1]
    pe = [fourier_pe(loc, cfg.pe_bandwidth) for loc in locs] if with_pe else []
    return SceneGeometry(inputs, segs, locs, pseg, cells, pe)


@dataclass
class MlpParams:
    w: DiffArray
    gamma: DiffArray
    beta: DiffArray
    state: BatchNormState


@dataclass
class BackboneParams:
    mlps: list
    blocks: list

    def arrays(self) -> dict:
        out = {}
        for i, (mlp, blk) in enumerate(zip(self.mlps, self.blocks)):
            out[f"stage{i}.mlp.w"] = mlp.w
            out[f"stage{i}.mlp.gamma"] = mlp.gamma
            out[f"stage{i}.mlp.beta"] = mlp.beta
            for name, arr in blk.arrays().items():
                out[f"stage{i}.vsa.{name}"] = arr
        return out

    def bn_states(self) -> dict:
        out = {}
        for i, (mlp, blk) in enumerate(zip(self.mlps, self.blocks)):
            out[f"stage{i}.mlp.bn"] = mlp.state
            out[f"stage{i}.vsa.bn"] = blk.bn_state
        return out


def _mlp(rng, d_in, d_out, dtype) -> MlpParams:
    bound = 1.0 / math.sqrt(d_in)
    return MlpParams(
        DiffArray(rng.uniform(-bound, bound, (d_in, d_out)).astype(dtype), requires_grad=True),
        DiffArray(np.ones(d_out, dtype=dtype), requires_grad=True),
        DiffArray(np.zeros(d_out, dtype=dtype), requires_grad=True),
        BatchNormState(d_out, dtype=dtype),
    )


def init_backbone_params(cfg: BackboneConfig, rng=None, dtype=np.float64) -> BackboneParams:
    rng = np.random.default_rng(rng)
    mlps, blocks = [], []
    d_prev = cfg.in_features
    for d in cfg.block_dims:
        mlps.append(_mlp(rng, d_prev, d, dtype))
        blocks.append(init_vsa_params(d, d, cfg.latent_k, cfg.pe_bandwidth, rng, dtype))
        d_prev = d
    return BackboneParams(mlps, blocks)


def voxset_backbone(pc, cfg: BackboneConfig, params: BackboneParams, train: bool = True,
                    geometry: SceneGeometry | None = None) -> DiffArray:
    """Point-wise features, one row per input point, width ``cfg.out_dim``."""
    geo = geometry if geometry is not None else prepare_geometry(pc, cfg)
    dtype = params.mlps[0].w.dtype
    x = DiffArray(geo.inputs.astype(dtype))
    for s in range(cfg.num_stages):
        mlp = params.mlps[s]
        x = dc.relu(dc.batchnorm1d(x @ mlp.w, mlp.gamma, mlp.beta, mlp.state, train=train))
        pe = geo.pe[s] if geo.pe else None
        x = vsa_block(x, geo.local[s], geo.segments[s], params.blocks[s], train=train, pe=pe)
    return x


def bev_softpool(feats: DiffArray, pc, cfg: BackboneConfig,
                 geometry: SceneGeometry | None = None) -> BevGrid:
    """Channel-wise softmax-weighted sum of point features per pillar; empty pillars are 0."""
    geo = geometry if geometry is not None else prepare_geometry(pc, cfg)
    if feats.shape[0] != geo.n:
        raise dc.DimensionError(f"{feats.shape[0]} feature rows for {geo.n} points")
    weights = scatter_softmax(feats, geo.pillar_seg)
    pooled = scatter_sum(weights * feats, geo.pillar_seg)
    h, w = cfg.bev_shape
    grid = dc.place_rows(pooled, geo.pillar_cells, h * w)
    return BevGrid(dc.reshape(grid, (h, w, feats.shape[1])), cfg.pillar_size,
                   tuple(cfg.point_range[:2]))


@dataclass
class ConvBN:
    w: DiffArray
    gamma: DiffArray
    beta: DiffArray
    state: BatchNormState


@dataclass
class BevParams:
    branch1: list = field(default_factory=list)
    branch2: list = field(default_factory=list)

    def arrays(self) -> dict:
        out = {}
        for name, branch in (("bev.b1", self.branch1), ("bev.b2", self.branch2)):
            for i, c in enumerate(branch):
                out[f"{name}.{i}.w"] = c.w
                out[f"{name}.{i}.gamma"] = c.gamma
                out[f"{name}.{i}.beta"] = c.beta
        return out

    def bn_states(self) -> dict:
        out = {}
        for name, branch in (("bev.b1", self.branch1), ("bev.b2", self.branch2)):
            for i, c in enumerate(branch):
                out[f"{name}.{i}.bn"] = c.state
        return out


def _convbn(rng, c_in, c_out, dtype) -> ConvBN:
    bound = 1.0 / math.sqrt(9 * c_in)
    return ConvBN(
        DiffArray(rng.uniform(-bound, bound, (3, 3, c_in, c_out)).astype(dtype), requires_grad=True),
        DiffArray(np.ones(c_out, dtype=dtype), requires_grad=True),
        DiffArray(np.zeros(c_out, dtype=dtype), requires_grad=True),
        BatchNormState(c_out, dtype=dtype),
    )


def init_bev_params(cfg: BackboneConfig, rng=None, dtype=np.float64) -> BevParams:
    rng = np.random.default_rng(rng)
    c1, c2 = cfg.bev_widths
    b1 = [_convbn(rng, cfg.out_dim, c1, dtype)] + [_convbn(rng, c1, c1, dtype) for _ in range(2)]
    b2 = [_convbn(rng, cfg.out_dim, c2, dtype)] + [_convbn(rng, c2, c2, dtype) for _ in range(2)]
    return BevParams(b1, b2)


def _conv_bn_relu(x: DiffArray, p: ConvBN, stride: int, train: bool) -> DiffArray:
    y = dc.conv2d(x, p.w, None, stride=stride, padding=1)
    h, w, c = y.shape
    y = dc.batchnorm1d(dc.reshape(y, (h * w, c)), p.gamma, p.beta, p.state, train=train)
    return dc.reshape(dc.relu(y), (h, w, c))


def bev_cnn(grid: BevGrid, params: BevParams, train: bool = True) -> BevGrid:
    """Full-resolution branch and a stride-2 branch (upsampled back), concatenated."""
    x = grid.features
    h, w, _ = x.shape
    a = x
    for p in params.branch1:
        a = _conv_bn_relu(a, p, 1, train)
    ph, pw = h % 2, w % 2
    b = x
    if ph or pw:
        log.debug("padding BEV map %sx%s by (%d, %d) for the stride-2 branch", h, w, ph, pw)
        b = _pad_end(b, ph, pw)
    b = _conv_bn_relu(b, params.branch2[0], 2, train)
    for p in params.branch2[1:]:
        b = _conv_bn_relu(b, p, 1, train)
    b = dc.upsample2x(b)
    if ph or pw:
        b = dc.crop2d(b, h, w)
    return BevGrid(dc.concat([a, b], axis=-1), grid.cell_size, grid.origin, (ph, pw))


def _pad_end(x: DiffArray, ph: int, pw: int) -> DiffArray:
    h, w, c = x.shape
    out = np.zeros((h + ph, w + pw, c), dtype=x.dtype)
    out[:h, :w] = x.data
    return dc.make_op(out, (x,), lambda g: (g[:h, :w],))
