"""Voxel set attention: linear-cost point-cloud attention and a toy 3D detector on numpy."""
from .backbone import BackboneConfig, bev_cnn, bev_softpool, voxset_backbone
from .diffcore import DiffArray, Tape, backward, grad_check
from .estimators import VoxSetDetector, VoxSetEncoder, check_point_cloud
from .pcio import Box3D, PointCloud, VoxelGridSpec, gen_synthetic_scene
from .scatter import SegmentTable, build_segments
from .vsa import VsaParams, naive_vsa_oracle, vsa_block

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "bev_cnn", "bev_softpool", "voxset_backbone",
    "DiffArray", "Tape", "backward", "grad_check",
    "VoxSetDetector", "VoxSetEncoder", "check_point_cloud",
    "Box3D", "PointCloud", "VoxelGridSpec", "gen_synthetic_scene",
    "SegmentTable", "build_segments",
    "VsaParams", "naive_vsa_oracle", "vsa_block",
]
