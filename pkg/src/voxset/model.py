"""Single-stage detector assembled from the backbone, BEV network and anchor head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import (BackboneConfig, BackboneParams, BevParams, SceneGeometry, bev_cnn,
                       bev_softpool, init_backbone_params, init_bev_params, prepare_geometry,
                       voxset_backbone)
from .detect import (DetectConfig, HeadParams, anchors_for, detection_head, init_head_params,
                     predict_boxes, segmentation_head)
from .pcio import PointCloud, crop_range

__all__ = ["DetectorModel"]


@dataclass
class DetectorModel:
    backbone_cfg: BackboneConfig
    detect_cfg: DetectConfig
    backbone: BackboneParams
    bev: BevParams
    head: HeadParams
    _anchors: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def init(cls, backbone_cfg: BackboneConfig, detect_cfg: DetectConfig = DetectConfig(),
             seed=0, dtype=np.float64) -> "DetectorModel":
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        r1, r2, r3 = (np.random.default_rng(s) for s in ss.spawn(3))
        return cls(
            backbone_cfg, detect_cfg,
            init_backbone_params(backbone_cfg, r1, dtype),
            init_bev_params(backbone_cfg, r2, dtype),
            init_head_params(sum(backbone_cfg.bev_widths), detect_cfg.anchors_per_cell, r3, dtype,
                             point_channels=backbone_cfg.out_dim),
        )

    @property
    def dtype(self):
        return self.head.w_cls.dtype

    @property
    def anchors(self) -> np.ndarray:
        if self._anchors is None:
            cfg = self.backbone_cfg
            self._anchors = anchors_for(cfg.bev_shape, cfg.pillar_size, cfg.point_range[:2], self.detect_cfg)
        return self._anchors

    def arrays(self) -> dict:
        out = dict(self.backbone.arrays())
        out.update(self.bev.arrays())
        out.update(self.head.arrays())
        return out

    def bn_states(self) -> dict:
        out = dict(self.backbone.bn_states())
        out.update(self.bev.bn_states())
        return out

    def geometry(self, pc: PointCloud, with_pe: bool = False) -> SceneGeometry:
        return prepare_geometry(pc, self.backbone_cfg, with_pe)

    def forward(self, geo: SceneGeometry, train: bool = True):
        """Return ``(point_features, head_outputs, point_seg_logits)``."""
        cfg = self.backbone_cfg
        feats = voxset_backbone(None, cfg, self.backbone, train=train, geometry=geo)
        grid = bev_softpool(feats, None, cfg, geometry=geo)
        fused = bev_cnn(grid, self.bev, train=train)
        return feats, detection_head(fused.features, self.head), segmentation_head(feats, self.head)

    def predict(self, pc: PointCloud):
        """Post-NMS boxes and scores for one cloud (eval mode)."""
        pc = crop_range(pc, self.backbone_cfg.grid_spec(0))
        _, out, _ = self.forward(self.geometry(pc), train=False)
        return predict_boxes(out, self.anchors, self.detect_cfg)
