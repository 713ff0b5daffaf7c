"""scikit-learn style wrappers around the backbone and the toy detector."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .backbone import BackboneConfig, prepare_geometry, voxset_backbone
from .detect import DetectConfig, LossConfig
from .model import DetectorModel
from .pcio import Box3D, PointCloud, boxes_to_array, crop_range
from .training import TrainConfig, evaluate_model, prepare_scene, train_model

__all__ = ["check_point_cloud", "check_boxes", "VoxSetEncoder", "VoxSetDetector"]

_DTYPES = {"f32": np.float32, "f64": np.float64}


def check_point_cloud(X) -> PointCloud:
    """Coerce a PointCloud or an ``n x 3`` / ``n x 4`` array (xyz[, intensity])."""
    if isinstance(X, PointCloud):
        return X
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] not in (3, 4):
        raise ValueError(f"expected an n x 3 or n x 4 point array, got shape {arr.shape}")
    if len(arr) == 0:
        raise ValueError("point cloud is empty")
    if not np.isfinite(arr).all():
        raise ValueError("point cloud contains NaN or infinite values")
    inten = arr[:, 3] if arr.shape[1] == 4 else np.zeros(len(arr))
    return PointCloud(arr[:, :3], inten)


def check_boxes(y) -> np.ndarray:
    """Coerce a list of Box3D or a ``k x 7`` array into a ``k x 7`` float array."""
    if len(y) and isinstance(y[0], Box3D):
        return boxes_to_array(y)
    arr = np.asarray(y, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 7))
    if arr.ndim != 2 or arr.shape[1] != 7:
        raise ValueError(f"expected k x 7 boxes, got shape {arr.shape}")
    if np.any(arr[:, 3:6] <= 0):
        raise ValueError("box dims must be positive")
    return arr


def _check_precision(precision):
    if precision not in _DTYPES:
        raise ValueError(f"precision must be 'f32' or 'f64', got {precision!r}")
    return _DTYPES[precision]


class VoxSetEncoder(TransformerMixin, BaseEstimator):
    """Per-point VoxSeT features.

    ``fit`` draws the weights from ``random_state`` and calibrates the
    batch-norm running statistics with one train-mode pass over each cloud;
    ``transform`` returns an ``n x block_dims[-1]`` array for a single cloud.
    """

    def __init__(self, point_range=(0.0, -40.0, -3.0, 70.4, 40.0, 1.0), block_dims=(16, 32, 64, 128),
                 latent_k=8, pe_bandwidth=64, base_voxel=(0.32, 0.32, 4.0), precision="f64",
                 random_state=0):
        self.point_range = point_range
        self.block_dims = block_dims
        self.latent_k = latent_k
        self.pe_bandwidth = pe_bandwidth
        self.base_voxel = base_voxel
        self.precision = precision
        self.random_state = random_state

    def _config(self) -> BackboneConfig:
        return BackboneConfig(point_range=tuple(self.point_range), base_voxel=tuple(self.base_voxel),
                              block_dims=tuple(self.block_dims), latent_k=self.latent_k,
                              pe_bandwidth=self.pe_bandwidth)

    def fit(self, X, y=None):
        dtype = _check_precision(self.precision)
        self.config_ = self._config()
        self.model_ = DetectorModel.init(self.config_, seed=self.random_state, dtype=dtype)
        clouds = X if isinstance(X, (list, tuple)) else [X]
        for pc in clouds:
            pc = crop_range(check_point_cloud(pc), self.config_.grid_spec(0))
            if len(pc) >= 2:
                voxset_backbone(pc, self.config_, self.model_.backbone, train=True)
        self.n_features_in_ = 4
        self.n_features_out_ = self.config_.out_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        pc = check_point_cloud(X)
        grid = self.config_.grid_spec(0)
        inside = np.all((pc.xyz >= grid.origin) & (pc.xyz < np.add(grid.origin, grid.extent)), axis=1)
        if not inside.all():
            raise ValueError(f"{int((~inside).sum())} points lie outside the configured range")
        geo = prepare_geometry(pc, self.config_)
        return voxset_backbone(None, self.config_, self.model_.backbone, train=False, geometry=geo).data


class VoxSetDetector(BaseEstimator):
    """Single-class anchor detector trained from scratch on labelled clouds.

    ``fit(X, y)`` takes a list of clouds and a matching list of box sets
    (``k x 7`` arrays or Box3D lists). ``predict`` returns one
    ``(boxes, scores)`` pair per cloud; ``score`` is the 11-point AP at
    BEV IoU 0.5.
    """

    def __init__(self, steps=650, lr=2e-3, weight_decay=1e-2, warmup=30,
                 point_range=(0.0, -11.52, -3.0, 23.04, 11.52, 1.0), block_dims=(16, 32, 64, 128),
                 bev_widths=(64, 64), precision="f32", random_state=0):
        self.steps = steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.point_range = point_range
        self.block_dims = block_dims
        self.bev_widths = bev_widths
        self.precision = precision
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        base = TrainConfig()
        return replace(base, steps=int(self.steps), lr=float(self.lr), weight_decay=float(self.weight_decay),
                       warmup=int(self.warmup), precision=self.precision,
                       scene=replace(base.scene, point_range=tuple(self.point_range)),
                       backbone=replace(base.backbone, point_range=tuple(self.point_range),
                                        block_dims=tuple(self.block_dims), bev_widths=tuple(self.bev_widths)))

    def fit(self, X, y):
        _check_precision(self.precision)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} clouds but {len(y)} box sets")
        if len(X) == 0:
            raise ValueError("need at least one training cloud")
        cfg = self._train_config()
        self.model_ = DetectorModel.init(cfg.backbone, DetectConfig(), seed=self.random_state, dtype=cfg.dtype)
        scenes = [prepare_scene(self.model_, check_point_cloud(pc), check_boxes(b), LossConfig())
                  for pc, b in zip(X, y)]
        self.history_ = train_model(self.model_, scenes, cfg, seed=self.random_state)
        self.n_features_in_ = 4
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return [self.model_.predict(check_point_cloud(pc)) for pc in X]

    def score(self, X, y):
        check_is_fitted(self, "model_")
        scenes = [prepare_scene(self.model_, check_point_cloud(pc), check_boxes(b), LossConfig())
                  for pc, b in zip(X, y)]
        return evaluate_model(self.model_, scenes)["ap"]
