"""Desk-scale training and evaluation on synthetic scenes."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .backbone import BackboneConfig
from .detect import DetectConfig, LossConfig, evaluate, match_anchors, point_labels, total_loss
from .model import DetectorModel
from .optim import AdamW
from .pcio import SceneSpec, boxes_to_array, crop_range, gen_synthetic_scene

__all__ = ["TrainConfig", "TrainingDivergedError", "PreparedScene", "scene_seed",
           "prepare_scene", "train_model", "evaluate_model", "train_toy", "METRIC_COLUMNS"]

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "loss", "loss_cls", "loss_reg", "loss_dir", "loss_seg", "num_pos",
                  "lr", "recall", "ap")

TRAIN, EVAL, INIT, SHUFFLE = 0, 1, 2, 3


def _toy_backbone() -> BackboneConfig:
    return BackboneConfig(point_range=SceneSpec().point_range)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 650
    lr: float = 2e-3
    min_lr_ratio: float = 0.05
    warmup: int = 30
    weight_decay: float = 1e-2
    clip_norm: float = 10.0
    train_scenes: int = 160
    eval_scenes: int = 50
    eval_every: int = 0
    precision: str = "f32"
    scene: SceneSpec = field(default_factory=SceneSpec)
    backbone: BackboneConfig = field(default_factory=_toy_backbone)
    detect: DetectConfig = field(default_factory=DetectConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        if tuple(self.scene.point_range) != tuple(self.backbone.point_range):
            raise ValueError("scene and backbone point ranges differ")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def lr_at(self, step: int) -> float:
        if step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        span = max(self.steps - self.warmup, 1)
        frac = min((step - self.warmup) / span, 1.0)
        return self.lr * (self.min_lr_ratio + (1 - self.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


class TrainingDivergedError(RuntimeError):
    pass


def scene_seed(seed: int, split: int, index: int) -> np.random.SeedSequence:
    """Independent stream per (run seed, split, scene index)."""
    return np.random.SeedSequence([int(seed), split, index])


@dataclass
class PreparedScene:
    cloud: object
    boxes: np.ndarray
    geometry: object
    targets: object
    point_targets: np.ndarray


def prepare_scene(model: DetectorModel, cloud, boxes, loss_cfg: LossConfig) -> PreparedScene:
    cloud = crop_range(cloud, model.backbone_cfg.grid_spec(0))
    gts = boxes_to_array(boxes) if not isinstance(boxes, np.ndarray) else boxes.reshape(-1, 7)
    return PreparedScene(cloud, gts, model.geometry(cloud, with_pe=True),
                         match_anchors(model.anchors, gts, loss_cfg),
                         point_labels(cloud.xyz, gts))


def train_model(model: DetectorModel, scenes: list, cfg: TrainConfig, seed: int = 0,
                callback=None) -> list:
    """Run ``cfg.steps`` AdamW steps cycling through ``scenes``; returns the history."""
    opt = AdamW(model.arrays(), lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(scene_seed(seed, SHUFFLE, 0))
    order = []
    history = []
    for step in range(cfg.steps):
        if not order:
            order = list(rng.permutation(len(scenes)))
        sc = scenes[order.pop()]
        with dc.Tape() as tape:
            feats, out, seg_logits = model.forward(sc.geometry, train=True)
            loss, parts = total_loss(out, sc.targets, seg_logits, sc.point_targets, cfg.loss)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(f"loss became {value} at step {step}: {parts}")
        tape.backward(loss)
        lr = cfg.lr_at(step)
        opt.step(lr)
        rec = {"step": step, "loss": value, **parts, "lr": lr}
        history.append(rec)
        if callback is not None:
            callback(rec)
    return history


def evaluate_model(model: DetectorModel, scenes: list, iou: float = 0.5) -> dict:
    preds = [model.predict(sc.cloud) for sc in scenes]
    return evaluate(preds, [sc.boxes for sc in scenes], iou)


def train_toy(cfg: TrainConfig = TrainConfig(), seed: int = 0, callback=None):
    """Train on synthetic scenes and score on held-out ones.

    Returns ``(model, history, metrics)``; ``metrics`` carries recall and AP
    at IoU 0.5 on ``cfg.eval_scenes`` scenes plus the loss trend.
    """
    t0 = time.perf_counter()
    model = DetectorModel.init(cfg.backbone, cfg.detect, seed=scene_seed(seed, INIT, 0), dtype=cfg.dtype)

    def make(split, count):
        out = []
        for i in range(count):
            pc, boxes = gen_synthetic_scene(scene_seed(seed, split, i), cfg.scene)
            out.append(prepare_scene(model, pc, boxes, cfg.loss))
        return out

    train_set = make(TRAIN, cfg.train_scenes)
    eval_set = make(EVAL, cfg.eval_scenes)
    log.info("prepared %d train / %d eval scenes in %.1fs", len(train_set), len(eval_set),
             time.perf_counter() - t0)

    def on_step(rec):
        step = rec["step"]
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0 and step + 1 < cfg.steps:
            rec.update(evaluate_model(model, eval_set))
        if callback is not None:
            callback(rec)

    history = train_model(model, train_set, cfg, seed, on_step) if train_set else []
    metrics = evaluate_model(model, eval_set)
    if history:
        history[-1].update({"recall": metrics["recall"], "ap": metrics["ap"]})
        metrics["loss_first"] = history[0]["loss"]
        metrics["loss_last"] = float(np.mean([h["loss"] for h in history[-20:]]))
    metrics["seconds"] = time.perf_counter() - t0
    return model, history, metrics
