"""Anchor head, target assignment, the composite detection loss and evaluation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .boxes import decode_boxes, encode_boxes, iou_bev_matrix, make_anchors, nms, wrap_yaw
from .diffcore import DiffArray
from .pcio import points_in_box

__all__ = [
    "LossConfig", "DetectConfig", "HeadParams", "AnchorTargets", "HeadOutputs",
    "init_head_params", "detection_head", "segmentation_head", "anchors_for",
    "match_anchors", "point_labels", "sigmoid_focal_loss", "smooth_l1_loss",
    "box_regression_loss", "bce_with_logits", "total_loss", "predict_boxes",
    "oracle_head_outputs", "evaluate", "DIR_OFFSET", "direction_bin",
]

# direction bins split the circle at DIR_OFFSET and DIR_OFFSET + pi, away
# from the axis-aligned headings that dominate driving scenes
DIR_OFFSET = math.pi / 4


def direction_bin(yaw) -> np.ndarray:
    """1 where ``yaw`` lies in (DIR_OFFSET, DIR_OFFSET + pi) modulo 2 pi, else 0."""
    return (wrap_yaw(np.asarray(yaw, dtype=np.float64) - DIR_OFFSET) > 0).astype(np.float64)


@dataclass(frozen=True)
class LossConfig:
    iou_match: float = 0.6
    iou_unmatch: float = 0.45
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0 / 9.0
    dir_bins: int = 2
    w_cls: float = 1.0
    w_reg: float = 2.0
    w_dir: float = 0.2
    w_seg: float = 1.0

    def __post_init__(self):
        if not 0 <= self.iou_unmatch < self.iou_match <= 1:
            raise ValueError("need 0 <= iou_unmatch < iou_match <= 1")
        if self.dir_bins != 2:
            raise ValueError("only two direction bins are supported")


@dataclass(frozen=True)
class DetectConfig:
    anchor_size: tuple = (3.9, 1.6, 1.56)
    anchor_z: float = -0.82
    anchor_yaws: tuple = (0.0, math.pi / 2)
    nms_iou: float = 0.1
    score_thr: float = 0.3
    pre_nms_top: int = 100

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_yaws)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class HeadParams:
    w_cls: DiffArray
    b_cls: DiffArray
    w_reg: DiffArray
    b_reg: DiffArray
    w_dir: DiffArray
    b_dir: DiffArray
    w_seg: DiffArray
    b_seg: DiffArray

    def arrays(self) -> dict:
        return {f"head.{k}": v for k, v in vars(self).items()}


@dataclass
class HeadOutputs:
    cls: DiffArray      # N anchors
    reg: DiffArray      # N x 7
    dir: DiffArray      # N


@dataclass
class AnchorTargets:
    labels: np.ndarray        # 1 positive, 0 negative, -1 ignored
    matched: np.ndarray       # gt index per anchor, -1 if none
    reg_targets: np.ndarray   # N x 7, zero outside positives
    dir_targets: np.ndarray   # N, direction_bin of the matched gt yaw
    num_pos: int

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)


def init_head_params(channels: int, anchors_per_cell: int = 2, rng=None, dtype=np.float64,
                     prior: float = 0.01, point_channels: int | None = None) -> HeadParams:
    """``channels`` is the fused BEV width, ``point_channels`` the backbone width (default: same)."""
    rng = np.random.default_rng(rng)
    a = anchors_per_cell
    point_channels = channels if point_channels is None else point_channels

    def w(cols, rows=channels):
        bound = 1.0 / math.sqrt(rows)
        return DiffArray(rng.uniform(-bound, bound, (rows, cols)).astype(dtype), requires_grad=True)

    def small(cols):
        return DiffArray(rng.normal(0.0, 1e-3, (channels, cols)).astype(dtype), requires_grad=True)

    def b(cols, value=0.0):
        return DiffArray(np.full(cols, value, dtype=dtype), requires_grad=True)

    # box and direction outputs start near their biases: with full-scale random
    # weights the early regression gradient drives the BEV ReLUs under every
    # positive anchor to zero, and the classifier never recovers
    return HeadParams(w(a), b(a, -math.log((1 - prior) / prior)), small(7 * a), b(7 * a),
                      small(a), b(a), w(1, point_channels), b(1, -math.log((1 - prior) / prior)))


def detection_head(fused: DiffArray, params: HeadParams) -> HeadOutputs:
    """1x1 convolutions over the BEV map; anchors ordered cell-major then yaw."""
    h, w, c = fused.shape
    x = dc.reshape(fused, (h * w, c))
    a = params.w_cls.shape[1]
    cls = dc.reshape(x @ params.w_cls + params.b_cls, (h * w * a,))
    reg = dc.reshape(x @ params.w_reg + params.b_reg, (h * w * a, 7))
    dr = dc.reshape(x @ params.w_dir + params.b_dir, (h * w * a,))
    return HeadOutputs(cls, reg, dr)


def segmentation_head(point_feats: DiffArray, params: HeadParams) -> DiffArray:
    n = point_feats.shape[0]
    return dc.reshape(point_feats @ params.w_seg + params.b_seg, (n,))


def anchors_for(bev_shape, cell_size, origin, cfg: DetectConfig = DetectConfig()) -> np.ndarray:
    return make_anchors(bev_shape, cell_size, origin, cfg.anchor_size, cfg.anchor_z, cfg.anchor_yaws)


def match_anchors(anchors, gts, cfg: LossConfig = LossConfig(), iou: np.ndarray | None = None) -> AnchorTargets:
    """IoU >= iou_match positive, < iou_unmatch negative, otherwise ignored.

    The best anchor of every ground truth box is positive whenever that IoU is
    above zero.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 7)
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    reg = np.zeros((n, 7))
    dirs = np.zeros(n)
    if len(gts) == 0:
        return AnchorTargets(labels, matched, reg, dirs, 0)
    if iou is None:
        iou = iou_bev_matrix(anchors, gts)
    best_gt = iou.argmax(axis=1)
    best = iou[np.arange(n), best_gt]
    labels[(best >= cfg.iou_unmatch) & (best < cfg.iou_match)] = -1
    pos = best >= cfg.iou_match
    matched[pos] = best_gt[pos]
    for g in range(len(gts)):
        a = int(np.argmax(iou[:, g]))
        if iou[a, g] > 0:
            pos[a] = True
            matched[a] = g
    labels[pos] = 1
    idx = np.flatnonzero(pos)
    if len(idx):
        reg[idx] = encode_boxes(gts[matched[idx]], anchors[idx])
        dirs[idx] = direction_bin(gts[matched[idx], 6])
    return AnchorTargets(labels, matched, reg, dirs, int(len(idx)))


def point_labels(xyz, gts) -> np.ndarray:
    lab = np.zeros(len(xyz))
    for g in np.asarray(gts).reshape(-1, 7):
        lab[points_in_box(xyz, g)] = 1.0
    return lab


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def sigmoid_focal_loss(logits: DiffArray, targets, weights=None, alpha: float = 0.25,
                       gamma: float = 2.0) -> DiffArray:
    """Summed binary focal loss on logits."""
    x = logits.data
    t = np.asarray(targets, dtype=x.dtype)
    wts = np.ones_like(x) if weights is None else np.asarray(weights, dtype=x.dtype)
    p = np.exp(_log_sigmoid(x))
    logp, log1mp = _log_sigmoid(x), _log_sigmoid(-x)
    pos = -alpha * (1 - p) ** gamma * logp
    neg = -(1 - alpha) * p ** gamma * log1mp
    loss = (wts * (t * pos + (1 - t) * neg)).sum()

    def vjp(g):
        dpos = alpha * (gamma * (1 - p) ** gamma * p * logp - (1 - p) ** (gamma + 1))
        dneg = -(1 - alpha) * (gamma * p ** gamma * (1 - p) * log1mp - p ** (gamma + 1))
        return (g * wts * (t * dpos + (1 - t) * dneg),)

    return dc.make_op(np.asarray(loss, dtype=x.dtype), (logits,), vjp)


def _smooth_l1(d, beta):
    ad = np.abs(d)
    val = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(ad < beta, d / beta, np.sign(d))
    return val, grad


def smooth_l1_loss(pred: DiffArray, target, beta: float = 1.0 / 9.0) -> DiffArray:
    d = pred.data - np.asarray(target, dtype=pred.dtype)
    val, grad = _smooth_l1(d, beta)
    return dc.make_op(np.asarray(val.sum(), dtype=pred.dtype), (pred,), lambda g: (g * grad,))


def box_regression_loss(pred: DiffArray, target, beta: float = 1.0 / 9.0) -> DiffArray:
    """Smooth-L1 over P x 7 residuals; the yaw column compares sin(pred - target)."""
    t = np.asarray(target, dtype=pred.dtype)
    d = pred.data - t
    d_used = d.copy()
    d_used[:, 6] = np.sin(d[:, 6])
    val, grad = _smooth_l1(d_used, beta)
    grad[:, 6] *= np.cos(d[:, 6])
    return dc.make_op(np.asarray(val.sum(), dtype=pred.dtype), (pred,), lambda g: (g * grad,))


def bce_with_logits(logits: DiffArray, targets) -> DiffArray:
    """Summed binary cross-entropy on logits."""
    x = logits.data
    t = np.asarray(targets, dtype=x.dtype)
    loss = (-(t * _log_sigmoid(x) + (1 - t) * _log_sigmoid(-x))).sum()
    p = np.exp(_log_sigmoid(x))
    return dc.make_op(np.asarray(loss, dtype=x.dtype), (logits,), lambda g: (g * (p - t),))


def total_loss(preds: HeadOutputs, targets: AnchorTargets, point_seg_logits: DiffArray,
               point_targets, cfg: LossConfig = LossConfig()):
    """``w_seg*L_seg + (w_cls*L_cls + w_reg*L_reg) / N_p + w_dir*L_dir``.

    L_cls sums the focal loss over non-ignored anchors; L_reg sums smooth-L1
    over positives; L_dir is the mean direction cross-entropy over positives;
    L_seg is the point focal loss normalized by the foreground count.
    """
    n_p = max(targets.num_pos, 1)
    cls_t = (targets.labels == 1).astype(np.float64)
    cls_w = (targets.labels >= 0).astype(np.float64)
    l_cls = sigmoid_focal_loss(preds.cls, cls_t, cls_w, cfg.focal_alpha, cfg.focal_gamma)
    pos = targets.positives
    if len(pos):
        l_reg = box_regression_loss(dc.take_rows(preds.reg, pos), targets.reg_targets[pos],
                                    cfg.smooth_l1_beta)
        l_dir = dc.scale(bce_with_logits(dc.take_rows(preds.dir, pos), targets.dir_targets[pos]),
                         1.0 / len(pos))
    else:
        l_reg = dc.scale(dc.sum_all(preds.reg), 0.0)
        l_dir = dc.scale(dc.sum_all(preds.dir), 0.0)
    pt = np.asarray(point_targets, dtype=np.float64)
    l_seg = dc.scale(sigmoid_focal_loss(point_seg_logits, pt, None, cfg.focal_alpha, cfg.focal_gamma),
                     1.0 / max(pt.sum(), 1.0))
    total = (dc.scale(l_seg, cfg.w_seg)
             + dc.scale(dc.scale(l_cls, cfg.w_cls) + dc.scale(l_reg, cfg.w_reg), 1.0 / n_p)
             + dc.scale(l_dir, cfg.w_dir))
    parts = {"loss_cls": l_cls.item(), "loss_reg": l_reg.item(), "loss_dir": l_dir.item(),
             "loss_seg": l_seg.item(), "num_pos": targets.num_pos}
    return total, parts


def _sigmoid(x):
    return np.exp(_log_sigmoid(np.asarray(x, dtype=np.float64)))


def predict_boxes(preds: HeadOutputs, anchors, cfg: DetectConfig = DetectConfig()):
    """Decode the head into post-NMS boxes ``(K x 7)`` and scores."""
    scores = _sigmoid(preds.cls.data)
    cand = np.flatnonzero(scores > cfg.score_thr)
    cand = cand[np.argsort(-scores[cand], kind="stable")][: cfg.pre_nms_top]
    if not len(cand):
        return np.zeros((0, 7)), np.zeros(0)
    boxes = decode_boxes(preds.reg.data[cand].astype(np.float64), anchors[cand])
    boxes = np.atleast_2d(boxes)
    upper = _sigmoid(preds.dir.data[cand]) > 0.5
    r = DIR_OFFSET + np.mod(boxes[:, 6] - DIR_OFFSET, np.pi)
    boxes[:, 6] = wrap_yaw(np.where(upper, r, r - np.pi))
    keep = nms(boxes, scores[cand], cfg.nms_iou, cfg.score_thr)
    return boxes[keep], scores[cand][keep]


def oracle_head_outputs(anchors, gts, logit: float = 20.0) -> HeadOutputs:
    """Head outputs that encode the given boxes exactly at their best anchors."""
    anchors = np.asarray(anchors, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 7)
    n = len(anchors)
    cls = np.full(n, -logit)
    reg = np.zeros((n, 7))
    dr = np.zeros(n)
    if len(gts):
        iou = iou_bev_matrix(anchors, gts)
        for g in range(len(gts)):
            a = int(np.argmax(iou[:, g]))
            cls[a] = logit
            reg[a] = encode_boxes(gts[g], anchors[a])
            dr[a] = logit if direction_bin(gts[g, 6]) else -logit
    return HeadOutputs(DiffArray(cls), DiffArray(reg), DiffArray(dr))


def evaluate(preds, gts, iou: float = 0.5) -> dict:
    """Recall and 11-point interpolated AP over a list of scenes.

    ``preds`` holds one ``(boxes, scores)`` pair per scene, ``gts`` one box
    array per scene.
    """
    records = []
    total_gt = 0
    for s, ((boxes, scores), gt) in enumerate(zip(preds, gts)):
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 7)
        total_gt += len(gt)
        for i, sc in enumerate(np.asarray(scores).reshape(-1)):
            records.append((-float(sc), s, i))
    records.sort()
    taken = [np.zeros(len(np.asarray(g).reshape(-1, 7)), dtype=bool) for g in gts]
    ious = [iou_bev_matrix(np.asarray(b).reshape(-1, 7), np.asarray(g).reshape(-1, 7))
            for (b, _), g in zip(preds, gts)]
    tp = np.zeros(len(records))
    for r, (_, s, i) in enumerate(records):
        row = ious[s][i] if ious[s].size else np.zeros(0)
        if row.size:
            cand = np.where(taken[s], -1.0, row)
            j = int(np.argmax(cand))
            if cand[j] >= iou:
                taken[s][j] = True
                tp[r] = 1
    ctp = np.cumsum(tp)
    recall_curve = ctp / max(total_gt, 1)
    precision = ctp / np.arange(1, len(records) + 1) if len(records) else np.zeros(0)
    ap = 0.0
    for r in np.linspace(0, 1, 11):
        mask = recall_curve >= r - 1e-12
        ap += (precision[mask].max() if mask.any() else 0.0) / 11
    recall = float(ctp[-1] / total_gt) if len(records) and total_gt else (1.0 if total_gt == 0 else 0.0)
    return {"recall": recall, "ap": float(ap), "num_gt": total_gt, "num_pred": len(records)}
