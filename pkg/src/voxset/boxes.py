"""Bird's-eye-view box geometry: rotated IoU, residual codec, NMS and anchors.

Boxes are rows ``(x, y, z, l, w, h, yaw)``; :class:`~voxset.pcio.Box3D`
instances are accepted wherever a single box is expected.
"""
from __future__ import annotations

import math

import numpy as np

from .pcio import Box3D

__all__ = [
    "box_corners_bev", "clip_convex", "polygon_area", "iou_bev", "iou_bev_pairs", "iou_bev_matrix",
    "encode_boxes", "decode_boxes", "nms", "make_anchors", "wrap_yaw",
]


def _row(box) -> np.ndarray:
    return box.as_array() if isinstance(box, Box3D) else np.asarray(box, dtype=np.float64)


def wrap_yaw(yaw):
    """Map angles into (-pi, pi]."""
    y = np.mod(np.asarray(yaw, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    return np.where(y == -np.pi, np.pi, y)


def box_corners_bev(box) -> np.ndarray:
    """Counter-clockwise footprint corners, shape 4 x 2."""
    b = _row(box)
    c, s = math.cos(b[6]), math.sin(b[6])
    hl, hw = b[3] / 2, b[4] / 2
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return local @ np.array([[c, s], [-s, c]]) + b[:2]


def polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject, clip) -> list:
    """Sutherland-Hodgman clipping of a polygon by a convex CCW polygon."""
    out = [tuple(p) for p in subject]
    clip = [tuple(p) for p in clip]
    for i in range(len(clip)):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % len(clip)]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        prev = inp[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in inp:
            side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if side >= 0:
                if prev_side < 0:
                    t = prev_side / (prev_side - side)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif prev_side >= 0:
                t = prev_side / (prev_side - side)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, prev_side = cur, side
    return out


def iou_bev(a, b) -> float:
    """Intersection over union of two rotated footprints."""
    ra, rb = _row(a), _row(b)
    area_a = ra[3] * ra[4]
    area_b = rb[3] * rb[4]
    if area_a <= 0 or area_b <= 0:
        return 0.0
    reach = (math.hypot(ra[3], ra[4]) + math.hypot(rb[3], rb[4])) / 2
    if math.hypot(ra[0] - rb[0], ra[1] - rb[1]) >= reach:
        return 0.0
    inter = polygon_area(clip_convex(box_corners_bev(ra), box_corners_bev(rb)))
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0))


def _corners_batch(b: np.ndarray) -> np.ndarray:
    c, s = np.cos(b[:, 6]), np.sin(b[:, 6])
    hl, hw = b[:, 3] / 2, b[:, 4] / 2
    lx = np.stack([hl, -hl, -hl, hl], axis=1)
    ly = np.stack([hw, hw, -hw, -hw], axis=1)
    x = lx * c[:, None] - ly * s[:, None] + b[:, 0:1]
    y = lx * s[:, None] + ly * c[:, None] + b[:, 1:2]
    return np.stack([x, y], axis=2)


def _inside_batch(pts: np.ndarray, poly: np.ndarray, tol: float) -> np.ndarray:
    # pts: P x q x 2, poly: P x 4 x 2 counter-clockwise
    a = poly[:, None, :, :]
    e = np.roll(poly, -1, axis=1)[:, None, :, :] - a
    d = pts[:, :, None, :] - a
    cross = e[..., 0] * d[..., 1] - e[..., 1] * d[..., 0]
    return np.all(cross >= -tol, axis=2)


def iou_bev_pairs(a, b) -> np.ndarray:
    """Row-wise IoU of two equally long box arrays.

    Builds the intersection polygon from contained corners and edge
    crossings, orders it by angle and applies the shoelace formula.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    p = len(a)
    if p == 0:
        return np.zeros(0)
    ca, cb = _corners_batch(a), _corners_batch(b)
    tol = 1e-9
    in_a = _inside_batch(ca, cb, tol)
    in_b = _inside_batch(cb, ca, tol)
    # edge i of a against edge j of b
    a0, a1 = ca[:, :, None, :], np.roll(ca, -1, axis=1)[:, :, None, :]
    b0, b1 = cb[:, None, :, :], np.roll(cb, -1, axis=1)[:, None, :, :]
    r, q = a1 - a0, b1 - b0
    den = r[..., 0] * q[..., 1] - r[..., 1] * q[..., 0]
    w = b0 - a0
    safe = np.where(den == 0, 1.0, den)
    t = (w[..., 0] * q[..., 1] - w[..., 1] * q[..., 0]) / safe
    u = (w[..., 0] * r[..., 1] - w[..., 1] * r[..., 0]) / safe
    hit = (den != 0) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    cross = (a0 + t[..., None] * r).reshape(p, 16, 2)
    pts = np.concatenate([ca, cb, cross], axis=1)
    valid = np.concatenate([in_a, in_b, hit.reshape(p, 16)], axis=1)
    cnt = valid.sum(axis=1)
    centre = (pts * valid[..., None]).sum(axis=1) / np.maximum(cnt, 1)[:, None]
    ang = np.arctan2(pts[..., 1] - centre[:, 1:2], pts[..., 0] - centre[:, 0:1])
    ang = np.where(valid, ang, np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    srt = np.take_along_axis(pts, order[..., None], axis=1)
    vsrt = np.take_along_axis(valid, order, axis=1)
    first = srt[:, :1, :]
    srt = np.where(vsrt[..., None], srt, first)
    nxt = np.roll(srt, -1, axis=1)
    inter = 0.5 * np.abs((srt[..., 0] * nxt[..., 1] - srt[..., 1] * nxt[..., 0]).sum(axis=1))
    inter = np.where(cnt >= 3, inter, 0.0)
    area_a = a[:, 3] * a[:, 4]
    area_b = b[:, 3] * b[:, 4]
    union = area_a + area_b - inter
    out = np.where((area_a > 0) & (area_b > 0), inter / np.where(union > 0, union, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)


def iou_bev_matrix(a, b) -> np.ndarray:
    """Pairwise IoU; pairs whose circumcircles cannot touch are skipped."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(a), len(b)))
    if not len(a) or not len(b):
        return out
    ra = np.hypot(a[:, 3], a[:, 4]) / 2
    rb = np.hypot(b[:, 3], b[:, 4]) / 2
    dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    ii, jj = np.nonzero(dist < ra[:, None] + rb[None, :])
    out[ii, jj] = iou_bev_pairs(a[ii], b[jj])
    return out


def _single(box) -> bool:
    return isinstance(box, Box3D) or np.ndim(box) == 1


def encode_boxes(gt, anchor) -> np.ndarray:
    """Residuals of ground truth against anchors, normalized by anchor size."""
    g = np.atleast_2d(_row(gt) if isinstance(gt, Box3D) else np.asarray(gt, dtype=np.float64))
    a = np.atleast_2d(_row(anchor) if isinstance(anchor, Box3D) else np.asarray(anchor, dtype=np.float64))
    if (g[:, 3:6] <= 0).any() or (a[:, 3:6] <= 0).any():
        raise ValueError("box dims must be positive")
    diag = np.sqrt(a[:, 3] ** 2 + a[:, 4] ** 2)
    out = np.column_stack([
        (g[:, 0] - a[:, 0]) / diag,
        (g[:, 1] - a[:, 1]) / diag,
        (g[:, 2] - a[:, 2]) / a[:, 5],
        np.log(g[:, 3] / a[:, 3]),
        np.log(g[:, 4] / a[:, 4]),
        np.log(g[:, 5] / a[:, 5]),
        g[:, 6] - a[:, 6],
    ])
    return out[0] if _single(gt) and _single(anchor) else out


def decode_boxes(residuals, anchor) -> np.ndarray:
    r = np.atleast_2d(np.asarray(residuals, dtype=np.float64))
    a = np.atleast_2d(_row(anchor) if isinstance(anchor, Box3D) else np.asarray(anchor, dtype=np.float64))
    if (a[:, 3:6] <= 0).any():
        raise ValueError("anchor dims must be positive")
    diag = np.sqrt(a[:, 3] ** 2 + a[:, 4] ** 2)
    out = np.column_stack([
        r[:, 0] * diag + a[:, 0],
        r[:, 1] * diag + a[:, 1],
        r[:, 2] * a[:, 5] + a[:, 2],
        np.exp(r[:, 3]) * a[:, 3],
        np.exp(r[:, 4]) * a[:, 4],
        np.exp(r[:, 5]) * a[:, 5],
        r[:, 6] + a[:, 6],
    ])
    return out[0] if _single(residuals) and _single(anchor) else out


def nms(boxes, scores, iou_thr: float = 0.1, score_thr: float = 0.3) -> np.ndarray:
    """Greedy suppression in descending score order; equal scores keep the lower index first."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    cand = np.flatnonzero(scores > score_thr)
    cand = cand[np.argsort(-scores[cand], kind="stable")]
    keep = []
    for i in cand:
        if all(iou_bev(boxes[i], boxes[j]) <= iou_thr for j in keep):
            keep.append(int(i))
    return np.asarray(keep, dtype=np.int64)


def make_anchors(bev_shape, cell_size: float, origin, size=(3.9, 1.6, 1.56), z: float = -0.82,
                 yaws=(0.0, math.pi / 2)) -> np.ndarray:
    """One anchor per yaw at every BEV cell centre, ordered cell-major then yaw."""
    h, w = bev_shape
    xs = origin[0] + (np.arange(h) + 0.5) * cell_size
    ys = origin[1] + (np.arange(w) + 0.5) * cell_size
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    n_cells = h * w
    r = len(yaws)
    out = np.empty((n_cells, r, 7))
    out[:, :, 0] = gx.reshape(-1, 1)
    out[:, :, 1] = gy.reshape(-1, 1)
    out[:, :, 2] = z
    out[:, :, 3:6] = size
    out[:, :, 6] = np.asarray(yaws)
    return out.reshape(-1, 7)
