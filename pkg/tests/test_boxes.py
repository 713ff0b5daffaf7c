import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxset.boxes import (box_corners_bev, decode_boxes, encode_boxes, iou_bev, iou_bev_matrix,
                          iou_bev_pairs, make_anchors, nms, wrap_yaw)
from voxset.pcio import Box3D


def rand_boxes(rng, n, spread=3.0):
    return np.column_stack([
        rng.uniform(-spread, spread, (n, 3)),
        rng.uniform(0.3, 4.0, (n, 3)),
        rng.uniform(-math.pi, math.pi, n),
    ])


def mc_iou(a, b, rng, samples=1_000_000):
    """Monte-Carlo IoU: uniform samples over the bounding square of both footprints."""
    pts = np.vstack([box_corners_bev(a), box_corners_bev(b)])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    xy = rng.uniform(lo, hi, size=(samples, 2))

    def inside(box):
        c, s = math.cos(box[6]), math.sin(box[6])
        d = xy - box[:2]
        u = d[:, 0] * c + d[:, 1] * s
        v = -d[:, 0] * s + d[:, 1] * c
        return (np.abs(u) <= box[3] / 2) & (np.abs(v) <= box[4] / 2)

    ia, ib = inside(a), inside(b)
    union = (ia | ib).sum()
    return (ia & ib).sum() / union if union else 0.0


class TestIoU:
    def test_identical(self):
        b = [1, 2, 0, 4, 2, 1.5, 0.7]
        assert abs(iou_bev(b, b) - 1.0) < 1e-12

    def test_disjoint(self):
        assert iou_bev([0, 0, 0, 1, 1, 1, 0], [5, 5, 0, 1, 1, 1, 0]) == 0.0

    def test_offset_unit_squares(self):
        assert abs(iou_bev([0, 0, 0, 1, 1, 1, 0], [0.5, 0, 0, 1, 1, 1, 0]) - 1 / 3) < 1e-12

    def test_box3d_input(self):
        a = Box3D((0, 0, 0), (1, 1, 1), 0.0)
        b = Box3D((0.5, 0, 0), (1, 1, 1), 0.0)
        assert abs(iou_bev(a, b) - 1 / 3) < 1e-12

    def test_rotated_square_in_square(self):
        # a unit square turned 45 degrees inside a 2x2 square: intersection is the whole unit square
        assert abs(iou_bev([0, 0, 0, 2, 2, 1, 0], [0, 0, 0, 1, 1, 1, math.pi / 4]) - 0.25) < 1e-12

    def test_half_turn_invariant(self):
        a = [0.3, -0.2, 0, 4, 1.7, 1.5, 0.4]
        b = [0.1, 0.5, 0, 3.6, 1.6, 1.5, -0.3]
        b_flip = list(b)
        b_flip[6] += math.pi
        assert abs(iou_bev(a, b) - iou_bev(a, b_flip)) < 1e-12

    def test_degenerate(self):
        assert iou_bev([0, 0, 0, 0, 1, 1, 0], [0, 0, 0, 1, 1, 1, 0]) == 0.0

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(0)
        a, b = rand_boxes(rng, 300, 1.5), rand_boxes(rng, 300, 1.5)
        fwd = np.array([iou_bev(x, y) for x, y in zip(a, b)])
        bwd = np.array([iou_bev(y, x) for x, y in zip(a, b)])
        assert np.abs(fwd - bwd).max() < 1e-12
        assert fwd.min() >= 0 and fwd.max() <= 1

    def test_vectorized_matches_clipper(self):
        rng = np.random.default_rng(1)
        a, b = rand_boxes(rng, 2000, 1.5), rand_boxes(rng, 2000, 1.5)
        ref = np.array([iou_bev(x, y) for x, y in zip(a, b)])
        assert np.abs(iou_bev_pairs(a, b) - ref).max() < 1e-9

    def test_vectorized_shared_edges(self):
        rng = np.random.default_rng(2)
        a = rand_boxes(rng, 200, 1.0)
        a[:, 6] = rng.choice([0.0, math.pi / 2], 200)
        b = a.copy()
        b[:, 0] += rng.choice([0.0, 0.5, 1.0], 200)
        ref = np.array([iou_bev(x, y) for x, y in zip(a, b)])
        assert np.abs(iou_bev_pairs(a, b) - ref).max() < 1e-9

    def test_matrix(self):
        rng = np.random.default_rng(3)
        a, b = rand_boxes(rng, 15), rand_boxes(rng, 11)
        m = iou_bev_matrix(a, b)
        ref = np.array([[iou_bev(x, y) for y in b] for x in a])
        assert m.shape == (15, 11) and np.abs(m - ref).max() < 1e-9
        assert iou_bev_matrix(a[:0], b).shape == (0, 11)

    def test_monte_carlo(self):
        rng = np.random.default_rng(4)
        a, b = rand_boxes(rng, 12, 1.0), rand_boxes(rng, 12, 1.0)
        for x, y in zip(a, b):
            assert abs(iou_bev(x, y) - mc_iou(x, y, rng)) < 0.01

    def test_shapely(self):
        shapely = pytest.importorskip("shapely.geometry")
        rng = np.random.default_rng(5)
        for x, y in zip(rand_boxes(rng, 200, 1.5), rand_boxes(rng, 200, 1.5)):
            pa, pb = shapely.Polygon(box_corners_bev(x)), shapely.Polygon(box_corners_bev(y))
            ref = pa.intersection(pb).area / pa.union(pb).area
            assert abs(iou_bev(x, y) - ref) < 1e-9


class TestCodec:
    def test_zero(self):
        b = np.array([1, 2, -1, 3.9, 1.6, 1.56, 0.3])
        assert np.all(encode_boxes(b, b) == 0)

    def test_double_dims(self):
        a = np.array([0, 0, 0, 2, 1, 1.5, 0.0])
        g = a.copy()
        g[3:6] *= 2
        r = encode_boxes(g, a)
        assert np.allclose(r[3:6], math.log(2), atol=1e-15, rtol=0)

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        g, a = rand_boxes(rng, 10_000, 40), rand_boxes(rng, 10_000, 40)
        assert np.abs(decode_boxes(encode_boxes(g, a), a) - g).max() < 1e-12

    def test_single_rows(self):
        g = Box3D((1, 1, 0), (4, 2, 1.5), 0.2)
        a = np.array([0, 0, 0, 3.9, 1.6, 1.56, 0.0])
        r = encode_boxes(g, a)
        assert r.shape == (7,)
        assert np.abs(decode_boxes(r, a) - g.as_array()).max() < 1e-12

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_bad_dims(self, bad):
        a = np.array([0, 0, 0, 3.9, 1.6, 1.56, 0.0])
        g = a.copy()
        g[4] = bad
        with pytest.raises(ValueError):
            encode_boxes(g, a)
        with pytest.raises(ValueError):
            decode_boxes(np.zeros(7), g)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.lists(st.floats(0.1, 10), min_size=3, max_size=3),
           st.floats(-3.14, 3.14), st.lists(st.floats(0.1, 10), min_size=3, max_size=3))
    def test_round_trip_property(self, c, d, yaw, ad):
        g = np.array([*c, *d, yaw])
        a = np.array([0.0, 0.0, 0.0, *ad, 0.5])
        assert np.abs(decode_boxes(encode_boxes(g, a), a) - g).max() < 1e-12


def reference_nms(boxes, scores, iou_thr, score_thr):
    order = sorted((i for i in range(len(scores)) if scores[i] > score_thr), key=lambda i: (-scores[i], i))
    alive = {i: True for i in order}
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        for j in order:
            if alive[j] and j != i and iou_bev(boxes[i], boxes[j]) > iou_thr:
                alive[j] = False
    return keep


class TestNms:
    def test_single(self):
        assert list(nms([[0, 0, 0, 1, 1, 1, 0]], [0.9])) == [0]

    def test_duplicate(self):
        b = [0, 0, 0, 4, 2, 1.5, 0.2]
        assert list(nms([b, b], [0.9, 0.8])) == [0]

    def test_tie_keeps_lower_index(self):
        b = [0, 0, 0, 4, 2, 1.5, 0.2]
        assert list(nms([b, b], [0.7, 0.7])) == [0]

    def test_score_threshold(self):
        assert len(nms([[0, 0, 0, 1, 1, 1, 0]], [0.3])) == 0

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(40):
            boxes = rand_boxes(rng, 50, 4.0)
            scores = np.round(rng.uniform(0, 1, 50), 2)
            got = list(nms(boxes, scores, 0.1, 0.3))
            assert got == reference_nms(boxes, scores, 0.1, 0.3)
            kept = boxes[got]
            m = iou_bev_matrix(kept, kept)
            np.fill_diagonal(m, 0)
            assert m.max(initial=0.0) <= 0.1


class TestAnchors:
    def test_layout(self):
        a = make_anchors((3, 4), 0.5, (1.0, -1.0))
        assert a.shape == (3 * 4 * 2, 7)
        assert np.allclose(a[0], [1.25, -0.75, -0.82, 3.9, 1.6, 1.56, 0.0])
        assert a[1, 6] == pytest.approx(math.pi / 2)
        # cell-major: the next cell steps along y
        assert np.allclose(a[2, :2], [1.25, -0.25])

    def test_wrap_yaw(self):
        assert np.allclose(wrap_yaw([0, math.pi, -math.pi, 3 * math.pi / 2]), [0, math.pi, math.pi, -math.pi / 2])
