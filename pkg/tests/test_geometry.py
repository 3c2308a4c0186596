"""Geometry tests: IoU against a rasterization oracle, NMS against a brute-force
greedy oracle, and the corner-hull properties of box transforms."""

import math

import numpy as np
import pytest

from semidet.geometry import (
    AffineTransform,
    Box,
    Detection,
    iou,
    iou_matrix,
    nms,
    transform_box,
)


def raster_iou(a: Box, b: Box, grid: int = 64) -> float:
    """Pixel-counting IoU oracle for integer boxes within grid x grid."""
    xs, ys = np.mgrid[0:grid, 0:grid]

    def mask(box):
        return (xs >= box.x1) & (xs < box.x2) & (ys >= box.y1) & (ys < box.y2)

    ma, mb = mask(a), mask(b)
    union = np.logical_or(ma, mb).sum()
    if union == 0:
        return 0.0
    return np.logical_and(ma, mb).sum() / union


def greedy_nms_oracle(dets, thr):
    """Independent NMS reference: repeatedly take the best remaining detection
    and delete everything of the same class overlapping it above thr."""
    remaining = list(range(len(dets)))
    kept = []
    while remaining:
        best = min(remaining, key=lambda i: (-dets[i].score, i))
        kept.append(best)
        remaining = [
            i
            for i in remaining
            if i != best
            and not (
                dets[i].class_id == dets[best].class_id
                and iou(dets[i].box, dets[best].box) > thr
            )
        ]
    return [dets[i] for i in kept]


def random_dets(rng, n_max=20, n_classes=3, extent=50.0):
    n = rng.integers(0, n_max + 1)
    dets = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, extent, 2)
        w, h = rng.uniform(2, extent / 2, 2)
        dets.append(
            Detection(
                box=Box(x1, y1, x1 + w, y1 + h),
                class_id=int(rng.integers(n_classes)),
                score=float(rng.integers(0, 101)) / 100.0,  # coarse scores force ties
            )
        )
    return dets


class TestBox:
    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            Box(0, 0, 0, 10)
        with pytest.raises(ValueError):
            Box(5, 0, 4, 10)
        with pytest.raises(ValueError):
            Box(0, 0, math.inf, 10)

    def test_area_and_corners(self):
        b = Box(1, 2, 4, 6)
        assert b.area() == 12
        assert b.corners().shape == (4, 2)


class TestIoU:
    def test_identity(self):
        b = Box(3, 4, 10, 12)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 5, 5), Box(10, 10, 20, 20)) == 0.0

    def test_hand_computed_overlap(self):
        val = iou(Box(0, 0, 10, 10), Box(5, 5, 15, 15))
        assert abs(val - 25.0 / 175.0) < 1e-12

    def test_symmetry_and_range_random(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            a = _rand_int_box(rng)
            b = _rand_int_box(rng)
            v = iou(a, b)
            assert 0.0 <= v <= 1.0
            assert v == iou(b, a)
            assert (v == 1.0) == (a == b)

    def test_matches_rasterization_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            a = _rand_int_box(rng)
            b = _rand_int_box(rng)
            analytic = iou(a, b)
            pixel = raster_iou(a, b)
            union = a.area() + b.area() - _inter_area(a, b)
            assert abs(analytic - pixel) <= 2.0 / union

    def test_iou_matrix_agrees_with_scalar(self):
        rng = np.random.default_rng(2)
        boxes_a = [_rand_int_box(rng) for _ in range(7)]
        boxes_b = [_rand_int_box(rng) for _ in range(5)]
        m = iou_matrix(
            np.array([b.astuple() for b in boxes_a]),
            np.array([b.astuple() for b in boxes_b]),
        )
        for i, a in enumerate(boxes_a):
            for j, b in enumerate(boxes_b):
                assert abs(m[i, j] - iou(a, b)) < 1e-12


def _rand_int_box(rng, grid=64):
    x1 = int(rng.integers(0, grid - 1))
    y1 = int(rng.integers(0, grid - 1))
    x2 = int(rng.integers(x1 + 1, grid + 1))
    y2 = int(rng.integers(y1 + 1, grid + 1))
    return Box(float(x1), float(y1), float(x2), float(y2))


def _inter_area(a, b):
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    return iw * ih


class TestNms:
    def test_empty(self):
        assert nms([], 0.5) == []

    def test_threshold_validation(self):
        d = Detection(Box(0, 0, 5, 5), 0, 0.5)
        with pytest.raises(ValueError):
            nms([d], 0.0)
        with pytest.raises(ValueError):
            nms([d], 1.5)

    def test_suppression_fixture(self):
        a = Detection(Box(0, 0, 10, 10), 0, 0.9)
        b = Detection(Box(0, 0, 10, 8), 0, 0.7)  # iou(a, b) = 0.8
        c = Detection(Box(30, 30, 40, 40), 0, 0.5)
        assert abs(iou(a.box, b.box) - 0.8) < 1e-12
        assert nms([a, b, c], 0.5) == [a, c]

    def test_no_suppression_below_threshold(self):
        dets = [
            Detection(Box(i * 20.0, 0, i * 20.0 + 10, 10), 0, 0.5 + 0.1 * i)
            for i in range(4)
        ]
        out = nms(dets, 0.5)
        assert sorted(out, key=lambda d: -d.score) == out
        assert set(out) == set(dets)

    def test_cross_class_never_suppresses(self):
        a = Detection(Box(0, 0, 10, 10), 0, 0.9)
        b = Detection(Box(0, 0, 10, 10), 1, 0.1)
        assert nms([a, b], 0.5) == [a, b]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(300):
            dets = random_dets(rng)
            thr = float(rng.uniform(0.1, 0.9))
            assert nms(dets, thr) == greedy_nms_oracle(dets, thr)


class TestAffineTransform:
    def test_singular_rejected(self):
        with pytest.raises(ValueError):
            AffineTransform(0, 0, 1, 0, 0, 2)

    def test_compose_and_invert(self):
        rng = np.random.default_rng(4)
        t1 = AffineTransform.rotation(33.0, 5.0, 7.0)
        t2 = AffineTransform.translation(3.0, -2.0)
        pts = rng.uniform(-10, 10, (8, 2))
        combined = t1.compose(t2)
        expected = t1.apply_points(t2.apply_points(pts))
        assert np.allclose(combined.apply_points(pts), expected)
        back = combined.invert().apply_points(combined.apply_points(pts))
        assert np.allclose(back, pts, atol=1e-9)


class TestTransformBox:
    def test_identity(self):
        b = Box(2, 3, 9, 11)
        assert transform_box(AffineTransform.identity(), b, 100, 100) == b

    def test_translation_with_clip(self):
        out = transform_box(AffineTransform.translation(10, 0), Box(0, 0, 10, 10), 100, 100)
        assert out == Box(10, 0, 20, 10)

    def test_rotation_90_of_centered_square(self):
        b = Box(40, 40, 60, 60)
        out = transform_box(AffineTransform.rotation(90, 50, 50), b, 100, 100)
        assert out is not None
        assert np.allclose(out.astuple(), b.astuple(), atol=1e-9)

    def test_degenerate_after_clip_dropped(self):
        # box pushed almost entirely off the image
        out = transform_box(AffineTransform.translation(99.5, 0), Box(0, 0, 10, 10), 100, 100)
        assert out is None

    def test_roundtrip_hull_contains_original(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            small = _rand_int_box(rng, grid=40)
            # keep everything mid-canvas so neither direction clips
            b = Box(small.x1 + 400, small.y1 + 400, small.x2 + 400, small.y2 + 400)
            deg = float(rng.uniform(-30, 30))
            t = AffineTransform.rotation(deg, 420.0, 420.0)
            fwd = transform_box(t, b, 1000, 1000)
            if fwd is None:
                continue
            back = transform_box(t.invert(), fwd, 1000, 1000)
            if back is None:
                continue
            eps = 1e-9
            assert back.x1 <= b.x1 + eps and back.y1 <= b.y1 + eps
            assert back.x2 >= b.x2 - eps and back.y2 >= b.y2 - eps

    def test_interior_points_map_inside_hull(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            b = _rand_int_box(rng, grid=40)
            t = AffineTransform.rotation(float(rng.uniform(-45, 45)), 10.0, 5.0).compose(
                AffineTransform.translation(*rng.uniform(-5, 5, 2))
            )
            pts = np.column_stack(
                [rng.uniform(b.x1, b.x2, 50), rng.uniform(b.y1, b.y2, 50)]
            )
            mapped = t.apply_points(pts)
            hull = t.apply_points(b.corners())
            assert (mapped[:, 0] >= hull[:, 0].min() - 1e-9).all()
            assert (mapped[:, 0] <= hull[:, 0].max() + 1e-9).all()
            assert (mapped[:, 1] >= hull[:, 1].min() - 1e-9).all()
            assert (mapped[:, 1] <= hull[:, 1].max() + 1e-9).all()
