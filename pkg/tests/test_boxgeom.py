import math

import numpy as np
import pytest
import torch

from crossdet.boxgeom import (
    Box,
    Detection,
    LabeledBox,
    area,
    enclosing_box,
    giou,
    giou_loss,
    giou_loss_tensor,
    giou_tensor,
    iou,
    iou_tensor,
    pairwise_iou,
)

from oracles import assert_grads_close, raster_iou_giou, raster_iou_giou_mask


def random_box(rng, lo=0.0, hi=100.0, min_side=1e-3):
    x0, x1 = sorted(rng.uniform(lo, hi, 2))
    y0, y1 = sorted(rng.uniform(lo, hi, 2))
    return Box(x0, y0, max(x1, x0 + min_side), max(y1, y0 + min_side))


class TestConstruction:
    def test_invalid_extents_rejected(self):
        with pytest.raises(ValueError):
            Box(2, 0, 1, 1)
        with pytest.raises(ValueError):
            Box(0, 5, 1, 4)

    def test_zero_size_permitted(self):
        assert area(Box(1, 1, 1, 5)) == 0.0

    def test_labeled_box_class_id(self):
        with pytest.raises(ValueError):
            LabeledBox(Box(0, 0, 1, 1), -1)

    def test_detection_score_range(self):
        with pytest.raises(ValueError):
            Detection(Box(0, 0, 1, 1), 0, 1.5)


class TestArea:
    def test_direct_product(self):
        assert area(Box(0, 0, 2, 2)) == 4.0
        assert area(Box(0.5, 0.25, 3.5, 1.25)) == 3.0

    def test_degenerate(self):
        assert area(Box(1, 1, 1, 5)) == 0.0


class TestIoU:
    def test_identity(self):
        b = Box(0, 0, 2, 2)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6)) == 0.0

    def test_partial_overlap_vs_raster_oracle(self):
        # spec example checked against a 2000^2-cell rasterization
        a, b = Box(0, 0, 2, 2), Box(1, 1, 3, 3)
        got = iou(a, b)
        oracle, _ = raster_iou_giou_mask(a.as_tuple(), b.as_tuple(), n=2000)
        assert got == pytest.approx(1 / 7, abs=1e-12)
        assert got == pytest.approx(oracle, abs=2e-3)

    def test_both_degenerate_convention(self):
        d = Box(1, 1, 1, 1)
        assert iou(d, d) == 0.0


class TestEnclosingBox:
    def test_min_max(self):
        assert enclosing_box(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == Box(0, 0, 3, 3)
        assert enclosing_box(Box(0, 0, 1, 1), Box(9, 9, 10, 10)) == Box(0, 0, 10, 10)

    def test_identity(self):
        b = Box(0, 0, 2, 2)
        assert enclosing_box(b, b) == b

    def test_contains_both(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a, b = random_box(rng), random_box(rng)
            c = enclosing_box(a, b)
            assert c.x_min <= min(a.x_min, b.x_min) and c.x_max >= max(a.x_max, b.x_max)
            assert area(c) >= max(area(a), area(b))


class TestGiou:
    def test_identity(self):
        b = Box(0, 0, 2, 2)
        assert giou(b, b) == 1.0

    def test_overlapping_fixture(self):
        got = giou(Box(0, 0, 2, 2), Box(1, 1, 3, 3))
        assert got == pytest.approx(1 / 7 - 2 / 9, abs=1e-12)
        _, oracle = raster_iou_giou_mask((0, 0, 2, 2), (1, 1, 3, 3), n=2000)
        assert got == pytest.approx(oracle, abs=2e-3)

    def test_distant_fixture(self):
        assert giou(Box(0, 0, 1, 1), Box(9, 9, 10, 10)) == pytest.approx(-0.98, abs=1e-12)

    def test_both_degenerate_is_error(self):
        with pytest.raises(ValueError):
            giou(Box(1, 1, 1, 1), Box(2, 2, 2, 2))

    def test_counting_matches_mask_rasterization(self):
        # the fast counting form used for the 10k-pair suite is the same
        # computation as literally materializing the grid
        rng = np.random.default_rng(1)
        for _ in range(50):
            a, b = random_box(rng), random_box(rng)
            fast = raster_iou_giou(a.as_tuple(), b.as_tuple(), n=512)
            mask = raster_iou_giou_mask(a.as_tuple(), b.as_tuple(), n=512)
            assert fast == pytest.approx(mask, abs=1e-12)

    def test_algebraic_properties(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            a, b = random_box(rng), random_box(rng)
            v_iou, v_giou = iou(a, b), giou(a, b)
            assert 0.0 <= v_iou <= 1.0
            assert -1.0 < v_giou <= 1.0
            assert v_giou <= v_iou + 1e-12
            assert v_giou == pytest.approx(giou(b, a), abs=1e-12)

    def test_containment_makes_giou_equal_iou(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            outer = random_box(rng, min_side=2.0)
            fx0, fx1 = sorted(rng.uniform(0, 1, 2))
            fy0, fy1 = sorted(rng.uniform(0, 1, 2))
            inner = Box(
                outer.x_min + fx0 * (outer.x_max - outer.x_min),
                outer.y_min + fy0 * (outer.y_max - outer.y_min),
                outer.x_min + max(fx1, fx0 + 1e-3) * (outer.x_max - outer.x_min),
                outer.y_min + max(fy1, fy0 + 1e-3) * (outer.y_max - outer.y_min),
            )
            assert enclosing_box(outer, inner) == outer
            assert giou(outer, inner) == pytest.approx(iou(outer, inner), abs=1e-12)


class TestGiouLoss:
    def test_identity_zero(self):
        b = Box(0, 0, 2, 2)
        assert giou_loss(b, b) == 0.0

    def test_fixtures(self):
        assert giou_loss(Box(1, 1, 3, 3), Box(0, 0, 2, 2)) == pytest.approx(
            1 + 5 / 63, abs=1e-12
        )
        assert giou_loss(Box(0, 0, 1, 1), Box(9, 9, 10, 10)) == pytest.approx(1.98, abs=1e-12)

    def test_range(self):
        rng = np.random.default_rng(4)
        for _ in range(300):
            a, b = random_box(rng), random_box(rng)
            assert 0.0 <= giou_loss(a, b) < 2.0


class TestTensorVersions:
    def test_match_scalar(self):
        rng = np.random.default_rng(5)
        boxes_a = [random_box(rng) for _ in range(64)]
        boxes_b = [random_box(rng) for _ in range(64)]
        ta = torch.tensor([b.as_tuple() for b in boxes_a], dtype=torch.float64)
        tb = torch.tensor([b.as_tuple() for b in boxes_b], dtype=torch.float64)
        got_iou = iou_tensor(ta, tb)
        got_giou = giou_tensor(ta, tb)
        for k, (a, b) in enumerate(zip(boxes_a, boxes_b)):
            assert float(got_iou[k]) == pytest.approx(iou(a, b), abs=1e-9)
            assert float(got_giou[k]) == pytest.approx(giou(a, b), abs=1e-9)

    def test_pairwise_shape_and_values(self):
        rng = np.random.default_rng(6)
        rows = [random_box(rng) for _ in range(5)]
        cols = [random_box(rng) for _ in range(7)]
        m = pairwise_iou(
            torch.tensor([b.as_tuple() for b in rows], dtype=torch.float64),
            torch.tensor([b.as_tuple() for b in cols], dtype=torch.float64),
        )
        assert m.shape == (5, 7)
        assert float(m[2, 3]) == pytest.approx(iou(rows[2], cols[3]), abs=1e-9)

    def test_gradient_matches_central_differences(self):
        # away from coordinate-equality degeneracies, per the contract
        rng = np.random.default_rng(7)
        for _ in range(20):
            pred = torch.tensor(
                random_box(rng, min_side=0.5).as_tuple(), dtype=torch.float64
            ).requires_grad_(True)
            gt = torch.tensor(random_box(rng, min_side=0.5).as_tuple(), dtype=torch.float64)
            assert_grads_close(
                lambda: giou_loss_tensor(pred[None], gt[None]).sum(), [pred]
            )
