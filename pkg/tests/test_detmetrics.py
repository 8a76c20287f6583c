import numpy as np
import pytest

from crossdet.boxgeom import Box, Detection, LabeledBox
from crossdet.detmetrics import (
    MatchResult,
    average_precision,
    evaluate_detections,
    format_report,
    load_report,
    match_detections,
    mean_ap,
    pr_curve,
    precision_recall_f1,
    save_report,
)

from oracles import brute_force_ap


def det(x0, y0, x1, y1, cls=0, score=0.9):
    return Detection(Box(x0, y0, x1, y1), cls, score)


def gt(x0, y0, x1, y1, cls=0):
    return LabeledBox(Box(x0, y0, x1, y1), cls)


def random_scene(rng, n_classes=3, max_boxes=20):
    n_gt = int(rng.integers(1, max_boxes + 1))
    n_det = int(rng.integers(0, max_boxes + 1))
    gts = []
    for _ in range(n_gt):
        x0, y0 = rng.uniform(0, 80, 2)
        w, h = rng.uniform(2, 20, 2)
        gts.append(gt(x0, y0, x0 + w, y0 + h, int(rng.integers(0, n_classes))))
    dets = []
    for _ in range(n_det):
        if rng.random() < 0.6 and gts:
            base = gts[int(rng.integers(0, len(gts)))]
            bb = base.box
            jitter = rng.uniform(-4, 4, 4)
            x0 = min(bb.x_min + jitter[0], bb.x_max - 1)
            y0 = min(bb.y_min + jitter[1], bb.y_max - 1)
            box = Box(x0, y0, max(bb.x_max + jitter[2], x0 + 1), max(bb.y_max + jitter[3], y0 + 1))
            cls = base.class_id if rng.random() < 0.8 else int(rng.integers(0, n_classes))
        else:
            x0, y0 = rng.uniform(0, 80, 2)
            w, h = rng.uniform(2, 20, 2)
            box = Box(x0, y0, x0 + w, y0 + h)
            cls = int(rng.integers(0, n_classes))
        dets.append(Detection(box, cls, float(rng.random())))
    return dets, gts


def as_tuples(dets, gts):
    return (
        [(d.box.as_tuple(), d.class_id, d.score) for d in dets],
        [(g.box.as_tuple(), g.class_id) for g in gts],
    )


class TestMatching:
    def test_identity_box_is_tp(self):
        m = match_detections([det(0, 0, 2, 2)], [gt(0, 0, 2, 2)], 0.5)
        assert (m.tp_count, m.fp_count, m.fn_count) == (1, 0, 0)

    def test_empty_detections(self):
        m = match_detections([], [gt(0, 0, 1, 1)] * 3, 0.5)
        assert (m.tp_count, m.fp_count, m.fn_count) == (0, 0, 3)

    def test_double_detection_greedy(self):
        # both overlap the single gt at IoU 0.8; the higher score claims it
        g = gt(0, 0, 10, 10)
        box = Box(0, 0, 10, 8)  # IoU 0.8
        m = match_detections(
            [Detection(box, 0, 0.8), Detection(box, 0, 0.9)], [g], 0.5
        )
        assert (m.tp_count, m.fp_count, m.fn_count) == (1, 1, 0)
        assert m.is_tp == [True, False]  # score-sorted order

    def test_class_aware(self):
        m = match_detections([det(0, 0, 2, 2, cls=1)], [gt(0, 0, 2, 2, cls=0)], 0.5)
        assert m.tp_count == 0 and m.fp_count == 1 and m.fn_count == 1

    def test_tie_break_by_index_deterministic(self):
        g = [gt(0, 0, 2, 2)]
        d = [det(0, 0, 2, 2, score=0.5), det(0, 0, 2, 2, score=0.5)]
        m1 = match_detections(d, g, 0.5)
        m2 = match_detections(d, g, 0.5)
        assert m1 == m2
        assert m1.is_tp == [True, False]

    def test_count_invariants(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            dets, gts = random_scene(rng)
            m = match_detections(dets, gts, 0.5)
            assert m.tp_count + m.fn_count == len(gts)
            assert m.tp_count + m.fp_count == len(dets)

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            match_detections([], [], 0.0)


class TestPrecisionRecallF1:
    def test_fixture_3_1_2(self):
        p, r, f1 = precision_recall_f1(MatchResult(3, 1, 2, []))
        assert (p, r) == (0.75, 0.6)
        assert f1 == pytest.approx(2 / 3, abs=1e-6)

    def test_degenerate_zero(self):
        assert precision_recall_f1(MatchResult(0, 0, 5, [])) == (0.0, 0.0, 0.0)

    def test_perfect(self):
        assert precision_recall_f1(MatchResult(4, 0, 0, [])) == (1.0, 1.0, 1.0)

    def test_harmonic_mean_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            tp, fp, fn = (int(v) for v in rng.integers(0, 20, 3))
            p, r, f1 = precision_recall_f1(MatchResult(tp, fp, fn, []))
            if p + r > 0:
                assert min(p, r) - 1e-12 <= f1 <= max(p, r) + 1e-12


class TestAveragePrecision:
    def test_perfect_single_detection(self):
        assert average_precision([det(0, 0, 2, 2, score=0.9)], [gt(0, 0, 2, 2)], 0, 0.5) == 1.0

    def test_fp_then_tp(self):
        dets = [det(50, 50, 60, 60, score=0.95), det(0, 0, 2, 2, score=0.9)]
        assert average_precision(dets, [gt(0, 0, 2, 2)], 0, 0.5) == 0.5

    def test_matches_brute_force_on_random_scenes(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            dets, gts = random_scene(rng)
            t_dets, t_gts = as_tuples(dets, gts)
            for c in {g.class_id for g in gts}:
                got = average_precision(dets, gts, c, 0.5)
                want = brute_force_ap(t_dets, t_gts, c, 0.5)
                assert got == pytest.approx(want, abs=1e-9)

    def test_monotonicity_under_fp_and_tp(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            dets, gts = random_scene(rng)
            base = average_precision(dets, gts, 0, 0.5)
            # a far-away false positive never raises AP
            worse = dets + [det(90, 90, 95, 95, cls=0, score=float(rng.random()))]
            assert average_precision(worse, gts, 0, 0.5) <= base + 1e-12
            # a fresh top-ranked true positive never lowers AP
            free = [g for g in gts if g.class_id == 0]
            if free:
                claimed = {i for i, _ in enumerate(free)}
                extra_gt = gt(100, 100, 110, 110, cls=0)
                better = dets + [det(100, 100, 110, 110, cls=0, score=1.0)]
                assert (
                    average_precision(better, gts + [extra_gt], 0, 0.5)
                    >= average_precision(dets, gts + [extra_gt], 0, 0.5) - 1e-12
                )

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            dets, gts = random_scene(rng)
            perm = list(rng.permutation(len(dets)))
            shuffled = [dets[i] for i in perm]
            for c in {g.class_id for g in gts}:
                assert average_precision(dets, gts, c, 0.5) == pytest.approx(
                    average_precision(shuffled, gts, c, 0.5), abs=1e-12
                )


class TestMeanAp:
    def test_perfect_single_class(self):
        dets = [det(0, 0, 2, 2, score=0.9), det(5, 5, 8, 8, score=0.8)]
        gts = [gt(0, 0, 2, 2), gt(5, 5, 8, 8)]
        rep = mean_ap(dets, gts)
        assert rep.map_score == 1.0
        assert rep.precision == rep.recall == rep.f1 == 1.0

    def test_arithmetic_mean_of_class_aps(self):
        dets = [
            det(0, 0, 2, 2, cls=0, score=0.9),
            det(50, 50, 60, 60, cls=1, score=0.95),
            det(5, 5, 8, 8, cls=1, score=0.9),
        ]
        gts = [gt(0, 0, 2, 2, cls=0), gt(5, 5, 8, 8, cls=1)]
        rep = mean_ap(dets, gts)
        assert rep.per_class_ap == {0: 1.0, 1: 0.5}
        assert rep.map_score == 0.75

    def test_no_ground_truth_is_error(self):
        with pytest.raises(ValueError):
            mean_ap([det(0, 0, 1, 1)], [])

    def test_map_is_mean_of_per_class(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            dets, gts = random_scene(rng)
            rep = mean_ap(dets, gts)
            assert rep.map_score == pytest.approx(
                sum(rep.per_class_ap.values()) / len(rep.per_class_ap), abs=1e-12
            )

    def test_multi_image_pooling_matches_brute_force(self):
        rng = np.random.default_rng(6)
        scenes = [random_scene(rng) for _ in range(5)]
        rep = evaluate_detections(scenes, 0.5, 0.5)
        # pooled brute force: treat image index as part of the det identity by
        # shifting boxes far apart per image (no cross-image overlap exists)
        shift = 1000.0
        pooled_dets, pooled_gts = [], []
        for k, (dets, gts) in enumerate(scenes):
            for d in dets:
                b = d.box
                pooled_dets.append(
                    ((b.x_min + k * shift, b.y_min, b.x_max + k * shift, b.y_max), d.class_id, d.score)
                )
            for g in gts:
                b = g.box
                pooled_gts.append(
                    ((b.x_min + k * shift, b.y_min, b.x_max + k * shift, b.y_max), g.class_id)
                )
        for c, ap in rep.per_class_ap.items():
            assert ap == pytest.approx(brute_force_ap(pooled_dets, pooled_gts, c, 0.5), abs=1e-9)


class TestReportSerialization:
    def test_round_trip(self, tmp_path):
        dets = [det(0, 0, 2, 2, score=0.9)]
        gts = [gt(0, 0, 2, 2)]
        rep = mean_ap(dets, gts)
        path = tmp_path / "metrics.txt"
        save_report(rep, path)
        loaded = load_report(path)
        assert loaded == rep

    def test_format_has_class_records_and_summary(self):
        rep = mean_ap([det(0, 0, 2, 2, score=0.9)], [gt(0, 0, 2, 2)])
        text = format_report(rep)
        assert "class 0 ap 1.000000" in text
        assert "summary f1" in text

    def test_pr_curve_monotone_recall(self):
        rng = np.random.default_rng(7)
        dets, gts = random_scene(rng)
        recalls, precisions = pr_curve([(dets, gts)], 0, 0.5)
        assert recalls == sorted(recalls)
        assert all(0 <= p <= 1 for p in precisions)
