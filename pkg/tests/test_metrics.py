import json
import math
from functools import lru_cache

import numpy as np
import pytest

from src.errors import EvaluationError, FrameMismatchError, PreconditionError
from src.heatmap import DetectionSet
from src.metrics import EMPTY_EVALUATION, MODA_UNDEFINED, evaluate, match_frame, pair_frames

from conftest import dets


def brute_force(d_pts, g_pts, radius):
    """(max matched pairs, min total distance among those) over every partial
    injective assignment, by exhaustive search over used-ground-truth masks."""

    @lru_cache(maxsize=None)
    def best(i, used):
        if i == len(d_pts):
            return 0, 0.0
        k, neg = best(i + 1, used)
        options = [(k, neg)]
        for j, g in enumerate(g_pts):
            if used & (1 << j):
                continue
            d = math.hypot(d_pts[i][0] - g[0], d_pts[i][1] - g[1])
            if d <= radius:
                k, neg = best(i + 1, used | (1 << j))
                options.append((k + 1, neg - d))
        return max(options)

    k, neg = best(0, 0)
    return k, -neg


class TestMatchFrame:
    def test_identity(self):
        pts = [(0.0, 0.0), (1.0, 2.0), (3.5, 1.25)]
        m = match_frame(dets("f", pts), dets("f", pts))
        assert m.tp == 3 and m.total_distance == 0.0
        assert m.fp_indices == () and m.fn_indices == ()

    def test_both_pairs_in_range(self):
        m = match_frame(dets("f", [(0.3, 0.0), (0.7, 0.0)]), dets("f", [(0.0, 0.0), (1.0, 0.0)]), 0.5)
        assert [(i, j) for i, j, _ in m.pairs] == [(0, 0), (1, 1)]
        assert [d for _, _, d in m.pairs] == pytest.approx([0.3, 0.3])

    def test_closer_detection_wins(self):
        m = match_frame(dets("f", [(0.1, 0.0), (0.4, 0.0)]), dets("f", [(0.0, 0.0)]), 0.5)
        assert [(i, j) for i, j, _ in m.pairs] == [(0, 0)]
        assert m.fp_indices == (1,) and m.fn_indices == ()

    def test_radius_is_inclusive(self):
        m = match_frame(dets("f", [(0.5, 0.0)]), dets("f", [(0.0, 0.0)]), 0.5)
        assert m.tp == 1

    def test_empty_sides(self):
        m = match_frame(DetectionSet("f"), dets("f", [(0.0, 0.0)]))
        assert m.tp == 0 and m.fn_indices == (0,)
        m = match_frame(dets("f", [(0.0, 0.0)]), DetectionSet("f"))
        assert m.fp_indices == (0,)

    def test_bad_radius(self):
        with pytest.raises(PreconditionError):
            match_frame(DetectionSet("f"), DetectionSet("f"), 0.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            n, m = rng.integers(0, 7, size=2)
            d_pts = [tuple(p) for p in rng.uniform(0, 1.5, size=(n, 2)).tolist()]
            g_pts = [tuple(p) for p in rng.uniform(0, 1.5, size=(m, 2)).tolist()]
            got = match_frame(dets("f", d_pts), dets("f", g_pts), 0.5)
            k, total = brute_force(d_pts, g_pts, 0.5)
            assert got.tp == k
            assert got.total_distance == pytest.approx(total, abs=1e-9)
            assert got.tp + len(got.fp_indices) == n
            assert got.tp + len(got.fn_indices) == m
            assert all(dist <= 0.5 for _, _, dist in got.pairs)

    def test_rigid_transform_invariance(self):
        rng = np.random.default_rng(8)
        theta = 0.7
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        for _ in range(50):
            d_pts = rng.uniform(0, 2, size=(5, 2))
            g_pts = rng.uniform(0, 2, size=(5, 2))
            a = match_frame(dets("f", d_pts), dets("f", g_pts), 0.5)
            b = match_frame(dets("f", d_pts @ rot.T + 3.0), dets("f", g_pts @ rot.T + 3.0), 0.5)
            assert a.tp == b.tp
            assert a.total_distance == pytest.approx(b.total_distance, abs=1e-9)


def _ten_gt_frame():
    gts = [(float(i), 0.0) for i in range(10)]
    found = gts[:8] + [(50.0, 50.0)]
    return dets("f", found), dets("f", gts)


class TestEvaluate:
    def test_perfect(self):
        pts = [(1.0, 1.0), (2.0, 3.0)]
        r = evaluate([(dets("a", pts), dets("a", pts)), (dets("b", pts), dets("b", pts))])
        assert (r.moda, r.modp, r.precision, r.recall) == (1.0, 1.0, 1.0, 1.0)
        assert r.warnings == []

    def test_ten_gt_fixture(self):
        r = evaluate([_ten_gt_frame()])
        assert (r.tp, r.fp, r.fn, r.n_gt) == (8, 1, 2, 10)
        assert r.moda == pytest.approx(0.7, abs=1e-12)
        assert r.precision == pytest.approx(8 / 9, abs=1e-12)
        assert r.recall == pytest.approx(0.8, abs=1e-12)
        assert r.modp == 1.0

    def test_modp_from_distance(self):
        d = dets("f", [(0.3, 0.0), (10.3, 0.0)])
        g = dets("f", [(0.0, 0.0), (10.0, 0.0)])
        r = evaluate([(d, g)], radius=0.5)
        assert r.modp == pytest.approx(0.4, abs=1e-12)
        assert r.moda == 1.0

    def test_duplicating_frames_changes_nothing(self):
        d, g = _ten_gt_frame()
        one = evaluate([(d, g)])
        two = evaluate([(d, g), (d, g)])
        for field in ("moda", "modp", "precision", "recall"):
            assert getattr(two, field) == pytest.approx(getattr(one, field), abs=1e-12)

    def test_extra_far_detection_costs_one_over_n_gt(self):
        d, g = _ten_gt_frame()
        before = evaluate([(d, g)])
        more = DetectionSet("f", d.detections + dets("f", [(80.0, 80.0)]).detections)
        after = evaluate([(more, g)])
        assert after.moda == pytest.approx(before.moda - 1 / 10, abs=1e-12)
        assert after.precision <= before.precision

    def test_removing_a_match_turns_tp_into_fn(self):
        d, g = _ten_gt_frame()
        fewer = DetectionSet("f", d.detections[1:])
        a, b = evaluate([(d, g)]), evaluate([(fewer, g)])
        assert (b.tp, b.fn) == (a.tp - 1, a.fn + 1)

    def test_micro_average(self):
        # frame a: 1 GT found; frame b: 3 GT, 1 found
        a = (dets("a", [(0.0, 0.0)]), dets("a", [(0.0, 0.0)]))
        b = (dets("b", [(0.0, 0.0)]), dets("b", [(0.0, 0.0), (5.0, 0.0), (9.0, 0.0)]))
        r = evaluate([a, b])
        assert r.recall == pytest.approx(2 / 4)
        assert r.moda == pytest.approx(1 - 2 / 4)
        assert [f.frame_id for f in r.per_frame] == ["a", "b"]

    def test_empty_evaluation(self):
        r = evaluate([(DetectionSet("a"), DetectionSet("a"))])
        assert (r.moda, r.modp, r.precision, r.recall) == (1.0, 1.0, 1.0, 1.0)
        assert r.warnings == [EMPTY_EVALUATION]

    def test_no_ground_truth(self):
        r = evaluate([(dets("a", [(1.0, 1.0), (2.0, 2.0)]), DetectionSet("a"))])
        assert r.moda == -math.inf and not r.moda_defined
        assert r.recall == 0.0 and r.fp == 2
        assert MODA_UNDEFINED in r.warnings
        assert "undefined" in r.render()
        assert json.loads(json.dumps(r.to_dict()))["moda"] == -math.inf

    def test_no_detections(self):
        r = evaluate([(DetectionSet("a"), dets("a", [(1.0, 1.0)]))])
        assert (r.precision, r.recall, r.modp, r.moda) == (0.0, 0.0, 0.0, 0.0)

    def test_no_frames(self):
        with pytest.raises(EvaluationError):
            evaluate([])

    def test_parallel_matches_sequential(self):
        rng = np.random.default_rng(1)
        frames = []
        for t in range(40):
            g = rng.uniform(0, 10, size=(6, 2))
            d = g + rng.normal(0, 0.2, size=g.shape)
            frames.append((dets(str(t), d), dets(str(t), g)))
        a = evaluate(frames, workers=1)
        b = evaluate(frames, workers=4)
        assert a.to_dict() == b.to_dict()

    def test_csv_rows(self):
        r = evaluate([_ten_gt_frame()])
        lines = r.to_csv().splitlines()
        assert lines[0].startswith("frame_id,tp,fp,fn")
        assert lines[1].startswith("f,8,1,2,10")


class TestPairFrames:
    def test_joins_in_annotation_order(self):
        d = [dets("b", []), dets("a", [])]
        g = [dets("a", []), dets("b", [])]
        assert [gt.frame_id for _, gt in pair_frames(d, g)] == ["a", "b"]

    def test_mismatch_lists_both_sides(self):
        with pytest.raises(FrameMismatchError) as err:
            pair_frames([dets("a", []), dets("x", [])], [dets("a", []), dets("b", [])])
        assert err.value.missing_detections == ["b"]
        assert err.value.missing_annotations == ["x"]
        assert err.value.exit_code == 2

    def test_subset_ignores_extra_detections(self):
        pairs = pair_frames([dets("a", []), dets("x", [])], [dets("a", []), dets("b", [])], ["a"])
        assert len(pairs) == 1
