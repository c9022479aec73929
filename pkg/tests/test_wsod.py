import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import random_box
from pprfcn.geometry import Box, iou
from pprfcn.numerics import ParamTensor, finite_difference_check
from pprfcn.wsod import (
    WsodHead,
    detect,
    detect_from_scores,
    objectness,
    proposal_refine,
    pseudo_region_sampling,
    region_class_scores,
    region_class_scores_backward,
    wsod_detection_scores,
    wsod_detection_scores_backward,
    wsod_image_loss,
    wsod_image_loss_grad,
    wsod_reg_loss,
    wsod_reg_loss_grad,
)


def _scores(rng, n, C):
    return wsod_detection_scores(rng.normal(size=(n, C + 1)), rng.normal(size=(n, C + 1)))


class TestDetectionScores:
    def test_non_negative_and_column_bounded(self):
        rng = np.random.default_rng(0)
        S = _scores(rng, 7, 3)
        assert np.all(S.sum(axis=0) <= 1 + 1e-12)
        assert np.all(S >= 0)

    def test_uniform_inputs(self):
        S = wsod_detection_scores(np.zeros((4, 3)), np.zeros((4, 3)))
        np.testing.assert_allclose(S, np.full((4, 3), 1 / 12))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 6), st.integers(0, 10_000), st.floats(0.1, 50))
    def test_image_scores_bounded(self, n, C, seed, scale):
        rng = np.random.default_rng(seed)
        S = wsod_detection_scores(scale * rng.normal(size=(n, C + 1)), scale * rng.normal(size=(n, C + 1)))
        sc = S.sum(axis=0)
        assert np.all(sc >= 0) and np.all(sc <= 1 + 1e-9)

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(1)
        loc, cls = ParamTensor(rng.normal(size=(5, 3))), ParamTensor(rng.normal(size=(5, 3)))
        w = rng.normal(size=(5, 3))

        def f(_):
            return float(np.sum(w * wsod_detection_scores(loc.value, cls.value)))

        g_loc, g_cls = wsod_detection_scores_backward(w, loc.value, cls.value)
        assert finite_difference_check(f, loc, analytic=g_loc) <= 1.0
        assert finite_difference_check(f, cls, analytic=g_cls) <= 1.0


class TestImageLoss:
    def test_hand_value(self):
        S = np.array([[0.0, 0.5, 0.5]])
        assert wsod_image_loss(S, {1}) == pytest.approx(2 * math.log(2))

    def test_perfect_scores(self):
        S = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
        assert wsod_image_loss(S, {1}) == pytest.approx(-2 * math.log(1 - 1e-7))

    def test_saturated_inputs_stay_finite(self):
        S = np.array([[1.0, 0.0, 1.0]])
        loss = wsod_image_loss(S, {1})
        assert math.isfinite(loss) and loss == pytest.approx(-2 * math.log(1e-7))
        assert np.all(np.isfinite(wsod_image_loss_grad(S, {1})))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        S = _scores(rng, 6, 4)
        classes = set(rng.choice(np.arange(1, 5), size=int(rng.integers(1, 4)), replace=False).tolist())
        assert wsod_image_loss(S, classes) >= 0

    def test_gradient(self):
        rng = np.random.default_rng(2)
        S = ParamTensor(np.abs(rng.normal(size=(6, 4))) * 0.05)
        g = wsod_image_loss_grad(S.value.astype(np.float64), {1, 3})
        assert finite_difference_check(lambda p: wsod_image_loss(p.value.astype(np.float64), {1, 3}), S,
                                       epsilon=1e-4, analytic=g) <= 1.0


class TestRegularizer:
    def test_empty(self):
        assert wsod_reg_loss(np.full((3, 2), 0.3), {}, []) == 0.0

    def test_perfect(self):
        S = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert wsod_reg_loss(S, {1: np.array([0])}, np.array([1])) == 0.0

    def test_half(self):
        S = np.array([[0.2, 0.5]])
        assert wsod_reg_loss(S, {1: np.array([0])}, []) == pytest.approx(math.log(2))

    def test_saturated_is_finite(self):
        S = np.zeros((2, 2))
        assert wsod_reg_loss(S, {1: np.array([0, 1])}, np.array([0])) == pytest.approx(-3 * math.log(1e-7))

    def test_gradient(self):
        rng = np.random.default_rng(3)
        S = ParamTensor(rng.uniform(0.05, 0.9, size=(6, 3)))
        pos, bg = {1: np.array([0, 2]), 2: np.array([2, 5])}, np.array([1, 3])
        g = wsod_reg_loss_grad(S.value.astype(np.float64), pos, bg)
        assert finite_difference_check(lambda p: wsod_reg_loss(p.value.astype(np.float64), pos, bg), S,
                                       epsilon=1e-4, analytic=g) <= 1.0


def _brute_band_pools(S, boxes, classes, top=5):
    """Independent pool construction with the scalar IoU."""
    positives = {}
    for c in classes:
        order = sorted(range(len(boxes)), key=lambda i: (-S[i, c], i))[:top]
        pool = set(order)
        for i in range(len(boxes)):
            if any(iou(boxes[i], boxes[s]) >= 0.5 for s in order):
                pool.add(i)
        positives[c] = pool
    all_pos = set().union(*positives.values()) if positives else set()
    bg = {i for i in range(len(boxes)) if i not in all_pos
          and any(0.1 <= iou(boxes[i], boxes[p]) <= 0.5 for p in all_pos)}
    return positives, bg


class TestPseudoRegionSampling:
    def test_small_pools_return_everything(self):
        boxes = [Box(0, 0, 4, 4), Box(10, 10, 14, 14), Box(20, 0, 24, 4)]
        S = np.array([[0.1, 0.5], [0.1, 0.3], [0.1, 0.2]])
        pos, bg = pseudo_region_sampling(S, boxes, {1}, rng_seed=0)
        assert pos[1].tolist() == [0, 1, 2]
        assert bg.tolist() == []

    def test_ten_box_layout(self):
        # seed box A = (0,0,10,10); the top-5 rule is disabled via top=1
        boxes = [
            Box(0, 0, 10, 10),   # 0: seed (highest score)
            Box(1, 0, 11, 10),   # 1: IoU 90/110 = 0.818 -> positive
            Box(0, 0, 10, 8),    # 2: IoU 80/100 = 0.8 -> positive
            Box(5, 0, 15, 10),   # 3: IoU 50/150 = 0.333 -> background
            Box(0, 5, 10, 15),   # 4: IoU 0.333 -> background
            Box(5, 5, 15, 15),   # 5: IoU 25/175 = 0.143 -> background
            Box(8, 8, 18, 18),   # 6: IoU 4/196 = 0.020 -> ignored
            Box(30, 30, 40, 40), # 7: disjoint -> ignored
            Box(0, 0, 5, 10),    # 8: IoU 50/100 = 0.5 -> positive (inclusive)
            Box(2, 2, 8, 8),     # 9: IoU 36/100 = 0.36 -> background
        ]
        S = np.zeros((10, 2))
        S[:, 1] = np.linspace(0.9, 0.0, 10)
        pos, bg = pseudo_region_sampling(S, boxes, {1}, rng_seed=0, top=1)
        assert pos[1].tolist() == [0, 1, 2, 8]
        assert bg.tolist() == [3, 4, 5, 9]

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        boxes = [Box(*random_box(rng, 60, 60, 4)) for _ in range(400)]
        S = _scores(rng, 400, 3)
        a = pseudo_region_sampling(S, boxes, {1, 2}, rng_seed=9)
        b = pseudo_region_sampling(S, boxes, {1, 2}, rng_seed=9)
        assert a[1].tolist() == b[1].tolist()
        assert all(a[0][c].tolist() == b[0][c].tolist() for c in a[0])

    def test_matches_brute_force_pools_when_small(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            boxes = [Box(*random_box(rng, 30, 30, 3)) for _ in range(25)]
            S = _scores(rng, 25, 3)
            pos, bg = pseudo_region_sampling(S, boxes, {1, 3}, rng_seed=0)
            want_pos, want_bg = _brute_band_pools(S, boxes, {1, 3})
            assert {c: set(v.tolist()) for c, v in pos.items()} == want_pos
            assert set(bg.tolist()) == want_bg

    def test_quota_with_large_pools(self):
        rng = np.random.default_rng(6)
        boxes = [Box(*random_box(rng, 40, 40, 6)) for _ in range(800)]
        S = _scores(rng, 800, 2)
        pos, bg = pseudo_region_sampling(S, boxes, {1, 2}, rng_seed=1)
        n_pos = sum(len(v) for v in pos.values())
        assert n_pos + len(bg) <= 256
        assert len(bg) >= 0.75 * (n_pos + len(bg))


class TestProposalRefine:
    def _S(self, obj):
        obj = np.asarray(obj, float)
        return np.stack([1 - obj, obj], axis=1)

    def test_all_low(self):
        boxes = [Box(0, 0, 2, 2), Box(5, 5, 8, 8)]
        assert proposal_refine(boxes, self._S([0.1, 0.19])) == []

    def test_disjoint_all_kept(self):
        boxes = [Box(10 * i, 0, 10 * i + 5, 5) for i in range(5)]
        assert proposal_refine(boxes, self._S([0.3, 0.9, 0.5, 0.25, 0.7])) == [1, 4, 2, 0, 3]

    def test_overlap_chain(self):
        # 0-1 and 1-2 overlap at IoU 80/120; 0-2 at 60/140 = 0.43, so only a 0.5 threshold spares box 2
        boxes = [Box(0, 0, 10, 10), Box(2, 0, 12, 10), Box(4, 0, 14, 10)]
        assert iou(boxes[0], boxes[2]) == pytest.approx(60 / 140)
        keep = proposal_refine(boxes, self._S([0.9, 0.8, 0.7]), iou_threshold=0.4)
        assert keep == [0]
        keep = proposal_refine(boxes, self._S([0.9, 0.8, 0.7]), iou_threshold=0.5)
        assert keep == [0, 2]

    def test_objectness_sums_foreground(self):
        S = np.array([[0.1, 0.2, 0.3], [0.0, 0.05, 0.0]])
        np.testing.assert_allclose(objectness(S), [0.5, 0.05])

    def test_floor_tops_up_with_best_remaining(self):
        boxes = [Box(10 * i, 0, 10 * i + 5, 5) for i in range(5)]
        S = self._S([0.3, 0.05, 0.15, 0.1, 0.01])
        assert proposal_refine(boxes, S, min_keep=3) == [0, 2, 3]
        assert proposal_refine(boxes, S, min_keep=0) == [0]
        assert proposal_refine(boxes, S, min_keep=99) == [0, 2, 3, 1, 4]

    def test_cap(self):
        boxes = [Box(10 * i, 0, 10 * i + 5, 5) for i in range(5)]
        assert len(proposal_refine(boxes, self._S([0.5] * 5), max_keep=2)) == 2


class TestDetect:
    def test_constant_scores_give_nothing(self):
        boxes = [Box(0, 0, 3, 3), Box(4, 4, 8, 8)]
        assert len(detect_from_scores(np.full((2, 3), 0.1), boxes)) == 0

    def test_single_dominant_box_per_class(self):
        boxes = [Box(0, 0, 4, 4), Box(10, 0, 14, 4), Box(20, 0, 24, 4)]
        S = np.array([[0.0, 0.9, 0.1], [0.0, 0.1, 0.1], [0.0, 0.1, 0.8]])
        dets = detect_from_scores(S, boxes)
        assert list(zip(dets.classes, [b.as_tuple() for b in dets.boxes])) == [(1, (0, 0, 4, 4)), (2, (20, 0, 24, 4))]

    def test_two_class_six_box_trace(self):
        boxes = [Box(0, 0, 10, 10), Box(1, 1, 11, 11), Box(30, 0, 40, 10),
                 Box(0, 30, 10, 40), Box(2, 0, 12, 10), Box(31, 0, 41, 10)]
        S = np.zeros((6, 3))
        S[:, 1] = [1.0, 0.95, 0.9, 0.0, 0.2, 0.1]
        S[:, 2] = [0.0, 0.1, 0.3, 1.0, 0.8, 0.78]
        dets = detect_from_scores(S, boxes, score_threshold=0.7, iou_threshold=0.4)
        # class 1: normalized > 0.7 -> 0, 1, 2; box 1 overlaps 0 (IoU 0.68) -> {0, 2}
        # class 2: normalized > 0.7 -> 3, 4, 5; all mutually disjoint or below 0.4 -> {3, 4, 5}
        got = [(c, boxes.index(b)) for c, b in zip(dets.classes, dets.boxes)]
        assert got == [(1, 0), (1, 2), (2, 3), (2, 4), (2, 5)]

    def test_outputs_respect_nms(self):
        rng = np.random.default_rng(7)
        boxes = [Box(*random_box(rng, 30, 30, 3)) for _ in range(40)]
        dets = detect_from_scores(_scores(rng, 40, 3), boxes, score_threshold=0.0)
        for c in set(dets.classes):
            mine = [b for b, cc in zip(dets.boxes, dets.classes) if cc == c]
            for i in range(len(mine)):
                for j in range(i + 1, len(mine)):
                    assert iou(mine[i], mine[j]) <= 0.4

    def test_jsonl(self):
        dets = detect_from_scores(np.array([[0, 1.0, 0], [0, 0.0, 1.0]]), [Box(0, 0, 2, 2), Box(3, 3, 5, 5)])
        lines = dets.to_jsonl("img").splitlines()
        assert lines[0] == '{"image_id": "img", "box": [0, 0, 2, 2], "class": 1, "score": 1.0}'


class TestHead:
    def test_end_to_end_gradient(self):
        rng = np.random.default_rng(8)
        h = w = 8
        head = WsodHead(D=3, C=2, k=2, rng=rng, std=0.5)
        feats = rng.normal(size=(h, w, 3)).astype(np.float32)
        boxes = [Box(0, 0, 5, 5), Box(3, 2, 8, 8), Box(1, 4, 6, 8)]
        pos, bg = {1: np.array([0])}, np.array([2])

        def loss(_=None):
            maps = head.forward(feats)
            S = wsod_detection_scores(*region_class_scores(maps, boxes))
            return wsod_image_loss(S, {1}) + 0.2 * wsod_reg_loss(S, pos, bg)

        maps = head.forward(feats)
        loc, cls = region_class_scores(maps, boxes)
        S = wsod_detection_scores(loc, cls)
        gS = wsod_image_loss_grad(S, {1}) + 0.2 * wsod_reg_loss_grad(S, pos, bg)
        g_loc, g_cls = wsod_detection_scores_backward(gS, loc, cls)
        head.backward(feats, *region_class_scores_backward(g_loc, g_cls, boxes, 2, 2, h, w))
        for p in head.params():
            assert finite_difference_check(loss, p, epsilon=1e-2) <= 1.0

    def test_detect_runs(self):
        rng = np.random.default_rng(9)
        head = WsodHead(D=4, C=3, rng=rng, std=0.5)
        feats = rng.normal(size=(12, 12, 4)).astype(np.float32)
        boxes = [Box(*random_box(rng, 12, 12, 3)) for _ in range(8)]
        dets = detect(head, feats, boxes)
        assert all(1 <= c <= 3 for c in dets.classes)
