"""Loss terms and bipartite matching against arithmetic and brute-force oracles."""

import itertools
import math

import numpy as np
import pytest

from fusedet import tensor as T
from fusedet.backbone import FeatureMap
from fusedet.decoder import LayerOutput
from fusedet.losses import (BBox, LossWeights, MatchAssignment, aware_targets,
                            bce_loss, cxcywh_to_corners, focal_loss, giou,
                            giou_corners, giou_tensor, hungarian_match, iou,
                            iou_corners, loss_aware, loss_cls_bbox, loss_token,
                            matching_cost, soft_token_labels, total_loss)
from fusedet.params import ParamStore
from fusedet.tensor import Parameter, Tape, Tensor


def brute_force_min_cost(cost):
    """Exhaustive minimum over injective target->query assignments (oracle)."""
    n, b = cost.shape
    best, best_pairs = math.inf, None
    for perm in itertools.permutations(range(n), b):
        total = sum(cost[q, t] for t, q in enumerate(perm))
        if total < best - 1e-15:
            best = total
            best_pairs = sorted((q, t) for t, q in enumerate(perm))
    return best, best_pairs


def brute_force_lex_min(cost):
    """Lexicographically smallest optimal assignment (tie-break oracle)."""
    n, b = cost.shape
    best, _ = brute_force_min_cost(cost)
    candidates = []
    for perm in itertools.permutations(range(n), b):
        total = sum(cost[q, t] for t, q in enumerate(perm))
        if abs(total - best) < 1e-9:
            candidates.append(sorted((q, t) for t, q in enumerate(perm)))
    return min(candidates)


class TestIoU:
    def test_identical_boxes(self):
        a = BBox(0.5, 0.5, 0.4, 0.2)
        assert iou(a, a) == 1.0
        assert giou(a, a) == 1.0

    def test_corner_boxes_oracle(self):
        # corners (0,0,2,2) and (1,1,3,3): inter 1, union 7, hull 9
        a = BBox(1.0, 1.0, 2.0, 2.0)
        b = BBox(2.0, 2.0, 2.0, 2.0)
        assert abs(iou(a, b) - 1 / 7) < 1e-12
        assert abs(giou(a, b) - (1 / 7 - 2 / 9)) < 1e-12

    def test_far_apart_boxes(self):
        a = BBox(0.5, 0.5, 1.0, 1.0)
        b = BBox(5.5, 0.5, 1.0, 1.0)
        assert iou(a, b) == 0.0
        assert giou(a, b) < 0.0

    def test_degenerate_box_iou_zero(self):
        a = np.array([0.0, 0.0, 0.0, 1.0])  # zero-width corner box
        b = np.array([0.0, 0.0, 1.0, 1.0])
        assert iou_corners(a, b) == 0.0

    def test_bbox_validation(self):
        with pytest.raises(ValueError):
            BBox(0.5, 0.5, 0.0, 0.1)

    def test_giou_tensor_matches_numpy(self):
        rng = np.random.default_rng(0)
        pred = np.abs(rng.uniform(0.2, 0.8, (5, 4)))
        pred[:, 2:] = rng.uniform(0.05, 0.3, (5, 2))
        tgt = np.column_stack([rng.uniform(0.3, 0.7, (5, 2)),
                               rng.uniform(0.05, 0.3, (5, 2))])
        got = giou_tensor(Tensor(pred), cxcywh_to_corners(tgt)).data
        want = giou_corners(cxcywh_to_corners(pred), cxcywh_to_corners(tgt))
        assert np.max(np.abs(got - want)) < 1e-12

    def test_giou_tensor_grad(self):
        rng = np.random.default_rng(1)
        pred = Tensor(np.array([[0.4, 0.5, 0.3, 0.2], [0.6, 0.4, 0.2, 0.4]]),
                      requires_grad=True)
        tgt = cxcywh_to_corners(np.array([[0.5, 0.5, 0.25, 0.25],
                                          [0.3, 0.6, 0.3, 0.3]]))
        p = Parameter("pred", pred)
        err = T.finite_diff_check(lambda: T.tsum(giou_tensor(pred, tgt)), [p])
        assert err < 1e-5


class TestHungarian:
    def test_one_by_one(self):
        m = hungarian_match(np.array([[3.0]]))
        assert m.pairs == [(0, 0)]

    def test_two_by_two(self):
        m = hungarian_match(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert m.pairs == [(0, 0), (1, 1)]

    def test_empty_targets(self):
        m = hungarian_match(np.zeros((4, 0)))
        assert m.pairs == []

    def test_more_targets_than_queries_rejected(self):
        with pytest.raises(ValueError):
            hungarian_match(np.zeros((2, 3)))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            hungarian_match(np.array([[np.inf]]))

    def test_against_brute_force_7x5(self):
        rng = np.random.default_rng(2)
        cost = rng.standard_normal((7, 5))
        m = hungarian_match(cost)
        best, pairs = brute_force_min_cost(cost)
        got = sum(cost[q, t] for q, t in m.pairs)
        assert abs(got - best) < 1e-12
        assert m.pairs == pairs

    def test_lexicographic_tie_break(self):
        # all-equal costs: every assignment optimal; lexicographic winner pinned
        cost = np.ones((4, 3))
        m = hungarian_match(cost)
        assert m.pairs == [(0, 0), (1, 1), (2, 2)]
        # a crafted tie where the lexicographic optimum skips query 0
        cost = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        m = hungarian_match(cost)
        assert m.pairs == brute_force_lex_min(cost)

    def test_row_constant_shift_invariance(self):
        # square case: every row is used exactly once, so shifting one row
        # shifts every assignment's total equally (argmin invariance)
        for seed in range(20):
            cost = np.random.default_rng(seed).standard_normal((5, 5))
            shifted = cost.copy()
            shifted[2] += 7.3
            a = hungarian_match(cost).pairs
            b = hungarian_match(shifted).pairs
            assert a == b

    def test_random_ties_match_lex_oracle(self):
        for seed in range(30):
            rng = np.random.default_rng(seed)
            cost = rng.integers(0, 3, size=(5, 3)).astype(float)
            m = hungarian_match(cost)
            assert m.pairs == brute_force_lex_min(cost)


class TestMatchingCost:
    def test_perfect_prediction_has_minimal_column(self):
        cls_prob = np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]])
        boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.3, 0.3, 0.1, 0.1],
                          [0.7, 0.7, 0.3, 0.3]])
        cost = matching_cost(cls_prob, boxes, np.array([0]),
                             np.array([[0.5, 0.5, 0.2, 0.2]]))
        assert cost[:, 0].argmin() == 0

    def test_pure_l1_ordering(self):
        cls_prob = np.array([[0.5], [0.5]])
        boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.9, 0.9, 0.2, 0.2]])
        t = np.array([[0.5, 0.5, 0.2, 0.2]])
        cost = matching_cost(cls_prob, boxes, np.array([0]), t,
                             w_cls=0.0, w_l1=1.0, w_giou=0.0)
        assert np.allclose(cost[:, 0],
                           np.abs(boxes - t).sum(axis=1))

    def test_hand_computed_2x2(self):
        cls_prob = np.array([[0.8, 0.2], [0.3, 0.7]])
        boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.2, 0.2, 0.1, 0.1]])
        tl = np.array([1, 0])
        tb = np.array([[0.5, 0.5, 0.2, 0.2], [0.2, 0.2, 0.1, 0.1]])
        cost = matching_cost(cls_prob, boxes, tl, tb, w_cls=2.0, w_l1=5.0, w_giou=2.0)
        g = giou_corners(cxcywh_to_corners(boxes)[:, None],
                         cxcywh_to_corners(tb)[None, :])
        for q in range(2):
            for t in range(2):
                want = (2.0 * -cls_prob[q, tl[t]]
                        + 5.0 * np.abs(boxes[q] - tb[t]).sum()
                        + 2.0 * (1 - g[q, t]))
                assert abs(cost[q, t] - want) < 1e-12


class TestFocal:
    def test_gamma_zero_is_bce(self):
        p = Tensor(np.array([0.3, 0.8]))
        t = np.array([1.0, 0.0])
        got = focal_loss(p, t, gamma=0.0, alpha_f=1.0).data
        want = -(t * np.log([0.3, 0.8]) + (1 - t) * np.log1p(-np.array([0.3, 0.8])))
        assert np.allclose(got, want, atol=1e-12)

    def test_perfect_prediction_zero(self):
        got = focal_loss(Tensor(np.array([1.0])), np.array([1.0])).data
        assert got[0] < 1e-12

    def test_log_oracle(self):
        got = float(focal_loss(Tensor(np.array([0.6])), np.array([1.0]),
                               gamma=2.0, alpha_f=0.25).data)
        want = 0.25 * 0.16 * -math.log(0.6)
        assert abs(got - want) < 1e-12
        assert abs(got - 0.020433) < 1e-6

    def test_nonnegative_finite(self):
        rng = np.random.default_rng(4)
        p = Tensor(rng.uniform(0, 1, 50))
        t = rng.uniform(0, 1, 50)
        out = focal_loss(p, t).data
        assert np.all(out >= 0) and np.all(np.isfinite(out))


def layer_output_from(cls_logits, boxes, iou_logit, ctr_logit):
    return LayerOutput(y=Tensor(np.zeros((len(boxes), 2))),
                       cls_logits=Tensor(cls_logits), boxes=Tensor(boxes),
                       iou_logit=Tensor(iou_logit), ctr_logit=Tensor(ctr_logit))


class TestClsBboxLoss:
    def test_perfect_predictions(self):
        boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.3, 0.3, 0.1, 0.1]])
        lo = layer_output_from(np.array([[30.0, -30.0], [-30.0, -30.0]]),
                               boxes, np.zeros(2), np.zeros(2))
        match = MatchAssignment([(0, 0)], n_queries=2)
        l_cls, l_bbox = loss_cls_bbox(lo, np.array([0]), boxes[:1], match, 2,
                                      LossWeights())
        assert float(l_bbox.data) < 1e-12
        assert float(l_cls.data) < 1e-10

    def test_no_targets_boundary(self):
        lo = layer_output_from(np.zeros((3, 2)), np.full((3, 4), 0.5),
                               np.zeros(3), np.zeros(3))
        match = MatchAssignment([], n_queries=3)
        l_cls, l_bbox = loss_cls_bbox(lo, np.array([], dtype=int),
                                      np.zeros((0, 4)), match, 2, LossWeights())
        assert float(l_bbox.data) == 0.0
        assert np.isfinite(float(l_cls.data))

    def test_single_pair_hand_computed(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((1, 2))
        box = np.array([[0.5, 0.5, 0.4, 0.4]])
        tbox = np.array([[0.45, 0.55, 0.3, 0.5]])
        lo = layer_output_from(logits, box, np.zeros(1), np.zeros(1))
        match = MatchAssignment([(0, 0)], n_queries=1)
        w = LossWeights()
        l_cls, l_bbox = loss_cls_bbox(lo, np.array([1]), tbox, match, 2, w)
        p = 1 / (1 + np.exp(-logits[0]))
        t = np.array([0.0, 1.0])
        focal = 0.25 * np.abs(t - p) ** 2 * -(t * np.log(p) + (1 - t) * np.log(1 - p))
        assert abs(float(l_cls.data) - focal.sum()) < 1e-12
        l1 = np.abs(box - tbox).sum()
        g = giou_corners(cxcywh_to_corners(box)[0], cxcywh_to_corners(tbox)[0])
        assert abs(float(l_bbox.data) - (w.l1 * l1 + w.giou * (1 - g))) < 1e-12


class TestAwareLoss:
    def test_bce_minimized_at_target(self):
        t = np.array([1 / 7])
        vals = []
        for p in (1 / 7, 1 / 7 + 0.05, 1 / 7 - 0.05):
            vals.append(float(bce_loss(Tensor(np.array([p])), t).data))
        assert vals[0] < vals[1] and vals[0] < vals[2]

    def test_ln2_oracle(self):
        got = float(bce_loss(Tensor(np.array([0.5])), np.array([1 / 7])).data)
        assert abs(got - math.log(2.0)) < 1e-12

    def test_centerness_disabled_drops_term(self):
        lo = layer_output_from(np.zeros((2, 2)), np.full((2, 4), 0.5),
                               np.array([0.3, -0.2]), np.array([5.0, 5.0]))
        match = MatchAssignment([(0, 0)], n_queries=2)
        iou_t, ctr_t = aware_targets(np.full((2, 4), 0.5),
                                     np.array([[0.5, 0.5, 0.5, 0.5]]), match, None)
        with_ctr = loss_aware(lo, match, iou_t, np.array([0.5]))
        without = loss_aware(lo, match, iou_t, None)
        assert float(without.data) < float(with_ctr.data)
        p = 1 / (1 + np.exp(-0.3))
        want = -(iou_t[0] * np.log(p) + (1 - iou_t[0]) * np.log(1 - p))
        assert abs(float(without.data) - want) < 1e-12

    def test_no_targets_zero(self):
        lo = layer_output_from(np.zeros((2, 2)), np.full((2, 4), 0.5),
                               np.zeros(2), np.zeros(2))
        match = MatchAssignment([], n_queries=2)
        assert float(loss_aware(lo, match, np.zeros(0), None).data) == 0.0


class TestTokenLoss:
    def test_all_ones_mask_perfect_head(self):
        # head that always outputs a huge logit -> p ~ 1 -> loss ~ 0
        fmap = FeatureMap(1, 8, 2, 2, 3, Tensor(np.zeros((4, 3))))
        w = Tensor(np.zeros((3, 1)))
        b = Tensor(np.full((1,), 50.0))
        masks = np.ones((1, 4, 4))
        out = loss_token([fmap], w, b, masks, n_boxes=1)
        assert float(out.data) < 1e-10

    def test_labels_in_unit_interval(self):
        rng = np.random.default_rng(6)
        masks = (rng.uniform(0, 1, (2, 8, 8)) > 0.5).astype(float)
        t = soft_token_labels(masks, 3, 5)
        assert t.shape == (15, 2)
        assert np.all((t >= 0) & (t <= 1))

    def test_composition_of_oracles(self):
        # 2x2 mask to 4x4 grid: targets from the bilinear oracle, then the
        # scalar focal formula, against loss_token with an identity-like head.
        mask = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        feats = np.linspace(-1, 1, 16).reshape(16, 1)
        fmap = FeatureMap(1, 4, 4, 4, 1, Tensor(feats))
        w = Tensor(np.ones((1, 1)))
        b = Tensor(np.zeros(1))
        got = float(loss_token([fmap], w, b, mask, n_boxes=2).data)
        t = T.interpolate_bilinear(Tensor(mask), (4, 4)).data.reshape(1, 16).T
        p = 1 / (1 + np.exp(-feats))
        pc = np.clip(p, 1e-7, 1 - 1e-7)
        focal = 0.25 * np.abs(t - pc) ** 2 * -(t * np.log(pc) + (1 - t) * np.log(1 - pc))
        assert abs(got - focal.sum() / 2) < 1e-12

    def test_no_masks_zero(self):
        assert float(loss_token([], Tensor(np.zeros((2, 1))),
                                Tensor(np.zeros(1)), None, 3).data) == 0.0


class TestTotalLoss:
    def test_all_zero(self):
        z = Tensor(0.0)
        assert float(total_loss(z, z, z, z, LossWeights()).data) == 0.0

    def test_cls_only_weights(self):
        w = LossWeights(cls=1.0, l1=0.0, giou=0.0, aware=0.0, token=0.0)
        out = total_loss(Tensor(3.0), Tensor(0.0), Tensor(7.0), Tensor(9.0), w)
        assert float(out.data) == 3.0

    def test_additivity(self):
        w = LossWeights()
        parts = [Tensor(0.5), Tensor(1.5), Tensor(0.25), Tensor(2.0)]
        got = float(total_loss(*parts, w).data)
        want = w.cls * 0.5 + 1.5 + w.aware * 0.25 + w.token * 2.0
        assert abs(got - want) < 1e-12

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(cls=-1.0)


def test_matching_acceptance_style_100_instances():
    mismatches = 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        n = int(rng.integers(1, 8))
        b = int(rng.integers(1, min(n, 5) + 1))
        cost = rng.standard_normal((n, b)) * 3
        m = hungarian_match(cost)
        best, _ = brute_force_min_cost(cost)
        got = sum(cost[q, t] for q, t in m.pairs)
        if abs(got - best) > 1e-9:
            mismatches += 1
        qs = [q for q, _ in m.pairs]
        ts = [t for _, t in m.pairs]
        assert len(set(qs)) == len(qs) and len(set(ts)) == b
    assert mismatches == 0
