"""Region/contour metric tests against brute-force oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memvos.errors import ValidationError
from memvos.metrics import (FrameScore, boundary_map, contour_accuracy,
                            default_tolerance, region_similarity, score_frame,
                            sequence_score)


# ---------------------------------------------------------------------------
# independent oracles: plain set arithmetic and exhaustive distance checks

def oracle_iou(pred, gt, oid):
    p = {(y, x) for y, x in zip(*np.nonzero(pred == oid))}
    g = {(y, x) for y, x in zip(*np.nonzero(gt == oid))}
    if not p and not g:
        return 1.0
    return len(p & g) / len(p | g)


def oracle_boundary(binary):
    h, w = binary.shape
    out = set()
    for y in range(h):
        for x in range(w):
            if not binary[y, x]:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w) or not binary[yy, xx]:
                    out.add((y, x))
                    break
    return out


def oracle_f(pred, gt, oid, tol):
    pb = oracle_boundary(pred == oid)
    gb = oracle_boundary(gt == oid)
    if not pb and not gb:
        return 1.0
    if not pb or not gb:
        return 0.0

    def within(src, dst):
        hits = 0
        for (y, x) in src:
            best = min(math.hypot(y - gy, x - gx) for gy, gx in dst)
            hits += best <= tol
        return hits / len(src)

    precision = within(pb, gb)
    recall = within(gb, pb)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def random_mask(rng, h, w, density=0.3):
    return (rng.random((h, w)) < density).astype(np.uint8)


# ---------------------------------------------------------------------------

class TestRegionSimilarity:
    def test_identity(self):
        m = np.zeros((8, 8), np.uint8)
        m[2:5, 3:7] = 1
        assert region_similarity(m, m, 1) == 1.0

    def test_disjoint(self):
        a = np.zeros((8, 8), np.uint8)
        b = np.zeros((8, 8), np.uint8)
        a[0:2, 0:2] = 1
        b[5:7, 5:7] = 1
        assert region_similarity(a, b, 1) == 0.0

    def test_shifted_rectangle_exact(self):
        # 2x4 rectangle against itself shifted 2 columns: inter 4, union 12
        a = np.zeros((8, 8), np.uint8)
        b = np.zeros((8, 8), np.uint8)
        a[3:5, 1:5] = 1
        b[3:5, 3:7] = 1
        assert region_similarity(a, b, 1) == pytest.approx(1.0 / 3.0)

    def test_both_empty(self):
        z = np.zeros((4, 4), np.uint8)
        assert region_similarity(z, z, 1) == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            region_similarity(np.zeros((4, 4)), np.zeros((4, 5)), 1)

    def test_symmetry_random(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            a, b = random_mask(rng, 9, 7), random_mask(rng, 9, 7)
            assert region_similarity(a, b, 1) == region_similarity(b, a, 1)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_matches_set_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_mask(rng, 10, 10), random_mask(rng, 10, 10)
        assert region_similarity(a, b, 1) == pytest.approx(
            oracle_iou(a, b, 1), abs=0)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_monotone_under_correct_completion(self, seed):
        # growing a strict-subset prediction toward groundtruth never hurts
        rng = np.random.default_rng(seed)
        gt = random_mask(rng, 12, 12, 0.4)
        ys, xs = np.nonzero(gt)
        if ys.size < 2:
            return
        keep = rng.random(ys.size) < 0.5
        pred = np.zeros_like(gt)
        pred[ys[keep], xs[keep]] = 1
        j0 = region_similarity(pred, gt, 1)
        add = rng.random(ys.size) < 0.5
        pred2 = pred.copy()
        pred2[ys[add], xs[add]] = 1
        assert region_similarity(pred2, gt, 1) >= j0


class TestBoundary:
    def test_border_counts_as_outside(self):
        m = np.ones((4, 4), bool)
        b = boundary_map(m)
        inner = np.zeros((4, 4), bool)
        inner[1:3, 1:3] = True
        assert b[~inner].all() and not b[inner].any()

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_matches_definition(self, seed):
        rng = np.random.default_rng(seed)
        m = random_mask(rng, 9, 9, 0.5).astype(bool)
        got = {(y, x) for y, x in zip(*np.nonzero(boundary_map(m)))}
        assert got == oracle_boundary(m)


class TestContourAccuracy:
    def test_identity(self):
        m = np.zeros((8, 8), np.uint8)
        m[2:6, 2:6] = 1
        assert contour_accuracy(m, m, 1, 0) == 1.0

    def test_far_apart_zero(self):
        a = np.zeros((16, 16), np.uint8)
        b = np.zeros((16, 16), np.uint8)
        a[0:2, 0:2] = 1
        b[12:14, 12:14] = 1
        assert contour_accuracy(a, b, 1, 1) == 0.0

    def test_single_pixel_offset_tolerances(self):
        # hand-built 6x6: prediction shifted one column
        gt = np.zeros((6, 6), np.uint8)
        pred = np.zeros((6, 6), np.uint8)
        gt[2:4, 1:3] = 1
        pred[2:4, 2:4] = 1
        for tol in (0, 1):
            assert contour_accuracy(pred, gt, 1, tol) == pytest.approx(
                oracle_f(pred, gt, 1, tol), abs=1e-12)

    def test_empty_pred_nonempty_gt(self):
        gt = np.zeros((6, 6), np.uint8)
        gt[2:4, 2:4] = 1
        assert contour_accuracy(np.zeros_like(gt), gt, 1, 1) == 0.0

    def test_default_tolerance_rule(self):
        assert default_tolerance(96, 96) == math.ceil(0.008 * math.hypot(96, 96))
        assert default_tolerance(480, 854) == math.ceil(
            0.008 * math.hypot(480, 854))

    def test_negative_tolerance_rejected(self):
        m = np.zeros((4, 4), np.uint8)
        with pytest.raises(ValidationError):
            contour_accuracy(m, m, 1, -1)

    @given(st.integers(0, 2 ** 32 - 1), st.integers(0, 2))
    @settings(max_examples=40, deadline=None)
    def test_matches_distance_oracle(self, seed, tol):
        rng = np.random.default_rng(seed)
        a, b = random_mask(rng, 8, 8), random_mask(rng, 8, 8)
        assert contour_accuracy(a, b, 1, tol) == pytest.approx(
            oracle_f(a, b, 1, tol), abs=1e-9)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_tolerance_monotone(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_mask(rng, 10, 10), random_mask(rng, 10, 10)
        vals = [contour_accuracy(a, b, 1, t) for t in range(0, 4)]
        assert all(v1 >= v0 - 1e-12 for v0, v1 in zip(vals, vals[1:]))


class TestScoreFrame:
    def test_absent_object_correctly_empty(self):
        z = np.zeros((6, 6), np.uint8)
        s = score_frame(z, z, 1, 3)
        assert (s.j, s.f) == (1.0, 1.0)

    def test_absent_object_false_positive(self):
        z = np.zeros((6, 6), np.uint8)
        p = z.copy()
        p[2, 2] = 1
        s = score_frame(p, z, 1, 3)
        assert (s.j, s.f) == (0.0, 0.0)

    def test_policy_configurable(self):
        z = np.zeros((6, 6), np.uint8)
        p = z.copy()
        p[2, 2] = 1
        s = score_frame(p, z, 1, 3, reward_correct_absence=False)
        assert s.j == 0.0  # raw IoU with empty gt

    def test_score_bounds_enforced(self):
        with pytest.raises(ValidationError):
            FrameScore(1, 0, 1.5, 0.0)


class TestSequenceScore:
    def test_all_ones(self):
        frames = [FrameScore(1, t, 1.0, 1.0) for t in range(3)]
        s = sequence_score(frames)
        assert (s.mean_j, s.mean_f, s.jf) == (1.0, 1.0, 1.0)

    def test_known_arithmetic(self):
        frames = [FrameScore(1, 1, 0.4, 0.6), FrameScore(1, 2, 0.6, 0.8)]
        s = sequence_score(frames)
        assert (s.mean_j, s.mean_f, s.jf) == (
            pytest.approx(0.5), pytest.approx(0.7), pytest.approx(0.6))

    def test_headline_is_midpoint_of_published_style_means(self):
        # e.g. mean J 55.0 and mean F 66.3 average to 60.65 (~60.7 at one
        # decimal)
        mid = (55.0 + 66.3) / 2
        assert mid == pytest.approx(60.65)
        assert mid == pytest.approx(60.7, abs=0.0501)

    def test_midpoint_exact(self):
        rng = np.random.default_rng(1)
        frames = [FrameScore(1, t, float(rng.random()), float(rng.random()))
                  for t in range(7)]
        s = sequence_score(frames)
        assert s.jf == (s.mean_j + s.mean_f) / 2.0

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            sequence_score([])
