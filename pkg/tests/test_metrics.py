import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sta_seg.metrics import (
    IGNORE,
    ConfusionMatrix,
    UndefinedMetricError,
    accumulate_confusion,
    evaluation_report,
    mean_temporal_consistency,
    miou,
    temporal_consistency,
    warp_labels,
)


def brute_miou(pred, gt, C):
    """Per-class IoU by explicit pixel loops; classes with empty union skipped."""
    ious = []
    for k in range(C):
        inter = union = 0
        for p, g in zip(np.ravel(pred), np.ravel(gt)):
            if p == IGNORE or g == IGNORE:
                continue
            inter += (p == k) and (g == k)
            union += (p == k) or (g == k)
        if union:
            ious.append(inter / union)
    return sum(ious) / len(ious)


def identity_flow(H, W):
    return np.zeros((H, W, 2))


def test_confusion_diagonal():
    y = np.array([[0, 1], [1, 0]], dtype=np.uint8)
    cm = accumulate_confusion(y, y, 2)
    assert np.trace(cm.counts) == 4 == cm.total


def test_confusion_all_ignored_unchanged():
    cm = ConfusionMatrix(3)
    ign = np.full((2, 2), IGNORE, dtype=np.uint8)
    accumulate_confusion(ign, np.zeros((2, 2), np.uint8), 3, cm)
    accumulate_confusion(np.zeros((2, 2), np.uint8), ign, 3, cm)
    assert cm.total == 0


def test_confusion_hand_tally():
    gt = np.array([[0, 0, 1], [1, 1, 0], [0, 1, 1]], dtype=np.uint8)
    pred = np.array([[0, 1, 1], [0, 1, 0], [1, 1, 0]], dtype=np.uint8)
    tally = np.zeros((2, 2), dtype=np.int64)
    for g, p in zip(gt.ravel(), pred.ravel()):
        tally[g, p] += 1
    np.testing.assert_array_equal(accumulate_confusion(pred, gt, 2).counts, tally)


def test_confusion_rejects_bad_label():
    with pytest.raises(ValueError):
        accumulate_confusion(np.array([[3]]), np.array([[0]]), 3)


def test_confusion_merge_is_associative():
    rng = np.random.default_rng(0)
    pairs = [(rng.integers(0, 3, (4, 4)), rng.integers(0, 3, (4, 4))) for _ in range(3)]
    parts = [accumulate_confusion(p, g, 3) for p, g in pairs]
    whole = ConfusionMatrix(3)
    for p, g in pairs:
        whole.add(p, g)
    np.testing.assert_array_equal(((parts[0] + parts[1]) + parts[2]).counts, whole.counts)


def test_miou_examples():
    y = np.array([[0, 1], [2, 1]])
    assert miou(accumulate_confusion(y, y, 3)) == 1.0
    gt = np.array([[0, 0], [1, 1]])
    assert miou(accumulate_confusion(np.zeros((2, 2), int), gt, 2)) == 0.25
    assert miou(accumulate_confusion(np.zeros((2, 2), int), gt, 5)) == 0.25


def test_miou_undefined():
    with pytest.raises(UndefinedMetricError):
        miou(ConfusionMatrix(2))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**16), st.integers(2, 5))
def test_miou_matches_brute_force(seed, C):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, C, (8, 8))
    gt = rng.integers(0, C, (8, 8))
    gt[rng.random((8, 8)) < 0.1] = IGNORE
    m = miou(accumulate_confusion(pred, gt, C))
    assert m == brute_miou(pred, gt, C)
    assert 0.0 <= m <= 1.0
    assert m == pytest.approx(miou(accumulate_confusion(gt, pred, C)), abs=1e-15)


# --- warping -------------------------------------------------------------------


def test_warp_identity():
    prev = np.random.default_rng(0).integers(0, 4, (5, 6)).astype(np.uint8)
    res = warp_labels(prev, identity_flow(5, 6))
    np.testing.assert_array_equal(res.warped, prev)
    assert res.valid.all()


def test_warp_shift_matches_hand_map():
    prev = np.arange(9, dtype=np.uint8).reshape(3, 3)
    flow = np.zeros((3, 3, 2))
    flow[..., 1] = 1
    res = warp_labels(prev, flow)
    expected = np.array([[1, 2, 255], [4, 5, 255], [7, 8, 255]], dtype=np.uint8)
    np.testing.assert_array_equal(res.warped, expected)
    np.testing.assert_array_equal(res.valid, expected != 255)


def test_warp_all_out_of_bounds():
    flow = np.full((4, 4, 2), 10.0)
    assert not warp_labels(np.zeros((4, 4), np.uint8), flow).valid.any()


def test_warp_occlusion_masks_pixels():
    occ = np.zeros((3, 3), dtype=bool)
    occ[1, 1] = True
    res = warp_labels(np.ones((3, 3), np.uint8), identity_flow(3, 3), occ)
    assert res.warped[1, 1] == IGNORE and not res.valid[1, 1] and res.valid.sum() == 8


def test_warp_rounds_half_up():
    prev = np.arange(4, dtype=np.uint8).reshape(1, 4)
    flow = np.zeros((1, 4, 2))
    flow[..., 1] = 0.5
    assert warp_labels(prev, flow).warped.tolist() == [[1, 2, 3, 255]]


@settings(max_examples=30, deadline=None)
@given(st.integers(-3, 3), st.integers(-3, 3), st.integers(0, 2**16))
def test_integer_warp_inverts_on_interior(dy, dx, seed):
    H, W = 10, 10
    prev = np.random.default_rng(seed).integers(0, 4, (H, W)).astype(np.uint8)
    fwd = np.broadcast_to(np.array([dy, dx], float), (H, W, 2))
    back = warp_labels(warp_labels(prev, fwd).warped, -fwd).warped
    interior = (slice(3, H - 3), slice(3, W - 3))
    np.testing.assert_array_equal(back[interior], prev[interior])


# --- temporal consistency --------------------------------------------------------


def test_tc_identical_is_one():
    p = np.random.default_rng(1).integers(0, 3, (6, 6))
    assert temporal_consistency(p, warp_labels(p, identity_flow(6, 6)), 3) == 1.0


def test_tc_disjoint_is_zero():
    w = warp_labels(np.ones((4, 4), np.uint8), identity_flow(4, 4))
    assert temporal_consistency(np.zeros((4, 4), np.uint8), w, 2) == 0.0


def test_tc_no_valid_pixels():
    w = warp_labels(np.ones((4, 4), np.uint8), np.full((4, 4, 2), -9.0))
    with pytest.raises(UndefinedMetricError):
        temporal_consistency(np.ones((4, 4), np.uint8), w, 2)


def test_tc_brute_force_pairs():
    rng = np.random.default_rng(2)
    for _ in range(20):
        prev = rng.integers(0, 2, (8, 8)).astype(np.uint8)
        cur = rng.integers(0, 2, (8, 8)).astype(np.uint8)
        w = warp_labels(prev, identity_flow(8, 8))
        assert temporal_consistency(cur, w, 2) == brute_miou(cur, prev, 2)


def test_mtc_identical_sequence():
    p = np.random.default_rng(3).integers(0, 3, (5, 5))
    res = mean_temporal_consistency([p] * 4, [identity_flow(5, 5)] * 3, [None] * 3, 3)
    assert res.mtc == 1.0 and res.per_frame == [1.0, 1.0, 1.0] and res.skipped == 0


def test_mtc_hand_average():
    # TC_2 = 1 (unchanged); TC_3: classes 0 and 1 match, 2 -> 3 gives IoU 0 for both.
    a = np.array([[0, 1, 2]], dtype=np.uint8)
    b = np.array([[0, 1, 3]], dtype=np.uint8)
    flows = [identity_flow(1, 3)] * 2
    res = mean_temporal_consistency([a, a, b], flows, [None, None], 4)
    assert res.per_frame == [1.0, 0.5]
    assert res.mtc == 0.75


def test_mtc_skips_undefined_frames():
    p = np.zeros((3, 3), np.uint8)
    flows = [identity_flow(3, 3), np.full((3, 3, 2), 7.0)]
    res = mean_temporal_consistency([p, p, p], flows, [None, None], 2)
    assert res.skipped == 1 and res.mtc == 1.0


def test_mtc_needs_two_frames():
    with pytest.raises(ValueError):
        mean_temporal_consistency([np.zeros((2, 2))], [], [], 2)


def test_mtc_invariant_to_relabelling():
    rng = np.random.default_rng(4)
    preds = [rng.integers(0, 3, (6, 6)) for _ in range(4)]
    flows = [rng.integers(-1, 2, (6, 6, 2)).astype(float) for _ in range(3)]
    perm = np.array([2, 0, 1])
    a = mean_temporal_consistency(preds, flows, [None] * 3, 3).mtc
    b = mean_temporal_consistency([perm[p] for p in preds], flows, [None] * 3, 3).mtc
    assert a == pytest.approx(b, abs=1e-15)


def test_evaluation_report_fields():
    y = np.array([[0, 1], [1, 1]])
    cm = accumulate_confusion(y, y, 2)
    tc = mean_temporal_consistency([y, y], [identity_flow(2, 2)], [None], 2)
    rep = evaluation_report(cm, [tc])
    assert set(rep) == {"miou", "per_class_iou", "mtc", "per_frame_tc", "skipped_frames",
                        "num_eval_pixels"}
    assert rep["miou"] == 1.0 and rep["mtc"] == 1.0 and rep["num_eval_pixels"] == 4
