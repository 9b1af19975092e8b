import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptdet import metrics as M
from oracles import brute_force_ap


def _random_case(rng, num_images=None, num_classes=3):
    images, plain = [], []
    for _ in range(num_images or int(rng.integers(1, 5))):
        ng = int(rng.integers(0, 5))
        gl = rng.integers(0, num_classes, ng)
        gc = rng.uniform(0.2, 0.8, (ng, 2))
        gwh = rng.uniform(0.05, 0.4, (ng, 2))
        gb = np.c_[gc - gwh / 2, gc + gwh / 2]
        nd = int(rng.integers(0, 7))
        # half the detections jitter a gt box, the rest are anywhere
        db = np.empty((nd, 4))
        for d in range(nd):
            if ng and rng.random() < 0.5:
                db[d] = gb[rng.integers(ng)] + rng.normal(0, 0.03, 4)
            else:
                c = rng.uniform(0.2, 0.8, 2)
                wh = rng.uniform(0.05, 0.4, 2)
                db[d] = np.r_[c - wh / 2, c + wh / 2]
        dl = rng.integers(0, num_classes, nd)
        ds = np.round(rng.uniform(0, 1, nd), 1)  # coarse scores force ties
        images.append(M.ImageDetections(ds, dl, db, gl, gb))
        plain.append(([(s, l, b) for s, l, b in zip(ds, dl, db)], [(l, b) for l, b in zip(gl, gb)]))
    return images, plain


def test_class_ap_matches_brute_force_on_200_cases():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(200):
        images, plain = _random_case(rng)
        for cls in range(3):
            for thr in (0.5, 0.75):
                want = brute_force_ap(plain, cls, thr)
                got = M.class_ap(images, cls, thr)
                if want is None:
                    assert got is None
                else:
                    assert got == pytest.approx(want, abs=1e-12)
                    checked += 1
    assert checked > 300


def test_ap_never_exceeds_ap50():
    rng = np.random.default_rng(1)
    for _ in range(200):
        images, _ = _random_case(rng)
        r = M.evaluate(images, 3)
        assert r.AP <= r.AP50 + 1e-12
        assert r.AP75 <= r.AP50 + 1e-12
        for v in r.headline().values():
            assert 0.0 <= v <= 1.0


def test_perfect_detections_score_one():
    gb = np.array([[0.1, 0.1, 0.4, 0.4], [0.5, 0.5, 0.9, 0.8]])
    im = M.ImageDetections(np.array([0.9, 0.8]), np.array([0, 1]), gb.copy(), np.array([0, 1]), gb)
    r = M.evaluate([im], 2)
    assert r.AP50 == 1.0 and r.AP == 1.0


def test_duplicate_detection_is_false_positive():
    gb = np.array([[0.1, 0.1, 0.4, 0.4]])
    im = M.ImageDetections(np.array([0.9, 0.95]), np.array([0, 0]), np.r_[gb, gb], np.array([0]), gb)
    # top-ranked detection claims the gt; precision stays 1 up to recall 1
    assert M.class_ap([im], 0, 0.5) == 1.0
    im2 = M.ImageDetections(np.array([0.9, 0.95]), np.array([0, 0]), np.r_[gb, [[0.6, 0.6, 0.7, 0.7]]], np.array([0]), gb)
    assert M.class_ap([im2], 0, 0.5) == pytest.approx(0.5)


def test_class_without_gt_is_skipped():
    gb = np.array([[0.1, 0.1, 0.4, 0.4]])
    im = M.ImageDetections(np.array([0.9, 0.5]), np.array([0, 2]), np.r_[gb, gb], np.array([0]), gb)
    r = M.evaluate([im], 3)
    assert set(r.per_class_AP50) == {0}
    assert r.AP50 == 1.0


def test_average_precision_needs_gt():
    with pytest.raises(ValueError):
        M.average_precision([1, 0], 0)
    assert M.average_precision([], 3) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), max_size=20), st.integers(1, 10))
def test_average_precision_bounds(flags, num_gt):
    flags = flags[: num_gt + 10]
    if sum(flags) > num_gt:
        return
    ap = M.average_precision(flags, num_gt)
    # at most every recall point up to the final recall has precision 1
    covered = np.sum(M.RECALL_POINTS <= sum(flags) / num_gt + 1e-12)
    assert 0.0 <= ap <= covered / M.RECALL_POINTS.size + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_image_order_does_not_matter_without_ties(seed):
    rng = np.random.default_rng(seed)
    images, _ = _random_case(rng, num_images=3)
    for im in images:
        im.scores = im.scores + rng.uniform(0, 1e-3, im.scores.shape)  # break ties
    a = M.evaluate(images, 3)
    b = M.evaluate(images[::-1], 3)
    assert a.AP50 == pytest.approx(b.AP50, abs=1e-12)
    assert a.AP == pytest.approx(b.AP, abs=1e-12)


def test_size_buckets_partition_ground_truth():
    gb = np.array([[0.0, 0.0, 0.05, 0.05], [0.0, 0.0, 0.2, 0.2], [0.0, 0.0, 0.6, 0.6]])
    im = M.ImageDetections(np.array([0.9, 0.8, 0.7]), np.zeros(3, int), gb.copy(), np.zeros(3, int), gb)
    r = M.evaluate([im], 1)
    assert r.AP_S == 1.0 and r.AP_M == 1.0 and r.AP_L == 1.0
