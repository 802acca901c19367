import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatedunipose import verify as V
from gatedunipose.data import AnnotationRecord, PredictionRecord, predictions_from_annotations
from gatedunipose.evaluation import (
    COCO_KAPPAS,
    CROWDPOSE_KAPPAS,
    MPII_GROUPS,
    OKS_THRESHOLDS,
    OksParams,
    average_precision,
    default_kappas,
    oks,
    pckh,
)
from gatedunipose.exceptions import ShapeError, UndefinedOKSError


def _gt(rng, joints=17):
    kps = np.concatenate([rng.uniform(0, 300, (joints, 2)), np.full((joints, 1), 2.0)], axis=1)
    return kps


# ---------------------------------------------------------------------------
# OKS


def test_oks_identity(rng):
    gt = _gt(rng)
    assert oks(gt, gt, OksParams(COCO_KAPPAS, 50.0)) == 1.0


def test_oks_single_joint_at_e_minus_one(rng):
    gt = _gt(rng)
    gt[:, 2] = 0
    gt[4, 2] = 2
    s, k = 37.0, COCO_KAPPAS[4]
    pred = gt.copy()
    d = s * k * np.sqrt(2)
    pred[4, :2] += d * np.array([0.6, 0.8])
    assert abs(oks(pred, gt, OksParams(COCO_KAPPAS, s)) - np.exp(-1)) <= 1e-6
    assert oks(pred, gt, OksParams(COCO_KAPPAS, s)) == pytest.approx(0.3679, abs=5e-5)


def test_unlabeled_joint_does_not_affect_oks(rng):
    gt = _gt(rng)
    gt[3, 2] = 0
    pred = gt + np.r_[rng.normal(0, 2, (17, 2)).T, [np.zeros(17)]].T
    params = OksParams(COCO_KAPPAS, 40.0)
    moved = pred.copy()
    moved[3, :2] += 500
    assert oks(moved, gt, params) == oks(pred, gt, params)


def test_oks_errors(rng):
    gt = _gt(rng)
    with pytest.raises(UndefinedOKSError):
        g = gt.copy()
        g[:, 2] = 0
        oks(gt, g, OksParams(COCO_KAPPAS, 10.0))
    with pytest.raises(ShapeError):
        oks(gt[:16], gt, OksParams(COCO_KAPPAS, 10.0))
    with pytest.raises(ValueError):
        OksParams(COCO_KAPPAS, 0.0)
    with pytest.raises(ValueError):
        OksParams(-COCO_KAPPAS, 1.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31), joint=st.integers(0, 16), steps=st.lists(st.floats(0, 50), min_size=2, max_size=6))
def test_oks_bounded_and_non_increasing_in_one_distance(seed, joint, steps):
    rng = np.random.default_rng(seed)
    gt = _gt(rng)
    base = gt + np.r_[rng.normal(0, 5, (17, 2)).T, [np.zeros(17)]].T
    params = OksParams(COCO_KAPPAS, float(rng.uniform(5, 100)))
    direction = rng.normal(size=2)
    direction /= np.linalg.norm(direction)
    values = []
    for d in np.cumsum(steps):
        pred = base.copy()
        pred[joint, :2] = gt[joint, :2] + d * direction
        values.append(oks(pred, gt, params))
    assert all(0.0 <= v <= 1.0 for v in values)
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_default_constant_tables():
    assert default_kappas(17) is COCO_KAPPAS
    assert default_kappas(14) is CROWDPOSE_KAPPAS
    assert COCO_KAPPAS[0] == pytest.approx(0.052)  # nose
    with pytest.raises(ValueError):
        default_kappas(16)


# ---------------------------------------------------------------------------
# AP


def _scene(rng, images=3, joints=17):
    preds, gts = V.random_scene(rng, images=images, joints=joints)
    return gts, preds


def test_perfect_predictions_give_ap_one(rng):
    gts, _ = _scene(rng)
    report = average_precision(predictions_from_annotations(gts), gts)
    assert report.value == 1.0
    assert report.per_threshold[0.5] == report.per_threshold[0.75] == 1.0
    assert report.counts["matched"] == len(gts) and report.counts["unmatched"] == 0


def test_no_predictions_give_zero_and_a_warning(rng):
    gts, _ = _scene(rng)
    report = average_precision([], gts)
    assert report.value == 0.0
    assert report.warnings == ["no predictions"]


def test_no_ground_truth_gives_zero(rng):
    _, preds = _scene(rng)
    report = average_precision(preds, [])
    assert report.value == 0.0 and report.counts["ground_truths"] == 0
    assert report.warnings


def test_ap_golden_fixture_matches_exactly():
    report = V.ap_fixture_report()
    golden = V.load_golden("ap_scene_golden.json")
    assert V.compare_golden(report, golden) == []
    # the 0.62-OKS match counts at 0.5 but not at 0.75
    assert report.per_threshold[0.5] > report.per_threshold[0.75]


@pytest.mark.parametrize("seed", range(10))
def test_ap_non_increasing_across_thresholds(seed):
    gts, preds = _scene(np.random.default_rng(seed), images=5)
    values = list(average_precision(preds, gts).per_threshold.values())
    assert all(b <= a for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("transform", [lambda s: 3 * s + 7, np.exp, lambda s: s ** 3, np.arctan])
def test_ap_depends_on_score_ranking_only(rng, transform):
    gts, preds = _scene(rng, images=5)
    moved = [PredictionRecord(p.image_id, float(transform(p.score)), p.keypoints, p.annotation_id)
             for p in preds]
    assert average_precision(moved, gts).to_dict() == average_precision(preds, gts).to_dict()


def test_crowd_and_unlabeled_ground_truths_are_ignored(rng):
    gts, _ = _scene(rng, images=1)
    crowd = AnnotationRecord(900, gts[0].image_id, (0, 0, 50, 50), _gt(rng), 2500.0, iscrowd=1)
    blank = _gt(rng)
    blank[:, 2] = 0
    empty = AnnotationRecord(901, gts[0].image_id, (0, 0, 50, 50), blank, 2500.0)
    preds = predictions_from_annotations(gts)
    # a detection landing on the crowd region is neither a hit nor a false positive
    preds.append(PredictionRecord(gts[0].image_id, 0.99, crowd.keypoints.copy()))
    report = average_precision(preds, gts + [crowd, empty])
    assert report.value == 1.0
    assert report.counts["ground_truths"] == len(gts)


def test_joint_count_mismatch_raises(rng):
    gts, preds = _scene(rng)
    bad = [PredictionRecord(1, 0.5, np.zeros((16, 3)))]
    with pytest.raises(ShapeError):
        average_precision(preds + bad, gts)


def test_thresholds_default_to_ten_steps():
    assert list(OKS_THRESHOLDS) == [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95]


def test_report_table_and_json(rng):
    gts, preds = _scene(rng)
    report = average_precision(preds, gts)
    head, row = report.format_table().splitlines()
    assert head.split() == ["AP", "|", "AP50", "|", "AP75"]
    assert float(row.split("|")[0]) == pytest.approx(100 * report.value, abs=0.05)
    assert '"family": "ap"' in report.to_json()


# ---------------------------------------------------------------------------
# PCKh


def _mpii(rng, n=4):
    gts = []
    for i in range(n):
        kps = np.concatenate([rng.uniform(0, 200, (16, 2)), np.full((16, 1), 2.0)], axis=1)
        gts.append(AnnotationRecord(i + 1, i // 2, (0, 0, 200, 200), kps, 4e4, head_size=float(rng.uniform(20, 60))))
    return gts


def test_exact_predictions_give_pckh_one(rng):
    gts = _mpii(rng)
    report = pckh(predictions_from_annotations(gts), gts)
    assert report.value == 1.0
    assert set(report.per_joint.values()) == {1.0}
    assert list(report.per_joint) == list(MPII_GROUPS)


def test_pckh_boundary_is_closed(rng):
    gts = _mpii(rng, 1)
    gts[0].keypoints[:, :2] = np.round(gts[0].keypoints[:, :2])
    gts[0].head_size = 40.0
    preds = predictions_from_annotations(gts)
    preds[0].keypoints[:, 0] += 20.0  # exactly on the boundary
    assert pckh(preds, gts).value == 1.0
    preds[0].keypoints[:, 0] += 1e-6
    assert pckh(preds, gts).value == 0.0


def test_pckh_golden_fixture_matches_exactly():
    assert V.compare_golden(V.pckh_fixture_report(), V.load_golden("pckh_scene_golden.json")) == []


def test_missing_head_size_is_skipped_and_counted(rng):
    gts = _mpii(rng, 3)
    gts[1].head_size = None
    preds = predictions_from_annotations(gts)
    preds[1].keypoints[:, :2] += 1000  # would fail if scored
    report = pckh(preds, gts)
    assert report.value == 1.0
    assert report.counts == {"instances": 2, "skipped": 1, "unmatched": 0}
    assert report.warnings


def test_pckh_pairs_by_order_without_annotation_ids(rng):
    gts = _mpii(rng, 4)
    preds = [PredictionRecord(g.image_id, 1.0, g.keypoints.copy()) for g in gts]
    assert pckh(preds, gts).value == 1.0


def test_pckh_unmatched_ground_truth_counts_as_missed(rng):
    gts = _mpii(rng, 2)
    report = pckh(predictions_from_annotations(gts[:1]), gts)
    assert report.counts["unmatched"] == 1
    assert report.value == pytest.approx(0.5)


def test_pckh_fraction_must_be_positive(rng):
    with pytest.raises(ValueError):
        pckh([], _mpii(rng, 1), fraction=0)


def test_pckh_table_column_order(rng):
    gts = _mpii(rng, 1)
    head = pckh(predictions_from_annotations(gts), gts).format_table().splitlines()[0]
    assert [c.strip() for c in head.split("|")] == ["Hea.", "Sho.", "Elb.", "Wri.", "Hip.", "Kne.", "Ank.", "Mean"]


def test_ground_truth_against_itself(rng):
    gts, _ = _scene(rng)
    assert average_precision(predictions_from_annotations(gts), gts).value == 1.0
    mp = _mpii(rng)
    assert pckh(predictions_from_annotations(mp), mp).value == 1.0
