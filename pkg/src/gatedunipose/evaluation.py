"""Keypoint metrics: OKS-based average precision and head-normalised PCK."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError, UndefinedOKSError

# Published per-joint standard deviations; the OKS falloff constant is k_i = 2 * sigma_i.
COCO_SIGMAS = np.array([.26, .25, .25, .35, .35, .79, .79, .72, .72, .62, .62,
                        1.07, 1.07, .87, .87, .89, .89]) / 10.0
CROWDPOSE_SIGMAS = np.array([.79, .79, .72, .72, .62, .62, 1.07, 1.07,
                             .87, .87, .89, .89, .79, .79]) / 10.0
COCO_KAPPAS = 2 * COCO_SIGMAS
CROWDPOSE_KAPPAS = 2 * CROWDPOSE_SIGMAS

OKS_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

# MPII 16-joint layout.
MPII_GROUPS = {
    "Hea.": (9,),
    "Sho.": (12, 13),
    "Elb.": (11, 14),
    "Wri.": (10, 15),
    "Hip.": (2, 3),
    "Kne.": (1, 4),
    "Ank.": (0, 5),
}
MPII_EXCLUDED_FROM_MEAN = (6, 7)  # pelvis, thorax


def default_kappas(joints: int) -> np.ndarray:
    if joints == 17:
        return COCO_KAPPAS
    if joints == 14:
        return CROWDPOSE_KAPPAS
    raise ValueError(f"no default OKS constants for {joints} joints; pass kappas explicitly")


@dataclass
class OksParams:
    kappas: np.ndarray
    scale: float

    def __post_init__(self):
        self.kappas = np.asarray(self.kappas, dtype=np.float64)
        if np.any(self.kappas <= 0) or self.scale <= 0:
            raise ValueError("OKS constants and instance scale must be positive")


def oks(pred, gt, params: OksParams) -> float:
    """Object keypoint similarity over the ground truth's labeled joints."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape[0] != gt.shape[0] or params.kappas.shape != (gt.shape[0],):
        raise ShapeError(f"joint counts differ: pred {pred.shape[0]}, gt {gt.shape[0]}, "
                         f"constants {params.kappas.shape[0]}")
    labeled = gt[:, 2] > 0
    if not labeled.any():
        raise UndefinedOKSError("OKS is undefined for a ground truth without labeled joints")
    d2 = ((pred[:, :2] - gt[:, :2]) ** 2).sum(axis=1)
    e = d2 / (2.0 * params.scale ** 2 * params.kappas ** 2)
    return float(np.exp(-e[labeled]).mean())


@dataclass
class EvalReport:
    family: str
    value: float
    per_threshold: dict = field(default_factory=dict)
    per_joint: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "value": self.value,
            "per_threshold": {str(k): v for k, v in self.per_threshold.items()},
            "per_joint": dict(self.per_joint),
            "counts": dict(self.counts),
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def format_table(self) -> str:
        if self.family == "ap":
            cols = ["AP", "AP50", "AP75"]
            vals = [self.value, self.per_threshold.get(0.5, 0.0), self.per_threshold.get(0.75, 0.0)]
        else:
            cols = list(self.per_joint) + ["Mean"]
            vals = list(self.per_joint.values()) + [self.value]
        head = " | ".join(f"{c:>6}" for c in cols)
        row = " | ".join(f"{100 * v:6.1f}" for v in vals)
        return f"{head}\n{row}"


def _group(items):
    out = defaultdict(list)
    for item in items:
        out[item.image_id].append(item)
    return out


def _match_image(dts, gts, kappas, thresholds):
    """Greedy per-image matching; returns (dt_matched[T, D], dt_ignored[T, D], gt_ignored[G])."""
    gt_ignore = np.array([bool(g.iscrowd) or g.num_labeled == 0 for g in gts], dtype=bool)
    order = np.argsort(gt_ignore, kind="mergesort")
    gts = [gts[i] for i in order]
    gt_ignore = gt_ignore[order]
    crowd = np.array([bool(g.iscrowd) for g in gts], dtype=bool)
    sim = np.zeros((len(dts), len(gts)))
    for j, g in enumerate(gts):
        if g.num_labeled == 0:
            continue
        params = OksParams(kappas, np.sqrt(max(g.area, np.finfo(float).eps)))
        for i, d in enumerate(dts):
            sim[i, j] = oks(d.keypoints, g.keypoints, params)
    n_t = len(thresholds)
    matched = np.zeros((n_t, len(dts)), dtype=bool)
    ignored = np.zeros((n_t, len(dts)), dtype=bool)
    for t, thr in enumerate(thresholds):
        gt_taken = np.zeros(len(gts), dtype=bool)
        for i in range(len(dts)):
            best, m = min(thr, 1 - 1e-10), -1
            for j in range(len(gts)):
                if gt_taken[j] and not crowd[j]:
                    continue
                if m > -1 and not gt_ignore[m] and gt_ignore[j]:
                    break
                if sim[i, j] < best:
                    continue
                best, m = sim[i, j], j
            if m == -1:
                continue
            ignored[t, i] = gt_ignore[m]
            matched[t, i] = True
            gt_taken[m] = True
    return matched, ignored, gt_ignore


def _interpolated_ap(scores, matched, ignored, n_positive):
    order = np.argsort(-scores, kind="mergesort")
    matched, ignored = matched[order], ignored[order]
    keep = ~ignored
    tp = np.cumsum(matched[keep]).astype(np.float64)
    fp = np.cumsum(~matched[keep]).astype(np.float64)
    if tp.size == 0:
        return 0.0
    recall = tp / n_positive
    precision = tp / np.maximum(tp + fp, np.spacing(1))
    for i in range(precision.size - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(q.mean())


def average_precision(predictions, ground_truths, kappas=None, thresholds=OKS_THRESHOLDS,
                      max_detections: int = 20) -> EvalReport:
    """OKS average precision with 101-point interpolation, averaged over thresholds.

    ``predictions`` carry ``image_id``, ``score``, ``keypoints`` [J, 3];
    ``ground_truths`` carry ``image_id``, ``keypoints``, ``area``, ``iscrowd``.
    Ground truths with no labeled joints, and crowd regions, are ignored.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    predictions, ground_truths = list(predictions), list(ground_truths)
    joints = ground_truths[0].keypoints.shape[0] if ground_truths else (
        predictions[0].keypoints.shape[0] if predictions else 17)
    for rec in predictions + ground_truths:
        if rec.keypoints.shape[0] != joints:
            raise ShapeError(f"joint count mismatch: {rec.keypoints.shape[0]} vs {joints}")
    kappas = default_kappas(joints) if kappas is None else np.asarray(kappas, dtype=np.float64)

    pred_by_image, gt_by_image = _group(predictions), _group(ground_truths)
    scores, matched, ignored = [], [], []
    n_positive = 0
    for image_id in sorted(set(pred_by_image) | set(gt_by_image)):
        gts = gt_by_image.get(image_id, [])
        dts = pred_by_image.get(image_id, [])
        dts = sorted(dts, key=lambda d: -d.score)[:max_detections]
        m, ig, gt_ignore = _match_image(dts, gts, kappas, thresholds)
        n_positive += int((~gt_ignore).sum())
        scores.extend(d.score for d in dts)
        matched.append(m)
        ignored.append(ig)

    report = EvalReport(family="ap", value=0.0)
    report.counts = {"predictions": len(predictions), "ground_truths": n_positive}
    if n_positive == 0 or not scores:
        report.per_threshold = {float(t): 0.0 for t in thresholds}
        report.warnings.append("no ground truth instances" if n_positive == 0 else "no predictions")
        report.counts.update(matched=0, unmatched=len(predictions))
        return report
    scores = np.asarray(scores, dtype=np.float64)
    matched = np.concatenate(matched, axis=1)
    ignored = np.concatenate(ignored, axis=1)
    for t, thr in enumerate(thresholds):
        report.per_threshold[float(thr)] = _interpolated_ap(scores, matched[t], ignored[t], n_positive)
    report.value = float(np.mean(list(report.per_threshold.values())))
    t50 = int(np.argmin(np.abs(thresholds - 0.5)))
    report.counts.update(matched=int((matched[t50] & ~ignored[t50]).sum()),
                         unmatched=int((~matched[t50] & ~ignored[t50]).sum()))
    return report


def pckh(predictions, ground_truths, fraction: float = 0.5) -> EvalReport:
    """Head-normalised PCK: a joint counts when its error is <= fraction * head size.

    Predictions are paired to ground truths by ``annotation_id`` when present,
    otherwise by order within each image. Ground truths lacking a head size are
    skipped and counted. With the 16-joint MPII layout, per-part rates average
    the left and right joint rates and the mean weights every joint except
    pelvis and thorax by its visible count.
    """
    if fraction <= 0:
        raise ValueError("fraction must be positive")
    ground_truths = list(ground_truths)
    joints = ground_truths[0].keypoints.shape[0] if ground_truths else 16
    by_ann = {p.annotation_id: p for p in predictions if p.annotation_id is not None}
    pred_by_image = _group([p for p in predictions if p.annotation_id is None])
    position = defaultdict(int)

    correct = np.zeros(joints)
    visible = np.zeros(joints)
    skipped = unmatched = 0
    for g in ground_truths:
        if g.keypoints.shape[0] != joints:
            raise ShapeError(f"joint count mismatch: {g.keypoints.shape[0]} vs {joints}")
        pred = by_ann.get(g.id)
        if pred is None:
            pool = pred_by_image.get(g.image_id, [])
            k = position[g.image_id]
            position[g.image_id] += 1
            pred = pool[k] if k < len(pool) else None
        if g.head_size is None or g.head_size <= 0:
            skipped += 1
            continue
        vis = g.keypoints[:, 2] > 0
        visible += vis
        if pred is None:
            unmatched += 1
            continue
        if pred.keypoints.shape[0] != joints:
            raise ShapeError(f"joint count mismatch: {pred.keypoints.shape[0]} vs {joints}")
        dist = np.linalg.norm(pred.keypoints[:, :2] - g.keypoints[:, :2], axis=1)
        correct += vis & (dist <= fraction * g.head_size)

    rates = np.divide(correct, visible, out=np.zeros(joints), where=visible > 0)
    report = EvalReport(family="pckh", value=0.0)
    report.counts = {"instances": len(ground_truths) - skipped, "skipped": skipped, "unmatched": unmatched}
    if skipped:
        report.warnings.append(f"{skipped} ground truths without head size skipped")
    if joints == 16:
        for name, idx in MPII_GROUPS.items():
            report.per_joint[name] = float(np.mean(rates[list(idx)]))
        used = np.ones(joints, dtype=bool)
        used[list(MPII_EXCLUDED_FROM_MEAN)] = False
    else:
        for j in range(joints):
            report.per_joint[f"j{j}"] = float(rates[j])
        used = np.ones(joints, dtype=bool)
    total = visible[used].sum()
    report.value = float(correct[used].sum() / total) if total else 0.0
    report.per_threshold = {fraction: report.value}
    return report
