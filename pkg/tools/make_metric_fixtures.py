"""Regenerate the metric scene fixtures shipped in src/gatedunipose/fixtures.

Only the scene geometry is produced here. The matching *_golden.json files are
enumerated by hand from the construction described below and must not be
regenerated from the evaluator.

AP scene: one image, three people A, B, C (area 10000, so s = 100) and four
scored predictions: exact A (0.9); B with every joint displaced so each
per-joint term is 0.62 (0.8); a spurious detection (0.7); exact C (0.6).

PCKh scene: four people, 16 joints, head sizes 40/50/60/80. Joint errors are
horizontal, as fractions of head size: person 0 all 0, person 1 all 0.5
(boundary), person 2 1.2 on even joints and 0.3 on odd, person 3 0.7 on
joints 0-7 and 0 on 8-15 with the head joint (9) unlabeled.
"""
import json
import math
from pathlib import Path

COCO_NAMES = ["nose", "left_eye", "right_eye", "left_ear", "right_ear", "left_shoulder",
              "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
              "left_hip", "right_hip", "left_knee", "right_knee", "left_ankle", "right_ankle"]
COCO_SIGMAS = [.26, .25, .25, .35, .35, .79, .79, .72, .72, .62, .62, 1.07, 1.07, .87, .87, .89, .89]
MPII_NAMES = ["r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "pelvis", "thorax",
              "upper_neck", "head_top", "r_wrist", "r_elbow", "r_shoulder", "l_shoulder",
              "l_elbow", "l_wrist"]

OUT = Path(__file__).resolve().parents[1] / "src" / "gatedunipose" / "fixtures"


def person(x0, y0, joints):
    return [[x0 + 10.0 * j, y0 + 5.0 * j, 2.0] for j in range(joints)]


def flat(kps):
    return [v for kp in kps for v in kp]


def ap_scene():
    origins = {1: (100.0, 100.0), 2: (600.0, 100.0), 3: (1100.0, 100.0)}
    anns = []
    for ann_id, (x0, y0) in origins.items():
        anns.append({"id": ann_id, "image_id": 1, "category_id": 1, "bbox": [x0 - 10, y0 - 10, 200.0, 120.0],
                     "keypoints": flat(person(x0, y0, 17)), "num_keypoints": 17, "area": 10000.0, "iscrowd": 0})
    s = 100.0
    shifted = person(*origins[2], 17)
    for kp, sigma in zip(shifted, COCO_SIGMAS):
        kappa = 2 * sigma / 10.0
        kp[0] += s * kappa * math.sqrt(-2.0 * math.log(0.62))
    preds = [
        {"image_id": 1, "category_id": 1, "score": 0.9, "keypoints": flat(person(*origins[1], 17))},
        {"image_id": 1, "category_id": 1, "score": 0.8, "keypoints": flat(shifted)},
        {"image_id": 1, "category_id": 1, "score": 0.7, "keypoints": flat(person(2000.0, 2000.0, 17))},
        {"image_id": 1, "category_id": 1, "score": 0.6, "keypoints": flat(person(*origins[3], 17))},
    ]
    doc = {"images": [{"id": 1, "width": 1400, "height": 400}], "annotations": anns,
           "categories": [{"id": 1, "name": "person", "keypoints": COCO_NAMES}]}
    return doc, preds


def pckh_scene():
    heads = [40.0, 50.0, 60.0, 80.0]
    fractions = [
        [0.0] * 16,
        [0.5] * 16,
        [1.2 if j % 2 == 0 else 0.3 for j in range(16)],
        [0.7 if j < 8 else 0.0 for j in range(16)],
    ]
    anns, preds = [], []
    for p, (head, frac) in enumerate(zip(heads, fractions)):
        gt = person(100.0, 100.0 + 300.0 * p, 16)
        if p == 3:
            gt[9][2] = 0.0
        pred = [[x + f * head, y, 1.0] for (x, y, _), f in zip(gt, frac)]
        if p == 3:
            pred[9][0] += 500.0
        anns.append({"id": p + 1, "image_id": 1, "category_id": 1, "bbox": [90.0, 90.0 + 300.0 * p, 200.0, 120.0],
                     "keypoints": flat(gt), "area": 24000.0, "iscrowd": 0, "head_size": head})
        preds.append({"image_id": 1, "category_id": 1, "score": 1.0, "annotation_id": p + 1,
                      "keypoints": flat(pred)})
    doc = {"images": [{"id": 1, "width": 600, "height": 1300}], "annotations": anns,
           "categories": [{"id": 1, "name": "person", "keypoints": MPII_NAMES}]}
    return doc, preds


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, (doc, preds) in (("ap_scene", ap_scene()), ("pckh_scene", pckh_scene())):
        (OUT / f"{name}_annotations.json").write_text(json.dumps(doc, indent=1) + "\n")
        (OUT / f"{name}_predictions.json").write_text(json.dumps(preds, indent=1) + "\n")


if __name__ == "__main__":
    main()
