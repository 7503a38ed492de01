#!/usr/bin/env python3
"""Brute-force detection-metric oracle.

Builds a small synthetic labeled scene, scores a prediction file against it by
explicit enumeration and writes everything the CLI eval golden test needs:

    manifest.json + labels/*.txt   ground truth
    predictions.csv                detections
    expected.json                  per-class AP, TP/FP counts, mAP, best F1

Run from the repository root:  python3 tests/oracles/eval_oracle.py
"""

import json
import random
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "data" / "eval_golden"
CLASSES = ["smoke", "haze"]
W, H = 640, 480
IOU = 0.5


def iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    aa = (a[2] - a[0]) * (a[3] - a[1])
    ba = (b[2] - b[0]) * (b[3] - b[1])
    union = min(aa, ba) + max(aa, ba) - inter
    return 0.0 if union <= 0 else min(max(inter / union, 0.0), 1.0)


def clamp(v, hi):
    return min(max(v, 0.0), hi)


def yolo_to_xyxy(cx, cy, w, h):
    return (clamp((cx - w / 2) * W, W), clamp((cy - h / 2) * H, H),
            clamp((cx + w / 2) * W, W), clamp((cy + h / 2) * H, H))


def build_scene(rng):
    truths, preds = {}, {}
    for i in range(12):
        image_id = f"img{i:02d}"
        boxes = []
        for _ in range(rng.randint(0, 4)):
            cls = rng.randint(0, 1)
            w = round(rng.uniform(0.05, 0.3), 4)
            h = round(rng.uniform(0.05, 0.3), 4)
            cx = round(rng.uniform(w / 2 + 0.01, 1 - w / 2 - 0.01), 4)
            cy = round(rng.uniform(h / 2 + 0.01, 1 - h / 2 - 0.01), 4)
            boxes.append((cls, cx, cy, w, h))
        truths[image_id] = boxes
        dets = []
        for cls, cx, cy, w, h in boxes:
            if rng.random() < 0.8:
                x1, y1, x2, y2 = yolo_to_xyxy(cx, cy, w, h)
                j = rng.choice([0.0, 0.05, 0.15, 0.45])
                dx, dy = j * (x2 - x1), j * (y2 - y1)
                dets.append((cls, round(rng.uniform(0.2, 0.99), 2),
                             round(x1 + dx, 1), round(y1 + dy, 1), round(x2 + dx, 1), round(y2 + dy, 1)))
        for _ in range(rng.randint(0, 3)):
            x1, y1 = rng.uniform(0, W - 60), rng.uniform(0, H - 60)
            dets.append((rng.randint(0, 1), round(rng.uniform(0.05, 0.9), 2),
                         round(x1, 1), round(y1, 1), round(x1 + rng.uniform(10, 60), 1),
                         round(y1 + rng.uniform(10, 60), 1)))
        rng.shuffle(dets)
        preds[image_id] = dets
    return truths, preds


def match_image(dets, gts, min_conf):
    """Outcome per kept prediction index: True (TP) / False (FP)."""
    outcome = {}
    for cls in {d[0] for d in dets}:
        idx = [k for k, d in enumerate(dets) if d[0] == cls and d[1] >= min_conf]
        # selection scan: repeatedly take the highest-confidence, then lowest-x1,
        # then earliest remaining prediction
        order = []
        remaining = list(idx)
        while remaining:
            best = remaining[0]
            for k in remaining[1:]:
                a, b = dets[k], dets[best]
                if a[1] > b[1] or (a[1] == b[1] and a[2] < b[2]):
                    best = k
            order.append(best)
            remaining.remove(best)
        boxes = [yolo_to_xyxy(*g[1:]) for g in gts if g[0] == cls]
        used = [False] * len(boxes)
        for k in order:
            box = dets[k][2:]
            best_j, best_iou = -1, -1.0
            for j, g in enumerate(boxes):
                if used[j]:
                    continue
                v = iou(box, g)
                if v > best_iou:
                    best_j, best_iou = j, v
            if best_j >= 0 and best_iou >= IOU:
                used[best_j] = True
                outcome[k] = True
            else:
                outcome[k] = False
    return outcome


def evaluate(truths, preds):
    outcomes = []  # (conf, image_id, index, cls, tp)
    for image_id in sorted(preds):
        res = match_image(preds[image_id], truths.get(image_id, []), 0.0)
        for k, tp in res.items():
            d = preds[image_id][k]
            outcomes.append((d[1], image_id, k, d[0], tp))
    outcomes.sort(key=lambda o: (-o[0], o[1], o[2]))
    gts = {c: sum(1 for b in truths.values() for g in b if g[0] == c) for c in range(len(CLASSES))}

    per_class = {}
    for cls in sorted({o[3] for o in outcomes} | {c for c, n in gts.items() if n}):
        seq = [o for o in outcomes if o[3] == cls]
        n_gt = gts.get(cls, 0)
        points = []
        for p in range(1, len(seq) + 1):
            tp = sum(1 for o in seq[:p] if o[4])
            points.append((tp / n_gt if n_gt else 0.0, tp / p))
        ap = 0.0
        prev_r = 0.0
        for i, (r, _) in enumerate(points):
            env = max(q for _, q in points[i:])
            ap += (r - prev_r) * env
            prev_r = r
        tps = sum(1 for o in seq if o[4])
        per_class[cls] = {"ap": ap if n_gt else 0.0, "gts": n_gt, "tps": tps, "fps": len(seq) - tps}

    scored = [c for c in per_class.values() if c["gts"] > 0]
    m_ap = sum(c["ap"] for c in scored) / len(scored) if scored else 0.0

    total_gt = sum(gts.values())
    candidates = sorted({0.0} | {o[0] for o in outcomes})
    best_t, best_f1 = 0.0, -1.0
    for t in candidates:
        tp = kept = 0
        for image_id in sorted(preds):
            res = match_image(preds[image_id], truths.get(image_id, []), t)
            kept += len(res)
            tp += sum(1 for v in res.values() if v)
        p = tp / kept if kept else 0.0
        r = tp / total_gt if total_gt else 0.0
        f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        if f1 > best_f1:
            best_t, best_f1 = t, f1
    return {
        "iou_threshold": IOU,
        "map": m_ap,
        "best_f1": best_f1,
        "best_threshold": best_t,
        "classes": [{"class_id": c, **v} for c, v in sorted(per_class.items())],
        "counts": {"tps": sum(v["tps"] for v in per_class.values()),
                   "fps": sum(v["fps"] for v in per_class.values()),
                   "gts": total_gt,
                   "preds": len(outcomes)},
    }


def main():
    rng = random.Random(20240611)
    truths, preds = build_scene(rng)
    (OUT / "labels").mkdir(parents=True, exist_ok=True)
    samples = []
    for image_id, boxes in sorted(truths.items()):
        samples.append({"id": image_id, "path": f"labels/{image_id}.jpg", "width": W, "height": H})
        with open(OUT / "labels" / f"{image_id}.txt", "w") as f:
            for cls, cx, cy, w, h in boxes:
                f.write(f"{cls} {cx!r} {cy!r} {w!r} {h!r}\n")
    with open(OUT / "manifest.json", "w") as f:
        json.dump({"class_names": CLASSES, "samples": samples}, f, indent=2)
        f.write("\n")
    with open(OUT / "predictions.csv", "w") as f:
        f.write("image_id,class_id,confidence,x1,y1,x2,y2\n")
        for image_id, dets in sorted(preds.items()):
            for cls, conf, x1, y1, x2, y2 in dets:
                f.write(f"{image_id},{cls},{conf!r},{x1!r},{y1!r},{x2!r},{y2!r}\n")
    with open(OUT / "expected.json", "w") as f:
        json.dump(evaluate(truths, preds), f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
