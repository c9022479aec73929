"""Recall@K under the object, predicate, phrase and relation protocols."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pprfcn.data import PREDICATES
from pprfcn.geometry import Box, iou, union_box

PROTOCOLS = ("object", "predicate", "phrase", "relation")
IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class PredictionRecord:
    """A ranked output (or a groundtruth item, confidence unused).

    ``labels`` is ``(class,)`` for objects and ``(s, r, o)`` otherwise; ``boxes``
    is ``(box,)`` or ``(subject box, object box)``.
    """

    kind: str
    labels: tuple
    boxes: tuple
    confidence: float = 1.0


@dataclass
class RecallResult:
    K: int
    hits: int
    total: int
    recall: float
    images: int


def match_object(pred: PredictionRecord, gt: PredictionRecord) -> bool:
    return pred.labels == gt.labels and iou(pred.boxes[0], gt.boxes[0]) > IOU_THRESHOLD


def match_phrase(pred: PredictionRecord, gt: PredictionRecord) -> bool:
    if pred.labels != gt.labels:
        return False
    return iou(union_box(*pred.boxes), union_box(*gt.boxes)) > IOU_THRESHOLD


def match_relation(pred: PredictionRecord, gt: PredictionRecord) -> bool:
    return (
        pred.labels == gt.labels
        and iou(pred.boxes[0], gt.boxes[0]) > IOU_THRESHOLD
        and iou(pred.boxes[1], gt.boxes[1]) > IOU_THRESHOLD
    )


def match_predicate(pred: PredictionRecord, gt: PredictionRecord) -> bool:
    """Exact instance match: same triplet on the very same groundtruth boxes."""
    return pred.labels == gt.labels and pred.boxes == gt.boxes


MATCHERS = {
    "object": match_object,
    "predicate": match_predicate,
    "phrase": match_phrase,
    "relation": match_relation,
}


def _image_hits(preds, gts, K, matcher) -> int:
    ranked = sorted(preds, key=lambda p: -p.confidence)[:K]
    used = [False] * len(gts)
    hits = 0
    for p in ranked:
        for g, gt in enumerate(gts):
            if not used[g] and matcher(p, gt):
                used[g] = True
                hits += 1
                break
    return hits


def recall_at_k(predictions, groundtruths, K: int, matcher) -> RecallResult:
    """Per-image recall of the top-K predictions, averaged over images with groundtruth.

    Each prediction may claim at most one still-unmatched groundtruth. Ties in
    confidence keep insertion order.
    """
    hits = total = 0
    per_image = []
    for preds, gts in zip(predictions, groundtruths):
        if not gts:
            continue
        h = _image_hits(preds, gts, K, matcher)
        hits += h
        total += len(gts)
        per_image.append(h / len(gts))
    recall = float(np.mean(per_image)) if per_image else 0.0
    return RecallResult(K, hits, total, recall, len(per_image))


# --------------------------------------------------------------------------
# groundtruth and predictions per protocol


def groundtruth_records(gt, protocol: str) -> list[PredictionRecord]:
    if protocol == "object":
        return [PredictionRecord("object", (c,), (b,)) for b, c in zip(gt.boxes, gt.classes)]
    return [
        PredictionRecord(protocol, (gt.classes[i], r, gt.classes[j]), (gt.boxes[i], gt.boxes[j]))
        for i, j, r in gt.relations
    ]


def _pair_records(kind, scores, boxes, classes, box_scores, per_pair) -> list[PredictionRecord]:
    records = []
    for p, (i, j) in enumerate(scores.pairs):
        row = scores.final[p]
        for r in np.argsort(-row, kind="stable")[:per_pair]:
            conf = float(box_scores[i] * row[r] * box_scores[j])
            records.append(PredictionRecord(kind, (classes[i], int(r), classes[j]), (boxes[i], boxes[j]), conf))
    return records


def predicate_predictions(model, image, per_pair: int = 1) -> list[PredictionRecord]:
    """Score every ordered pair of groundtruth boxes; keep each pair's top predicates."""
    gt = image.gt
    if len(gt.boxes) < 2:
        return []
    scores = model.score_boxes(image.weak.features, gt.boxes)
    return _pair_records("predicate", scores, gt.boxes, gt.classes, np.ones(len(gt.boxes)), per_pair)


def detection_predictions(model, image):
    weak = image.weak
    keep = model.refine_proposals(weak.features, weak.proposals)
    proposals = [weak.proposals[i] for i in keep]
    if not proposals:
        return None
    return model.detect(weak.features, proposals)


def relation_predictions(model, image, detections, per_pair: int = 1) -> list[PredictionRecord]:
    if detections is None or len(detections) < 2:
        return []
    scores = model.score_boxes(image.weak.features, detections.boxes)
    return _pair_records("relation", scores, detections.boxes, detections.classes, detections.scores, per_pair)


def predicate_prediction_eval(model, images, K: int, per_pair: int = 1) -> RecallResult:
    preds = [predicate_predictions(model, img, per_pair) for img in images]
    gts = [groundtruth_records(img.gt, "predicate") for img in images]
    return recall_at_k(preds, gts, K, match_predicate)


def random_predicate_baseline(images, K: int, R: int, per_pair: int = 1, draws: int = 20, seed: int = 0) -> float:
    """Mean predicate-protocol recall of uniformly random pair scores."""
    rng = np.random.default_rng(seed)
    gts = [groundtruth_records(img.gt, "predicate") for img in images]
    out = []
    for _ in range(draws):
        preds = []
        for img in images:
            gt = img.gt
            recs = []
            for i in range(len(gt.boxes)):
                for j in range(len(gt.boxes)):
                    if i == j:
                        continue
                    row = rng.random(R)
                    for r in np.argsort(-row, kind="stable")[:per_pair]:
                        recs.append(PredictionRecord("predicate", (gt.classes[i], int(r), gt.classes[j]),
                                                     (gt.boxes[i], gt.boxes[j]), float(row[r])))
            preds.append(recs)
        out.append(recall_at_k(preds, gts, K, match_predicate).recall)
    return float(np.mean(out))


@dataclass
class ImagePredictions:
    image_id: str
    objects: list
    predicates: list
    relations: list


def predict_image(model, image, per_pair: int = 1) -> ImagePredictions:
    detections = detection_predictions(model, image)
    objects = []
    if detections is not None:
        objects = [PredictionRecord("object", (c,), (b,), s)
                   for b, c, s in zip(detections.boxes, detections.classes, detections.scores)]
    return ImagePredictions(
        image.image_id,
        objects,
        predicate_predictions(model, image, per_pair),
        relation_predictions(model, image, detections, per_pair),
    )


def evaluate_predictions(predictions: list[ImagePredictions], images, ks) -> dict:
    """``{(protocol, K): RecallResult}`` for the four protocols."""
    per_protocol = {
        "object": [p.objects for p in predictions],
        "predicate": [p.predicates for p in predictions],
        "phrase": [p.relations for p in predictions],
        "relation": [p.relations for p in predictions],
    }
    results = {}
    for protocol in PROTOCOLS:
        gts = [groundtruth_records(img.gt, protocol) for img in images]
        for K in ks:
            results[(protocol, K)] = recall_at_k(per_protocol[protocol], gts, K, MATCHERS[protocol])
    return results


def evaluate_model(model, images, ks=(50, 100), per_pair: int = 1) -> dict:
    return evaluate_predictions([predict_image(model, img, per_pair) for img in images], images, ks)


def write_report(results: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["protocol", "K", "recall"])
        for (protocol, K), res in sorted(results.items(), key=lambda kv: (kv[0][1], PROTOCOLS.index(kv[0][0]))):
            writer.writerow([protocol, K, f"{res.recall:.6f}"])


# --------------------------------------------------------------------------
# JSON lines


def relation_to_json(image_id, rec: PredictionRecord) -> dict:
    s, r, o = rec.labels
    return {
        "image_id": image_id,
        "sub_box": list(rec.boxes[0].as_tuple()),
        "obj_box": list(rec.boxes[1].as_tuple()),
        "sub_class": int(s),
        "predicate": PREDICATES[r],
        "obj_class": int(o),
        "score": rec.confidence,
    }


def object_to_json(image_id, rec: PredictionRecord) -> dict:
    return {"image_id": image_id, "box": list(rec.boxes[0].as_tuple()), "class": int(rec.labels[0]),
            "score": rec.confidence}


def write_jsonl(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_jsonl(path, kind: str) -> dict:
    """Load prediction records grouped by image id; ``kind`` picks the record layout."""
    grouped: dict[str, list] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        if kind == "object":
            rec = PredictionRecord("object", (row["class"],), (Box(*row["box"]),), row["score"])
        else:
            r = PREDICATES.index(row["predicate"])
            rec = PredictionRecord(kind, (row["sub_class"], r, row["obj_class"]),
                                   (Box(*row["sub_box"]), Box(*row["obj_box"])), row["score"])
        grouped.setdefault(row["image_id"], []).append(rec)
    return grouped
