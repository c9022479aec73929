"""Weakly supervised object detection head.

Two parallel position-sensitive branches score every region for C+1 classes
(class 0 is background). The localization branch is softmax-normalized over
regions, the classification branch over classes, and their product is the
region detection score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from pprfcn.errors import DimensionError
from pprfcn.geometry import boxes_to_array, iou_matrix, nms, score_order
from pprfcn.numerics import ParamTensor, conv1x1, conv1x1_backward, softmax, softmax_backward
from pprfcn.pooling import position_sensitive_pool, single_roi_pool_backward

EPS = 1e-7
SAMPLE_SIZE = 256
BACKGROUND_FRACTION = 0.75
TOP_REGIONS = 5
POSITIVE_IOU = 0.5
BACKGROUND_IOU = (0.1, 0.5)


class WsodHead:
    """Parameters of the two conv1x1 branches producing ``k²(C+1)``-channel maps."""

    def __init__(self, D: int, C: int, k: int = 3, rng: np.random.Generator | None = None, std: float = 0.01):
        rng = np.random.default_rng(0) if rng is None else rng
        self.D, self.C, self.k = D, C, k
        channels = k * k * (C + 1)
        self.loc_w = ParamTensor.normal((D, channels), rng, std, name="wsod.loc_w")
        self.loc_b = ParamTensor.zeros((channels,), name="wsod.loc_b")
        self.cls_w = ParamTensor.normal((D, channels), rng, std, name="wsod.cls_w")
        self.cls_b = ParamTensor.zeros((channels,), name="wsod.cls_b")

    def params(self) -> list[ParamTensor]:
        return [self.loc_w, self.loc_b, self.cls_w, self.cls_b]

    def forward(self, features: np.ndarray) -> "WsodMaps":
        return WsodMaps(
            loc_maps=conv1x1(features, self.loc_w, self.loc_b),
            cls_maps=conv1x1(features, self.cls_w, self.cls_b),
            k=self.k,
            C=self.C,
        )

    def backward(self, features: np.ndarray, grad_loc_maps: np.ndarray, grad_cls_maps: np.ndarray) -> None:
        conv1x1_backward(grad_loc_maps, features, self.loc_w, self.loc_b)
        conv1x1_backward(grad_cls_maps, features, self.cls_w, self.cls_b)


@dataclass
class WsodMaps:
    loc_maps: np.ndarray
    cls_maps: np.ndarray
    k: int
    C: int

    def __post_init__(self):
        want = self.k * self.k * (self.C + 1)
        if self.loc_maps.shape != self.cls_maps.shape or self.loc_maps.shape[2] != want:
            raise DimensionError(f"WSOD maps must both carry {want} channels")


@dataclass
class DetectionSet:
    boxes: list = field(default_factory=list)
    classes: list = field(default_factory=list)
    scores: list = field(default_factory=list)

    def __len__(self):
        return len(self.boxes)

    def to_records(self, image_id) -> list[dict]:
        return [
            {"image_id": image_id, "box": list(b.as_tuple()), "class": int(c), "score": float(s)}
            for b, c, s in zip(self.boxes, self.classes, self.scores)
        ]

    def to_jsonl(self, image_id) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.to_records(image_id))


def region_class_scores(maps: WsodMaps, boxes):
    """Raw ``N x (C+1)`` localization and classification scores per region."""
    R = maps.C + 1
    raw_loc = position_sensitive_pool(maps.loc_maps, boxes, maps.k, R)
    raw_cls = position_sensitive_pool(maps.cls_maps, boxes, maps.k, R)
    return raw_loc, raw_cls


def region_class_scores_backward(grad_loc, grad_cls, boxes, k: int, C: int, height: int, width: int):
    g_loc = single_roi_pool_backward(grad_loc, boxes, k, C + 1, height, width)
    g_cls = single_roi_pool_backward(grad_cls, boxes, k, C + 1, height, width)
    return g_loc, g_cls


def wsod_detection_scores(raw_loc, raw_cls) -> np.ndarray:
    """``softmax over regions (loc) * softmax over classes (cls)``."""
    if np.shape(raw_loc) != np.shape(raw_cls):
        raise DimensionError("loc and cls score matrices differ in shape")
    return softmax(raw_loc, axis=0) * softmax(raw_cls, axis=1)


def wsod_detection_scores_backward(grad_S, raw_loc, raw_cls):
    loc = softmax(raw_loc, axis=0)
    cls = softmax(raw_cls, axis=1)
    return softmax_backward(grad_S * cls, loc, axis=0), softmax_backward(grad_S * loc, cls, axis=1)


def _image_class_scores(S):
    return np.clip(S.sum(axis=0), EPS, 1 - EPS)


def _presence(classes, C):
    y = np.zeros(C + 1)
    for c in classes:
        y[int(c)] = 1.0
    return y


def wsod_image_loss(S: np.ndarray, groundtruth_classes) -> float:
    """Image-level binary cross-entropy over the foreground classes."""
    C = S.shape[1] - 1
    sc = _image_class_scores(S)[1:]
    y = _presence(groundtruth_classes, C)[1:]
    return float(-np.sum(y * np.log(sc) + (1 - y) * np.log(1 - sc)))


def wsod_image_loss_grad(S: np.ndarray, groundtruth_classes) -> np.ndarray:
    C = S.shape[1] - 1
    raw = S.sum(axis=0)
    sc = _image_class_scores(S)
    y = _presence(groundtruth_classes, C)
    g = -y / sc + (1 - y) / (1 - sc)
    g[(raw < EPS) | (raw > 1 - EPS)] = 0.0
    g[0] = 0.0
    return np.broadcast_to(g, S.shape).copy()


def pseudo_region_sampling(S: np.ndarray, boxes, classes, rng_seed=0, top=TOP_REGIONS,
                           sample_size=SAMPLE_SIZE, background_fraction=BACKGROUND_FRACTION):
    """Pick pseudo positives per present class and pseudo backgrounds around them.

    Returns ``(positives, backgrounds)``: a dict mapping class to a sorted index
    array, and a sorted index array. At most ``sample_size`` regions are
    returned, of which positives take at most ``1 - background_fraction``.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    arr = boxes_to_array(boxes) if not isinstance(boxes, np.ndarray) else boxes
    overlaps = iou_matrix(arr, arr)
    pools = {}
    for c in sorted(int(c) for c in classes):
        seeds = score_order(S[:, c])[:top]
        near = np.flatnonzero((overlaps[seeds] >= POSITIVE_IOU).any(axis=0))
        pools[c] = np.union1d(seeds, near)

    positive_regions = np.unique(np.concatenate(list(pools.values()))) if pools else np.array([], dtype=int)
    lo, hi = BACKGROUND_IOU
    if len(positive_regions):
        band = (overlaps[positive_regions] >= lo) & (overlaps[positive_regions] <= hi)
        bg_pool = np.setdiff1d(np.flatnonzero(band.any(axis=0)), positive_regions)
    else:
        bg_pool = np.array([], dtype=int)

    entries = [(c, int(i)) for c in pools for i in pools[c]]
    max_pos = int(round(sample_size * (1 - background_fraction)))
    n_pos = min(len(entries), max_pos)
    n_bg = min(len(bg_pool), sample_size - n_pos)
    if n_pos < len(entries):
        pick = np.sort(rng.choice(len(entries), size=n_pos, replace=False))
        entries = [entries[i] for i in pick]
    backgrounds = np.sort(rng.choice(bg_pool, size=n_bg, replace=False)) if n_bg < len(bg_pool) else bg_pool

    positives = {c: np.array(sorted(i for cc, i in entries if cc == c), dtype=np.int64) for c in pools}
    return positives, np.asarray(backgrounds, dtype=np.int64)


def wsod_reg_loss(S: np.ndarray, positives: dict, backgrounds) -> float:
    """Spatial smoothness regularizer: pseudo positives high for their class, backgrounds high for class 0."""
    loss = 0.0
    for c, idx in positives.items():
        if len(idx):
            loss -= np.log(np.clip(S[idx, c], EPS, None)).sum()
    if len(backgrounds):
        loss -= np.log(np.clip(S[np.asarray(backgrounds), 0], EPS, None)).sum()
    return float(loss)


def wsod_reg_loss_grad(S: np.ndarray, positives: dict, backgrounds) -> np.ndarray:
    g = np.zeros_like(S, dtype=np.float64)
    for c, idx in positives.items():
        for i in idx:
            if S[i, c] > EPS:
                g[i, c] -= 1.0 / S[i, c]
    for i in backgrounds:
        if S[i, 0] > EPS:
            g[i, 0] -= 1.0 / S[i, 0]
    return g


def objectness(S: np.ndarray) -> np.ndarray:
    return S[:, 1:].sum(axis=1)


def proposal_refine(proposals, bootstrap_scores: np.ndarray, min_objectness=0.2, iou_threshold=0.4,
                    max_keep=1000, min_keep=0) -> list[int]:
    """Indices of proposals surviving the objectness filter and NMS, best first.

    With ``min_keep`` > 0, proposals under the objectness floor are admitted in
    objectness order until NMS leaves at least that many (or none remain).
    """
    obj = objectness(bootstrap_scores)
    order = score_order(obj)
    survivors = [int(i) for i in order if obj[i] >= min_objectness]
    kept = [survivors[i] for i in nms([proposals[i] for i in survivors], obj[survivors], iou_threshold)]
    if len(kept) < min_keep:
        kept = [int(order[i]) for i in nms([proposals[i] for i in order], obj[order], iou_threshold)]
        strong = [i for i in kept if obj[i] >= min_objectness]
        weak = [i for i in kept if obj[i] < min_objectness]
        kept = strong + weak[: max(min_keep - len(strong), 0)]
    return kept[:max_keep]


def detect_from_scores(S: np.ndarray, proposals, score_threshold=0.7, iou_threshold=0.4,
                       max_per_class=30) -> DetectionSet:
    """Per-class detection on min-max normalized scores followed by per-class NMS."""
    out = DetectionSet()
    for c in range(1, S.shape[1]):
        col = S[:, c]
        span = col.max() - col.min() if len(col) else 0.0
        if span <= 1e-12:
            continue
        normed = (col - col.min()) / span
        cand = np.flatnonzero(normed > score_threshold)
        kept = nms([proposals[i] for i in cand], col[cand], iou_threshold)[:max_per_class]
        for i in kept:
            out.boxes.append(proposals[cand[i]])
            out.classes.append(c)
            out.scores.append(float(col[cand[i]]))
    return out


def detect(head: WsodHead, features: np.ndarray, proposals, **kwargs) -> DetectionSet:
    maps = head.forward(features)
    S = wsod_detection_scores(*region_class_scores(maps, proposals))
    return detect_from_scores(S, proposals, **kwargs)
