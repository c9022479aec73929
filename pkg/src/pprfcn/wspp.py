"""Weakly supervised predicate prediction over ordered region pairs.

Two branches with independent parameters score every ordered pair. Selection
scores are softmax-normalized over pairs (per predicate), classification scores
over predicates (per pair); the product is the pair's predicate score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pprfcn.numerics import ParamTensor, conv1x1, conv1x1_backward, softmax, softmax_backward
from pprfcn.pooling import ScoreMapBundle, pair_scores, pooling_backward

EPS = 1e-7
DEFAULT_ALPHA = 0.2


class WsppBranch:
    """One conv1x1 producing the four ``k²R`` map stacks of a branch."""

    def __init__(self, D: int, R: int, k: int, rng: np.random.Generator, std: float, name: str):
        channels = 4 * k * k * R
        self.k, self.R = k, R
        self.weights = ParamTensor.normal((D, channels), rng, std, name=f"{name}_w")
        self.bias = ParamTensor.zeros((channels,), name=f"{name}_b")

    def params(self):
        return [self.weights, self.bias]

    def forward(self, features) -> ScoreMapBundle:
        return ScoreMapBundle.from_stack(conv1x1(features, self.weights, self.bias), self.k, self.R)

    def backward(self, features, grads) -> None:
        conv1x1_backward(np.concatenate(grads, axis=2), features, self.weights, self.bias)


class WsppHead:
    def __init__(self, D: int, R: int, k: int = 3, rng: np.random.Generator | None = None, std: float = 0.01):
        rng = np.random.default_rng(1) if rng is None else rng
        self.D, self.R, self.k = D, R, k
        self.sel = WsppBranch(D, R, k, rng, std, "wspp.sel")
        self.cls = WsppBranch(D, R, k, rng, std, "wspp.cls")

    def params(self) -> list[ParamTensor]:
        return self.sel.params() + self.cls.params()

    @property
    def output_channels(self) -> int:
        return sum(b.weights.shape[1] for b in (self.sel, self.cls))

    def forward(self, features) -> "WsppMaps":
        return WsppMaps(self.sel.forward(features), self.cls.forward(features))


@dataclass
class WsppMaps:
    sel_bundle: ScoreMapBundle
    cls_bundle: ScoreMapBundle


@dataclass
class PairScores:
    pairs: np.ndarray
    raw_sel: np.ndarray
    raw_cls: np.ndarray
    sel_norm: np.ndarray
    cls_norm: np.ndarray
    final: np.ndarray


def enumerate_pairs(n: int) -> np.ndarray:
    """All ordered pairs ``(i, j)``, ``i != j``, in lexicographic order."""
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    mask = i != j
    return np.stack([i[mask], j[mask]], axis=1).astype(np.int64)


def score_pairs(maps: WsppMaps, boxes, pairs) -> PairScores:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    raw_sel = pair_scores(maps.sel_bundle, boxes, pairs)
    raw_cls = pair_scores(maps.cls_bundle, boxes, pairs)
    if len(pairs) == 0:
        empty = np.zeros_like(raw_sel)
        return PairScores(pairs, raw_sel, raw_cls, empty, empty, empty)
    sel_norm = softmax(raw_sel, axis=0)
    cls_norm = softmax(raw_cls, axis=1)
    return PairScores(pairs, raw_sel, raw_cls, sel_norm, cls_norm, sel_norm * cls_norm)


def score_pairs_backward(grad_final: np.ndarray, scores: PairScores, boxes, k: int, height: int, width: int):
    """Map gradients for both branches: ``(sel_grads, cls_grads)``, four arrays each."""
    R = scores.final.shape[1]
    g_sel = softmax_backward(grad_final * scores.cls_norm, scores.sel_norm, axis=0)
    g_cls = softmax_backward(grad_final * scores.sel_norm, scores.cls_norm, axis=1)
    sel_grads = pooling_backward(g_sel, boxes, scores.pairs, k, R, height, width)
    cls_grads = pooling_backward(g_cls, boxes, scores.pairs, k, R, height, width)
    return sel_grads, cls_grads


def _pair_mask(pairs: np.ndarray, subjects, objects) -> np.ndarray:
    return np.isin(pairs[:, 0], list(subjects)) & np.isin(pairs[:, 1], list(objects))


def image_predicate_score(scores: PairScores, subjects, objects) -> np.ndarray:
    """Sum of pair predicate scores over subject regions x object regions."""
    R = scores.final.shape[1]
    if len(subjects) == 0 or len(objects) == 0 or len(scores.pairs) == 0:
        return np.zeros(R)
    return scores.final[_pair_mask(scores.pairs, subjects, objects)].sum(axis=0)


def _group_relations(relations):
    groups: dict[tuple[int, int], set[int]] = {}
    for s, r, o in relations:
        groups.setdefault((int(s), int(o)), set()).add(int(r))
    return dict(sorted(groups.items()))


def wspp_image_loss(scores: PairScores, relations, class_region_sets: dict) -> float:
    """Image-level predicate loss over the distinct (subject class, object class) pairs.

    ``relations`` holds ``(s, r, o)`` triplets with 0-based predicate ``r``;
    ``class_region_sets`` maps a class to the region indices standing for it.
    """
    R = scores.final.shape[1]
    loss = 0.0
    for (s, o), positive in _group_relations(relations).items():
        sr = np.clip(image_predicate_score(scores, class_region_sets[s], class_region_sets[o]), EPS, 1 - EPS)
        y = np.zeros(R)
        y[sorted(positive)] = 1.0
        loss -= float(np.sum(y * np.log(sr) + (1 - y) * np.log(1 - sr)))
    return loss


def wspp_image_loss_grad(scores: PairScores, relations, class_region_sets: dict) -> np.ndarray:
    """Gradient of :func:`wspp_image_loss` w.r.t. ``scores.final``."""
    R = scores.final.shape[1]
    grad = np.zeros_like(scores.final)
    for (s, o), positive in _group_relations(relations).items():
        subjects, objects = class_region_sets[s], class_region_sets[o]
        if len(subjects) == 0 or len(objects) == 0 or len(scores.pairs) == 0:
            continue
        mask = _pair_mask(scores.pairs, subjects, objects)
        raw = scores.final[mask].sum(axis=0)
        sr = np.clip(raw, EPS, 1 - EPS)
        y = np.zeros(R)
        y[sorted(positive)] = 1.0
        g = -y / sr + (1 - y) / (1 - sr)
        g[(raw < EPS) | (raw > 1 - EPS)] = 0.0
        grad[mask] += g
    return grad


def overall_loss(l_obj: float, l_pred: float, l_reg: float, alpha: float = DEFAULT_ALPHA) -> float:
    return l_obj + l_pred + alpha * l_reg
