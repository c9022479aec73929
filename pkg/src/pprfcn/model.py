"""The full detector: WSOD head + WSPP head on a shared feature map."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from pprfcn.errors import FormatError
from pprfcn.geometry import score_order
from pprfcn.numerics import load_tensor, save_tensor
from pprfcn.wsod import (
    WsodHead,
    detect_from_scores,
    pseudo_region_sampling,
    proposal_refine,
    region_class_scores,
    region_class_scores_backward,
    wsod_detection_scores,
    wsod_detection_scores_backward,
    wsod_image_loss,
    wsod_image_loss_grad,
    wsod_reg_loss,
    wsod_reg_loss_grad,
)
from pprfcn.wspp import (
    WsppHead,
    enumerate_pairs,
    overall_loss,
    score_pairs,
    score_pairs_backward,
    wspp_image_loss,
    wspp_image_loss_grad,
)

CONFIG_FILE = "model.json"


@dataclass
class ModelConfig:
    D: int
    C: int
    R: int
    k: int = 3
    alpha: float = 0.2
    region_set_size: int = 3
    init_std: float = 0.01
    seed: int = 0
    score_threshold: float = 0.7
    nms_iou: float = 0.4
    max_per_class: int = 30
    min_objectness: float = 0.2
    max_proposals: int = 1000
    min_proposals: int = 10


@dataclass
class LossPlan:
    """Discrete choices made from current scores: pseudo regions and class region sets."""

    positives: dict
    backgrounds: np.ndarray
    region_sets: dict = field(default_factory=dict)


@dataclass
class LossBreakdown:
    obj: float
    pred: float
    reg: float
    total: float


class PPRFCN:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.wsod = WsodHead(cfg.D, cfg.C, cfg.k, rng, cfg.init_std)
        self.wspp = WsppHead(cfg.D, cfg.R, cfg.k, rng, cfg.init_std)
        # Frozen copy of the bootstrap WSOD head; scores proposals for refinement.
        self.objectness_head: WsodHead | None = None

    def params(self):
        return self.wsod.params() + self.wspp.params()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params())

    # ---------------------------------------------------------------- scoring

    def region_scores(self, features, proposals, head: WsodHead | None = None) -> np.ndarray:
        maps = (head or self.wsod).forward(features)
        return wsod_detection_scores(*region_class_scores(maps, proposals))

    def region_sets(self, S: np.ndarray, classes) -> dict:
        m = self.cfg.region_set_size
        return {int(c): np.array(sorted(score_order(S[:, c])[:m]), dtype=np.int64) for c in classes}

    def make_plan(self, S, proposals, labels, rng) -> LossPlan:
        positives, backgrounds = pseudo_region_sampling(S, proposals, labels.classes, rng)
        return LossPlan(positives, backgrounds, self.region_sets(S, labels.classes))

    def image_loss(self, image, plan: LossPlan | None = None, rng=None, backward=False, with_wspp=True):
        """Loss of one weakly labelled image; with ``backward`` the grads are accumulated.

        ``image`` only needs ``features``, ``proposals`` and ``labels``. Returns
        ``(LossBreakdown, LossPlan)``; pass the plan back in to freeze the discrete
        choices (as gradient checks do).
        """
        cfg = self.cfg
        feats, boxes, labels = image.features, image.proposals, image.labels
        h, w = feats.shape[:2]

        maps = self.wsod.forward(feats)
        raw_loc, raw_cls = region_class_scores(maps, boxes)
        S = wsod_detection_scores(raw_loc, raw_cls)
        if plan is None:
            plan = self.make_plan(S, boxes, labels, np.random.default_rng() if rng is None else rng)

        l_obj = wsod_image_loss(S, labels.classes)
        l_reg = wsod_reg_loss(S, plan.positives, plan.backgrounds)
        l_pred = 0.0
        if with_wspp:
            wmaps = self.wspp.forward(feats)
            scores = score_pairs(wmaps, boxes, enumerate_pairs(len(boxes)))
            l_pred = wspp_image_loss(scores, labels.triplets, plan.region_sets)
        total = overall_loss(l_obj, l_pred, l_reg, cfg.alpha)

        if backward:
            g_S = wsod_image_loss_grad(S, labels.classes) + cfg.alpha * wsod_reg_loss_grad(S, plan.positives, plan.backgrounds)
            g_loc, g_cls = wsod_detection_scores_backward(g_S, raw_loc, raw_cls)
            g_loc_maps, g_cls_maps = region_class_scores_backward(g_loc, g_cls, boxes, cfg.k, cfg.C, h, w)
            self.wsod.backward(feats, g_loc_maps, g_cls_maps)
            if with_wspp:
                g_final = wspp_image_loss_grad(scores, labels.triplets, plan.region_sets)
                sel_grads, cls_grads = score_pairs_backward(g_final, scores, boxes, cfg.k, h, w)
                self.wspp.sel.backward(feats, sel_grads)
                self.wspp.cls.backward(feats, cls_grads)
        return LossBreakdown(l_obj, l_pred, l_reg, total), plan

    # -------------------------------------------------------------- inference

    def refine_proposals(self, features, proposals) -> list[int]:
        head = self.objectness_head or self.wsod
        S = self.region_scores(features, proposals, head)
        return proposal_refine(proposals, S, self.cfg.min_objectness, self.cfg.nms_iou, self.cfg.max_proposals,
                               self.cfg.min_proposals)

    def detect(self, features, proposals):
        S = self.region_scores(features, proposals)
        return detect_from_scores(S, proposals, self.cfg.score_threshold, self.cfg.nms_iou, self.cfg.max_per_class)

    def score_boxes(self, features, boxes):
        """Pair scores over every ordered pair of ``boxes``."""
        wmaps = self.wspp.forward(features)
        return score_pairs(wmaps, boxes, enumerate_pairs(len(boxes)))

    # ------------------------------------------------------------ persistence

    def named_params(self) -> dict:
        named = {p.name: p for p in self.params()}
        if self.objectness_head is not None:
            for p in self.objectness_head.params():
                named["objectness." + p.name] = p
        return named

    def save(self, ckpt_dir) -> None:
        out = Path(ckpt_dir)
        out.mkdir(parents=True, exist_ok=True)
        named = self.named_params()
        for name, p in named.items():
            save_tensor(out / f"{name}.pprt", p.value)
        meta = {"config": asdict(self.cfg), "params": sorted(named)}
        (out / CONFIG_FILE).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, ckpt_dir) -> "PPRFCN":
        root = Path(ckpt_dir)
        try:
            meta = json.loads((root / CONFIG_FILE).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise FormatError("checkpoint config not found", root / CONFIG_FILE) from None
        model = cls(ModelConfig(**meta["config"]))
        if any(n.startswith("objectness.") for n in meta["params"]):
            model.objectness_head = WsodHead(model.cfg.D, model.cfg.C, model.cfg.k)
        named = model.named_params()
        for name in meta["params"]:
            if name not in named:
                raise FormatError(f"unknown parameter {name!r}", root)
            value = load_tensor(root / f"{name}.pprt")
            if value.shape != named[name].shape:
                raise FormatError(f"shape {value.shape} != expected {named[name].shape}", root / f"{name}.pprt")
            named[name].value[...] = value
        return model
