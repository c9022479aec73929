"""Synthetic relation dataset: feature maps, proposals, image-level labels.

Each image is a ``H x W x D`` feature map with Gaussian noise; every object adds
its class signature (a fixed random unit vector per class) over its box. The
predicate of an ordered object pair is derived from box geometry alone.

Training code receives :class:`WeakImage` objects, which carry no box-level
annotation. Instance boxes and instance relations live in :class:`GroundTruth`
and are only handed to evaluation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from pprfcn.errors import ConfigError, FormatError
from pprfcn.geometry import Box, intersection
from pprfcn.numerics import load_tensor, save_tensor

PREDICATES = ("above", "below", "left-of", "right-of", "overlaps")
ABOVE, BELOW, LEFT_OF, RIGHT_OF, OVERLAPS = range(5)
MIRRORED = {LEFT_OF: RIGHT_OF, RIGHT_OF: LEFT_OF}
MANIFEST = "manifest.json"


@dataclass
class DataConfig:
    num_train: int = 500
    num_test: int = 100
    C: int = 5
    R: int = 4
    D: int = 16
    H: int = 48
    W: int = 48
    k: int = 3
    min_objects: int = 2
    max_objects: int = 4
    min_size: int = 8
    max_size: int = 16
    n_proposals: int = 20
    jitter_per_object: int = 2
    noise: float = 0.5
    signal: float = 1.0
    seed: int = 7

    def validate(self):
        if not 1 <= self.R <= len(PREDICATES):
            raise ConfigError(f"R must lie in [1, {len(PREDICATES)}], got {self.R}")
        if self.C < 1 or self.D < 1:
            raise ConfigError("C and D must be positive")
        if not 1 <= self.min_size <= self.max_size:
            raise ConfigError("need 1 <= min_size <= max_size")
        if self.max_size > min(self.H, self.W):
            raise ConfigError(f"objects up to {self.max_size}px do not fit a {self.H}x{self.W} canvas")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if self.n_proposals < self.max_objects:
            raise ConfigError("n_proposals must cover at least every object")


@dataclass(frozen=True)
class WeakLabels:
    classes: frozenset
    triplets: frozenset  # (subject class, predicate, object class); predicate is 0-based


@dataclass
class WeakImage:
    image_id: str
    features: np.ndarray
    proposals: list
    labels: WeakLabels


@dataclass
class GroundTruth:
    boxes: list
    classes: list
    relations: list  # (subject index, object index, predicate)


@dataclass
class SyntheticImage:
    weak: WeakImage
    gt: GroundTruth | None = None

    @property
    def image_id(self):
        return self.weak.image_id


@dataclass
class Dataset:
    config: DataConfig
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)


def spatial_predicates(sub: Box, obj: Box, R: int) -> set[int]:
    """Predicates holding for ``sub`` relative to ``obj``.

    Intersecting boxes overlap. Otherwise the axis with the larger gap decides
    (vertical on ties), so a disjoint pair gets exactly one direction.
    """
    if intersection(sub, obj) is not None:
        return {OVERLAPS} if R > OVERLAPS else set()
    gap_y = max(obj.y1 - sub.y2, sub.y1 - obj.y2)
    gap_x = max(obj.x1 - sub.x2, sub.x1 - obj.x2)
    if gap_y >= gap_x:
        pred = ABOVE if sub.y2 <= obj.y1 else BELOW
    else:
        pred = LEFT_OF if sub.x2 <= obj.x1 else RIGHT_OF
    return {pred} if pred < R else set()


def derive_relations(boxes, classes, R):
    relations, triplets = [], set()
    for i, a in enumerate(boxes):
        for j, b in enumerate(boxes):
            if i == j:
                continue
            for r in sorted(spatial_predicates(a, b, R)):
                relations.append((i, j, r))
                triplets.add((classes[i], r, classes[j]))
    return relations, triplets


def class_signatures(cfg: DataConfig) -> np.ndarray:
    """``(C+1) x D`` unit vectors; row 0 is unused background."""
    rng = np.random.default_rng([cfg.seed, 0xC1A55])
    sig = rng.normal(size=(cfg.C + 1, cfg.D))
    sig[0] = 0.0
    sig[1:] /= np.linalg.norm(sig[1:], axis=1, keepdims=True)
    return sig


def _random_box(rng, cfg, lo, hi):
    w = int(rng.integers(lo, hi + 1))
    h = int(rng.integers(lo, hi + 1))
    x1 = int(rng.integers(0, cfg.W - w + 1))
    y1 = int(rng.integers(0, cfg.H - h + 1))
    return Box(x1, y1, x1 + w, y1 + h)


def _place_objects(rng, cfg, n):
    allow_overlap = cfg.R > OVERLAPS
    for _ in range(50):
        boxes = []
        for _ in range(n):
            for _ in range(200):
                b = _random_box(rng, cfg, cfg.min_size, cfg.max_size)
                if allow_overlap or all(intersection(b, o) is None for o in boxes):
                    boxes.append(b)
                    break
            else:
                break
        if len(boxes) == n:
            return boxes
    raise ConfigError(f"cannot place {n} non-overlapping objects on a {cfg.H}x{cfg.W} canvas")


def _jitter(rng, box: Box, cfg) -> Box:
    dx = max(1, box.width // 5)
    dy = max(1, box.height // 5)
    for _ in range(20):
        x1 = min(max(box.x1 + int(rng.integers(-dx, dx + 1)), 0), cfg.W - 1)
        x2 = min(max(box.x2 + int(rng.integers(-dx, dx + 1)), x1 + 1), cfg.W)
        y1 = min(max(box.y1 + int(rng.integers(-dy, dy + 1)), 0), cfg.H - 1)
        y2 = min(max(box.y2 + int(rng.integers(-dy, dy + 1)), y1 + 1), cfg.H)
        cand = Box(x1, y1, x2, y2)
        if cand != box:
            return cand
    return box


def generate_image(cfg: DataConfig, index: int, split: str, signatures: np.ndarray) -> SyntheticImage:
    rng = np.random.default_rng([cfg.seed, 1 if split == "train" else 2, index])
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    classes = [int(c) for c in rng.integers(1, cfg.C + 1, size=n)]
    boxes = _place_objects(rng, cfg, n)

    features = rng.normal(0.0, cfg.noise, size=(cfg.H, cfg.W, cfg.D))
    for b, c in zip(boxes, classes):
        features[b.y1:b.y2, b.x1:b.x2] += cfg.signal * signatures[c]

    proposals = list(boxes)
    for b in boxes:
        proposals.extend(_jitter(rng, b, cfg) for _ in range(cfg.jitter_per_object))
    while len(proposals) < cfg.n_proposals:
        proposals.append(_random_box(rng, cfg, max(2, cfg.min_size // 2), min(cfg.H, cfg.W, cfg.max_size * 2)))
    proposals = [proposals[i] for i in rng.permutation(len(proposals))]

    relations, triplets = derive_relations(boxes, classes, cfg.R)
    weak = WeakImage(
        image_id=f"{split}_{index:05d}",
        features=features.astype(np.float32),
        proposals=proposals,
        labels=WeakLabels(frozenset(classes), frozenset(triplets)),
    )
    return SyntheticImage(weak, GroundTruth(boxes, classes, relations))


def generate_dataset(cfg: DataConfig) -> Dataset:
    cfg.validate()
    sig = class_signatures(cfg)
    return Dataset(
        cfg,
        train=[generate_image(cfg, i, "train", sig) for i in range(cfg.num_train)],
        test=[generate_image(cfg, i, "test", sig) for i in range(cfg.num_test)],
    )


def horizontal_flip(image):
    """Mirror features and boxes along the width; swap left-of/right-of labels.

    Accepts a :class:`SyntheticImage` or a bare :class:`WeakImage`.
    """
    if isinstance(image, SyntheticImage):
        return SyntheticImage(horizontal_flip(image.weak), _flip_gt(image.gt, image.weak.features.shape[1]))
    width = image.features.shape[1]
    labels = WeakLabels(
        image.labels.classes,
        frozenset((s, MIRRORED.get(r, r), o) for s, r, o in image.labels.triplets),
    )
    return WeakImage(
        image.image_id,
        np.ascontiguousarray(image.features[:, ::-1]),
        [_flip_box(b, width) for b in image.proposals],
        labels,
    )


def _flip_box(b: Box, width: int) -> Box:
    return Box(width - b.x2, b.y1, width - b.x1, b.y2)


def _flip_gt(gt, width):
    if gt is None:
        return None
    return GroundTruth(
        [_flip_box(b, width) for b in gt.boxes],
        list(gt.classes),
        [(i, j, MIRRORED.get(r, r)) for i, j, r in gt.relations],
    )


# --------------------------------------------------------------------------
# manifest I/O


def _record(img: SyntheticImage, feature_file: str) -> dict:
    weak = img.weak
    rec = {
        "id": weak.image_id,
        "feature_file": feature_file,
        "proposals": [list(b.as_tuple()) for b in weak.proposals],
        "weak_labels": {
            "classes": sorted(weak.labels.classes),
            "triplets": [list(t) for t in sorted(weak.labels.triplets)],
        },
    }
    if img.gt is not None:
        rec["gt"] = {
            "instances": [{"box": list(b.as_tuple()), "class": c} for b, c in zip(img.gt.boxes, img.gt.classes)],
            "relations": [list(r) for r in img.gt.relations],
        }
    return rec


def save_dataset(dataset: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    splits = {}
    for split in ("train", "test"):
        records = []
        for img in getattr(dataset, split):
            rel = f"features/{img.image_id}.pprt"
            save_tensor(out / rel, img.weak.features)
            records.append(_record(img, rel))
        splits[split] = records
    manifest = {"config": asdict(dataset.config), "predicates": list(PREDICATES[: dataset.config.R]), "splits": splits}
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _parse_record(rec: dict, root: Path, cfg: DataConfig, with_gt: bool) -> SyntheticImage:
    path = root / rec["feature_file"]
    if not path.exists():
        raise FormatError("referenced tensor file is missing", path)
    features = load_tensor(path)
    if features.shape != (cfg.H, cfg.W, cfg.D):
        raise FormatError(f"shape {features.shape} differs from declared {(cfg.H, cfg.W, cfg.D)}", path)
    wl = rec["weak_labels"]
    weak = WeakImage(
        rec["id"],
        features,
        [Box(*p) for p in rec["proposals"]],
        WeakLabels(frozenset(wl["classes"]), frozenset(tuple(t) for t in wl["triplets"])),
    )
    gt = None
    if with_gt and "gt" in rec:
        g = rec["gt"]
        gt = GroundTruth(
            [Box(*inst["box"]) for inst in g["instances"]],
            [int(inst["class"]) for inst in g["instances"]],
            [tuple(r) for r in g["relations"]],
        )
    return SyntheticImage(weak, gt)


def load_dataset(data_dir, with_gt: bool = True, splits=("train", "test")) -> Dataset:
    root = Path(data_dir)
    path = root / MANIFEST
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError("manifest not found", path) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON ({exc})", path) from None
    try:
        cfg = DataConfig(**manifest["config"])
        ds = Dataset(cfg)
        for split in splits:
            setattr(ds, split, [_parse_record(r, root, cfg, with_gt) for r in manifest["splits"][split]])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest ({exc!r})", path) from None
    return ds
