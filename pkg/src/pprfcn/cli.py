"""Command line entry point: ``pprfcn {gen-data,train,eval,bench,inspect}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from pprfcn.bench import bench, write_bench_report
from pprfcn.data import PREDICATES, DataConfig, generate_dataset, load_dataset, save_dataset
from pprfcn.errors import ConfigError, DimensionError, DomainError, FormatError, NumericError, UsageError
from pprfcn.evaluation import (
    ImagePredictions,
    evaluate_predictions,
    object_to_json,
    predict_image,
    read_jsonl,
    relation_to_json,
    write_jsonl,
    write_report,
)
from pprfcn.model import PPRFCN, ModelConfig
from pprfcn.pooling import ROLE_ORDER, cell_means, joint_cell_terms
from pprfcn.train import TrainConfig, Timer, train, write_loss_log

log = logging.getLogger("pprfcn")

RUN_CONFIG = "run_config.json"
THREADS_ENV = "PPRFCN_THREADS"


def _write_run_config(out_dir: Path, command: str, params: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **params}
    (out_dir / RUN_CONFIG).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--k-recall expects comma separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError(f"--k-recall values must be positive, got {text!r}")
    return ks


def _parse_pair(text: str) -> tuple[int, int]:
    try:
        i, j = (int(t) for t in text.split(","))
    except ValueError:
        raise UsageError(f"--pair expects two comma separated indices, got {text!r}") from None
    if i == j:
        raise UsageError("--pair needs two distinct boxes")
    return i, j


# --------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = DataConfig(
        num_train=args.num_train,
        num_test=args.num_test,
        C=args.classes,
        R=args.predicates,
        D=args.dim,
        H=args.height,
        W=args.width,
        k=args.k,
        n_proposals=args.n_proposals,
        noise=args.noise,
        seed=args.seed,
    )
    cfg.validate()
    out = Path(args.out)
    save_dataset(generate_dataset(cfg), out)
    _write_run_config(out, "gen-data", {"data": asdict(cfg)})
    log.info("wrote %d train / %d test images to %s", cfg.num_train, cfg.num_test, out)
    return 0


# --------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    ds = load_dataset(args.data, with_gt=False, splits=("train",))
    dc = ds.config
    mcfg = ModelConfig(
        D=dc.D,
        C=dc.C,
        R=dc.R,
        k=args.k,
        alpha=args.alpha,
        region_set_size=args.region_set_size,
        min_proposals=args.min_proposals,
        seed=args.seed,
    )
    tcfg = TrainConfig(
        epochs=args.epochs,
        bootstrap_epochs=args.bootstrap_epochs,
        lr=args.lr,
        momentum=args.momentum,
        seed=args.seed,
        flip=not args.no_flip,
        scale_jitter=args.scale_jitter,
    )
    if args.epochs < 0 or args.bootstrap_epochs < 0:
        raise UsageError("epoch counts must be non-negative")
    out = Path(args.out)
    model = PPRFCN(mcfg)
    timer = Timer()

    def progress(entry):
        log.info("%s epoch %d: obj %.4f pred %.4f reg %.4f total %.4f (%.0f s)", entry.phase, entry.epoch,
                 entry.obj, entry.pred, entry.reg, entry.total, timer.elapsed())

    history = train(model, [img.weak for img in ds.train], tcfg, progress=progress)
    model.save(out)
    write_loss_log(history, out / "loss_log.csv")
    _write_run_config(out, "train", {"data_dir": str(args.data), "model": asdict(mcfg), "train": asdict(tcfg)})
    log.info("checkpoint written to %s", out)
    return 0


# --------------------------------------------------------------------------
# eval

PREDICTION_FILES = {"object": "objects.jsonl", "predicate": "predicates.jsonl", "relation": "relations.jsonl"}


def _write_predictions(preds: list[ImagePredictions], out: Path) -> None:
    write_jsonl((object_to_json(p.image_id, r) for p in preds for r in p.objects), out / PREDICTION_FILES["object"])
    write_jsonl((relation_to_json(p.image_id, r) for p in preds for r in p.predicates),
                out / PREDICTION_FILES["predicate"])
    write_jsonl((relation_to_json(p.image_id, r) for p in preds for r in p.relations),
                out / PREDICTION_FILES["relation"])


def _read_predictions(pred_dir: Path, images) -> list[ImagePredictions]:
    grouped = {}
    for kind, name in PREDICTION_FILES.items():
        path = pred_dir / name
        if not path.exists():
            raise FormatError("prediction file is missing", path)
        try:
            grouped[kind] = read_jsonl(path, kind)
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"malformed prediction record ({exc!r})", path) from None
    return [
        ImagePredictions(img.image_id, grouped["object"].get(img.image_id, []),
                         grouped["predicate"].get(img.image_id, []), grouped["relation"].get(img.image_id, []))
        for img in images
    ]


def cmd_eval(args) -> int:
    ks = _parse_ks(args.k_recall)
    ds = load_dataset(args.data, with_gt=True, splits=(args.split,))
    images = getattr(ds, args.split)
    if any(img.gt is None for img in images):
        raise FormatError(f"split {args.split!r} carries no groundtruth", Path(args.data))
    out = Path(args.out) if args.out else Path(args.ckpt) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    if args.predictions:
        preds = _read_predictions(Path(args.predictions), images)
    else:
        if not args.ckpt:
            raise UsageError("eval needs --ckpt or --predictions")
        model = PPRFCN.load(args.ckpt)
        if (model.cfg.D, model.cfg.C, model.cfg.R) != (ds.config.D, ds.config.C, ds.config.R):
            raise FormatError("checkpoint and dataset disagree on D, C or R", Path(args.ckpt))
        _write_predictions([predict_image(model, img, args.per_pair) for img in images], out)
        # score what was written, so the report and the files cannot drift apart
        preds = _read_predictions(out, images)
    results = evaluate_predictions(preds, images, ks)
    write_report(results, out / "report.csv")
    _write_run_config(out, "eval", {"data_dir": str(args.data), "ckpt": args.ckpt, "predictions": args.predictions,
                                    "k_recall": ks, "split": args.split, "per_pair": args.per_pair})
    for (protocol, K), res in sorted(results.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        print(f"{protocol:>9} R@{K}: {res.recall:.4f}")
    return 0


# --------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    report, _, _ = bench(N=args.n_proposals, R=args.predicates, C=args.classes, D=args.dim, k=args.k,
                         repeats=args.repeats, height=args.height, width=args.width, seed=args.seed,
                         hidden=args.hidden)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_bench_report(report, out / "bench.csv")
    _write_run_config(out, "bench", {k: v for k, v in vars(args).items() if k not in ("func", "out", "verbose")})
    print(f"pairs {report.pairs}: shared {report.shared_median_ms:.2f} ms, fc {report.fc_median_ms:.2f} ms, "
          f"speedup {report.speedup:.2f}x")
    return 0


# --------------------------------------------------------------------------
# inspect


def write_pgm(path: Path, values: np.ndarray) -> None:
    """8-bit binary PGM, min-max scaled (a constant map becomes all zeros)."""
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros(values.shape) if hi <= lo else (values - lo) / (hi - lo) * 255.0
    pixels = np.rint(scaled).astype(np.uint8)
    h, w = pixels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def _write_grid(path: Path, grid: np.ndarray) -> None:
    k, _, R = grid.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "predicate", "value"])
        for a in range(k):
            for b in range(k):
                for r in range(R):
                    writer.writerow([a, b, PREDICATES[r], repr(float(grid[a, b, r]))])


def _write_raw_map(path: Path, values: np.ndarray) -> None:
    """One row per pixel: y, x, then every channel's raw score."""
    h, w, n = values.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "x"] + [f"ch{c:03d}" for c in range(n)])
        for y in range(h):
            for x in range(w):
                writer.writerow([y, x] + [repr(float(v)) for v in values[y, x]])


def _find_image(ds, image_id: str):
    for split in ("train", "test"):
        for img in getattr(ds, split):
            if img.image_id == image_id:
                return img
    raise KeyError(f"image id {image_id!r} not in dataset")


def cmd_inspect(args) -> int:
    model = PPRFCN.load(args.ckpt)
    ds = load_dataset(args.data, with_gt=True)
    image = _find_image(ds, args.image_id)
    boxes = image.gt.boxes if args.boxes == "gt" and image.gt is not None else image.weak.proposals
    i, j = _parse_pair(args.pair)
    if max(i, j) >= len(boxes) or min(i, j) < 0:
        raise KeyError(f"pair ({i}, {j}) out of range for {len(boxes)} boxes")
    maps = model.wspp.forward(image.weak.features)
    bundle = maps.sel_bundle if args.branch == "sel" else maps.cls_bundle

    out = Path(args.out)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    k, R = bundle.k, bundle.R
    with open(out / "maps" / "index.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "stack", "channel", "row", "col", "predicate"])
        for name, role_map in zip(ROLE_ORDER, bundle.maps()):
            for a in range(k):
                for b in range(k):
                    for r in range(R):
                        ch = role_map.channel(a, b, r)
                        fname = f"{name}_{ch:03d}.pgm"
                        write_pgm(out / "maps" / fname, role_map.map[:, :, ch])
                        writer.writerow([fname, name, ch, a, b, PREDICATES[r]])
            _write_raw_map(out / "maps" / f"{name}.csv", role_map.map)

    p_i, p_j = boxes[i], boxes[j]
    _write_grid(out / "pooled_single_subject.csv", cell_means(bundle.single_subject, p_i))
    _write_grid(out / "pooled_single_object.csv", cell_means(bundle.single_object, p_j))
    sub_terms, obj_terms = joint_cell_terms(bundle.joint_subject, bundle.joint_object, p_i, p_j)
    _write_grid(out / "pooled_joint_subject.csv", sub_terms)
    _write_grid(out / "pooled_joint_object.csv", obj_terms)
    _write_run_config(out, "inspect", {"ckpt": args.ckpt, "data_dir": str(args.data), "image_id": args.image_id,
                                       "pair": [i, j], "boxes": args.boxes, "branch": args.branch,
                                       "subject_box": list(p_i.as_tuple()), "object_box": list(p_j.as_tuple())})
    log.info("wrote %d channel images to %s", 4 * k * k * R, out / "maps")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pprfcn", description="Weakly supervised visual relation detection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--num-train", type=int, default=500)
    g.add_argument("--num-test", type=int, default=100)
    g.add_argument("--classes", type=int, default=5, help="object classes C")
    g.add_argument("--predicates", type=int, default=4, help="predicates R (at most 5)")
    g.add_argument("--dim", type=int, default=16, help="feature channels D")
    g.add_argument("--height", type=int, default=48)
    g.add_argument("--width", type=int, default=48)
    g.add_argument("--k", type=int, default=3, help="pooling grid size recorded in the manifest")
    g.add_argument("--n-proposals", type=int, default=20, help="proposals per image")
    g.add_argument("--noise", type=float, default=0.5, help="feature noise std")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on weak labels")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", "--ckpt", dest="out", default="checkpoint", help="checkpoint directory")
    t.add_argument("--seed", type=int, default=7)
    t.add_argument("--epochs", type=int, default=TrainConfig.epochs, help="main epochs after bootstrap")
    t.add_argument("--bootstrap-epochs", type=int, default=TrainConfig.bootstrap_epochs)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--alpha", type=float, default=0.2, help="regularizer weight")
    t.add_argument("--k", type=int, default=3, help="pooling grid size")
    t.add_argument("--region-set-size", type=int, default=ModelConfig.region_set_size,
                   help="top regions standing for each class in the pair loss")
    t.add_argument("--min-proposals", type=int, default=ModelConfig.min_proposals,
                   help="floor on proposals kept by refinement")
    t.add_argument("--no-flip", action="store_true", help="disable horizontal flips")
    t.add_argument("--scale-jitter", action="store_true", help="random feature scaling in [0.8, 1.2]")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Recall@K under the four protocols")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", help="checkpoint directory")
    e.add_argument("--predictions", help="directory of prediction JSON lines to score instead of a checkpoint")
    e.add_argument("--k-recall", default="50,100", help="comma separated K values")
    e.add_argument("--out", help="report directory (default: <ckpt>/eval)")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--per-pair", type=int, default=1, help="predicates kept per scored pair")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="shared-map pair scoring vs per-pair fc")
    b.add_argument("--out", default="bench_out")
    b.add_argument("--n-proposals", type=int, default=100)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--k", type=int, default=3)
    b.add_argument("--dim", type=int, default=64, help="feature channels D")
    b.add_argument("--predicates", type=int, default=4)
    b.add_argument("--classes", type=int, default=5)
    b.add_argument("--height", type=int, default=48)
    b.add_argument("--width", type=int, default=48)
    b.add_argument("--hidden", type=int, default=256, help="fc baseline hidden width")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("inspect", help="dump score maps and pooled grids")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--image-id", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pair", default="0,1", help="subject,object box indices")
    s.add_argument("--boxes", choices=("gt", "proposals"), default="gt")
    s.add_argument("--branch", choices=("cls", "sel"), default="cls")
    s.set_defaults(func=cmd_inspect)
    return parser


def _limit_threads():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        limiter = _limit_threads()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pprfcn: error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ConfigError, DomainError, DimensionError, NumericError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"pprfcn: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
