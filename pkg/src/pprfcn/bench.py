"""Pair-scoring throughput: shared position-role-sensitive maps vs a per-pair fc head."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass

import numpy as np

from pprfcn.errors import DomainError
from pprfcn.geometry import Box, boxes_to_array
from pprfcn.numerics import ParamTensor
from pprfcn.wspp import WsppHead, enumerate_pairs, score_pairs

FC_HIDDEN = 256


class FcPairBaseline:
    """Per-pair subnetwork: mean-pool both RoIs, concatenate, 2-layer perceptron to R scores.

    Nothing is shared between pairs except the input feature map; every pair
    pools its own two RoIs and runs its own forward pass (batched as one matmul).
    """

    def __init__(self, D: int, R: int, hidden: int = FC_HIDDEN, rng: np.random.Generator | None = None,
                 std: float = 0.01):
        rng = np.random.default_rng(0) if rng is None else rng
        self.w1 = ParamTensor.normal((2 * D, hidden), rng, std, name="fc.w1")
        self.b1 = ParamTensor.zeros((hidden,), name="fc.b1")
        self.w2 = ParamTensor.normal((hidden, R), rng, std, name="fc.w2")
        self.b2 = ParamTensor.zeros((R,), name="fc.b2")

    def forward(self, features: np.ndarray, boxes, pairs) -> np.ndarray:
        h, w, d = features.shape
        ii = np.zeros((h + 1, w + 1, d))
        ii[1:, 1:] = features.cumsum(axis=0, dtype=np.float64).cumsum(axis=1)
        b = boxes_to_array(boxes)[np.asarray(pairs)].reshape(-1, 4)  # per pair: subject row, object row
        x1, y1, x2, y2 = b.T
        sums = ii[y2, x2] - ii[y1, x2] - ii[y2, x1] + ii[y1, x1]
        pooled = (sums / ((x2 - x1) * (y2 - y1))[:, None]).astype(np.float32)
        x = pooled.reshape(len(pairs), 2 * d)
        hidden = np.maximum(x @ self.w1.value + self.b1.value, 0.0)
        return hidden @ self.w2.value + self.b2.value


def random_boxes(n: int, height: int, width: int, rng: np.random.Generator, min_size: int = 4,
                 max_size: int = 16) -> list[Box]:
    out = []
    for _ in range(n):
        bw = int(rng.integers(min_size, min(max_size, width) + 1))
        bh = int(rng.integers(min_size, min(max_size, height) + 1))
        x1 = int(rng.integers(0, width - bw + 1))
        y1 = int(rng.integers(0, height - bh + 1))
        out.append(Box(x1, y1, x1 + bw, y1 + bh))
    return out


@dataclass
class BenchReport:
    N: int
    pairs: int
    D: int
    R: int
    C: int
    k: int
    hidden: int
    repeats: int
    shared_median_ms: float
    fc_median_ms: float
    speedup: float


def _median_ms(fn, repeats: int):
    times, out = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1e3), out


def bench(N: int = 100, R: int = 4, C: int = 5, D: int = 64, k: int = 3, repeats: int = 5, height: int = 48,
          width: int = 48, seed: int = 0, hidden: int = FC_HIDDEN):
    """Time both heads scoring all N(N-1) ordered pairs of one image.

    The shared path is one 1x1 conv pass plus pair pooling; ``C`` only labels
    the report since detection is not timed. Each path runs once untimed first
    so JIT compilation is excluded. Returns ``(report, shared_scores, fc_scores)``.
    """
    if N < 2:
        raise DomainError(f"need at least 2 proposals, got {N}")
    if repeats < 1:
        raise DomainError("repeats must be positive")
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(height, width, D)).astype(np.float32)
    boxes = random_boxes(N, height, width, rng)
    pairs = enumerate_pairs(N)
    head = WsppHead(D, R, k, rng)
    fc = FcPairBaseline(D, R, hidden, rng)

    def shared():
        return score_pairs(head.forward(features), boxes, pairs).final

    def per_pair():
        return fc.forward(features, boxes, pairs)

    shared()
    per_pair()
    shared_ms, shared_out = _median_ms(shared, repeats)
    fc_ms, fc_out = _median_ms(per_pair, repeats)
    report = BenchReport(N, len(pairs), D, R, C, k, hidden, repeats, shared_ms, fc_ms, fc_ms / shared_ms)
    return report, shared_out, fc_out


def write_bench_report(report: BenchReport, path) -> None:
    row = asdict(report)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(row))
        writer.writerow([f"{v:.3f}" if isinstance(v, float) else v for v in row.values()])
