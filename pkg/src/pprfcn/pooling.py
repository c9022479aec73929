"""Position-role-sensitive RoI pooling and pairwise (joint) RoI pooling.

Score maps are ``H x W x (k*k*R)`` arrays laid out grid-major: the channel of
grid cell ``(row, col)`` and predicate ``r`` is ``(row * k + col) * R + r``.

Every cell mean is a rectangle sum, so pooling runs on a summed-area table in
O(1) per (cell, channel) regardless of box size. Backward passes scatter into
a 2-D difference array, which is the adjoint of the summed-area lookup.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numba import njit

from pprfcn.errors import DimensionError, DomainError, UsageError
from pprfcn.geometry import Box, grid_edges, intersection, union_box

SUBJECT = "subject"
OBJECT = "object"
ROLE_ORDER = ("single_subject", "single_object", "joint_subject", "joint_object")

# Vote denominator: True averages over all k*k cells, with empty cells
# contributing 0. False averages over non-empty cells only.
COUNT_EMPTY_CELLS = True


@dataclass(frozen=True, eq=False)
class RoleScoreMap:
    map: np.ndarray
    role: str
    k: int
    R: int

    def __post_init__(self):
        if self.role not in (SUBJECT, OBJECT):
            raise UsageError(f"unknown role {self.role!r}")
        if self.map.ndim != 3 or self.map.shape[2] != self.k * self.k * self.R:
            raise DimensionError(
                f"score map of shape {self.map.shape} needs k*k*R = {self.k * self.k * self.R} channels"
            )

    @property
    def height(self) -> int:
        return self.map.shape[0]

    @property
    def width(self) -> int:
        return self.map.shape[1]

    @cached_property
    def integral(self) -> np.ndarray:
        return integral_image(self.map)

    def channel(self, row: int, col: int, r: int) -> int:
        return (row * self.k + col) * self.R + r


@dataclass(frozen=True, eq=False)
class ScoreMapBundle:
    """The four map stacks of one branch: single-RoI and joint, per role."""

    single_subject: RoleScoreMap
    single_object: RoleScoreMap
    joint_subject: RoleScoreMap
    joint_object: RoleScoreMap

    def __post_init__(self):
        maps = self.maps()
        ref = maps[0]
        for m in maps:
            if m.map.shape != ref.map.shape or (m.k, m.R) != (ref.k, ref.R):
                raise DimensionError("bundle maps must share H, W, k and R")
        if self.single_subject.role != SUBJECT or self.joint_subject.role != SUBJECT:
            raise UsageError("subject slots need subject-role maps")
        if self.single_object.role != OBJECT or self.joint_object.role != OBJECT:
            raise UsageError("object slots need object-role maps")
        if len({id(m.map) for m in maps}) != 4:
            raise UsageError("the four map stacks must be distinct arrays")

    def maps(self):
        return (self.single_subject, self.single_object, self.joint_subject, self.joint_object)

    @property
    def k(self) -> int:
        return self.single_subject.k

    @property
    def R(self) -> int:
        return self.single_subject.R

    @property
    def shape(self):
        return self.single_subject.map.shape

    @classmethod
    def from_stack(cls, stack: np.ndarray, k: int, R: int) -> "ScoreMapBundle":
        """Split an ``H x W x 4k²R`` conv output into the four stacks, in field order."""
        per = k * k * R
        if stack.shape[2] != 4 * per:
            raise DimensionError(f"expected {4 * per} channels, got {stack.shape[2]}")
        parts = [stack[:, :, i * per:(i + 1) * per] for i in range(4)]
        return cls(
            RoleScoreMap(parts[0], SUBJECT, k, R),
            RoleScoreMap(parts[1], OBJECT, k, R),
            RoleScoreMap(parts[2], SUBJECT, k, R),
            RoleScoreMap(parts[3], OBJECT, k, R),
        )


def integral_image(values: np.ndarray) -> np.ndarray:
    """Zero-padded summed-area table ``(H+1) x (W+1) x C`` in float64."""
    if values.ndim != 3:
        raise DimensionError(f"expected an H x W x C array, got shape {values.shape}")
    h, w, c = values.shape
    ii = np.zeros((h + 1, w + 1, c), dtype=np.float64)
    _integral(values, ii)
    return ii


# --------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _integral(values, ii):
    h, w, c = values.shape
    row = np.empty(c)
    for y in range(h):
        row[:] = 0.0
        for x in range(w):
            for ch in range(c):
                row[ch] += values[y, x, ch]
                ii[y + 1, x + 1, ch] = ii[y, x + 1, ch] + row[ch]


@njit(cache=True)
def _edges(lo, hi, k, out):
    n = hi - lo
    for c in range(k + 1):
        out[c] = lo + (c * n + k - 1) // k


@njit(cache=True)
def _rect_mean_add(ii, y1, x1, y2, x2, base, R, scale, out, p):
    for r in range(R):
        ch = base + r
        s = ii[y2, x2, ch] - ii[y1, x2, ch] - ii[y2, x1, ch] + ii[y1, x1, ch]
        out[p, r] += s * scale


@njit(cache=True)
def _single_forward(ii, boxes, k, R, count_empty):
    n = boxes.shape[0]
    out = np.zeros((n, R))
    xe = np.empty(k + 1, np.int64)
    ye = np.empty(k + 1, np.int64)
    for p in range(n):
        _edges(boxes[p, 0], boxes[p, 2], k, xe)
        _edges(boxes[p, 1], boxes[p, 3], k, ye)
        filled = 0
        for a in range(k):
            for b in range(k):
                cnt = (ye[a + 1] - ye[a]) * (xe[b + 1] - xe[b])
                if cnt > 0:
                    filled += 1
                    _rect_mean_add(ii, ye[a], xe[b], ye[a + 1], xe[b + 1], (a * k + b) * R, R, 1.0 / cnt, out, p)
        denom = k * k if count_empty else max(filled, 1)
        for r in range(R):
            out[p, r] /= denom
    return out


@njit(cache=True)
def _rect_term(ii, y1, x1, y2, x2, ch, scale):
    return (ii[y2, x2, ch] - ii[y1, x2, ch] - ii[y2, x1, ch] + ii[y1, x1, ch]) * scale


@njit(cache=True)
def _joint_forward(ii_s, ii_o, boxes, pairs, k, R, count_empty):
    n = pairs.shape[0]
    out = np.zeros((n, R))
    xe = np.empty(k + 1, np.int64)
    ye = np.empty(k + 1, np.int64)
    for p in range(n):
        i = pairs[p, 0]
        j = pairs[p, 1]
        _edges(min(boxes[i, 0], boxes[j, 0]), max(boxes[i, 2], boxes[j, 2]), k, xe)
        _edges(min(boxes[i, 1], boxes[j, 1]), max(boxes[i, 3], boxes[j, 3]), k, ye)
        filled = 0
        for a in range(k):
            for b in range(k):
                base = (a * k + b) * R
                sx1 = max(xe[b], boxes[i, 0])
                sx2 = min(xe[b + 1], boxes[i, 2])
                sy1 = max(ye[a], boxes[i, 1])
                sy2 = min(ye[a + 1], boxes[i, 3])
                ox1 = max(xe[b], boxes[j, 0])
                ox2 = min(xe[b + 1], boxes[j, 2])
                oy1 = max(ye[a], boxes[j, 1])
                oy2 = min(ye[a + 1], boxes[j, 3])
                s_hit = sx2 > sx1 and sy2 > sy1
                o_hit = ox2 > ox1 and oy2 > oy1
                if not (s_hit or o_hit):
                    continue
                filled += 1
                s_scale = 1.0 / ((sx2 - sx1) * (sy2 - sy1)) if s_hit else 0.0
                o_scale = 1.0 / ((ox2 - ox1) * (oy2 - oy1)) if o_hit else 0.0
                for r in range(R):
                    ts = _rect_term(ii_s, sy1, sx1, sy2, sx2, base + r, s_scale) if s_hit else 0.0
                    to = _rect_term(ii_o, oy1, ox1, oy2, ox2, base + r, o_scale) if o_hit else 0.0
                    # summing the two role terms first keeps the role-swap identity exact
                    out[p, r] += ts + to
        denom = k * k if count_empty else max(filled, 1)
        for r in range(R):
            out[p, r] /= denom
    return out


@njit(cache=True)
def _scatter_rect(diff, cover, y1, x1, y2, x2, cell, base, R, up_row, scale):
    for r in range(R):
        v = up_row[r] * scale
        ch = base + r
        diff[y1, x1, ch] += v
        diff[y1, x2, ch] -= v
        diff[y2, x1, ch] -= v
        diff[y2, x2, ch] += v
    cover[y1, x1, cell] += 1
    cover[y1, x2, cell] -= 1
    cover[y2, x1, cell] -= 1
    cover[y2, x2, cell] += 1


@njit(cache=True)
def _single_backward(upstream, boxes, k, R, height, width, count_empty):
    diff = np.zeros((height + 1, width + 1, k * k * R))
    cover = np.zeros((height + 1, width + 1, k * k), np.int32)
    xe = np.empty(k + 1, np.int64)
    ye = np.empty(k + 1, np.int64)
    for p in range(boxes.shape[0]):
        _edges(boxes[p, 0], boxes[p, 2], k, xe)
        _edges(boxes[p, 1], boxes[p, 3], k, ye)
        filled = 0
        for a in range(k):
            for b in range(k):
                if (ye[a + 1] - ye[a]) * (xe[b + 1] - xe[b]) > 0:
                    filled += 1
        denom = k * k if count_empty else max(filled, 1)
        for a in range(k):
            for b in range(k):
                cnt = (ye[a + 1] - ye[a]) * (xe[b + 1] - xe[b])
                if cnt > 0:
                    cell = a * k + b
                    _scatter_rect(diff, cover, ye[a], xe[b], ye[a + 1], xe[b + 1], cell, cell * R, R,
                                  upstream[p], 1.0 / (denom * cnt))
    return diff, cover


@njit(cache=True)
def _joint_backward(upstream, boxes, pairs, k, R, height, width, count_empty):
    diff_s = np.zeros((height + 1, width + 1, k * k * R))
    diff_o = np.zeros((height + 1, width + 1, k * k * R))
    cover_s = np.zeros((height + 1, width + 1, k * k), np.int32)
    cover_o = np.zeros((height + 1, width + 1, k * k), np.int32)
    xe = np.empty(k + 1, np.int64)
    ye = np.empty(k + 1, np.int64)
    rect = np.empty((k * k, 2, 4), np.int64)
    for p in range(pairs.shape[0]):
        i = pairs[p, 0]
        j = pairs[p, 1]
        _edges(min(boxes[i, 0], boxes[j, 0]), max(boxes[i, 2], boxes[j, 2]), k, xe)
        _edges(min(boxes[i, 1], boxes[j, 1]), max(boxes[i, 3], boxes[j, 3]), k, ye)
        filled = 0
        for a in range(k):
            for b in range(k):
                cell = a * k + b
                hit = False
                for role in range(2):
                    q = i if role == 0 else j
                    rect[cell, role, 0] = max(ye[a], boxes[q, 1])
                    rect[cell, role, 1] = max(xe[b], boxes[q, 0])
                    rect[cell, role, 2] = min(ye[a + 1], boxes[q, 3])
                    rect[cell, role, 3] = min(xe[b + 1], boxes[q, 2])
                    if rect[cell, role, 2] > rect[cell, role, 0] and rect[cell, role, 3] > rect[cell, role, 1]:
                        hit = True
                if hit:
                    filled += 1
        denom = k * k if count_empty else max(filled, 1)
        for cell in range(k * k):
            for role in range(2):
                y1 = rect[cell, role, 0]
                x1 = rect[cell, role, 1]
                y2 = rect[cell, role, 2]
                x2 = rect[cell, role, 3]
                if y2 > y1 and x2 > x1:
                    scale = 1.0 / (denom * (y2 - y1) * (x2 - x1))
                    if role == 0:
                        _scatter_rect(diff_s, cover_s, y1, x1, y2, x2, cell, cell * R, R, upstream[p], scale)
                    else:
                        _scatter_rect(diff_o, cover_o, y1, x1, y2, x2, cell, cell * R, R, upstream[p], scale)
    return diff_s, cover_s, diff_o, cover_o


def _resolve_difference(diff: np.ndarray, cover: np.ndarray, R: int) -> np.ndarray:
    """Turn a difference array into per-pixel gradients.

    Pixels no rectangle touched are forced to exactly 0.0 using the integer
    coverage count, so cancellation residue never leaks outside the pooled cells.
    """
    grad = np.cumsum(np.cumsum(diff, axis=0), axis=1)[:-1, :-1]
    covered = np.cumsum(np.cumsum(cover, axis=0), axis=1)[:-1, :-1] > 0
    grad[~np.repeat(covered, R, axis=2)] = 0.0
    return grad


# --------------------------------------------------------------------------
# public API


def _as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.int64, copy=False)
    else:
        arr = np.array([b.as_tuple() if isinstance(b, Box) else tuple(b) for b in boxes], dtype=np.int64)
    return arr.reshape(-1, 4)


def _check_extent(boxes: np.ndarray, height: int, width: int):
    if len(boxes) == 0:
        return
    if (boxes[:, 0].min() < 0 or boxes[:, 1].min() < 0
            or boxes[:, 2].max() > width or boxes[:, 3].max() > height):
        raise DomainError(f"box outside the {height}x{width} score map")
    if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
        raise DomainError("degenerate box")


def _as_pairs(pairs, n_boxes: int) -> np.ndarray:
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(arr) and (arr.min() < 0 or arr.max() >= n_boxes):
        raise DomainError("pair index out of range")
    return arr


def position_sensitive_pool(values: np.ndarray, boxes, k: int, R: int, integral=None) -> np.ndarray:
    """Role-free single-RoI pooling of an ``H x W x k²R`` stack: ``N x R`` float64."""
    if values.ndim != 3 or values.shape[2] != k * k * R:
        raise DimensionError(f"stack of shape {values.shape} needs {k * k * R} channels")
    arr = _as_box_array(boxes)
    _check_extent(arr, values.shape[0], values.shape[1])
    ii = integral_image(values) if integral is None else integral
    return _single_forward(ii, arr, k, R, COUNT_EMPTY_CELLS)


def single_roi_pool_many(score_map: RoleScoreMap, boxes) -> np.ndarray:
    """Pool each of N boxes: ``N x R`` float64."""
    return position_sensitive_pool(score_map.map, boxes, score_map.k, score_map.R, score_map.integral)


def single_roi_pool(score_map: RoleScoreMap, box: Box) -> np.ndarray:
    """Mean-pool each grid cell on its own channel group, then average the k² cells."""
    return single_roi_pool_many(score_map, [box])[0]


def _check_roles(sub_map: RoleScoreMap, obj_map: RoleScoreMap):
    if sub_map.role != SUBJECT or obj_map.role != OBJECT:
        raise UsageError(f"joint pooling needs (subject, object) maps, got ({sub_map.role}, {obj_map.role})")
    if sub_map.map.shape != obj_map.map.shape or (sub_map.k, sub_map.R) != (obj_map.k, obj_map.R):
        raise DimensionError("subject and object maps differ in shape")


def joint_pool_pairs(sub_map: RoleScoreMap, obj_map: RoleScoreMap, boxes, pairs) -> np.ndarray:
    """Joint pooling of every ordered pair ``(i, j)`` in ``pairs``: ``P x R``."""
    _check_roles(sub_map, obj_map)
    arr = _as_box_array(boxes)
    _check_extent(arr, sub_map.height, sub_map.width)
    pr = _as_pairs(pairs, len(arr))
    return _joint_forward(sub_map.integral, obj_map.integral, arr, pr, sub_map.k, sub_map.R, COUNT_EMPTY_CELLS)


def joint_pool(sub_map: RoleScoreMap, obj_map: RoleScoreMap, p_i: Box, p_j: Box) -> np.ndarray:
    """Pool over the k x k grid of the union box; each role only sees its own box.

    A cell that does not intersect a role's box contributes 0 for that role.
    """
    return joint_pool_pairs(sub_map, obj_map, [p_i, p_j], [(0, 1)])[0]


def pair_scores(bundle: ScoreMapBundle, boxes, pairs) -> np.ndarray:
    """Subject pooling + object pooling + joint pooling for every ordered pair."""
    arr = _as_box_array(boxes)
    pr = _as_pairs(pairs, len(arr))
    sub = single_roi_pool_many(bundle.single_subject, arr)
    obj = single_roi_pool_many(bundle.single_object, arr)
    joint = joint_pool_pairs(bundle.joint_subject, bundle.joint_object, arr, pr)
    return sub[pr[:, 0]] + obj[pr[:, 1]] + joint


def pair_score(bundle: ScoreMapBundle, p_i: Box, p_j: Box) -> np.ndarray:
    return pair_scores(bundle, [p_i, p_j], [(0, 1)])[0]


def single_roi_pool_backward(upstream: np.ndarray, boxes, k: int, R: int, height: int, width: int) -> np.ndarray:
    """Gradient of ``sum(upstream * single_roi_pool_many(map, boxes))`` w.r.t. the map."""
    arr = _as_box_array(boxes)
    up = np.ascontiguousarray(upstream, dtype=np.float64).reshape(len(arr), R)
    diff, cover = _single_backward(up, arr, k, R, height, width, COUNT_EMPTY_CELLS)
    return _resolve_difference(diff, cover, R)


def joint_pool_backward(upstream: np.ndarray, boxes, pairs, k: int, R: int, height: int, width: int):
    """Gradients ``(d_subject_map, d_object_map)`` of the joint pooling."""
    arr = _as_box_array(boxes)
    pr = _as_pairs(pairs, len(arr))
    up = np.ascontiguousarray(upstream, dtype=np.float64).reshape(len(pr), R)
    diff_s, cover_s, diff_o, cover_o = _joint_backward(up, arr, pr, k, R, height, width, COUNT_EMPTY_CELLS)
    return _resolve_difference(diff_s, cover_s, R), _resolve_difference(diff_o, cover_o, R)


def pooling_backward(upstream: np.ndarray, boxes, pairs, k: int, R: int, height: int, width: int):
    """Backward of :func:`pair_scores`.

    Returns gradients for ``(single_subject, single_object, joint_subject,
    joint_object)`` in bundle field order, each ``H x W x k²R`` float64.
    """
    arr = _as_box_array(boxes)
    pr = _as_pairs(pairs, len(arr))
    up = np.asarray(upstream, dtype=np.float64).reshape(len(pr), R)
    per_sub = np.zeros((len(arr), R))
    per_obj = np.zeros((len(arr), R))
    np.add.at(per_sub, pr[:, 0], up)
    np.add.at(per_obj, pr[:, 1], up)
    g_ss = single_roi_pool_backward(per_sub, arr, k, R, height, width)
    g_so = single_roi_pool_backward(per_obj, arr, k, R, height, width)
    g_js, g_jo = joint_pool_backward(up, arr, pr, k, R, height, width)
    return g_ss, g_so, g_js, g_jo


# --------------------------------------------------------------------------
# per-cell views (used for inspection dumps)


def _cell_mean(values: np.ndarray, y1, x1, y2, x2, channels) -> np.ndarray:
    return values[y1:y2, x1:x2, channels].mean(axis=(0, 1), dtype=np.float64)


def cell_means(score_map: RoleScoreMap, box: Box) -> np.ndarray:
    """Per-cell pooled values ``k x k x R`` of single-RoI pooling (0 for empty cells)."""
    k, R = score_map.k, score_map.R
    xe, ye = grid_edges(box.x1, box.x2, k), grid_edges(box.y1, box.y2, k)
    out = np.zeros((k, k, R))
    for a in range(k):
        for b in range(k):
            if ye[a + 1] > ye[a] and xe[b + 1] > xe[b]:
                base = (a * k + b) * R
                out[a, b] = _cell_mean(score_map.map, ye[a], xe[b], ye[a + 1], xe[b + 1], slice(base, base + R))
    return out


def joint_cell_terms(sub_map: RoleScoreMap, obj_map: RoleScoreMap, p_i: Box, p_j: Box):
    """Per-cell subject and object terms ``(k x k x R, k x k x R)`` of joint pooling."""
    _check_roles(sub_map, obj_map)
    k, R = sub_map.k, sub_map.R
    u = union_box(p_i, p_j)
    xe, ye = grid_edges(u.x1, u.x2, k), grid_edges(u.y1, u.y2, k)
    terms = np.zeros((2, k, k, R))
    for a in range(k):
        for b in range(k):
            if not (ye[a + 1] > ye[a] and xe[b + 1] > xe[b]):
                continue
            cell = Box(xe[b], ye[a], xe[b + 1], ye[a + 1])
            base = (a * k + b) * R
            for role, (m, box) in enumerate(((sub_map, p_i), (obj_map, p_j))):
                inter = intersection(cell, box)
                if inter is not None:
                    terms[role, a, b] = _cell_mean(m.map, inter.y1, inter.x1, inter.y2, inter.x2,
                                                   slice(base, base + R))
    return terms[0], terms[1]
