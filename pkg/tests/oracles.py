"""Slow, obviously-correct reference implementations used by the tests."""

import numpy as np


def cell_of(t: int, lo: int, hi: int, k: int) -> int:
    """Grid cell index of integer coordinate ``t`` inside ``[lo, hi)``."""
    return ((t - lo) * k) // (hi - lo)


def pixel_single_pool(values, box, k, R):
    """Per-pixel loop: mean per cell on the cell's channel group, then average the k*k cells."""
    x1, y1, x2, y2 = box
    sums = np.zeros((k, k, R))
    counts = np.zeros((k, k))
    for y in range(y1, y2):
        for x in range(x1, x2):
            a, b = cell_of(y, y1, y2, k), cell_of(x, x1, x2, k)
            counts[a, b] += 1
            for r in range(R):
                sums[a, b, r] += float(values[y, x, (a * k + b) * R + r])
    out = np.zeros(R)
    for a in range(k):
        for b in range(k):
            if counts[a, b]:
                out += sums[a, b] / counts[a, b]
    return out / (k * k)


def pixel_joint_pool(sub_values, obj_values, box_i, box_j, k, R):
    """Per-pixel loop over the union box; each role accumulates only pixels of its own box."""
    ux1, uy1 = min(box_i[0], box_j[0]), min(box_i[1], box_j[1])
    ux2, uy2 = max(box_i[2], box_j[2]), max(box_i[3], box_j[3])
    sums = np.zeros((2, k, k, R))
    counts = np.zeros((2, k, k))
    for y in range(uy1, uy2):
        for x in range(ux1, ux2):
            a, b = cell_of(y, uy1, uy2, k), cell_of(x, ux1, ux2, k)
            for role, (vals, bx) in enumerate(((sub_values, box_i), (obj_values, box_j))):
                if bx[0] <= x < bx[2] and bx[1] <= y < bx[3]:
                    counts[role, a, b] += 1
                    for r in range(R):
                        sums[role, a, b, r] += float(vals[y, x, (a * k + b) * R + r])
    out = np.zeros(R)
    for role in range(2):
        for a in range(k):
            for b in range(k):
                if counts[role, a, b]:
                    out += sums[role, a, b] / counts[role, a, b]
    return out / (k * k)


def pixel_pair_score(maps, box_i, box_j, k, R):
    """``maps`` = (single_subject, single_object, joint_subject, joint_object) arrays."""
    return (pixel_single_pool(maps[0], box_i, k, R) + pixel_single_pool(maps[1], box_j, k, R)
            + pixel_joint_pool(maps[2], maps[3], box_i, box_j, k, R))


def random_box(rng, height, width, min_size=1):
    x1 = int(rng.integers(0, width - min_size + 1))
    y1 = int(rng.integers(0, height - min_size + 1))
    x2 = int(rng.integers(x1 + min_size, width + 1))
    y2 = int(rng.integers(y1 + min_size, height + 1))
    return (x1, y1, x2, y2)


def central_difference(f, x: np.ndarray, index, eps=1e-6):
    """Numerical partial derivative of ``f`` at ``x[index]`` in float64."""
    xp, xm = x.copy(), x.copy()
    xp[index] += eps
    xm[index] -= eps
    return (f(xp) - f(xm)) / (2 * eps)
