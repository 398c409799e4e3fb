"""Naive reference implementations of the metrics.

These are deliberately slow and direct (python loops, full sorts) and are
kept independent of the production code paths so they can serve as oracles:
double-loop cosines, a full pixel sort for the activation region, and a
linear scan for existence checks.
"""

import numpy as np


def ref_cosine(a, b):
    num = 0.0
    norm_a = 0.0
    norm_b = 0.0
    for x, y in zip(list(a), list(b), strict=True):
        num += float(x) * float(y)
        norm_a += float(x) * float(x)
        norm_b += float(y) * float(y)
    norm_a = norm_a**0.5
    norm_b = norm_b**0.5
    if norm_a < 1e-12 or norm_b < 1e-12:
        return None
    value = num / (norm_a * norm_b)
    return min(1.0, max(-1.0, value))


def ref_rank_desc(scores, key):
    keyed = [abs(float(s)) if key == "absolute" else float(s) for s in scores]
    return sorted(range(len(scores)), key=lambda i: (-keyed[i], i))


def ref_existence(scores, annotated, l, key):
    top = ref_rank_desc(scores, key)[:l]
    return sum(1 for j in top if j in annotated) / l


def ref_top_region(values, budget):
    flat = [(float(v), i) for i, v in enumerate(np.asarray(values).ravel())]
    flat.sort(key=lambda pair: (-pair[0], pair[1]))
    return {i for _, i in flat[:budget]}


def ref_region_budget(alpha, rows, cols):
    import math

    return int(math.floor(alpha * rows * cols / 12.0 + 0.5))


def ref_point_in_top_alpha(values, point, alpha):
    arr = np.asarray(values)
    budget = ref_region_budget(alpha, arr.shape[0], arr.shape[1])
    return (point[0] * arr.shape[1] + point[1]) in ref_top_region(arr, budget)


def ref_point_in_threshold(values, point, tau):
    arr = np.asarray(values, dtype=float)
    lo = min(arr.ravel().tolist())
    hi = max(arr.ravel().tolist())
    if hi - lo <= 0.0:
        return False
    normalized = (arr[point[0], point[1]] - lo) / (hi - lo)
    return normalized >= tau


def ref_cgim_axis(left, right, axis):
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    if axis == "concept":
        return [ref_cosine(left[j, :], right[j, :]) for j in range(left.shape[0])]
    return [ref_cosine(left[:, k], right[:, k]) for k in range(left.shape[1])]


def ref_cgim_masked(left, right, defined, axis):
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    defined = list(defined)
    if axis == "class":
        return [
            ref_cosine(left[:, k], right[:, k]) if defined[k] else None
            for k in range(left.shape[1])
        ]
    cols = [k for k, ok in enumerate(defined) if ok]
    if not cols:
        return [None] * left.shape[0]
    return [ref_cosine(left[j, cols], right[j, cols]) for j in range(left.shape[0])]
