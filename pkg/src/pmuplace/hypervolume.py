"""Exact dominated hypervolume for three minimisation objectives."""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from fractions import Fraction

import numpy as np


def _integer_axis(values: list[float]) -> tuple[list[int], int]:
    """Scale one axis so every value becomes an exact integer.

    Finite doubles are dyadic rationals, so one power-of-two denominator
    covers the whole axis.
    """
    fracs = [Fraction(v) for v in values]
    denom = max(f.denominator for f in fracs)
    return [f.numerator * (denom // f.denominator) for f in fracs], denom


def _staircase_area(stair_a: list[int], stair_b: list[int], ref_a: int, ref_b: int) -> int:
    area = 0
    for k in range(len(stair_a)):
        nxt = stair_a[k + 1] if k + 1 < len(stair_a) else ref_a
        area += (nxt - stair_a[k]) * (ref_b - stair_b[k])
    return area


def _insert(stair_a: list[int], stair_b: list[int], a: int, b: int) -> bool:
    """Add (a, b) to a 2-D nondominated staircase; False if it was dominated."""
    i = bisect_right(stair_a, a)
    if i > 0 and stair_b[i - 1] <= b:
        return False
    # drop points the new one dominates: a' >= a and b' >= b
    lo = bisect_left(stair_a, a)
    hi = lo
    while hi < len(stair_a) and stair_b[hi] >= b:
        hi += 1
    stair_a[lo:hi] = [a]
    stair_b[lo:hi] = [b]
    return True


def hypervolume(front, reference_point) -> float:
    """Volume dominated by ``front`` and bounded by ``reference_point``.

    Sweeps the first objective and keeps the 2-D staircase of the other two.
    All arithmetic is done on exact integers and rounded once, so adding a
    point never lowers the result.

    Raises:
        ValueError: if some point is worse than the reference point in any
            objective. The message names the point.
    """
    ref = np.asarray(reference_point, dtype=float)
    pts = np.asarray(front, dtype=float).reshape(-1, 3)
    if ref.shape != (3,) or not np.all(np.isfinite(ref)):
        raise ValueError("reference point must have 3 finite coordinates")
    for p in pts:
        if np.any(p > ref) or not np.all(np.isfinite(p)):
            raise ValueError(f"point {tuple(p.tolist())} lies outside the reference box {tuple(ref.tolist())}")
    if len(pts) == 0:
        return 0.0

    axes, scale = [], 1
    for m in range(3):
        ints, denom = _integer_axis([*pts[:, m].tolist(), float(ref[m])])
        axes.append(ints)
        scale *= denom
    n = len(pts)
    order = sorted(range(n), key=lambda i: axes[0][i])
    ref0, ref1, ref2 = axes[0][n], axes[1][n], axes[2][n]

    stair_a: list[int] = []
    stair_b: list[int] = []
    area = 0
    volume = 0
    for pos, i in enumerate(order):
        if _insert(stair_a, stair_b, axes[1][i], axes[2][i]):
            area = _staircase_area(stair_a, stair_b, ref1, ref2)
        nxt = axes[0][order[pos + 1]] if pos + 1 < n else ref0
        volume += (nxt - axes[0][i]) * area
    return volume / scale
