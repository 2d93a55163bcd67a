"""Pure-Python twins of the compiled kernels in ``_ckernels.pyx``.

Loops mirror the compiled versions statement for statement (same order of
accumulation), so results match bit for bit.
"""

from __future__ import annotations

import numpy as np


def running_max(v):
    out = np.empty(len(v), dtype=np.float64)
    if len(v) == 0:
        return out
    m = v[0]
    for t, x in enumerate(v):
        if x > m:
            m = x
        out[t] = m
    return out


def total_variation(v):
    s = 0.0
    for t in range(1, len(v)):
        s += abs(v[t] - v[t - 1])
    return s


def regret_sum(v):
    if len(v) == 0:
        return 0.0
    s = 0.0
    m = v[0]
    for x in v:
        if x > m:
            m = x
        s += m - x
    return s


def regression_mass(v):
    s = 0.0
    for t in range(1, len(v)):
        d = v[t - 1] - v[t]
        if d > 0.0:
            s += d
    return s


def count_small_steps(v, eps):
    c = 0
    for t in range(1, len(v)):
        if abs(v[t] - v[t - 1]) < eps:
            c += 1
    return c


def count_rises(v, eps):
    c = 0
    for t in range(1, len(v)):
        if v[t] - v[t - 1] > eps:
            c += 1
    return c


def dtw_distance(a, b):
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise ValueError("dtw_distance needs non-empty sequences")
    a0 = a[0]
    prev = [0.0] * m
    prev[0] = abs(a0 - b[0])
    for j in range(1, m):
        prev[j] = prev[j - 1] + abs(a0 - b[j])
    for i in range(1, n):
        ai = a[i]
        cur = [0.0] * m
        cur[0] = prev[0] + abs(ai - b[0])
        for j in range(1, m):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = best + abs(ai - b[j])
        prev = cur
    return prev[m - 1]
