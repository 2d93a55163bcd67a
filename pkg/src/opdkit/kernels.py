"""Backend selection for the sequence kernels.

The compiled extension ``opdkit._ckernels`` is used when it is importable;
otherwise the pure-Python twins in ``opdkit._pykernels`` are used. Setting
``OPDKIT_PURE_PYTHON=1`` forces the fallback. Both backends accumulate in
the same order, so the choice only affects speed.
"""

from __future__ import annotations

import os

import numpy as np

from opdkit import _pykernels

_ext = None
if os.environ.get("OPDKIT_PURE_PYTHON") != "1":
    try:
        from opdkit import _ckernels as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "python"

__all__ = [
    "BACKEND",
    "as_array",
    "running_max",
    "total_variation",
    "regret_sum",
    "regression_mass",
    "count_small_steps",
    "count_rises",
    "dtw_distance",
]


def as_array(values) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=np.float64)


if _ext is not None:

    def running_max(values) -> np.ndarray:
        return _ext.running_max(as_array(values))

    def total_variation(values) -> float:
        return _ext.total_variation(as_array(values))

    def regret_sum(values) -> float:
        return _ext.regret_sum(as_array(values))

    def regression_mass(values) -> float:
        return _ext.regression_mass(as_array(values))

    def count_small_steps(values, eps: float) -> int:
        return _ext.count_small_steps(as_array(values), float(eps))

    def count_rises(values, eps: float) -> int:
        return _ext.count_rises(as_array(values), float(eps))

    def dtw_distance(a, b) -> float:
        return _ext.dtw_distance(as_array(a), as_array(b))

else:

    def _list(values) -> list:
        return as_array(values).tolist()

    def running_max(values) -> np.ndarray:
        return _pykernels.running_max(_list(values))

    def total_variation(values) -> float:
        return _pykernels.total_variation(_list(values))

    def regret_sum(values) -> float:
        return _pykernels.regret_sum(_list(values))

    def regression_mass(values) -> float:
        return _pykernels.regression_mass(_list(values))

    def count_small_steps(values, eps: float) -> int:
        return _pykernels.count_small_steps(_list(values), float(eps))

    def count_rises(values, eps: float) -> int:
        return _pykernels.count_rises(_list(values), float(eps))

    def dtw_distance(a, b) -> float:
        return _pykernels.dtw_distance(_list(a), _list(b))
