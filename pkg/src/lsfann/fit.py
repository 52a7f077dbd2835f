"""Log-log slope fitting shared by the filter tree and the harness."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    stderr: float
    intercept: float
    points: int


def loglog_fit(x, y) -> SlopeFit:
    """Least-squares slope of log(y) against log(x); needs at least 3 distinct x values."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("x and y must have the same shape")
    if len(np.unique(x)) < 3:
        raise ValueError("need at least 3 distinct ladder points for a slope fit")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs positive values")
    res = stats.linregress(np.log(x), np.log(y))
    stderr = float(res.stderr) if math.isfinite(res.stderr) else 0.0
    return SlopeFit(float(res.slope), stderr, float(res.intercept), len(x))
