"""Central finite-difference gradients and tolerance reports.

This module is deliberately independent of every backward pass it checks:
it only ever calls the scalar function it is given.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DEFAULT_STEP = 1e-6
DEFAULT_RTOL = 1e-5
DEFAULT_ATOL = 1e-8


class GradcheckError(ValueError):
    pass


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every entry of ``x``.

    ``x`` is perturbed in place and restored, so ``f`` may close over it.
    """
    if h <= 0:
        raise GradcheckError("step must be positive")
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradcheckError(f"non-finite function value near index {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass
class GradReport:
    name: str
    max_rel_err: float
    max_abs_err: float
    failing: list = field(default_factory=list)
    passed: bool = True

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} {self.name}: max_rel={self.max_rel_err:.3e} max_abs={self.max_abs_err:.3e}"
        if self.failing:
            text += f" failing={self.failing[:10]}"
        return text


def check(analytic: np.ndarray, numeric: np.ndarray, rtol: float = DEFAULT_RTOL,
          atol: float = DEFAULT_ATOL, name: str = "") -> GradReport:
    """Entry i passes iff |a - n| <= atol + rtol * max(|a|, |n|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise GradcheckError(f"shape mismatch: {analytic.shape} vs {numeric.shape}")
    diff = np.abs(analytic - numeric)
    mag = np.maximum(np.abs(analytic), np.abs(numeric))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(mag > 0, diff / mag, 0.0)
    bad = diff > atol + rtol * mag
    failing = [tuple(int(i) for i in idx) for idx in np.argwhere(bad)]
    return GradReport(
        name=name,
        max_rel_err=float(rel.max(initial=0.0)),
        max_abs_err=float(diff.max(initial=0.0)),
        failing=failing,
        passed=not failing,
    )
