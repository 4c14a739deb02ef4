"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from cuevis.autodiff.tensor import Tensor, backward


@dataclass
class GradCheckReport:
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"fd_check {status}: max rel err {self.max_rel_error:.3e} over {self.indices.size} coords (tol {self.tol:g})"


def fd_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
    indices: Optional[np.ndarray] = None,
    abs_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare ``d f(x) / d x`` against central differences.

    ``f`` must build a fresh graph on each call and return a scalar tensor.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``.
    ``indices`` restricts the check to a subset of flat coordinates.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x.grad = None
    x.requires_grad = True
    out = f(x)
    backward(out)
    analytic_full = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).astype(np.float64)
    x.grad = None

    flat = x.data.reshape(-1)
    idx = np.arange(x.size) if indices is None else np.asarray(indices).reshape(-1)
    numeric = np.empty(idx.size)
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        plus = float(f(x).item())
        flat[i] = orig - h
        minus = float(f(x).item())
        flat[i] = orig
        numeric[k] = (plus - minus) / (2 * h)
    analytic = analytic_full[idx]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(idx, analytic, numeric, rel, tol)
