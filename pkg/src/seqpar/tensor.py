"""Dense numeric kernels and per-step instrumentation.

Arrays are plain ``numpy.ndarray`` values in row-major layout, rank 1 to 3,
float64 by default (float32 opt-in through :func:`resolve_dtype`).  Kernels
treat their inputs as immutable and always return fresh arrays, which is what
makes them safe to hand across worker threads.  Every kernel validates its
output for NaN/Inf; silent numeric corruption is never allowed to propagate.

A thread-local :class:`StepCounters` can be installed with :func:`counting`;
while active, :func:`matmul` tallies the floating point work of every product
it actually performs (2*m*k*n per call, from the runtime shapes).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRowError, NumericsError, ShapeError

DTYPES = {"double": np.float64, "single": np.float32}


def resolve_dtype(precision: str) -> np.dtype:
    """Map a precision name ("double" or "single") to a numpy dtype."""
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}, expected one of {sorted(DTYPES)}")


@dataclass
class StepCounters:
    """Per-worker, per-step tallies of compute and activation footprint.

    matmul_flops counts every matrix product routed through :func:`matmul`.
    The attention-score fields are filled in by the attention core from the
    shapes it actually multiplies, so they can be compared exactly against
    closed-form estimates.
    """

    matmul_flops: int = 0
    attn_score_flops: int = 0
    attn_score_elements_peak: int = 0

    def add_matmul(self, m: int, k: int, n: int) -> None:
        self.matmul_flops += 2 * m * k * n

    def add_score_flops(self, m: int, k: int, n: int) -> None:
        self.attn_score_flops += 2 * m * k * n

    def record_score_footprint(self, elements: int) -> None:
        """Track the largest set of attention-score elements live at once."""
        if elements > self.attn_score_elements_peak:
            self.attn_score_elements_peak = elements


_active = threading.local()


@contextmanager
def counting(counters: StepCounters):
    """Install ``counters`` as this thread's matmul tally for the duration."""
    previous = getattr(_active, "counters", None)
    _active.counters = counters
    try:
        yield counters
    finally:
        _active.counters = previous


def active_counters() -> StepCounters | None:
    return getattr(_active, "counters", None)


def check_finite(x: np.ndarray, label: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {label}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product with shape validation and flop accounting."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = a @ b
    counters = getattr(_active, "counters", None)
    if counters is not None:
        counters.add_matmul(a.shape[0], a.shape[1], b.shape[1])
    return check_finite(out, "matmul output")


def transpose(a: np.ndarray) -> np.ndarray:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D operand, got shape {a.shape}")
    return np.ascontiguousarray(a.T)


def softmax_rows(a: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax with optional boolean keep-mask.

    ``mask[i, j] == False`` forces entry (i, j) to exactly zero and excludes
    it from the row's normalization.  A row with no kept entry has no valid
    distribution and raises :class:`DegenerateRowError`.  The max-subtraction
    stabilisation keeps exp() in range for any finite input.
    """
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D operand, got shape {a.shape}")
    if mask is None:
        shifted = a - np.max(a, axis=1, keepdims=True)
        e = np.exp(shifted)
        out = e / np.sum(e, axis=1, keepdims=True)
        return check_finite(out, "softmax output")
    if mask.shape != a.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match operand {a.shape}")
    if mask.dtype != np.bool_:
        raise ShapeError("softmax mask must be boolean")
    kept = np.count_nonzero(mask, axis=1)
    if np.any(kept == 0):
        row = int(np.argmin(kept))
        raise DegenerateRowError(f"softmax row {row} is fully masked")
    neg = np.where(mask, a, -np.inf)
    shifted = neg - np.max(neg, axis=1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0)
    out = e / np.sum(e, axis=1, keepdims=True)
    return check_finite(out, "softmax output")
