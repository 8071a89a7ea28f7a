"""Flow accuracy metrics on ``(..., H, W, 2)`` arrays."""

from __future__ import annotations

import math

import numpy as np


class EmptyMaskError(ValueError):
    pass


def _endpoint_errors(pred, gt) -> np.ndarray:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise ValueError(f"flow shapes must agree and end in 2: {pred.shape} vs {gt.shape}")
    return np.linalg.norm(pred - gt, axis=-1)


def _select(values: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return values.ravel()
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), values.shape)
    if not mask.any():
        raise EmptyMaskError("mask selects no pixels")
    return values[mask]


def epe(pred, gt, mask=None) -> float:
    """Mean end-point error over the masked pixels."""
    return float(_select(_endpoint_errors(pred, gt), mask).mean())


def f1_all(pred, gt, mask=None, rule: str = "and") -> float:
    """Percentage of outliers.

    With ``rule="and"`` (KITTI) a pixel is an outlier when its error exceeds
    3 px *and* 5% of the ground-truth magnitude; ``rule="or"`` flags it when
    either holds.
    """
    err = _endpoint_errors(pred, gt)
    mag = np.linalg.norm(np.asarray(gt, dtype=np.float64), axis=-1)
    absolute, relative = err > 3.0, err > 0.05 * mag
    if rule == "and":
        out = absolute & relative
    elif rule == "or":
        out = absolute | relative
    else:
        raise ValueError(f"rule must be 'and' or 'or', got {rule!r}")
    return 100.0 * float(_select(out.astype(np.float64), mask).mean())


def s40(pred, gt) -> float:
    """EPE over pixels with ground-truth magnitude above 40 px; NaN when there are none."""
    mag = np.linalg.norm(np.asarray(gt, dtype=np.float64), axis=-1)
    sel = mag > 40.0
    if not sel.any():
        return math.nan
    return float(_endpoint_errors(pred, gt)[sel].mean())
