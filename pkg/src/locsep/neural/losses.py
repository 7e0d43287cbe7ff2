"""Scalar losses and their gradients w.r.t. the prediction.

Each returns (mean loss, dL/dpred). Probability inputs are clamped to
[eps, 1-eps] before any log.
"""

import numpy as np

from ..errors import DimensionError

CLAMP_EPS = 1e-7


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise DimensionError(f"pred {pred.shape} vs target {target.shape}")


def mse_loss(pred, target):
    _check_shapes(pred, target)
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def bce_loss(pred, target):
    """Elementwise binary cross entropy, averaged over all entries."""
    _check_shapes(pred, target)
    p = np.clip(pred, CLAMP_EPS, 1.0 - CLAMP_EPS)
    loss = -np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))
    grad = (-(target / p) + (1.0 - target) / (1.0 - p)) / p.size
    return float(loss), grad


def ce_loss(pred, target):
    """Cross entropy against one-hot rows: mean over frames of
    -sum_k target_k log(pred_k)."""
    _check_shapes(pred, target)
    if pred.ndim != 2:
        raise DimensionError("ce_loss expects (frames, classes)")
    p = np.clip(pred, CLAMP_EPS, 1.0 - CLAMP_EPS)
    n_frames = pred.shape[0]
    loss = -np.sum(target * np.log(p)) / n_frames
    grad = -(target / p) / n_frames
    return float(loss), grad


LOSSES = {"mse": mse_loss, "bce": bce_loss, "ce": ce_loss}
