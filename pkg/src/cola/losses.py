"""Segmentation losses: cross-entropy, Lovász-softmax, and their sum.

The Lovász-softmax term is the Lovász extension of the per-class Jaccard
loss evaluated on softmax scores: per class present in the batch, the
absolute prediction errors are sorted in decreasing order and weighted by
the successive differences of the Jaccard loss of the sorted-prefix
mispredicted sets. On hard 0/1 predictions the value per class is exactly
1 - IoU. The extension is piecewise linear, so its gradient reuses the same
sorted weights.

Targets are class column indices; rows whose target equals ``ignore_id``
contribute nothing to any loss or gradient.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError

DEFAULT_IGNORE = -1


class EmptyBatch(DataError):
    """Every row in the batch carries the ignore target."""


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _valid_rows(targets: np.ndarray, n_classes: int, ignore_id: int) -> np.ndarray:
    targets = np.asarray(targets)
    valid = targets != ignore_id
    if not valid.any():
        raise EmptyBatch("all rows are ignored")
    inside = (targets[valid] >= 0) & (targets[valid] < n_classes)
    if not inside.all():
        bad = targets[valid][~inside][0]
        raise ValueError(f"target {bad} outside [0, {n_classes})")
    return valid


def cross_entropy(
    logits: np.ndarray, targets: np.ndarray, ignore_id: int = DEFAULT_IGNORE
) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax over non-ignored rows, with logit gradient."""
    z = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    valid = _valid_rows(targets, z.shape[1], ignore_id)
    n_valid = int(valid.sum())
    zv = z[valid]
    tv = targets[valid].astype(np.int64)
    shifted = zv - zv.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_norm[:, None]
    loss = float(-log_probs[np.arange(n_valid), tv].mean())
    grad_valid = np.exp(log_probs)
    grad_valid[np.arange(n_valid), tv] -= 1.0
    grad = np.zeros_like(z)
    grad[valid] = grad_valid / n_valid
    return loss, grad


def lovasz_per_class(
    probs: np.ndarray, targets: np.ndarray, ignore_id: int = DEFAULT_IGNORE
) -> tuple[list[int], np.ndarray, np.ndarray]:
    """Per-present-class Lovász values and the gradient w.r.t. probabilities.

    Returns (present class ids, per-class values, grad of the summed
    per-class values w.r.t. probs). Rows with the ignore target get zero
    gradient. All present classes are processed in one vectorized pass.
    """
    p = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets)
    valid = _valid_rows(targets, p.shape[1], ignore_id)
    row_sums = p[valid].sum(axis=1)
    if not np.all(np.abs(row_sums - 1.0) <= 1e-9):
        raise ValueError("probability rows must sum to 1 within 1e-9")
    tv = targets[valid].astype(np.int64)
    pv = p[valid]
    present = sorted(int(c) for c in np.unique(tv))
    cols = np.asarray(present)
    fg = (tv[:, None] == cols[None, :]).astype(np.float64)  # (rows, present)
    errors = np.abs(fg - pv[:, cols])
    order = np.argsort(-errors, axis=0, kind="stable")
    fg_sorted = np.take_along_axis(fg, order, axis=0)
    totals = fg.sum(axis=0)
    intersection = totals - np.cumsum(fg_sorted, axis=0)
    union = totals + np.cumsum(1.0 - fg_sorted, axis=0)
    jaccard = 1.0 - intersection / union
    weights = jaccard.copy()
    weights[1:] = jaccard[1:] - jaccard[:-1]
    values = (np.take_along_axis(errors, order, axis=0) * weights).sum(axis=0)
    # d|fg - p|/dp is -1 on foreground rows and +1 elsewhere.
    scatter = np.empty_like(weights)
    np.put_along_axis(scatter, order, weights * (1.0 - 2.0 * fg_sorted), axis=0)
    grad = np.zeros_like(p)
    grad_valid = np.zeros_like(pv)
    grad_valid[:, cols] = scatter
    grad[valid] = grad_valid
    return present, values, grad


def lovasz_softmax(
    probs: np.ndarray, targets: np.ndarray, ignore_id: int = DEFAULT_IGNORE
) -> tuple[float, np.ndarray]:
    """Mean Lovász value over classes present in the batch."""
    present, values, grad = lovasz_per_class(probs, targets, ignore_id)
    return float(values.mean()), grad / len(present)


def mixed_loss(
    logits: np.ndarray,
    targets: np.ndarray,
    ignore_id: int = DEFAULT_IGNORE,
    ce_weight: float = 1.0,
    lovasz_weight: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Cross-entropy plus Lovász-softmax on the softmax scores.

    The Lovász gradient is chained through the softmax Jacobian; default
    weights are 1:1.
    """
    ce_value, ce_grad = cross_entropy(logits, targets, ignore_id)
    p = softmax(logits)
    lov_value, lov_grad_p = lovasz_softmax(p, targets, ignore_id)
    # Row-wise softmax Jacobian-vector product: p * (g - <g, p>).
    inner = (lov_grad_p * p).sum(axis=1, keepdims=True)
    lov_grad_z = p * (lov_grad_p - inner)
    loss = ce_weight * ce_value + lovasz_weight * lov_value
    grad = ce_weight * ce_grad + lovasz_weight * lov_grad_z
    if not np.isfinite(loss):
        raise ValueError("non-finite loss value")
    return float(loss), grad
