"""Pseudo-labels and the composite point/pixel segmentation loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .preproc import IGNORE_ID, PixelClusterIndex
from .tensor import Tensor
from .tensor import functional as F

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    pixel: float = 1.0  # lambda: weight of the pixel-level group
    lovasz: float = 1.5  # beta: weight of Lovasz-Softmax inside the group

    def __post_init__(self):
        if self.pixel < 0 or self.lovasz < 0:
            raise ConfigError("loss weights must be non-negative")


def pseudo_labels(labels: np.ndarray, index: PixelClusterIndex, num_classes: int,
                  ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Per-pixel majority vote as a (num_images, H, W) int64 image.

    Ties go to the smallest class id; pixels without labeled points get
    ``ignore_id``.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != index.num_points:
        raise DimensionError(f"{labels.size} labels for {index.num_points} points")
    valid = labels != ignore_id
    if np.any((labels[valid] < 0) | (labels[valid] >= num_classes)):
        raise DataError(f"point labels outside [0, {num_classes})")
    votes = np.zeros((index.num_pixels, num_classes), dtype=np.int64)
    np.add.at(votes, (index.pixel_index[valid], labels[valid]), 1)
    out = np.where(votes.any(axis=1), votes.argmax(axis=1), ignore_id)
    return out.reshape(index.num_images, index.height, index.width)


def _one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    """Rows of zeros for ignored entries."""
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    keep = (labels >= 0) & (labels < num_classes)
    out[np.flatnonzero(keep), labels[keep]] = 1
    return out


def _zero_like(t: Tensor) -> Tensor:
    """A zero scalar that stays connected to ``t`` (zero gradient)."""
    return F.mul(F.sum(t), 0.0)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_id: int = IGNORE_ID) -> Tensor:
    """Mean negative log-likelihood over non-ignored rows of an M x C logit matrix."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise DimensionError(f"logits {logits.shape} do not match {labels.size} labels")
    c = logits.shape[1]
    valid = labels != ignore_id
    if np.any((labels[valid] < 0) | (labels[valid] >= c)):
        raise DataError(f"labels outside [0, {c})")
    count = int(valid.sum())
    if count == 0:
        return _zero_like(logits)
    target = _one_hot(np.where(valid, labels, -1), c, logits.dtype)
    picked = F.sum(F.mul(F.log_softmax(logits, axis=1), Tensor(target)))
    return F.mul(picked, -1.0 / count)


def lovasz_gradient(fg_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss at sorted errors."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs: Tensor, labels: np.ndarray, ignore_id: int = IGNORE_ID) -> Tensor:
    """Lovasz-Softmax over the classes present in ``labels``.

    ``probs`` is M x C (rows are softmax outputs). The error sort is treated
    as a fixed permutation for differentiation.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise DimensionError(f"probs {probs.shape} do not match {labels.size} labels")
    valid = np.flatnonzero(labels != ignore_id)
    if valid.size == 0:
        return _zero_like(probs)
    p = F.gather(probs, valid) if valid.size != labels.size else probs
    lab = labels[valid]
    losses = []
    for c in np.unique(lab):
        fg = (lab == c).astype(probs.dtype)
        # error is |fg - p_c|, linear in p_c for a fixed fg
        pc = F.reshape(F.gather(F.transpose(p, (1, 0)), [int(c)]), (-1,))
        errors = F.add(Tensor(fg), F.mul(pc, Tensor(1.0 - 2.0 * fg)))
        order = np.argsort(-errors.data, kind="stable")
        sorted_errors = F.gather(F.reshape(errors, (-1, 1)), order)
        grad = lovasz_gradient(fg[order]).reshape(-1, 1)
        losses.append(F.sum(F.mul(sorted_errors, Tensor(grad))))
    total = losses[0]
    for term in losses[1:]:
        total = F.add(total, term)
    return F.mul(total, 1.0 / len(losses))


def _boundary(m: Tensor, kernel: int) -> Tensor:
    return F.sub(F.max_pool2d(m, kernel), m)


def boundary_loss(probs: Tensor, label_image: np.ndarray, ignore_id: int = IGNORE_ID,
                  theta0: int = 3, theta: int = 5) -> Tensor:
    """1 - mean boundary F1 over (image, class) pairs with a non-empty GT boundary.

    ``probs`` is B x C x H x W. Boundaries are the max-pool residue
    ``maxpool_theta0(m) - m``; matches are counted against boundaries
    extended by ``maxpool_theta``. Ignored pixels are removed from every map.
    """
    labels = np.asarray(label_image, dtype=np.int64)
    if probs.ndim != 4 or labels.shape != (probs.shape[0],) + probs.shape[2:]:
        raise DimensionError(f"probs {probs.shape} do not match label image {labels.shape}")
    b, c, h, w = probs.shape
    valid = (labels != ignore_id).astype(probs.dtype)[:, None]
    gt = _one_hot(np.where(labels == ignore_id, -1, labels).reshape(-1), c, probs.dtype)
    gt = gt.reshape(b, h, w, c).transpose(0, 3, 1, 2) * valid
    gt_b = (_boundary(Tensor(gt), theta0).data * valid)
    has_boundary = gt_b.sum(axis=(2, 3)) > 0
    if not has_boundary.any():
        return _zero_like(probs)
    gt_ext = F.max_pool2d(Tensor(gt_b), theta).data

    pred = F.mul(probs, Tensor(valid))
    pred_b = F.mul(_boundary(pred, theta0), Tensor(valid))
    pred_ext = F.max_pool2d(pred_b, theta)

    precision = F.div(F.sum(F.mul(pred_b, Tensor(gt_ext)), axis=(2, 3)), F.add(F.sum(pred_b, axis=(2, 3)), EPS))
    recall = F.div(F.sum(F.mul(pred_ext, Tensor(gt_b)), axis=(2, 3)), gt_b.sum(axis=(2, 3)) + EPS)
    bf1 = F.div(F.mul(F.mul(precision, recall), 2.0), F.add(F.add(precision, recall), EPS))
    mask = has_boundary.astype(probs.dtype)
    mean_bf1 = F.mul(F.sum(F.mul(bf1, Tensor(mask))), 1.0 / mask.sum())
    return F.sub(1.0, mean_bf1)


def pixel_rows(image_logits: Tensor) -> Tensor:
    """B x C x H x W -> (B*H*W) x C."""
    b, c, h, w = image_logits.shape
    return F.reshape(F.transpose(image_logits, (0, 2, 3, 1)), (b * h * w, c))


def pixel_losses(image_logits: Tensor, label_image: np.ndarray, ignore_id: int = IGNORE_ID) -> dict[str, Tensor]:
    labels = np.asarray(label_image).reshape(-1)
    rows = pixel_rows(image_logits)
    probs = F.softmax(image_logits, axis=1)
    return {
        "ce_px": cross_entropy(rows, labels, ignore_id),
        "lovasz_px": lovasz_softmax(pixel_rows(probs), labels, ignore_id),
        "boundary_px": boundary_loss(probs, label_image, ignore_id),
    }


def total_loss(
    point_logits: Tensor,
    aux_logits: Sequence[Tensor],
    point_labels: np.ndarray,
    pixel_labels: np.ndarray,
    weights: LossWeights = LossWeights(),
    ignore_id: int = IGNORE_ID,
) -> tuple[Tensor, dict[str, float]]:
    """Point CE plus lambda times the head-averaged pixel group
    (CE + beta * Lovasz + boundary). Returns the scalar and a float breakdown."""
    ce_pt = cross_entropy(point_logits, point_labels, ignore_id)
    parts = {"ce_pt": float(ce_pt.data)}
    if not aux_logits:
        return ce_pt, parts
    sums = {"ce_px": 0.0, "lovasz_px": 0.0, "boundary_px": 0.0}
    group = None
    for head in aux_logits:
        terms = pixel_losses(head, pixel_labels, ignore_id)
        for key, val in terms.items():
            sums[key] += float(val.data)
        g = F.add(F.add(terms["ce_px"], F.mul(terms["lovasz_px"], weights.lovasz)), terms["boundary_px"])
        group = g if group is None else F.add(group, g)
    group = F.mul(group, 1.0 / len(aux_logits))
    parts.update({k: v / len(aux_logits) for k, v in sums.items()})
    total = F.add(ce_pt, F.mul(group, weights.pixel))
    parts["total"] = float(total.data)
    return total, parts
