"""Objectness, offset-field and box losses on voxel grids, plus peak
extraction (greedy NMS) turning a center heatmap into detections.

Reductions are sums over voxels. Offsets are in voxel units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from .geometry import CellType, ObbBox, VoxelGrid

LOGIT_CLAMP = 30.0
W_RECALL = 2.0
W_PRECISION = 10.0
W_OFFSET = 10.0
NMS_RADIUS = 4.0


def _values(g):
    return np.asarray(g.data if isinstance(g, VoxelGrid) else g, dtype=np.float64)


@dataclass(frozen=True)
class DetectionTargets:
    centers_gt: VoxelGrid       # SCALAR, 1 at object centers
    offset_gt: VoxelGrid  # VEC3, voxel offset to the nearest center
    extents_gt: VoxelGrid  # VEC3, box extents (m) at center voxels, 0 elsewhere


@dataclass(frozen=True)
class DetectionPrediction:
    recall_logits: VoxelGrid      # recall logits
    precision_logits: VoxelGrid      # precision logits
    offset: VoxelGrid  # VEC3
    box_extents: VoxelGrid  # VEC3


@dataclass(frozen=True)
class DetectionLoss:
    total: float
    recall: float
    precision: float
    offset: float
    bbox: float


def make_targets(dims, origin, voxel_size, centers, extents):
    """Targets for object centers given as integer voxel indices."""
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    extents = np.asarray(extents, dtype=np.float64).reshape(-1, 3)
    h = np.zeros(tuple(dims))
    ext = np.zeros(tuple(dims) + (3,))
    for c, e in zip(centers, extents):
        h[tuple(c)] = 1.0
        ext[tuple(c)] = e
    idx = np.stack(np.meshgrid(*(np.arange(d) for d in dims), indexing="ij"), axis=-1)
    flat = idx.reshape(-1, 3)
    off = np.zeros_like(flat, dtype=np.float64)
    if len(centers):
        best = np.full(len(flat), np.inf)
        for c in centers:
            delta = c - flat
            d2 = (delta ** 2).sum(axis=1)
            closer = d2 < best
            off[closer] = delta[closer]
            best = np.minimum(best, d2)
    return DetectionTargets(
        VoxelGrid(h, origin, voxel_size),
        VoxelGrid(off.reshape(tuple(dims) + (3,)), origin, voxel_size, CellType.VEC3),
        VoxelGrid(ext, origin, voxel_size, CellType.VEC3))


def loss_recall(recall_logits, centers_gt):
    """Summed binary cross-entropy of ``sigmoid(recall_logits)`` against ``centers_gt``."""
    z = np.clip(_values(recall_logits), -LOGIT_CLAMP, LOGIT_CLAMP)
    y = _values(centers_gt)
    if z.shape != y.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {y.shape}")
    # BCE(sigmoid(z), y) = softplus(z) - y z, evaluated stably
    return float((np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0) - y * z).sum())


def loss_precision(precision_logits, centers_gt):
    """Negative log-likelihood of the positives under a volume-wide softmax."""
    z = np.clip(_values(precision_logits), -LOGIT_CLAMP, LOGIT_CLAMP)
    y = _values(centers_gt)
    if z.shape != y.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {y.shape}")
    pos = y > 0.5
    if not pos.any():
        raise ValueError("precision loss needs at least one positive voxel")
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    return float(-(z[pos] - lse).sum())


def loss_offset(offset, offset_gt, support_mask=None):
    """Sum of squared offset errors over supported voxels (all by default)."""
    o = _values(offset)
    g = _values(offset_gt)
    if o.shape != g.shape:
        raise ValueError(f"shape mismatch {o.shape} vs {g.shape}")
    sq = ((o - g) ** 2).sum(axis=-1)
    if support_mask is not None:
        sq = sq[_values(support_mask).astype(bool)]
    return float(sq.sum())


def loss_bbox(box_extents, targets):
    """Squared extent error summed over ground-truth center voxels."""
    pred = _values(box_extents)
    gt = _values(targets.extents_gt)
    pos = _values(targets.centers_gt) > 0.5
    return float(((pred[pos] - gt[pos]) ** 2).sum())


def weighted_total(recall, precision, offset):
    return W_RECALL * recall + W_PRECISION * precision + W_OFFSET * offset


def loss_detection_total(pred, targets, support_mask=None):
    """Objectness loss ``2 recall + 10 precision + 10 offset``.

    The box regression loss is computed but kept out of ``total``.
    """
    r = loss_recall(pred.recall_logits, targets.centers_gt)
    p = loss_precision(pred.precision_logits, targets.centers_gt)
    o = loss_offset(pred.offset, targets.offset_gt, support_mask)
    b = loss_bbox(pred.box_extents, targets)
    return DetectionLoss(weighted_total(r, p, o), r, p, o, b)


@dataclass(frozen=True)
class Detection:
    voxel: tuple
    center: np.ndarray
    box: ObbBox
    score: float


def extract_detections(h, box_extents=None, min_prob=0.5, nms_radius_vox=NMS_RADIUS,
                       default_extent=1.0):
    """Local maxima of a probability grid, greedily suppressed by distance.

    Parameters
    ----------
    h : VoxelGrid
        Center probabilities.
    box_extents : VoxelGrid, optional
        VEC3 extents read at each kept voxel; ``default_extent`` otherwise.
    min_prob : float
        Peaks must exceed this probability.
    nms_radius_vox : float
        Peaks within this Euclidean voxel distance of a stronger kept peak
        are dropped.
    """
    if not 0 < min_prob < 1:
        raise ValueError("min_prob must lie in (0, 1)")
    if nms_radius_vox < 1:
        raise ValueError("nms_radius_vox must be >= 1")
    v = _values(h)
    peaks = (v == maximum_filter(v, size=3, mode="constant", cval=-np.inf)) & (v > min_prob)
    idx = np.argwhere(peaks)
    scores = v[peaks]
    # descending score, ties by index (argwhere order is lexicographic)
    order = np.lexsort((np.arange(len(scores)), -scores))
    kept = []
    r2 = nms_radius_vox ** 2
    for k in order:
        p = idx[k]
        if all(((p - idx[j]) ** 2).sum() > r2 for j in kept):
            kept.append(k)
    out = []
    for k in kept:
        vox = tuple(int(a) for a in idx[k])
        center = h.world_pos(idx[k])
        if box_extents is not None:
            ext = np.asarray(box_extents.data[vox], dtype=np.float64)
            ext = np.where(ext > 0, ext, default_extent)
        else:
            ext = np.full(3, default_extent)
        out.append(Detection(vox, center, ObbBox(center, ext), float(scores[k])))
    return out
