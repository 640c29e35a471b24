"""Rotational symmetry classes about the CAD up-axis (+y) and
symmetry-aware errors/losses (minimum over the class's rotation group)."""

from __future__ import annotations

from enum import Enum

import numpy as np

from .geometry import rot_y, rotation_angle_deg

EVAL_STEP_DEG = 1.0
LOSS_STEP_DEG = 15.0


class SymmetryClass(str, Enum):
    NONE = "none"
    TWO_FOLD = "two_fold"
    FOUR_FOLD = "four_fold"
    INFINITE = "infinite"


def symmetry_group(s, step_deg=EVAL_STEP_DEG):
    """Rotations about +y leaving a shape of class ``s`` invariant.

    The continuous group of :attr:`SymmetryClass.INFINITE` is sampled every
    ``step_deg`` degrees; ``step_deg`` must divide 360 and be at most 15.
    Returns an array (k, 3, 3) whose first element is the identity.
    """
    s = SymmetryClass(s)
    if s is SymmetryClass.NONE:
        angles = [0.0]
    elif s is SymmetryClass.TWO_FOLD:
        angles = [0.0, 180.0]
    elif s is SymmetryClass.FOUR_FOLD:
        angles = [0.0, 90.0, 180.0, 270.0]
    else:
        if not (0 < step_deg <= 15):
            raise ValueError(f"infinite-symmetry step must be in (0, 15] degrees, got {step_deg}")
        count = 360.0 / step_deg
        if abs(count - round(count)) > 1e-9:
            raise ValueError(f"step {step_deg} does not divide 360")
        angles = [k * step_deg for k in range(int(round(count)))]
    return np.stack([_exact_rot_y(a) for a in angles])


def _exact_rot_y(deg):
    # multiples of 90 are snapped to exact 0/+-1 entries
    q, r = divmod(deg, 90.0)
    if r == 0:
        c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][int(q) % 4]
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)
    return rot_y(deg)


def sym_rotation_error_deg(R_pred, R_gt, s, step_deg=EVAL_STEP_DEG):
    """Smallest geodesic angle between ``R_pred`` and ``R_gt @ g`` over the group."""
    return min(rotation_angle_deg(R_pred, R_gt @ g) for g in symmetry_group(s, step_deg))


def sym_noc_loss(noc_pred, noc_gt, s, step_deg=LOSS_STEP_DEG):
    """Mean squared NOC error, minimized over the symmetry group.

    Parameters
    ----------
    noc_pred, noc_gt : (n, 3) arrays
        Coordinates at the masked voxels (same order).
    s : SymmetryClass

    Returns
    -------
    float
        ``min_g sum_x ||noc_pred(x) - g noc_gt(x)||^2 / n``
    """
    noc_pred = np.asarray(noc_pred, dtype=np.float64)
    noc_gt = np.asarray(noc_gt, dtype=np.float64)
    if noc_pred.shape != noc_gt.shape:
        raise ValueError(f"shape mismatch {noc_pred.shape} vs {noc_gt.shape}")
    if len(noc_gt) == 0:
        raise ValueError("empty mask: no NOC voxels to compare")
    G = symmetry_group(s, step_deg)
    rotated = np.einsum("gij,nj->gni", G, noc_gt)
    per_g = ((noc_pred[None] - rotated) ** 2).sum(axis=-1).mean(axis=-1)
    return float(per_g.min())
