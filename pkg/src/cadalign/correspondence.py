"""Normalized object coordinate (NOC) crops, correspondence assembly,
single-object 9DoF alignment and a RANSAC similarity baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import (CellType, ObbBox, Pose9DoF, VoxelGrid, matrix_to_quat, read_vxg,
                       write_vxg)
from .procrustes import (CorrespondenceSet, ProcrustesError, solve_rotation,
                         solve_similarity)
from .symmetry import SymmetryClass

CROP_DIMS = (48, 48, 48)
MASK_THRESHOLD = 0.5
NOC_TOLERANCE = 0.55


class InconsistentPose(ValueError):
    pass


class TooFewMasked(ProcrustesError):
    pass


class NoConsensus(ProcrustesError):
    pass


@dataclass(frozen=True)
class NocGrid:
    grid: VoxelGrid  # VEC3 cells, CAD-space coordinates in [-0.5, 0.5]^3 on the mask


@dataclass(frozen=True)
class InstanceMask:
    grid: VoxelGrid  # SCALAR cells, probabilities in [0, 1]
    threshold: float = MASK_THRESHOLD

    def __post_init__(self):
        v = self.grid.data
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("mask probabilities must lie in [0, 1]")

    def selected(self):
        return self.grid.data > self.threshold


@dataclass(frozen=True)
class ObjectCrop:
    """One detected object: crop box, NOC field, mask and alignment hints.

    ``support`` optionally marks voxels carrying observed scan surface; it
    bounds where perturbation may flip the mask.
    """

    box: ObbBox
    noc: NocGrid
    mask: InstanceMask
    symmetry: SymmetryClass = SymmetryClass.NONE
    scale: np.ndarray = None
    center: np.ndarray = None
    object_id: str = "0"
    category: str = None
    support: VoxelGrid = None

    def __post_init__(self):
        if self.noc.grid.dims != self.mask.grid.dims:
            raise ValueError("NOC and mask grids differ in size")
        if self.scale is not None:
            s = np.asarray(self.scale, dtype=np.float64)
            if s.shape != (3,) or np.any(s <= 0):
                raise ValueError("scale must be 3 positive values")
            object.__setattr__(self, "scale", s)
        c = self.box.center if self.center is None else np.asarray(self.center, dtype=np.float64)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "symmetry", SymmetryClass(self.symmetry))


def crop_grid_frame(box, dims=CROP_DIMS):
    """Cubic-voxel grid of ``dims`` centered on ``box``.

    The voxel size is ``max(extents) / max(dims)`` so the grid covers the
    box along its longest side and the bounding cube elsewhere.
    """
    dims = np.asarray(dims)
    vs = float(np.max(box.extents) / np.max(dims))
    origin = box.center - vs * (dims - 1) / 2.0
    return origin, vs


def gt_noc_from_pose(crop_box, object_pose, occupancy):
    """Ground-truth NOC field and mask from an object's pose.

    Every voxel receives the CAD-space coordinate ``inverse(pose)(x)``
    clamped to the unit cube; the mask is ``occupancy``. Occupied voxels
    mapping outside ``[-0.55, 0.55]^3`` mean pose and occupancy disagree.
    """
    if occupancy.cell_type is not CellType.MASK:
        raise ValueError("occupancy must be a MASK grid")
    occ = occupancy.data
    noc = object_pose.apply_inverse(occupancy.centers().reshape(-1, 3)).reshape(occ.shape + (3,))
    bad = occ & np.any(np.abs(noc) > NOC_TOLERANCE, axis=-1)
    if np.any(bad):
        worst = np.abs(noc[bad]).max()
        raise InconsistentPose(
            f"{int(bad.sum())} occupied voxels map outside the NOC cube (max |coord| {worst:.3f})")
    noc = np.clip(noc, -0.5, 0.5)
    noc_grid = VoxelGrid(noc, occupancy.origin, occupancy.voxel_size, CellType.VEC3)
    mask_grid = VoxelGrid(occ.astype(np.float64), occupancy.origin, occupancy.voxel_size)
    return NocGrid(noc_grid), InstanceMask(mask_grid)


def build_correspondences(crop, scale=None):
    """Masked NOC -> world correspondence set.

    ``p_cad`` is the NOC value times the object scale (metric object
    coordinates); ``p_scan`` the voxel-center world position; weights are
    the mask probabilities.
    """
    sel = crop.mask.selected()
    n = int(sel.sum())
    if n < 3:
        raise TooFewMasked(f"only {n} voxels above mask threshold {crop.mask.threshold}")
    s = crop.scale if scale is None else np.asarray(scale, dtype=np.float64)
    if s is None:
        s = np.ones(3)
    idx = np.argwhere(sel)
    p_cad = crop.noc.grid.data[sel] * s
    p_scan = crop.noc.grid.world_pos(idx)
    w = crop.mask.grid.data[sel]
    return CorrespondenceSet(p_cad, p_scan, w)


def estimate_scale(crop, iters=50, tol=1e-12):
    """Per-axis scale and rotation by alternating least squares.

    Used when no regressed scale accompanies the crop. Alternates Procrustes
    on ``diag(s) noc`` with the closed-form per-axis scale given the rotation.
    """
    base = build_correspondences(crop, scale=np.ones(3))
    w = base.weight
    W = w.sum()
    n = base.p_cad - w @ base.p_cad / W
    q = base.p_scan - w @ base.p_scan / W
    # uniform start from the similarity fit
    _, s0, _ = solve_similarity(base)
    s = np.full(3, s0)
    for _ in range(iters):
        R = solve_rotation(CorrespondenceSet(base.p_cad * s, base.p_scan, w)).rotation
        local = q @ R
        num = w @ (n * local)
        den = w @ (n * n)
        s_new = np.where(den > 0, num / np.where(den > 0, den, 1.0), s)
        s_new = np.maximum(s_new, 1e-9)
        done = np.max(np.abs(s_new - s)) <= tol * np.max(s)
        s = s_new
        if done:
            break
    return s


def align_object(crop, translation="centroid"):
    """9DoF pose of one object from its crop.

    Rotation comes from Procrustes on the masked correspondences, scale from
    ``crop.scale`` (estimated when absent). With ``translation="centroid"``
    the transformed CAD centroid is placed on the masked scan centroid; with
    ``"center"`` the detected ``crop.center`` is used.
    """
    s = crop.scale if crop.scale is not None else estimate_scale(crop)
    c = build_correspondences(crop, scale=s)
    sol = solve_rotation(c)
    if translation == "centroid":
        t = sol.c_scan - sol.rotation @ sol.c_cad
    elif translation == "center":
        t = np.asarray(crop.center, dtype=np.float64)
    else:
        raise ValueError(f"unknown translation mode {translation!r}")
    return Pose9DoF(t, matrix_to_quat(sol.rotation), s)


def _similarity_inliers(c, R, s, t, eps):
    r = np.linalg.norm(s * c.p_cad @ R.T + t - c.p_scan, axis=1)
    return r < eps


def ransac_align(c, iters, inlier_eps, rng=None, seed=0):
    """RANSAC over minimal 3-point similarity fits, refit on the best inliers.

    Returns
    -------
    (Pose9DoF, int)
        Pose with uniform scale and the inlier count of the refit model.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if len(c) < 3:
        raise ValueError("need at least 3 correspondences")
    if not inlier_eps > 0:
        raise ValueError("inlier_eps must be positive")
    rng = np.random.default_rng(seed) if rng is None else rng
    best = None
    best_count = -1
    for _ in range(iters):
        idx = rng.choice(len(c), size=3, replace=False)
        try:
            R, s, t = solve_similarity(c.subset(idx))
        except ProcrustesError:
            continue
        if not (s > 0 and np.isfinite(s)):
            continue
        count = int(_similarity_inliers(c, R, s, t, inlier_eps).sum())
        if count > best_count:
            best, best_count = (R, s, t), count
    if best is None or best_count < 3:
        raise NoConsensus(f"best hypothesis has {max(best_count, 0)} inliers (< 3)")
    inl = _similarity_inliers(c, *best, inlier_eps)
    try:
        R, s, t = solve_similarity(c.subset(np.flatnonzero(inl)))
        refit_inl = _similarity_inliers(c, R, s, t, inlier_eps)
        if refit_inl.sum() >= inl.sum():
            best, inl = (R, s, t), refit_inl
    except ProcrustesError:
        pass
    R, s, t = best
    return Pose9DoF(t, matrix_to_quat(R), (s, s, s)), int(inl.sum())


# --------------------------------------------------------------------------
# crop bundle files
# --------------------------------------------------------------------------

def save_crop(crop, directory, stem=None):
    """Write ``<stem>_noc.vxg``, ``<stem>_mask.vxg`` (+ support) and ``<stem>.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    stem = stem or f"obj_{crop.object_id}"
    write_vxg(crop.noc.grid, d / f"{stem}_noc.vxg")
    write_vxg(crop.mask.grid, d / f"{stem}_mask.vxg")
    meta = {"object_id": crop.object_id, "box": crop.box.to_json(),
            "symmetry": crop.symmetry.value,
            "scale": None if crop.scale is None else crop.scale.tolist(),
            "center": np.asarray(crop.center).tolist(), "category": crop.category,
            "mask_threshold": crop.mask.threshold,
            "noc": f"{stem}_noc.vxg", "mask": f"{stem}_mask.vxg"}
    if crop.support is not None:
        write_vxg(crop.support, d / f"{stem}_support.vxg")
        meta["support"] = f"{stem}_support.vxg"
    (d / f"{stem}.json").write_text(json.dumps(meta, indent=1))
    return d / f"{stem}.json"


def load_crop(sidecar):
    sidecar = Path(sidecar)
    meta = json.loads(sidecar.read_text())
    d = sidecar.parent
    noc = read_vxg(d / meta["noc"])
    mask = read_vxg(d / meta["mask"])
    support = read_vxg(d / meta["support"]) if meta.get("support") else None
    return ObjectCrop(
        box=ObbBox.from_json(meta["box"]), noc=NocGrid(noc),
        mask=InstanceMask(mask.with_data(np.clip(mask.data, 0, 1)),
                          meta.get("mask_threshold", MASK_THRESHOLD)),
        symmetry=SymmetryClass(meta["symmetry"]),
        scale=meta["scale"], center=meta["center"], object_id=str(meta["object_id"]),
        category=meta.get("category"), support=support)


def with_mask(crop, mask_values):
    return replace(crop, mask=InstanceMask(crop.mask.grid.with_data(mask_values),
                                           crop.mask.threshold))
