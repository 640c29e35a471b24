"""Synthetic scenes with known ground truth.

A scene is a floor plus randomly posed library shapes, virtually scanned
by a ring of depth cameras and fused into a TSDF. For every object seen by
the scan, a ground-truth crop (NOC field, instance mask) is derived from its
pose and the fused surface.

World frame: +y up, floor at y = 0, room spanning ``[0, X] x [0, H] x [0, Z]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import shapes as shp
from .correspondence import (CROP_DIMS, InstanceMask, NocGrid, ObjectCrop, crop_grid_frame,
                             gt_noc_from_pose, load_crop, save_crop)
from .fusion import SYNTH_VOXEL_SIZE, Camera, empty_tsdf, integrate_frame, render_depth
from .geometry import (CellType, ObbBox, Pose9DoF, VoxelGrid, matrix_to_quat,
                       pose_bounding_box, random_rotation, read_vxg, rot_y, write_vxg)
from .symmetry import SymmetryClass

SHAPE_HALF = 0.4  # library shapes fit in [-0.4, 0.4]^3


class PlacementError(RuntimeError):
    pass


@dataclass
class SceneSpec:
    """Parameters of one synthetic scene (JSON-serializable)."""

    seed: int = 0
    room: tuple = (6.0, 2.5, 6.0)
    grid_dims: tuple = None  # overrides room as dims * voxel_size (x, y-up, z)
    n_objects: tuple = (6, 10)
    shapes: tuple = tuple(shp.LIBRARY)
    rotation: str = "upright_jitter"  # or "uniform_upright", "uniform"
    scale_range: tuple = (0.5, 2.0)
    max_iou: float = 0.3
    allow_interpenetration: bool = False
    max_retries: int = 200
    n_frames: int = 24
    orbit_radius_factor: float = 1.5
    orbit_elevation_deg: float = 35.0
    orbit_arc_deg: tuple = (0.0, 360.0)
    image_size: tuple = (320, 240)
    fov_deg: float = 60.0
    depth_noise: float = 0.0
    voxel_size: float = SYNTH_VOXEL_SIZE
    trunc_voxels: float = 5.0
    floor: bool = True
    occluders: list = field(default_factory=list)  # [{"center": [..], "extents": [..]}]
    objects: list = None  # explicit [{"shape_id", "pose": {t,q,s}}] skips sampling
    crop_dims: tuple = CROP_DIMS
    min_observed_voxels: int = 1

    def __post_init__(self):
        if self.voxel_size <= 0 or self.trunc_voxels <= 1:
            raise ValueError("need voxel_size > 0 and truncation above one voxel")
        if self.depth_noise < 0:
            raise ValueError("depth_noise must be >= 0")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("invalid scale range")
        if self.grid_dims is not None:
            self.room = tuple(float(d) * self.voxel_size for d in self.grid_dims)
        unknown = set(self.shapes) - set(shp.LIBRARY)
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")

    @property
    def trunc(self):
        return self.trunc_voxels * self.voxel_size

    def to_json(self):
        d = asdict(self)
        d["shapes"] = list(self.shapes)
        return d

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        for key in ("room", "grid_dims", "n_objects", "scale_range", "orbit_arc_deg",
                    "image_size", "crop_dims", "shapes"):
            if obj.get(key) is not None and isinstance(obj[key], list):
                obj[key] = tuple(obj[key])
        return cls(**obj)


@dataclass
class SceneObject:
    object_id: str
    shape_id: str
    category: str
    pose: Pose9DoF
    symmetry: SymmetryClass
    box: ObbBox
    crop: ObjectCrop = None

    def to_json(self):
        return {"object_id": self.object_id, "shape_id": self.shape_id,
                "category": self.category, "pose": self.pose.to_json(),
                "symmetry": self.symmetry.value, "box": self.box.to_json()}


@dataclass
class SceneGroundTruth:
    scene_id: str
    spec: SceneSpec
    objects: list
    scan: VoxelGrid
    dropped: list = field(default_factory=list)
    cameras: list = field(default_factory=list)

    def crops(self):
        return [o.crop for o in self.objects]

    def object(self, object_id):
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise KeyError(object_id)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def _sample_rotation(rng, preset):
    if preset == "upright_jitter":
        return rot_y(90.0 * rng.integers(4) + rng.uniform(-20.0, 20.0))
    if preset == "uniform_upright":
        return rot_y(rng.uniform(0.0, 360.0))
    if preset == "uniform":
        return random_rotation(rng)
    raise ValueError(f"unknown rotation preset {preset!r}")


def _shape_box(pose):
    return pose_bounding_box(pose, SHAPE_HALF)


def _place_objects(spec, rng):
    X, H, Z = spec.room
    count = spec.n_objects
    if not isinstance(count, int):
        count = int(rng.integers(count[0], count[1] + 1))
    placed = []
    for k in range(count):
        shape_id = str(spec.shapes[rng.integers(len(spec.shapes))])
        for attempt in range(spec.max_retries):
            R = _sample_rotation(rng, spec.rotation)
            s = rng.uniform(*spec.scale_range, size=3)
            probe = Pose9DoF((0, 0, 0), matrix_to_quat(R), s)
            sb = _shape_box(probe)
            half = sb.extents / 2
            if np.any(2 * half[[0, 2]] >= [X, Z]) or 2 * half[1] > H:
                continue
            t = np.array([rng.uniform(half[0], X - half[0]), half[1] - sb.center[1],
                          rng.uniform(half[2], Z - half[2])])
            pose = Pose9DoF(t, probe.quaternion, s)
            box = pose_bounding_box(pose)
            shape_box = _shape_box(pose)
            ok = True
            for other in placed:
                if box.iou(other.box) > spec.max_iou:
                    ok = False
                    break
                if not spec.allow_interpenetration and _shape_box(other.pose).iou(shape_box) > 0:
                    ok = False
                    break
            if ok:
                placed.append(SceneObject(str(k), shape_id, shp.shape_category(shape_id), pose,
                                          shp.make_shape(shape_id).symmetry, box))
                break
        else:
            raise PlacementError(
                f"could not place object {k} ({shape_id}) in room {spec.room} after "
                f"{spec.max_retries} tries: constraints max_iou={spec.max_iou}, "
                f"interpenetration={'allowed' if spec.allow_interpenetration else 'forbidden'}, "
                f"inside room")
    return placed


def _explicit_objects(spec):
    out = []
    for k, entry in enumerate(spec.objects):
        shape_id = entry["shape_id"]
        pose = Pose9DoF.from_json(entry["pose"])
        out.append(SceneObject(str(entry.get("object_id", k)), shape_id,
                               shp.shape_category(shape_id), pose,
                               shp.make_shape(shape_id).symmetry, pose_bounding_box(pose)))
    return out


def orbit_cameras(spec):
    """Ring of cameras around the room center, all looking at it."""
    X, H, Z = spec.room
    center = np.array([X / 2, 0.3 * H, Z / 2])
    radius = spec.orbit_radius_factor * 0.5 * math.hypot(X, Z)
    elev = math.radians(spec.orbit_elevation_deg)
    a0, a1 = spec.orbit_arc_deg
    full = abs((a1 - a0) - 360.0) < 1e-9
    n = spec.n_frames
    if full:
        angles = [a0 + (a1 - a0) * i / n for i in range(n)]
    else:
        angles = [a0 + (a1 - a0) * i / max(n - 1, 1) for i in range(n)]
    w, h = spec.image_size
    cams = []
    for a in angles:
        th = math.radians(a)
        eye = center + np.array([radius * math.cos(elev) * math.cos(th), radius * math.sin(elev),
                                 radius * math.cos(elev) * math.sin(th)])
        cams.append(Camera.look_at(eye, center, width=w, height=h, fov_deg=spec.fov_deg))
    return cams


def _static_elements(spec):
    """World-space (shape, pose) pairs for floor and occluders (unit scale)."""
    X, _, Z = spec.room
    out = []
    if spec.floor:
        pad = 1.0
        out.append((shp.Box(((X + 2 * pad) / 2, 0.05, (Z + 2 * pad) / 2)),
                    Pose9DoF((X / 2, -0.05, Z / 2))))
    for occ in spec.occluders:
        out.append((shp.Box(np.asarray(occ["extents"], dtype=np.float64) / 2),
                    Pose9DoF(occ["center"])))
    return out


def scan_grid_frame(spec):
    vs = spec.voxel_size
    X, H, Z = spec.room
    below = 3
    dims = (int(math.ceil(X / vs)), int(math.ceil(H / vs)) + below, int(math.ceil(Z / vs)))
    origin = np.array([vs / 2, vs / 2 - below * vs, vs / 2])
    return dims, origin


# --------------------------------------------------------------------------
# ground-truth crops
# --------------------------------------------------------------------------

def _metric_distance(shape, pose, p):
    """Distance of world points to a posed shape; exact for unit scale,
    otherwise the lower bound ``|sdf_local| * min(scale)``."""
    local = pose.apply_inverse(p)
    return shape.unsigned_distance(local) * float(pose.scale.min())


def build_gt_crop(obj, scan, elements, spec):
    """Ground-truth crop for ``obj`` from the fused scan.

    ``elements`` lists every (shape, pose) in the scene; a surface voxel is
    attributed to the element whose surface is nearest.
    """
    origin, vs_c = crop_grid_frame(obj.box, spec.crop_dims)
    template = VoxelGrid.full(spec.crop_dims, origin, vs_c, CellType.MASK)
    P = template.centers().reshape(-1, 3)
    d, inside = scan.sample_trilinear(P, channel=0)
    observed = VoxelGrid(scan.data[..., 1] > 0, scan.origin, scan.voxel_size, CellType.MASK)
    obs_frac, _ = observed.sample_trilinear(P)
    band = 0.5 * math.sqrt(3.0) * vs_c
    support = inside & (obs_frac >= 1.0 - 1e-9) & (np.abs(d) <= band)

    occ = np.zeros(len(P), dtype=bool)
    idx = np.flatnonzero(support)
    if len(idx):
        Q = P[idx]
        dists = np.stack([_metric_distance(s, p, Q) for s, p in elements], axis=1)
        owner = np.argmin(dists, axis=1)
        mine = elements_index(elements, obj)
        noc = obj.pose.apply_inverse(Q)
        near = dists[np.arange(len(Q)), mine] <= 1.5 * max(scan.voxel_size, vs_c)
        keep = (owner == mine) & near & np.all(np.abs(noc) <= 0.5, axis=1)
        occ[idx[keep]] = True
    dims = tuple(spec.crop_dims)
    occupancy = template.with_data(occ.reshape(dims))
    noc_grid, mask = gt_noc_from_pose(obj.box, obj.pose, occupancy)
    return ObjectCrop(obj.box, noc_grid, mask, obj.symmetry, obj.pose.scale.copy(),
                      obj.pose.translation.copy(), obj.object_id, obj.category,
                      template.with_data(support.reshape(dims)))


def elements_index(elements, obj):
    for i, (_, pose) in enumerate(elements):
        if pose is obj.pose:
            return i
    raise KeyError(obj.object_id)


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------

def generate_scene(spec, scene_id=None):
    """Render, fuse and annotate one scene. Deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    objects = _explicit_objects(spec) if spec.objects is not None else _place_objects(spec, rng)
    shapes_ = {o.object_id: shp.make_shape(o.shape_id) for o in objects}
    elements = [(shapes_[o.object_id], o.pose) for o in objects] + _static_elements(spec)

    dims, origin = scan_grid_frame(spec)
    scan = empty_tsdf(dims, origin, spec.voxel_size, spec.trunc)
    cams = orbit_cameras(spec)
    noise_rng = np.random.default_rng([spec.seed, 1])
    for cam in cams:
        frame = render_depth(elements, cam, spec.depth_noise, noise_rng)
        scan = integrate_frame(scan, frame, spec.trunc)

    kept, dropped = [], []
    for o in objects:
        crop = build_gt_crop(o, scan, elements, spec)
        if int(crop.mask.selected().sum()) < max(spec.min_observed_voxels, 1):
            dropped.append(o.object_id)
            continue
        o.crop = crop
        kept.append(o)
    sid = scene_id if scene_id is not None else f"scene_{spec.seed:05d}"
    return SceneGroundTruth(sid, spec, kept, scan, dropped, cams)


def render_scene_frames(gt):
    """Re-render the scene's depth frames (same noise stream as generation)."""
    spec = gt.spec
    objs = _explicit_objects(spec) if spec.objects is not None else None
    if objs is None:
        objs = _place_objects(spec, np.random.default_rng(spec.seed))
    elements = [(shp.make_shape(o.shape_id), o.pose) for o in objs] + _static_elements(spec)
    noise_rng = np.random.default_rng([spec.seed, 1])
    return [render_depth(elements, cam, spec.depth_noise, noise_rng) for cam in orbit_cameras(spec)]


# --------------------------------------------------------------------------
# perturbation
# --------------------------------------------------------------------------

def perturb_crop(crop, noc_sigma, mask_flip_p, center_jitter, rng):
    """Noisy copy of a crop standing in for network prediction error.

    Gaussian noise on NOC values (clamped to the unit cube), Bernoulli mask
    flips on the crop's support voxels (the whole grid when it has none),
    uniform center jitter in ``[-center_jitter, center_jitter]`` per axis.
    """
    if noc_sigma < 0 or mask_flip_p < 0 or center_jitter < 0:
        raise ValueError("perturbation parameters must be >= 0")
    noc = crop.noc.grid.data
    if noc_sigma > 0:
        noc = np.clip(noc + rng.normal(0.0, noc_sigma, size=noc.shape), -0.5, 0.5)
    mask = crop.mask.grid.data
    if mask_flip_p > 0:
        flip = rng.random(mask.shape) < mask_flip_p
        if crop.support is not None:
            flip &= crop.support.data
        mask = np.where(flip, 1.0 - mask, mask)
    center = np.asarray(crop.center, dtype=np.float64)
    if center_jitter > 0:
        center = center + rng.uniform(-center_jitter, center_jitter, size=3)
    return replace(crop, noc=NocGrid(crop.noc.grid.with_data(noc)),
                   mask=InstanceMask(crop.mask.grid.with_data(mask), crop.mask.threshold),
                   center=center)


def perturb_gt(gt, noc_sigma=0.0, mask_flip_p=0.0, center_jitter=0.0, seed=0):
    """Scene copy with every crop perturbed; deterministic per ``seed``."""
    objs = []
    for o in gt.objects:
        rng = np.random.default_rng([seed, int(o.object_id) if o.object_id.isdigit()
                                     else abs(hash(o.object_id)) % (2 ** 31)])
        objs.append(replace(o, crop=perturb_crop(o.crop, noc_sigma, mask_flip_p,
                                                 center_jitter, rng)))
    return replace(gt, objects=objs)


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------

def save_scene(gt, directory):
    """Write scene JSON, fused scan and crop bundles; returns written paths."""
    d = Path(directory)
    (d / "crops").mkdir(parents=True, exist_ok=True)
    write_vxg(gt.scan, d / "scan.vxg")
    files = ["scan.vxg", "scene.json"]
    objs = []
    for o in gt.objects:
        side = save_crop(o.crop, d / "crops", f"obj_{o.object_id}")
        entry = o.to_json()
        entry["crop"] = str(side.relative_to(d))
        objs.append(entry)
        files += [str(p.relative_to(d)) for p in sorted((d / "crops").glob(f"obj_{o.object_id}*"))]
    doc = {"scene_id": gt.scene_id, "spec": gt.spec.to_json(), "objects": objs,
           "dropped": gt.dropped, "scan": "scan.vxg",
           "cameras": [c.to_json() for c in gt.cameras]}
    (d / "scene.json").write_text(json.dumps(doc, indent=1))
    return files


def load_scene(directory, with_scan=True):
    d = Path(directory)
    doc = json.loads((d / "scene.json").read_text())
    spec = SceneSpec.from_json(doc["spec"])
    objs = []
    for e in doc["objects"]:
        o = SceneObject(e["object_id"], e["shape_id"], e["category"], Pose9DoF.from_json(e["pose"]),
                        SymmetryClass(e["symmetry"]), ObbBox.from_json(e["box"]))
        o.crop = load_crop(d / e["crop"])
        objs.append(o)
    scan = read_vxg(d / doc["scan"]) if with_scan else None
    cams = [Camera.from_json(c) for c in doc.get("cameras", [])]
    return SceneGroundTruth(doc["scene_id"], spec, objs, scan, doc.get("dropped", []), cams)


def write_manifest(directory, scene_entries, extra=None):
    doc = {"scenes": scene_entries}
    if extra:
        doc.update(extra)
    path = Path(directory) / "manifest.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


def scene_dirs(path):
    """Scene directories under a dataset directory (or the directory itself)."""
    p = Path(path)
    if (p / "scene.json").exists():
        return [p]
    manifest = p / "manifest.json"
    if manifest.exists():
        doc = json.loads(manifest.read_text())
        return [p / s["dir"] for s in doc["scenes"]]
    return sorted(q.parent for q in p.glob("*/scene.json"))
