"""Depth rendering, TSDF integration and CAD distance fields.

Pixel ``(u, v)`` (column, row) looks along camera-frame direction
``((u - cx) / fx, (v - cy) / fy, 1)``; depth is the camera-frame z of the
hit. Camera frame: +z forward, +x right, +y down.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CellType, Pose9DoF, VoxelGrid, matrix_to_quat
from .shapes import TriangleMesh

VOXEL_SIZE = 0.03
TRUNCATION = 0.15
SYNTH_VOXEL_SIZE = 0.0468
CAD_DF_DIMS = (32, 32, 32)


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam2world: Pose9DoF

    def __post_init__(self):
        vals = np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)
        if not np.all(np.isfinite(vals)):
            raise ValueError("camera intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not np.allclose(self.cam2world.scale, 1.0):
            raise ValueError("camera pose must be rigid (unit scale)")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), width=320, height=240, fov_deg=60.0):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, (1.0, 0.0, 0.0))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=1)
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height,
                   Pose9DoF(eye, matrix_to_quat(R)))

    def pixel_rays(self):
        """World-space ray origin and per-pixel directions (h*w, 3), z-normalized."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy,
                      np.ones_like(u, dtype=np.float64)], axis=-1).reshape(-1, 3)
        R = self.cam2world.rotation
        return self.cam2world.translation, d @ R.T

    def to_json(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "cam2world": {"t": self.cam2world.translation.tolist(),
                              "q": self.cam2world.quaternion.tolist()}}

    @classmethod
    def from_json(cls, obj):
        pose = Pose9DoF(obj["cam2world"]["t"], obj["cam2world"]["q"])
        return cls(float(obj["fx"]), float(obj["fy"]), float(obj["cx"]), float(obj["cy"]),
                   int(obj["width"]), int(obj["height"]), pose)


@dataclass(frozen=True)
class DepthFrame:
    camera: Camera
    depth: np.ndarray  # (height, width), meters, 0 = invalid

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.shape != (self.camera.height, self.camera.width):
            raise ValueError(f"depth shape {d.shape} does not match camera "
                             f"{self.camera.height}x{self.camera.width}")
        if np.any(d[np.isfinite(d)] < 0):
            raise ValueError("depth must be non-negative")
        object.__setattr__(self, "depth", d)


def save_frame(frame, stem):
    """Write ``<stem>.json`` (camera) and ``<stem>.npy`` (depth)."""
    stem = Path(stem)
    stem.with_suffix(".json").write_text(json.dumps(frame.camera.to_json()))
    np.save(stem.with_suffix(".npy"), frame.depth.astype(np.float32))


def load_frame(stem):
    stem = Path(stem)
    cam = Camera.from_json(json.loads(stem.with_suffix(".json").read_text()))
    return DepthFrame(cam, np.load(stem.with_suffix(".npy")).astype(np.float64))


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def render_depth(scene, camera, noise=0.0, rng=None):
    """Ray-cast a depth frame.

    Parameters
    ----------
    scene : list of (Shape, Pose9DoF)
        Shapes in normalized object space and their object-to-world poses.
    camera : Camera
    noise : float
        Standard deviation (m) of additive Gaussian depth noise on hits.
    rng : numpy.random.Generator, optional
        Required when ``noise > 0``.
    """
    if noise < 0:
        raise ValueError("noise must be >= 0")
    origin, dirs = camera.pixel_rays()
    best = np.full(len(dirs), np.inf)
    dn = np.linalg.norm(dirs, axis=1)
    for shape, pose in scene:
        # cull rays missing the world-space bounding sphere
        radius = shape.bounding_radius() * float(pose.scale.max())
        oc = pose.translation - origin
        proj = dirs @ oc / dn
        miss_dist2 = oc @ oc - proj ** 2
        cand = np.flatnonzero((miss_dist2 <= radius ** 2) & (proj + radius >= 0))
        if len(cand) == 0:
            continue
        # rays in object space keep the same parameter t
        R = pose.rotation
        o_loc = ((origin - pose.translation) @ R) / pose.scale
        d_loc = (dirs[cand] @ R) / pose.scale
        t = shape.intersect(np.broadcast_to(o_loc, d_loc.shape).copy(), d_loc)
        best[cand] = np.minimum(best[cand], t)
    hit = np.isfinite(best)
    depth = np.where(hit, best, 0.0)
    if noise > 0:
        if rng is None:
            raise ValueError("rng required for noisy rendering")
        depth = np.where(hit, np.maximum(depth + rng.normal(0.0, noise, size=depth.shape), 0.0), 0.0)
    return DepthFrame(camera, depth.reshape(camera.height, camera.width))


# --------------------------------------------------------------------------
# TSDF
# --------------------------------------------------------------------------

def empty_tsdf(dims, origin, voxel_size, trunc=TRUNCATION):
    """Unobserved TSDF grid: d = +trunc, w = 0."""
    data = np.zeros(tuple(dims) + (2,))
    data[..., 0] = trunc
    return VoxelGrid(data, origin, voxel_size, CellType.TSDF)


def integrate_frame(grid, frame, trunc=TRUNCATION, chunk=1 << 20):
    """Fuse one depth frame into a TSDF grid (running average, weight +1).

    Voxels whose projective signed distance ``depth - z_cam`` lies within
    ``(-trunc, trunc)`` of a valid pixel are updated; every other voxel is
    left untouched. Returns a new grid.
    """
    if not trunc > 0:
        raise ValueError("truncation must be positive")
    if grid.voxel_size >= trunc:
        raise ValueError("voxel size must be smaller than the truncation distance")
    if grid.cell_type is not CellType.TSDF:
        raise ValueError("integrate_frame needs a TSDF grid")
    cam = frame.camera
    pose = cam.cam2world
    if not (np.all(np.isfinite(pose.translation)) and np.all(np.isfinite(pose.quaternion))):
        raise ValueError("non-finite camera pose")

    data = np.array(grid.data, dtype=np.float64)
    nx, ny, nz = grid.dims
    R = pose.rotation
    depth = frame.depth
    # camera coordinates are affine in the voxel index: pc = A @ (i, j, k) + b
    A = R.T * grid.voxel_size
    b = R.T @ (grid.origin - pose.translation)
    ii = np.arange(nx, dtype=np.float64)[:, None, None]
    jj = np.arange(ny, dtype=np.float64)[None, :, None]
    kk = np.arange(nz, dtype=np.float64)[None, None, :]
    step = max(1, chunk // (ny * nz))
    for i0 in range(0, nx, step):
        xi = ii[i0:i0 + step]
        pc = [A[r, 0] * xi + A[r, 1] * jj + A[r, 2] * kk + b[r] for r in range(3)]
        z = pc[2]
        front = z > 1e-6
        zs = np.where(front, z, 1.0)
        u = np.rint(pc[0] / zs * cam.fx + cam.cx)
        v = np.rint(pc[1] / zs * cam.fy + cam.cy)
        ok = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        sel = np.nonzero(ok)
        dm = depth[v[sel].astype(np.int64), u[sel].astype(np.int64)]
        sdf = dm - z[sel]
        good = np.isfinite(dm) & (dm > 0) & (sdf > -trunc) & (sdf < trunc)
        gi = tuple(s[good] for s in sel)
        block = data[i0:i0 + step]
        d_old = block[gi + (0,)]
        w_old = block[gi + (1,)]
        block[gi + (0,)] = (w_old * d_old + np.minimum(sdf[good], trunc)) / (w_old + 1.0)
        block[gi + (1,)] = w_old + 1.0
    return grid.with_data(data)


def fuse_frames(frames, dims, origin, voxel_size, trunc=TRUNCATION):
    grid = empty_tsdf(dims, origin, voxel_size, trunc)
    for f in frames:
        grid = integrate_frame(grid, f, trunc)
    return grid


def zero_crossings(grid):
    """Surface points where fused d changes sign between observed neighbours.

    Linear interpolation along grid edges; returns (m, 3) world points.
    """
    d = grid.data[..., 0]
    w = grid.data[..., 1]
    pts = []
    for axis in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[axis] = slice(0, -1)
        b[axis] = slice(1, None)
        da, db = d[tuple(a)], d[tuple(b)]
        ok = (w[tuple(a)] > 0) & (w[tuple(b)] > 0) & (np.sign(da) != np.sign(db)) & (da != db)
        idx = np.argwhere(ok).astype(np.float64)
        frac = da[ok] / (da[ok] - db[ok])
        idx[:, axis] += frac
        pts.append(grid.world_pos(idx))
    return np.concatenate(pts, axis=0)


# --------------------------------------------------------------------------
# CAD distance fields
# --------------------------------------------------------------------------

def df_grid_frame(dims=CAD_DF_DIMS):
    """Origin and voxel size of a grid whose cells tile ``[-0.5, 0.5]^3``."""
    dims = np.asarray(dims)
    if np.any(dims != dims[0]):
        raise ValueError("CAD distance fields use cubic grids")
    vs = 1.0 / dims[0]
    return np.full(3, -0.5 + vs / 2), vs


def cad_unsigned_df(shape, dims=CAD_DF_DIMS):
    """Unsigned distance to ``shape``'s surface at cell centers of the unit cube.

    ``shape`` is a :class:`~cadalign.shapes.Shape` (analytic or triangle mesh).
    """
    if shape is None or (isinstance(shape, TriangleMesh) and len(shape.tris) == 0):
        raise ValueError("empty shape")
    if isinstance(shape, (list, tuple)) and len(shape) == 0:
        raise ValueError("empty shape")
    origin, vs = df_grid_frame(dims)
    grid = VoxelGrid.full(dims, origin, vs)
    p = grid.centers().reshape(-1, 3)
    df = shape.unsigned_distance(p).reshape(tuple(dims))
    return grid.with_data(df)


def points_unsigned_df(points, dims=CAD_DF_DIMS):
    """Distance field of a point sample (normalized object space)."""
    from scipy.spatial import cKDTree

    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise ValueError("empty point set")
    origin, vs = df_grid_frame(dims)
    grid = VoxelGrid.full(dims, origin, vs)
    dist, _ = cKDTree(points).query(grid.centers().reshape(-1, 3))
    return grid.with_data(dist.reshape(tuple(dims)))
