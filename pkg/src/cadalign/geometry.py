"""Poses, voxel grids and boxes shared by every other module.

Conventions
-----------
* A :class:`Pose9DoF` maps CAD-space points to world space as
  ``R @ (scale * p) + translation`` (scale first, then rotation, then
  translation).
* Quaternions are stored ``(w, x, y, z)``.
* Voxel grids are indexed ``data[i, j, k]`` with ``(i, j, k)`` the x, y, z
  voxel index. The serialized cell order is x-fastest.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np


class UnrepresentableComposition(ValueError):
    """The product of two poses is not expressible as rotation * diag(scale)."""


# --------------------------------------------------------------------------
# rotations
# --------------------------------------------------------------------------

def quat_to_matrix(q):
    """Rotation matrix of a (w, x, y, z) quaternion (normalized first)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Unit quaternion (w, x, y, z) with w >= 0 for a rotation matrix.

    Uses Shepperd's branch selection so the largest component is computed
    from a square root and the rest from well-conditioned differences.
    """
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax(np.r_[tr, diag]))
    if k == 0:
        r = math.sqrt(1.0 + tr)
        q = np.array([0.5 * r,
                      (R[2, 1] - R[1, 2]) / (2 * r),
                      (R[0, 2] - R[2, 0]) / (2 * r),
                      (R[1, 0] - R[0, 1]) / (2 * r)])
    else:
        i = k - 1
        j, m = (i + 1) % 3, (i + 2) % 3
        r = math.sqrt(max(1.0 + R[i, i] - R[j, j] - R[m, m], 0.0))
        q = np.empty(4)
        q[1 + i] = 0.5 * r
        q[0] = (R[m, j] - R[j, m]) / (2 * r)
        q[1 + j] = (R[j, i] + R[i, j]) / (2 * r)
        q[1 + m] = (R[m, i] + R[i, m]) / (2 * r)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def axis_angle_matrix(axis, angle_rad):
    """Rodrigues rotation about ``axis`` (normalized internally)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle_rad) * K + (1 - math.cos(angle_rad)) * (K @ K)


def rot_x(deg):
    return axis_angle_matrix((1.0, 0.0, 0.0), math.radians(deg))


def rot_y(deg):
    return axis_angle_matrix((0.0, 1.0, 0.0), math.radians(deg))


def rot_z(deg):
    return axis_angle_matrix((0.0, 0.0, 1.0), math.radians(deg))


def random_rotation(rng):
    """Uniformly distributed rotation matrix drawn from ``rng``."""
    q = rng.normal(size=4)
    return quat_to_matrix(q)


def rotation_angle_deg(Ra, Rb):
    """Geodesic angle between two rotations, in degrees within [0, 180].

    Equal to ``arccos((trace(Ra^T Rb) - 1) / 2)``. The angle is evaluated
    with ``atan2`` of the skew and trace parts of ``Ra^T Rb`` so that tiny
    angles keep full relative precision (plain ``arccos`` loses about half
    the significant digits near zero).
    """
    M = np.asarray(Ra, dtype=np.float64).T @ np.asarray(Rb, dtype=np.float64)
    cos_t = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    skew = np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    sin_t = 0.5 * np.linalg.norm(skew)
    return math.degrees(math.atan2(sin_t, cos_t))


# --------------------------------------------------------------------------
# 9DoF pose
# --------------------------------------------------------------------------

def _vec3(v, name):
    a = np.array(v, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Pose9DoF:
    """Translation, rotation and per-axis scale.

    ``apply(p) = R @ (scale * p) + translation``.
    """

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quaternion: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        t = _vec3(self.translation, "translation")
        s = _vec3(self.scale, "scale")
        if np.any(s <= 0):
            raise ValueError(f"scale components must be positive, got {s}")
        q = np.array(self.quaternion, dtype=np.float64).reshape(-1)
        if q.shape != (4,) or not np.all(np.isfinite(q)):
            raise ValueError("quaternion must be 4 finite values (w, x, y, z)")
        n = np.linalg.norm(q)
        if n == 0:
            raise ValueError("zero quaternion")
        if abs(n - 1.0) > 4e-16:  # keep already-unit input bit-exact
            q = q / n
        if q[0] < 0:
            q = -q
        q.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "quaternion", q)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, rotation, translation=(0, 0, 0), scale=(1, 1, 1)):
        R = np.asarray(rotation, dtype=np.float64)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        return cls(translation, matrix_to_quat(R), scale)

    @property
    def rotation(self):
        """3x3 rotation matrix; recomputed from the quaternion."""
        return quat_to_matrix(self.quaternion)

    @property
    def linear(self):
        """The 3x3 linear part ``R @ diag(scale)``."""
        return self.rotation * self.scale[None, :]

    def matrix(self):
        """4x4 homogeneous transform."""
        T = np.eye(4)
        T[:3, :3] = self.linear
        T[:3, 3] = self.translation
        return T

    def apply(self, p):
        """Map CAD-space point(s) ``p`` (shape (3,) or (n, 3)) to world space."""
        p = np.asarray(p, dtype=np.float64)
        return (p * self.scale) @ self.rotation.T + self.translation

    def apply_inverse(self, q):
        """Map world-space point(s) back to CAD space; exact inverse of apply."""
        q = np.asarray(q, dtype=np.float64)
        return ((q - self.translation) @ self.rotation) / self.scale

    def inverse(self):
        """Inverse pose.

        Only representable in scale-then-rotate form when the scale is
        uniform or the rotation is the identity; otherwise raises
        :class:`UnrepresentableComposition`. :meth:`apply_inverse` is always
        available.
        """
        R = self.rotation
        s = self.scale
        uniform = np.allclose(s, s[0], rtol=1e-12, atol=0)
        if not uniform and not np.allclose(R, np.eye(3), atol=1e-12):
            raise UnrepresentableComposition(
                "inverse of an anisotropically scaled, rotated pose is not a Pose9DoF")
        inv_s = 1.0 / s
        t = -(R.T @ self.translation) * inv_s
        return Pose9DoF(t, matrix_to_quat(R.T), inv_s)

    def to_json(self):
        return {"t": self.translation.tolist(), "q": self.quaternion.tolist(),
                "s": self.scale.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["t"], obj["q"], obj["s"])

    def __eq__(self, other):
        if not isinstance(other, Pose9DoF):
            return NotImplemented
        return (np.array_equal(self.translation, other.translation)
                and np.array_equal(self.quaternion, other.quaternion)
                and np.array_equal(self.scale, other.scale))

    __hash__ = None


def compose(a, b, atol=1e-9):
    """Pose equivalent to applying ``b`` first, then ``a``.

    The product ``R_a S_a R_b S_b`` must itself factor as rotation times a
    positive diagonal; this holds when ``a`` has uniform scale or ``b`` has
    identity rotation (and a few axis-permuting special cases). Otherwise
    :class:`UnrepresentableComposition` is raised.
    """
    M = a.linear @ b.linear
    s = np.linalg.norm(M, axis=0)
    R = M / s[None, :]
    if not np.allclose(R.T @ R, np.eye(3), atol=atol):
        raise UnrepresentableComposition(
            "composition mixes anisotropic scale with rotation; result is not a Pose9DoF")
    t = a.linear @ b.translation + a.translation
    return Pose9DoF(t, matrix_to_quat(R), s)


def pose_close(a, b, atol=1e-7):
    """True when both poses map the unit-cube corners to the same points."""
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
    return np.allclose(a.apply(corners), b.apply(corners), atol=atol)


# --------------------------------------------------------------------------
# boxes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ObbBox:
    """Box given by its center and full side lengths (world axes)."""

    center: np.ndarray
    extents: np.ndarray

    def __post_init__(self):
        c = _vec3(self.center, "center")
        e = _vec3(self.extents, "extents")
        if np.any(e <= 0):
            raise ValueError(f"box extents must be positive, got {e}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "extents", e)

    @property
    def lo(self):
        return self.center - self.extents / 2

    @property
    def hi(self):
        return self.center + self.extents / 2

    def volume(self):
        return float(np.prod(self.extents))

    def iou(self, other):
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        inter = float(np.prod(np.clip(hi - lo, 0, None)))
        return inter / (self.volume() + other.volume() - inter)

    def to_json(self):
        return {"center": self.center.tolist(), "extents": self.extents.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["center"], obj["extents"])


def pose_bounding_box(pose, half=0.5):
    """World-axis box enclosing the transformed cube ``[-half, half]^3``."""
    corners = np.array([[x, y, z] for x in (-half, half) for y in (-half, half)
                        for z in (-half, half)])
    w = pose.apply(corners)
    lo, hi = w.min(axis=0), w.max(axis=0)
    return ObbBox((lo + hi) / 2, hi - lo)


# --------------------------------------------------------------------------
# voxel grids
# --------------------------------------------------------------------------

class CellType(IntEnum):
    """Cell payload tag of the VXG1 format."""

    SCALAR = 1   # f32
    TSDF = 2     # f32 d, f32 w
    VEC3 = 3     # 3 x f32
    MASK = 4     # u8

    @property
    def channels(self):
        return {CellType.SCALAR: 1, CellType.TSDF: 2, CellType.VEC3: 3, CellType.MASK: 1}[self]

    @property
    def dtype(self):
        return np.dtype("<u1") if self is CellType.MASK else np.dtype("<f4")


_CELL_SHAPE = {CellType.SCALAR: (), CellType.TSDF: (2,), CellType.VEC3: (3,), CellType.MASK: ()}


@dataclass(frozen=True)
class VoxelGrid:
    """Dense 3D grid of typed cells.

    ``origin`` is the world position of the center of voxel (0, 0, 0) and
    ``data`` has shape ``dims + cell_shape`` indexed by (x, y, z).
    """

    data: np.ndarray
    origin: np.ndarray
    voxel_size: float
    cell_type: CellType = CellType.SCALAR

    def __post_init__(self):
        ct = CellType(self.cell_type)
        data = np.asarray(self.data)
        if ct is CellType.MASK:
            data = data.astype(bool, copy=False)
        elif not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        extra = _CELL_SHAPE[ct]
        if data.ndim != 3 + len(extra) or data.shape[3:] != extra:
            raise ValueError(f"data shape {data.shape} does not fit cell type {ct.name}")
        if min(data.shape[:3]) < 1:
            raise ValueError("grid dims must be positive")
        if not (self.voxel_size > 0):
            raise ValueError("voxel_size must be positive")
        if data.flags.writeable:
            data = data.copy()
            data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "origin", _vec3(self.origin, "origin"))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "cell_type", ct)

    @classmethod
    def full(cls, dims, origin, voxel_size, cell_type=CellType.SCALAR, fill=0.0):
        ct = CellType(cell_type)
        shape = tuple(int(d) for d in dims) + _CELL_SHAPE[ct]
        dtype = bool if ct is CellType.MASK else np.float64
        return cls(np.full(shape, fill, dtype=dtype), origin, voxel_size, ct)

    @property
    def dims(self):
        return tuple(self.data.shape[:3])

    @property
    def n_cells(self):
        return int(np.prod(self.dims))

    def with_data(self, data):
        return VoxelGrid(data, self.origin, self.voxel_size, self.cell_type)

    def world_pos(self, index):
        """World position of voxel center(s) ``index`` (shape (3,) or (n, 3))."""
        return self.origin + self.voxel_size * np.asarray(index, dtype=np.float64)

    def index_of(self, world):
        """Nearest voxel index of world point(s) (not bounds-checked)."""
        rel = (np.asarray(world, dtype=np.float64) - self.origin) / self.voxel_size
        return np.rint(rel).astype(np.int64)

    def in_bounds(self, index):
        index = np.asarray(index)
        return np.all((index >= 0) & (index < np.array(self.dims)), axis=-1)

    def centers(self):
        """World positions of all voxel centers, shape dims + (3,)."""
        ii, jj, kk = np.meshgrid(*(np.arange(d) for d in self.dims), indexing="ij")
        return self.origin + self.voxel_size * np.stack([ii, jj, kk], axis=-1)

    def linear_cells(self):
        """Cells flattened in x-fastest order, shape (n_cells,) + cell_shape."""
        extra = _CELL_SHAPE[self.cell_type]
        perm = (2, 1, 0) + tuple(range(3, 3 + len(extra)))
        return np.transpose(self.data, perm).reshape((-1,) + extra)

    def bounds(self):
        """Min and max voxel-center world coordinates."""
        return self.origin, self.world_pos(np.array(self.dims) - 1)

    def sample_trilinear(self, points, channel=None):
        """Trilinear interpolation of cell values at world ``points`` (n, 3).

        Returns values (n,) + cell_shape and a validity flag (all 8 neighbours
        inside the grid). Invalid samples are 0.
        """
        values = self.data.astype(np.float64)
        if channel is not None:
            values = values[..., channel]
        points = np.asarray(points, dtype=np.float64)
        rel = (points - self.origin) / self.voxel_size
        base = np.floor(rel).astype(np.int64)
        frac = rel - base
        dims = np.array(self.dims)
        valid = np.all((base >= 0) & (base + 1 < dims), axis=-1)
        b = np.where(valid[:, None], base, 0)
        f = np.where(valid[:, None], frac, 0.0)
        out = np.zeros((len(points),) + values.shape[3:])
        for dx in (0, 1):
            wx = f[:, 0] if dx else 1 - f[:, 0]
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1 - f[:, 1]
                for dz in (0, 1):
                    wz = f[:, 2] if dz else 1 - f[:, 2]
                    w = wx * wy * wz
                    v = values[b[:, 0] + dx, b[:, 1] + dy, b[:, 2] + dz]
                    out += w.reshape((-1,) + (1,) * (v.ndim - 1)) * v
        out[~valid] = 0
        return out, valid


_VXG_HEADER = struct.Struct("<4sI3I3ff")
VXG_MAGIC = b"VXG1"


def write_vxg(grid, path):
    """Write ``grid`` in the VXG1 binary layout."""
    ct = grid.cell_type
    header = _VXG_HEADER.pack(VXG_MAGIC, int(ct), *grid.dims, *grid.origin.astype(np.float32),
                              np.float32(grid.voxel_size))
    cells = np.ascontiguousarray(grid.linear_cells(), dtype=ct.dtype)
    with open(path, "wb") as f:
        f.write(header)
        f.write(cells.tobytes())


def read_vxg(path):
    """Read a VXG1 file into a :class:`VoxelGrid` (values widened to f64)."""
    raw = Path(path).read_bytes()
    if len(raw) < _VXG_HEADER.size:
        raise ValueError(f"{path}: truncated VXG1 header")
    magic, tag, nx, ny, nz, ox, oy, oz, vs = _VXG_HEADER.unpack_from(raw)
    if magic != VXG_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    ct = CellType(tag)
    n = nx * ny * nz * ct.channels
    body = np.frombuffer(raw, dtype=ct.dtype, offset=_VXG_HEADER.size)
    if body.size != n:
        raise ValueError(f"{path}: expected {n} values, found {body.size}")
    extra = _CELL_SHAPE[ct]
    arr = body.reshape((nz, ny, nx) + extra)
    arr = np.transpose(arr, (2, 1, 0) + tuple(range(3, 3 + len(extra))))
    arr = arr.astype(bool) if ct is CellType.MASK else arr.astype(np.float64)
    return VoxelGrid(arr, (ox, oy, oz), vs, ct)


def save_pose(pose, path):
    Path(path).write_text(json.dumps(pose.to_json()))


def load_pose(path):
    return Pose9DoF.from_json(json.loads(Path(path).read_text()))
