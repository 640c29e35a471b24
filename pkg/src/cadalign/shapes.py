"""Parametric CAD stand-ins in normalized object space.

Every shape lives in the unit cube ``[-0.5, 0.5]^3`` with +y up and offers

* ``sdf(p)`` -- signed distance (negative inside) for points (n, 3),
* ``intersect(o, d)`` -- smallest ray parameter ``t >= 0`` hitting the
  surface, ``inf`` on a miss, for rays ``o + t d`` (``d`` need not be unit).

Distances are exact for spheres, boxes, cylinders and triangle meshes; for
unions they are exact outside the solid.
"""

from __future__ import annotations

import numpy as np

from .symmetry import SymmetryClass

_EPS = 1e-12


class Shape:
    symmetry = SymmetryClass.NONE

    def bounding_radius(self):
        """Radius of a sphere about the local origin enclosing the shape."""
        return float(np.sqrt(3.0) * 0.5)

    def sdf(self, p):
        raise NotImplementedError

    def unsigned_distance(self, p):
        return np.abs(self.sdf(p))

    def intersect(self, origins, dirs):
        raise NotImplementedError


class Sphere(Shape):
    symmetry = SymmetryClass.INFINITE

    def __init__(self, radius=0.4, center=(0.0, 0.0, 0.0)):
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=np.float64)

    def sdf(self, p):
        return np.linalg.norm(np.asarray(p) - self.center, axis=-1) - self.radius

    def bounding_radius(self):
        return float(np.linalg.norm(self.center) + self.radius)

    def intersect(self, origins, dirs):
        oc = origins - self.center
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
        disc = b * b - a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / a
        t1 = (-b + sq) / a
        t = np.where(t0 >= 0, t0, t1)
        return np.where(hit & (t >= 0), t, np.inf)


class Box(Shape):
    """Axis-aligned solid box given by half extents."""

    def __init__(self, half_extents, center=(0.0, 0.0, 0.0)):
        self.half = np.asarray(half_extents, dtype=np.float64)
        self.center = np.asarray(center, dtype=np.float64)
        if np.isclose(self.half[0], self.half[2]):
            self.symmetry = SymmetryClass.FOUR_FOLD
        else:
            self.symmetry = SymmetryClass.TWO_FOLD

    def sdf(self, p):
        q = np.abs(np.asarray(p) - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def intersect(self, origins, dirs):
        o = origins - self.center
        tn = np.full(len(o), -np.inf)
        tf = np.full(len(o), np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            for a in range(3):
                oa, da, h = o[:, a], dirs[:, a], self.half[a]
                t1 = (-h - oa) / da
                t2 = (h - oa) / da
                lo = np.minimum(t1, t2)
                hi = np.maximum(t1, t2)
                # axis-parallel rays: inside the slab -> unbounded, outside -> miss
                par = da == 0
                if par.any():
                    inslab = np.abs(oa) <= h
                    lo = np.where(par, np.where(inslab, -np.inf, np.inf), lo)
                    hi = np.where(par, np.where(inslab, np.inf, -np.inf), hi)
                np.maximum(tn, lo, out=tn)
                np.minimum(tf, hi, out=tf)
        hit = (tn <= tf) & (tf >= 0)
        t = np.where(tn >= 0, tn, tf)
        return np.where(hit, t, np.inf)

    def bounding_radius(self):
        return float(np.linalg.norm(np.abs(self.center) + self.half))


class Cylinder(Shape):
    """Solid cylinder about the y axis."""

    symmetry = SymmetryClass.INFINITE

    def __init__(self, radius=0.4, half_height=0.4, center=(0.0, 0.0, 0.0)):
        self.radius = float(radius)
        self.half_height = float(half_height)
        self.center = np.asarray(center, dtype=np.float64)

    def bounding_radius(self):
        return float(np.linalg.norm(self.center) + np.hypot(self.radius, self.half_height))

    def sdf(self, p):
        q = np.asarray(p) - self.center
        d = np.stack([np.hypot(q[..., 0], q[..., 2]) - self.radius,
                      np.abs(q[..., 1]) - self.half_height], axis=-1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        return outside + np.minimum(d.max(axis=-1), 0.0)

    def intersect(self, origins, dirs):
        o = origins - self.center
        ox, oy, oz = o.T
        dx, dy, dz = dirs.T
        best = np.full(len(o), np.inf)
        # lateral surface
        a = dx * dx + dz * dz
        b = ox * dx + oz * dz
        c = ox * ox + oz * oz - self.radius ** 2
        disc = b * b - a * c
        ok = (a > _EPS) & (disc >= 0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        safe_a = np.where(ok, a, 1.0)
        for t in ((-b - sq) / safe_a, (-b + sq) / safe_a):
            y = oy + t * dy
            good = ok & (t >= 0) & (np.abs(y) <= self.half_height)
            best = np.where(good & (t < best), t, best)
        # caps
        with np.errstate(divide="ignore", invalid="ignore"):
            for yc in (-self.half_height, self.half_height):
                t = (yc - oy) / dy
                x = ox + t * dx
                z = oz + t * dz
                good = (dy != 0) & (t >= 0) & (x * x + z * z <= self.radius ** 2)
                best = np.where(good & (t < best), t, best)
        return best


class Union(Shape):
    """Union of solid parts; symmetry supplied by the caller."""

    def __init__(self, parts, symmetry=SymmetryClass.NONE):
        self.parts = list(parts)
        self.symmetry = symmetry

    def sdf(self, p):
        return np.min([s.sdf(p) for s in self.parts], axis=0)

    def bounding_radius(self):
        return max(s.bounding_radius() for s in self.parts)

    def intersect(self, origins, dirs):
        return np.min([s.intersect(origins, dirs) for s in self.parts], axis=0)


class TriangleMesh(Shape):
    """Triangle soup. Signed distance is unavailable; use unsigned."""

    def __init__(self, vertices, faces, symmetry=SymmetryClass.NONE):
        v = np.asarray(vertices, dtype=np.float64)
        f = np.asarray(faces, dtype=np.int64)
        if len(f) == 0:
            raise ValueError("empty mesh")
        self.tris = v[f]  # (m, 3, 3)
        self.symmetry = symmetry

    @classmethod
    def normalized(cls, vertices, faces, extent=1.0, symmetry=SymmetryClass.NONE):
        """Center the mesh's bounding box and fit its largest side to ``extent``."""
        v = np.asarray(vertices, dtype=np.float64)
        lo, hi = v.min(axis=0), v.max(axis=0)
        v = (v - (lo + hi) / 2) * (extent / (hi - lo).max())
        return cls(v, faces, symmetry)

    def sdf(self, p):
        raise NotImplementedError("triangle soups carry no inside/outside")

    def bounding_radius(self):
        return float(np.linalg.norm(self.tris.reshape(-1, 3), axis=1).max())

    def unsigned_distance(self, p, chunk=4096):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(p))
        for s in range(0, len(p), chunk):
            out[s:s + chunk] = np.sqrt(_point_triangle_sqdist(p[s:s + chunk], self.tris).min(axis=1))
        return out

    def intersect(self, origins, dirs):
        # Moller-Trumbore, all rays against all triangles
        v0, v1, v2 = self.tris[:, 0], self.tris[:, 1], self.tris[:, 2]
        e1, e2 = v1 - v0, v2 - v0
        best = np.full(len(origins), np.inf)
        for k in range(len(self.tris)):
            pvec = np.cross(dirs, e2[k])
            det = pvec @ e1[k]
            ok = np.abs(det) > _EPS
            inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
            tvec = origins - v0[k]
            u = np.einsum("ij,ij->i", tvec, pvec) * inv
            qvec = np.cross(tvec, e1[k])
            v = np.einsum("ij,ij->i", dirs, qvec) * inv
            t = (qvec @ e2[k]) * inv
            good = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t >= 0)
            best = np.where(good & (t < best), t, best)
        return best


def _point_triangle_sqdist(p, tris):
    """Squared distance of each point (n, 3) to each triangle (m, 3, 3) -> (n, m).

    Closest-point-on-triangle by Voronoi region classification (Ericson,
    Real-Time Collision Detection, 5.1.5), vectorized.
    """
    a = tris[None, :, 0]
    b = tris[None, :, 1]
    c = tris[None, :, 2]
    P = p[:, None, :]
    ab, ac, ap = b - a, c - a, P - a
    d1 = np.einsum("nmk,nmk->nm", np.broadcast_to(ab, ap.shape), ap)
    d2 = np.einsum("nmk,nmk->nm", np.broadcast_to(ac, ap.shape), ap)
    bp = P - b
    d3 = np.einsum("nmk,nmk->nm", np.broadcast_to(ab, bp.shape), bp)
    d4 = np.einsum("nmk,nmk->nm", np.broadcast_to(ac, bp.shape), bp)
    cp = P - c
    d5 = np.einsum("nmk,nmk->nm", np.broadcast_to(ab, cp.shape), cp)
    d6 = np.einsum("nmk,nmk->nm", np.broadcast_to(ac, cp.shape), cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        closest = a + ab * v_in[..., None] + ac * w_in[..., None]

        # edge regions
        v_ab = d1 / (d1 - d3)
        on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        closest = np.where(on_ab[..., None], a + ab * v_ab[..., None], closest)
        w_ac = d2 / (d2 - d6)
        on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        closest = np.where(on_ac[..., None], a + ac * w_ac[..., None], closest)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        closest = np.where(on_bc[..., None], b + (c - b) * w_bc[..., None], closest)

    # vertex regions take precedence
    closest = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, closest)
    closest = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, closest)
    diff = P - closest
    return np.einsum("nmk,nmk->nm", diff, diff)


def box_mesh(half_extents):
    """12-triangle surface of an axis-aligned box centered at the origin."""
    hx, hy, hz = half_extents
    v = np.array([[x, y, z] for x in (-hx, hx) for y in (-hy, hy) for z in (-hz, hz)])
    faces = [
        (0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5),   # x = -hx, +hx
        (0, 4, 5), (0, 5, 1), (2, 3, 7), (2, 7, 6),   # y = -hy, +hy
        (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3),   # z = -hz, +hz
    ]
    return v, np.array(faces)


def table_shape(top_half=(0.4, 0.4), top_thickness=0.06, leg_half=0.04, height=0.8):
    """Slab top on four legs, centered in the cube; square tops are four-fold."""
    tx, tz = top_half
    y_top = height / 2
    top = Box((tx, top_thickness / 2, tz), (0.0, y_top - top_thickness / 2, 0.0))
    leg_h = (height - top_thickness) / 2
    legs = [Box((leg_half, leg_h, leg_half),
                (sx * (tx - leg_half), -height / 2 + leg_h, sz * (tz - leg_half)))
            for sx in (-1, 1) for sz in (-1, 1)]
    sym = SymmetryClass.FOUR_FOLD if np.isclose(tx, tz) else SymmetryClass.TWO_FOLD
    return Union([top] + legs, sym)


def l_shape(size=0.8, thickness=0.25):
    """Seat-and-back profile extruded along x (chair/sofa-like); no symmetry."""
    h = size / 2
    seat = Box((h, thickness / 2, h), (0.0, -h + thickness / 2, 0.0))
    back = Box((h, h - thickness / 2, thickness / 2), (0.0, thickness / 2, -h + thickness / 2))
    return Union([seat, back], SymmetryClass.NONE)


# name -> (category, factory)
LIBRARY = {
    "cabinet_tall": ("cabinet", lambda: Box((0.4, 0.4, 0.25))),
    "cabinet_cube": ("cabinet", lambda: Box((0.4, 0.4, 0.4))),
    "bin_round": ("trash_bin", lambda: Cylinder(0.4, 0.4)),
    "bin_slim": ("trash_bin", lambda: Cylinder(0.3, 0.4)),
    "table_square": ("table", lambda: table_shape((0.4, 0.4))),
    "table_long": ("table", lambda: table_shape((0.4, 0.25))),
    "chair_l": ("chair", lambda: l_shape(0.8, 0.25)),
    "sofa_l": ("sofa", lambda: l_shape(0.8, 0.35)),
    "ball": ("other", lambda: Sphere(0.4)),
}


def make_shape(shape_id):
    try:
        return LIBRARY[shape_id][1]()
    except KeyError:
        raise KeyError(f"unknown shape id {shape_id!r}; known: {sorted(LIBRARY)}") from None


def shape_category(shape_id):
    return LIBRARY[shape_id][0]
