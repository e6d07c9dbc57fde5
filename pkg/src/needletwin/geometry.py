"""Rigid-body math shared by every other module: frames, transforms, rays,
slice planes, and triangle meshes.

Conventions used throughout the package:

* lengths are millimeters, angles are degrees at module boundaries
* a transform labelled A->B composes left-to-right along a frame chain
  (compose(A->B, B->C) gives A->C) while *points* flow right-to-left:
  ``apply()`` maps coordinates expressed in the ``to`` frame into the
  ``from`` frame. This mirrors the usual sub/superscript chain notation
  where labels read left-to-right and data enters from the right.
* rotations are stored as 3x3 matrices and re-orthonormalized (polar
  projection) on every construction, so long chains cannot drift.
"""

import re

import numpy as np

from .errors import DegenerateInput, FrameError, InvalidInput

# Frame symbols: W world/scene, B robot base, CT scanner, SB steel-ball grid,
# RM phantom marker, C tracking camera, TB platform marker, EEF flange,
# N needle, SM skin model, P1..Pn view planes.
KNOWN_FRAMES = frozenset({"W", "B", "CT", "SB", "RM", "C", "TB", "EEF", "N", "SM"})
_PLANE_FRAME = re.compile(r"^P[0-9]+$")

_DEGENERATE_TRI_AREA = 1e-12


def check_frame(name):
    """Validate a frame symbol, returning it unchanged."""
    if name in KNOWN_FRAMES or _PLANE_FRAME.match(str(name)):
        return name
    raise FrameError(f"unknown frame symbol {name!r}")


def nearest_rotation(m):
    """Project a 3x3 matrix onto the nearest rotation (Frobenius sense).

    Returns the orthogonal polar factor with det +1; raises DegenerateInput
    for (near-)singular input, where no unique nearest rotation exists.
    """
    m = np.asarray(m, dtype=float).reshape(3, 3)
    u, s, vt = np.linalg.svd(m)
    if s[2] <= 1e-12 * max(s[0], 1.0):
        raise DegenerateInput("matrix is singular; nearest rotation is not unique")
    d = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


class RigidTransform:
    """Rotation + translation between two named frames (A->B == ᴬT^B).

    ``apply(p)`` takes points expressed in ``to_frame`` and returns them
    expressed in ``from_frame``.
    """

    __slots__ = ("rotation", "translation", "from_frame", "to_frame")

    def __init__(self, rotation, translation, from_frame, to_frame):
        r = nearest_rotation(rotation)
        t = np.array(translation, dtype=float).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "from_frame", check_frame(from_frame))
        object.__setattr__(self, "to_frame", check_frame(to_frame))

    def __setattr__(self, name, value):
        raise AttributeError("RigidTransform is immutable")

    @classmethod
    def identity(cls, from_frame, to_frame=None):
        if to_frame is None:
            to_frame = from_frame
        return cls(np.eye(3), np.zeros(3), from_frame, to_frame)

    @classmethod
    def from_matrix(cls, m, from_frame, to_frame):
        m = np.asarray(m, dtype=float).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3], from_frame, to_frame)

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        """Map points from the `to` frame into the `from` frame."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def apply_vector(self, v):
        """Rotate a direction vector (no translation)."""
        return np.asarray(v, dtype=float) @ self.rotation.T

    def inverse(self):
        return invert(self)

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        t = np.array2string(self.translation, precision=3, suppress_small=True)
        return f"RigidTransform({self.from_frame}->{self.to_frame}, t={t})"


def compose(a, b):
    """Chain two transforms: compose(A->B, B->C) -> A->C."""
    if a.to_frame != b.from_frame:
        raise FrameError(
            f"cannot compose {a.from_frame}->{a.to_frame} with "
            f"{b.from_frame}->{b.to_frame}: inner frames differ"
        )
    r = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    return RigidTransform(r, t, a.from_frame, b.to_frame)


def invert(t):
    """Inverse transform with frames swapped; compose(invert(t), t) == identity."""
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation, t.to_frame, t.from_frame)


def rotation_about_axis(axis, angle_deg):
    """Rodrigues rotation matrix about an arbitrary axis."""
    axis = np.asarray(axis, dtype=float).reshape(3)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise InvalidInput("rotation axis must be nonzero")
    x, y, z = axis / n
    a = np.radians(angle_deg)
    c, s = np.cos(a), np.sin(a)
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def rotation_from_euler_xyz(rx_deg, ry_deg, rz_deg):
    """R = Rz @ Ry @ Rx (intrinsic xyz, degrees)."""
    rx = rotation_about_axis([1, 0, 0], rx_deg)
    ry = rotation_about_axis([0, 1, 0], ry_deg)
    rz = rotation_about_axis([0, 0, 1], rz_deg)
    return rz @ ry @ rx


def point_line_distance(p, line_point, line_dir):
    """Perpendicular distance from a point to an infinite line (>= 0)."""
    d = np.asarray(line_dir, dtype=float).reshape(3)
    n = np.linalg.norm(d)
    if n < 1e-12:
        raise InvalidInput("line direction must be nonzero")
    d = d / n
    v = np.asarray(p, dtype=float).reshape(3) - np.asarray(line_point, dtype=float).reshape(3)
    return float(np.linalg.norm(v - (v @ d) * d))


class Ray:
    """Origin + unit direction; carrier for insertion paths and needle axes."""

    __slots__ = ("origin", "direction")

    def __init__(self, origin, direction):
        d = np.asarray(direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if n < 1e-12:
            raise InvalidInput("ray direction must be nonzero")
        o = np.array(origin, dtype=float).reshape(3)
        d = d / n
        o.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def __setattr__(self, name, value):
        raise AttributeError("Ray is immutable")

    def point_at(self, t):
        return self.origin + t * self.direction


class SlicePlane:
    """Oriented image plane in CT coordinates.

    Pixel (i, j) sits at ``origin + i*resolution*axis_u + j*resolution*axis_v``.
    """

    __slots__ = ("origin", "axis_u", "axis_v", "extent_u", "extent_v", "resolution")

    def __init__(self, origin, axis_u, axis_v, extent_u, extent_v, resolution):
        u = np.asarray(axis_u, dtype=float).reshape(3)
        v = np.asarray(axis_v, dtype=float).reshape(3)
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu < 1e-12 or nv < 1e-12:
            raise InvalidInput("plane axes must be nonzero")
        u, v = u / nu, v / nv
        if abs(float(u @ v)) > 1e-9:
            raise InvalidInput("plane axes must be orthogonal")
        if extent_u <= 0 or extent_v <= 0:
            raise InvalidInput("plane extents must be positive")
        if resolution <= 0:
            raise InvalidInput("plane resolution must be positive")
        o = np.array(origin, dtype=float).reshape(3)
        for arr in (o, u, v):
            arr.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "axis_u", u)
        object.__setattr__(self, "axis_v", v)
        object.__setattr__(self, "extent_u", float(extent_u))
        object.__setattr__(self, "extent_v", float(extent_v))
        object.__setattr__(self, "resolution", float(resolution))

    def __setattr__(self, name, value):
        raise AttributeError("SlicePlane is immutable")

    @property
    def normal(self):
        return np.cross(self.axis_u, self.axis_v)

    @property
    def pixel_counts(self):
        nu = int(round(self.extent_u / self.resolution)) + 1
        nv = int(round(self.extent_v / self.resolution)) + 1
        return nu, nv

    def pixel_to_ct(self, i, j):
        """Map pixel indices (scalars or arrays) to CT-frame mm."""
        i = np.asarray(i, dtype=float)
        j = np.asarray(j, dtype=float)
        return (
            self.origin
            + np.multiply.outer(i * self.resolution, self.axis_u)
            + np.multiply.outer(j * self.resolution, self.axis_v)
        )

    def ct_to_pixel(self, p):
        """Project a CT point into (i, j) pixel coordinates (float)."""
        rel = np.asarray(p, dtype=float) - self.origin
        return rel @ self.axis_u / self.resolution, rel @ self.axis_v / self.resolution

    def grid_points(self):
        """All pixel centers as an (nu*nv, 3) array, row-major (i outer)."""
        nu, nv = self.pixel_counts
        ii, jj = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
        return self.pixel_to_ct(ii.ravel(), jj.ravel())


class TriMesh:
    """Triangle mesh with an optional per-vertex scalar channel.

    Degenerate (zero-area) triangles are dropped at construction; vertex
    indices are validated.
    """

    def __init__(self, vertices, triangles, vertex_values=None):
        v = np.asarray(vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise InvalidInput("triangle index out of range")
            a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
            areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
            f = f[areas > _DEGENERATE_TRI_AREA]
        self.vertices = v
        self.triangles = f
        if vertex_values is not None:
            vertex_values = np.asarray(vertex_values, dtype=float).reshape(-1)
            if len(vertex_values) != len(v):
                raise InvalidInput("vertex_values length must match vertex count")
        self.vertex_values = vertex_values
        self._normals = None

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def triangle_corners(self):
        """(m, 3, 3) array of triangle corner coordinates."""
        return self.vertices[self.triangles]

    def surface_area(self):
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return float(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum())

    def signed_volume(self):
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def vertex_normals(self):
        """Outward unit vertex normals (area-weighted, orientation-corrected)."""
        if self._normals is None:
            tri = self.triangles
            a, b, c = (self.vertices[tri[:, k]] for k in range(3))
            face_n = np.cross(b - a, c - a)  # area-weighted
            acc = np.zeros_like(self.vertices)
            for k in range(3):
                np.add.at(acc, tri[:, k], face_n)
            norms = np.linalg.norm(acc, axis=1)
            norms[norms < 1e-20] = 1.0
            acc /= norms[:, None]
            if self.signed_volume() < 0:
                acc = -acc
            self._normals = acc
        return self._normals

    def is_watertight(self):
        """True when every edge is shared by exactly two triangles."""
        if self.n_triangles == 0:
            return False
        tri = self.triangles
        edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def with_vertex_values(self, values):
        return TriMesh(self.vertices, self.triangles, values)


class RayHit:
    """Result of a ray/mesh intersection query."""

    __slots__ = ("point", "distance", "triangle")

    def __init__(self, point, distance, triangle):
        self.point = point
        self.distance = float(distance)
        self.triangle = int(triangle)


def ray_triangles_hits(origin, direction, corners):
    """Moeller-Trumbore against (m, 3, 3) corners; returns t array (nan = miss)."""
    eps = 1e-12
    v0 = corners[:, 0, :]
    e1 = corners[:, 1, :] - v0
    e2 = corners[:, 2, :] - v0
    h = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, h)
    t = np.full(len(corners), np.nan)
    ok = np.abs(det) > eps
    if not ok.any():
        return t
    inv_det = np.zeros_like(det)
    inv_det[ok] = 1.0 / det[ok]
    s = origin - v0
    u = np.einsum("ij,ij->i", s, h) * inv_det
    ok &= (u >= -1e-12) & (u <= 1.0 + 1e-12)
    q = np.cross(s, e1)
    v = np.einsum("j,ij->i", direction, q) * inv_det
    ok &= (v >= -1e-12) & (u + v <= 1.0 + 1e-12)
    tt = np.einsum("ij,ij->i", e2, q) * inv_det
    ok &= tt >= -1e-12
    t[ok] = tt[ok]
    return t


def ray_mesh_intersect(ray, mesh):
    """Nearest ray/mesh hit, or None on miss.

    Ties at identical distance break toward the smallest triangle index.
    """
    if mesh.n_triangles == 0:
        return None
    t = ray_triangles_hits(ray.origin, ray.direction, mesh.triangle_corners())
    hit = ~np.isnan(t)
    if not hit.any():
        return None
    idx = np.flatnonzero(hit)
    tt = t[idx]
    # argmin scans in index order, so equal distances keep the lowest index
    best = idx[np.argmin(tt)]
    dist = max(float(t[best]), 0.0)
    return RayHit(ray.point_at(dist), dist, best)


def save_mesh_obj(mesh, path):
    """Write a minimal Wavefront OBJ (v/f records only)."""
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.triangles:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_mesh_obj(path):
    """Read a triangle mesh from a Wavefront OBJ file (triangles only)."""
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                if len(idx) != 3:
                    raise InvalidInput("only triangle faces are supported")
                faces.append(idx)
    if not verts:
        raise InvalidInput(f"no vertices found in {path}")
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64))
