"""Capsule / mesh / box distance queries for robot link collision checking.

All queries run in the CT frame. Mesh proximity uses a centroid k-d tree
with per-triangle bounding radii as a prefilter, then exact vectorized
segment-triangle distances on the surviving subset. Axis-crossing tests
(for penetration along a capsule axis) reuse the same triangle subset.
"""

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInput
from .geometry import ray_triangles_hits

_SAMPLE_SPACING_MM = 10.0  # prefilter sampling along query segments


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def point_triangles_distance(p, tri):
    """Distance from one point to each triangle in an (m, 3, 3) array."""
    a, b, c = tri[:, 0, :], tri[:, 1, :], tri[:, 2, :]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = _dot(ab, ap)
    d2 = _dot(ac, ap)
    bp = p - b
    d3 = _dot(ab, bp)
    d4 = _dot(ac, bp)
    cp = p - c
    d5 = _dot(ab, cp)
    d6 = _dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    closest = np.empty_like(tri[:, 0, :])
    done = np.zeros(len(tri), dtype=bool)

    # vertex regions
    m = (d1 <= 0) & (d2 <= 0)
    closest[m] = a[m]
    done |= m
    m = ~done & (d3 >= 0) & (d4 <= d3)
    closest[m] = b[m]
    done |= m
    m = ~done & (d6 >= 0) & (d5 <= d6)
    closest[m] = c[m]
    done |= m
    # edge ab
    m = ~done & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    if m.any():
        denom = d1[m] - d3[m]
        v = np.where(denom != 0, d1[m] / np.where(denom == 0, 1.0, denom), 0.0)
        closest[m] = a[m] + v[:, None] * ab[m]
    done |= m
    # edge ac
    m = ~done & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    if m.any():
        denom = d2[m] - d6[m]
        w = np.where(denom != 0, d2[m] / np.where(denom == 0, 1.0, denom), 0.0)
        closest[m] = a[m] + w[:, None] * ac[m]
    done |= m
    # edge bc
    m = ~done & (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    if m.any():
        denom = (d4[m] - d3[m]) + (d5[m] - d6[m])
        w = np.where(denom != 0, (d4[m] - d3[m]) / np.where(denom == 0, 1.0, denom), 0.0)
        closest[m] = b[m] + w[:, None] * (c[m] - b[m])
    done |= m
    # interior
    m = ~done
    if m.any():
        denom = va[m] + vb[m] + vc[m]
        denom = np.where(denom == 0, 1.0, denom)
        v = vb[m] / denom
        w = vc[m] / denom
        closest[m] = a[m] + v[:, None] * ab[m] + w[:, None] * ac[m]
    return np.linalg.norm(closest - p, axis=1)


def segment_pairs_distance(p0, p1, q0, q1):
    """Distance between paired segments: all arguments (m, 3) arrays.

    Clamped closest-point computation; exact for non-degenerate and
    degenerate (point) segments alike.
    """
    eps = 1e-12
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = _dot(d1, d1)
    e = _dot(d2, d2)
    f = _dot(d2, r)
    c = _dot(d1, r)
    b = _dot(d1, d2)
    a_safe = np.where(a <= eps, 1.0, a)
    e_safe = np.where(e <= eps, 1.0, e)

    denom = a * e - b * b
    s = np.where(
        denom > eps,
        np.clip((b * f - c * e) / np.where(denom <= eps, 1.0, denom), 0.0, 1.0),
        0.0,
    )
    t_raw = np.where(e <= eps, 0.0, (b * s + f) / e_safe)
    t = np.clip(t_raw, 0.0, 1.0)
    # when t was clamped, re-optimize s for the clamped t
    clamped = (t_raw < 0.0) | (t_raw > 1.0)
    s = np.where(clamped, np.clip((b * t - c) / a_safe, 0.0, 1.0), s)
    s = np.where(a <= eps, 0.0, s)
    cp1 = p0 + s[:, None] * d1
    cp2 = q0 + t[:, None] * d2
    return np.linalg.norm(cp1 - cp2, axis=1)


def segment_segments_distance(p0, p1, q0, q1):
    """Distance between one segment and each segment in (m, 3) q0/q1 arrays."""
    q0 = np.asarray(q0, float).reshape(-1, 3)
    m = len(q0)
    return segment_pairs_distance(
        np.broadcast_to(np.asarray(p0, float), (m, 3)),
        np.broadcast_to(np.asarray(p1, float), (m, 3)),
        q0,
        np.asarray(q1, float).reshape(-1, 3),
    )


def segment_segment_distance(p0, p1, q0, q1):
    return float(
        segment_segments_distance(
            np.asarray(p0, float),
            np.asarray(p1, float),
            np.asarray(q0, float).reshape(1, 3),
            np.asarray(q1, float).reshape(1, 3),
        )[0]
    )


def segment_triangles_distance(p0, p1, tri):
    """Min distance from segment p0-p1 to each (m, 3, 3) triangle.

    Zero when the segment pierces the triangle; otherwise the minimum over
    endpoint-to-triangle and segment-to-edge distances.
    """
    m = len(tri)
    if m == 0:
        return np.empty(0)
    seg = p1 - p0
    length = float(np.linalg.norm(seg))
    d = np.amin(
        np.stack(
            [
                point_triangles_distance(p0, tri),
                point_triangles_distance(p1, tri),
                segment_segments_distance(p0, p1, tri[:, 0, :], tri[:, 1, :]),
                segment_segments_distance(p0, p1, tri[:, 1, :], tri[:, 2, :]),
                segment_segments_distance(p0, p1, tri[:, 2, :], tri[:, 0, :]),
            ]
        ),
        axis=0,
    )
    if length > 1e-12:
        t = ray_triangles_hits(p0, seg / length, tri)
        pierced = ~np.isnan(t) & (t <= length + 1e-12)
        d[pierced] = 0.0
    return d


def signed_point_box_distance(p, lo, hi):
    """Signed distance to an axis-aligned box: negative inside."""
    p = np.asarray(p, float)
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    outside = np.maximum(np.maximum(lo - p, 0.0), np.maximum(p - hi, 0.0))
    d_out = float(np.linalg.norm(outside))
    if d_out > 0.0:
        return d_out
    return -float(np.min(np.minimum(p - lo, hi - p)))


def segment_box_signed_distance(p0, p1, lo, hi):
    """Min signed distance from a segment to an axis-aligned box.

    The signed distance to a convex set is convex along a line, so a
    ternary search converges to the global minimum.
    """
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    d = p1 - p0

    def f(t):
        p = p0 + t * d
        outside = np.maximum(np.maximum(lo - p, 0.0), np.maximum(p - hi, 0.0))
        s = outside @ outside
        if s > 0.0:
            return np.sqrt(s)
        return -float(np.min(np.minimum(p - lo, hi - p)))

    a, b = 0.0, 1.0
    for _ in range(48):
        m1 = a + (b - a) / 3.0
        m2 = b - (b - a) / 3.0
        if f(m1) <= f(m2):
            b = m2
        else:
            a = m1
    return min(f(0.0), f(1.0), f(0.5 * (a + b)))


def capsule_box_penetration(p0, p1, radius, lo, hi):
    """Penetration depth of a capsule into a box (0 when clear).

    AABB gap pre-check skips the exact search for well-separated pairs.
    """
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    if _segment_aabb_gap(p0, p1, np.asarray(lo, float) - radius, np.asarray(hi, float) + radius) > 0:
        return 0.0
    sd = segment_box_signed_distance(p0, p1, lo, hi)
    return max(0.0, radius - sd)


def _segment_aabb_gap(p0, p1, lo, hi):
    """Conservative lower bound on segment-box distance via AABB separation."""
    smin = np.minimum(p0, p1)
    smax = np.maximum(p0, p1)
    gap = np.maximum(np.maximum(lo - smax, 0.0), np.maximum(smin - hi, 0.0))
    return float(np.linalg.norm(gap))


class MeshDistanceIndex:
    """Accelerated proximity / crossing / containment queries against a mesh.

    Containment uses a coarse inside/outside voxel classification built by
    scanline parity, with an exact even-odd ray test as fallback in the
    ambiguous band near the surface.
    """

    GRID_CELL_MM = 8.0

    def __init__(self, mesh):
        if mesh.n_triangles == 0:
            raise InvalidInput("cannot index an empty mesh")
        self.mesh = mesh
        self.tri = mesh.triangle_corners()
        self.centroids = self.tri.mean(axis=1)
        self.tri_radius = np.linalg.norm(self.tri - self.centroids[:, None, :], axis=2).max(axis=1)
        self.max_tri_radius = float(self.tri_radius.max())
        self.tree = cKDTree(self.centroids)
        self.aabb_lo = self.tri.min(axis=(0, 1))
        self.aabb_hi = self.tri.max(axis=(0, 1))
        self._tri_lo = self.tri.min(axis=1)
        self._tri_hi = self.tri.max(axis=1)
        self._build_containment_grid()

    def _build_containment_grid(self):
        cell = self.GRID_CELL_MM
        # irrational-ish offset keeps scan rays off mesh vertices/edges
        self._grid_lo = self.aabb_lo - cell * np.array([0.5, 0.31830989, 0.27182818])
        span = self.aabb_hi - self._grid_lo
        shape = np.maximum(np.ceil(span / cell).astype(int) + 1, 1)
        # 0 = outside, 1 = inside, 2 = ambiguous (near surface)
        grid = np.zeros(shape, dtype=np.uint8)
        xs = self._grid_lo[0] + cell * (np.arange(shape[0]) + 0.5)
        ys = self._grid_lo[1] + cell * (np.arange(shape[1]) + 0.5)
        zs = self._grid_lo[2] + cell * (np.arange(shape[2]) + 0.5)
        ray_x0 = float(self.aabb_lo[0] - 1.0)
        dir_x = np.array([1.0, 0.0, 0.0])
        for j, y in enumerate(ys):
            stripe = (self._tri_lo[:, 1] <= y) & (self._tri_hi[:, 1] >= y)
            if not stripe.any():
                continue
            tri_stripe = self.tri[stripe]
            lo_z = self._tri_lo[stripe, 2]
            hi_z = self._tri_hi[stripe, 2]
            for k, z in enumerate(zs):
                sel = (lo_z <= z) & (hi_z >= z)
                if not sel.any():
                    continue
                t = ray_triangles_hits(np.array([ray_x0, y, z]), dir_x, tri_stripe[sel])
                t = np.sort(t[~np.isnan(t)])
                if len(t) == 0:
                    continue
                crossings_before = np.searchsorted(ray_x0 + t, xs, side="left")
                grid[:, j, k] = (crossings_before % 2).astype(np.uint8)
        # mark cells near the surface as ambiguous
        ii, jj, kk = np.meshgrid(
            np.arange(shape[0]), np.arange(shape[1]), np.arange(shape[2]), indexing="ij"
        )
        centers = np.column_stack(
            [xs[ii.ravel()], ys[jj.ravel()], zs[kk.ravel()]]
        )
        d, _ = self.tree.query(centers, distance_upper_bound=cell * 1.8 + self.max_tri_radius)
        near = np.isfinite(d).reshape(shape)
        grid[near] = 2
        self._grid = grid
        self._grid_shape = shape

    def _candidates(self, p0, p1, cutoff):
        """Triangle indices possibly within `cutoff` of segment p0-p1."""
        length = float(np.linalg.norm(p1 - p0))
        n = max(2, int(np.ceil(length / _SAMPLE_SPACING_MM)) + 1)
        ts = np.linspace(0.0, 1.0, n)
        samples = p0 + ts[:, None] * (p1 - p0)
        r = cutoff + self.max_tri_radius + (length / (n - 1)) / 2.0 + 1e-9
        hits = self.tree.query_ball_point(samples, r)
        idx = sorted(set(i for lst in hits for i in lst))
        return np.array(idx, dtype=np.int64)

    def segment_distance(self, p0, p1, cutoff):
        """Min distance from a segment to the mesh surface, or +inf if it
        provably exceeds `cutoff`."""
        p0 = np.asarray(p0, float)
        p1 = np.asarray(p1, float)
        if _segment_aabb_gap(p0, p1, self.aabb_lo, self.aabb_hi) > cutoff:
            return np.inf
        idx = self._candidates(p0, p1, cutoff)
        if len(idx) == 0:
            return np.inf
        d = segment_triangles_distance(p0, p1, self.tri[idx])
        return float(d.min())

    def segment_crossings(self, p0, p1):
        """Sorted parameters t in [0, 1] where the segment crosses the surface."""
        p0 = np.asarray(p0, float)
        p1 = np.asarray(p1, float)
        seg = p1 - p0
        length = float(np.linalg.norm(seg))
        if length < 1e-12:
            return np.empty(0)
        if _segment_aabb_gap(p0, p1, self.aabb_lo, self.aabb_hi) > 0:
            return np.empty(0)
        idx = self._candidates(p0, p1, 0.0)
        if len(idx) == 0:
            return np.empty(0)
        t = ray_triangles_hits(p0, seg / length, self.tri[idx])
        t = t[~np.isnan(t)]
        t = t[(t >= 0.0) & (t <= length + 1e-12)] / length
        t = np.sort(t)
        if len(t) > 1:
            # crossings through a shared vertex/edge hit several triangles
            # at one parameter; collapse them so even-odd parity survives
            keep = np.concatenate(([True], np.diff(t) > 1e-9))
            t = t[keep]
        return t

    def _contains_exact(self, p):
        """Even-odd containment test with a +x ray over AABB-prefiltered triangles."""
        mask = (
            (self._tri_lo[:, 1] <= p[1])
            & (self._tri_hi[:, 1] >= p[1])
            & (self._tri_lo[:, 2] <= p[2])
            & (self._tri_hi[:, 2] >= p[2])
            & (self._tri_hi[:, 0] >= p[0])
        )
        if not mask.any():
            return False
        t = ray_triangles_hits(p, np.array([1.0, 0.0, 0.0]), self.tri[mask])
        return bool(np.count_nonzero(~np.isnan(t) & (t > 1e-9)) % 2 == 1)

    def contains(self, point):
        """True when the point lies inside the (closed) mesh."""
        p = np.asarray(point, float)
        if np.any(p < self.aabb_lo) or np.any(p > self.aabb_hi):
            return False
        idx = ((p - self._grid_lo) / self.GRID_CELL_MM).astype(int)
        if np.any(idx < 0) or np.any(idx >= self._grid_shape):
            return self._contains_exact(p)
        state = self._grid[idx[0], idx[1], idx[2]]
        if state == 2:
            return self._contains_exact(p)
        return bool(state == 1)

    def contains_many(self, points):
        return np.array([self.contains(p) for p in np.atleast_2d(points)])
