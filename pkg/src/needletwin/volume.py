"""CT-like volume container and operations.

A Volume is a regular HU grid in CT-frame millimeters: voxel (i, j, k) is
centered at ``origin + (i, j, k) * spacing``. The in-bounds region is the
voxel-center bounding box, so every trilinear sample has 8 real neighbors
(collapsing on boundary faces).

File format (.vol/.volmeta): raw little-endian int16 block in C order
(k fastest) plus a UTF-8 key=value sidecar with dims, spacing_mm, origin_mm
and an optional hu_offset added on load.
"""

import numpy as np
from scipy import ndimage
from skimage import measure

from .errors import EmptySurface, InvalidInput, OutOfBounds
from .geometry import TriMesh

HU_AIR = -1000.0
SLICE_SENTINEL = -1024.0

DEFAULT_SKIN_ISO_HU = -300.0  # midway between air and soft tissue
DEFAULT_BALL_THRESHOLD_HU = 2000.0  # steel sits far above bone
DEFAULT_MIN_BLOB_VOXELS = 4

_BOUNDS_EPS = 1e-9


class Volume:
    """Regular scalar grid with spacing and origin in CT-frame mm."""

    def __init__(self, data, spacing, origin=(0.0, 0.0, 0.0)):
        data = np.asarray(data, dtype=float)
        if data.ndim != 3:
            raise InvalidInput("volume data must be 3-D")
        if min(data.shape) < 2:
            raise InvalidInput("volume needs at least 2 voxels per axis")
        spacing = np.asarray(spacing, dtype=float).reshape(3)
        if np.any(spacing <= 0):
            raise InvalidInput("voxel spacing must be positive")
        self.data = data
        self.spacing = spacing
        self.origin = np.asarray(origin, dtype=float).reshape(3)

    @property
    def dims(self):
        return self.data.shape

    @property
    def bounds(self):
        """(lo, hi) of the voxel-center bounding box."""
        hi = self.origin + (np.array(self.dims) - 1) * self.spacing
        return self.origin.copy(), hi

    def contains(self, points):
        """Boolean in-bounds mask for an (n, 3) array (or a single point)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        lo, hi = self.bounds
        ok = np.all((p >= lo - _BOUNDS_EPS) & (p <= hi + _BOUNDS_EPS), axis=1)
        return ok if np.asarray(points).ndim == 2 else bool(ok[0])

    def voxel_to_ct(self, ijk):
        return self.origin + np.asarray(ijk, dtype=float) * self.spacing

    def ct_to_voxel(self, p):
        return (np.asarray(p, dtype=float) - self.origin) / self.spacing


def _trilinear(volume, points):
    """Vectorized trilinear interpolation; caller guarantees in-bounds.

    Fractions within 1e-9 of a lattice plane snap onto it, so sampling at
    voxel centers returns stored values bit-exactly.
    """
    rel = (points - volume.origin) / volume.spacing
    dims = np.array(volume.dims)
    rel = np.clip(rel, 0.0, dims - 1)
    i0 = np.minimum(rel.astype(np.int64), dims - 2)
    f = rel - i0
    f[f < 1e-9] = 0.0
    f[f > 1.0 - 1e-9] = 1.0
    d = volume.data
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    c000 = d[x0, y0, z0]
    c100 = d[x0 + 1, y0, z0]
    c010 = d[x0, y0 + 1, z0]
    c110 = d[x0 + 1, y0 + 1, z0]
    c001 = d[x0, y0, z0 + 1]
    c101 = d[x0 + 1, y0, z0 + 1]
    c011 = d[x0, y0 + 1, z0 + 1]
    c111 = d[x0 + 1, y0 + 1, z0 + 1]
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def sample_trilinear(volume, p):
    """Trilinear HU sample at a CT-frame point; OutOfBounds outside the box."""
    p = np.asarray(p, dtype=float).reshape(3)
    if not volume.contains(p):
        raise OutOfBounds(f"point {p} outside volume bounds {volume.bounds}")
    return float(_trilinear(volume, p[None, :])[0])


def sample_many(volume, points, fill=None):
    """Trilinear samples for (n, 3) points.

    With fill=None any out-of-bounds point raises OutOfBounds; otherwise
    out-of-bounds samples take the fill value.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    inside = volume.contains(points)
    if fill is None:
        if not inside.all():
            raise OutOfBounds("sample point outside volume bounds")
        return _trilinear(volume, points)
    out = np.full(len(points), float(fill))
    if inside.any():
        out[inside] = _trilinear(volume, points[inside])
    return out


class WindowLevel:
    """Monotone linear HU -> [0, 1] display mapping."""

    __slots__ = ("center", "width")

    def __init__(self, center, width):
        if width <= 0:
            raise InvalidInput("window width must be positive")
        self.center = float(center)
        self.width = float(width)

    def apply(self, hu):
        lo = self.center - self.width / 2.0
        return np.clip((np.asarray(hu, dtype=float) - lo) / self.width, 0.0, 1.0)


def extract_slice(volume, plane, window=None):
    """Resample the volume on a SlicePlane.

    Returns an (nu, nv) array: raw HU with out-of-bounds pixels set to the
    -1024 sentinel, or display intensities in [0, 1] when a WindowLevel is
    given (the sentinel passes through the same mapping).
    """
    pts = plane.grid_points()
    nu, nv = plane.pixel_counts
    img = sample_many(volume, pts, fill=SLICE_SENTINEL).reshape(nu, nv)
    if window is not None:
        img = window.apply(img)
    return img


def max_hu_along_segment(volume, a, b):
    """Maximum trilinear HU along segment a-b.

    Samples sit on a min(spacing)/2 lattice anchored at `a`, plus the exact
    endpoint `b`, so extending a segment by whole steps only adds samples.
    """
    a = np.asarray(a, dtype=float).reshape(3)
    b = np.asarray(b, dtype=float).reshape(3)
    if not (volume.contains(a) and volume.contains(b)):
        raise OutOfBounds("segment endpoint outside volume bounds")
    length = float(np.linalg.norm(b - a))
    if length == 0.0:
        return float(_trilinear(volume, a[None, :])[0])
    step = float(np.min(volume.spacing)) / 2.0
    ts = np.arange(0.0, length, step)
    ts = np.append(ts, length)
    pts = a[None, :] + (ts / length)[:, None] * (b - a)[None, :]
    return float(_trilinear(volume, pts).max())


class SegmentedBlob:
    """Connected high-density component: centroid (mm), size, equivalent radius."""

    __slots__ = ("centroid", "voxel_count", "equivalent_radius")

    def __init__(self, centroid, voxel_count, equivalent_radius):
        self.centroid = np.asarray(centroid, dtype=float).reshape(3)
        self.voxel_count = int(voxel_count)
        self.equivalent_radius = float(equivalent_radius)

    def __repr__(self):
        return (
            f"SegmentedBlob(centroid={np.round(self.centroid, 2)}, "
            f"n={self.voxel_count}, r={self.equivalent_radius:.2f}mm)"
        )


def segment_high_density_blobs(volume, threshold, min_blob_voxels=DEFAULT_MIN_BLOB_VOXELS):
    """26-connected components of voxels above threshold.

    Centroids are unweighted voxel-center means in mm. Blobs smaller than
    min_blob_voxels are discarded. Sorted by descending voxel count, then
    lexicographic centroid.
    """
    mask = volume.data > threshold
    if not mask.any():
        return []
    labels, n = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    voxel_volume = float(np.prod(volume.spacing))
    blobs = []
    counts = np.bincount(labels.ravel())
    centers = ndimage.center_of_mass(mask, labels, index=np.arange(1, n + 1))
    for lab in range(1, n + 1):
        count = int(counts[lab])
        if count < min_blob_voxels:
            continue
        centroid = volume.voxel_to_ct(np.asarray(centers[lab - 1]))
        r_eq = (3.0 * count * voxel_volume / (4.0 * np.pi)) ** (1.0 / 3.0)
        blobs.append(SegmentedBlob(centroid, count, r_eq))
    blobs.sort(key=lambda b: (-b.voxel_count, b.centroid[0], b.centroid[1], b.centroid[2]))
    return blobs


def _largest_component(verts, faces):
    """Keep the triangle-connected component with the most triangles."""
    n = len(verts)
    parent = np.arange(n)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for f in faces:
        a = find(f[0])
        for k in (1, 2):
            b = find(f[k])
            if a != b:
                parent[b] = a
    roots = np.array([find(f[0]) for f in faces])
    best = np.bincount(roots).argmax()
    keep = faces[roots == best]
    used = np.unique(keep)
    remap = np.full(n, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return verts[used], remap[keep]


def extract_skin_mesh(volume, iso=DEFAULT_SKIN_ISO_HU):
    """Marching-cubes isosurface at `iso`, largest connected component only.

    Vertices are CT-frame mm. Raises EmptySurface when the volume never
    crosses the isovalue.
    """
    dmin, dmax = float(volume.data.min()), float(volume.data.max())
    if not (dmin < iso < dmax):
        raise EmptySurface(f"volume range [{dmin}, {dmax}] never crosses iso {iso}")
    verts, faces, _, _ = measure.marching_cubes(
        volume.data, level=iso, spacing=tuple(volume.spacing)
    )
    verts = verts + volume.origin
    verts, faces = _largest_component(verts, faces.astype(np.int64))
    return TriMesh(verts, faces)


def save_volume(volume, path_prefix):
    """Write `<prefix>.vol` (raw int16, C order) + `<prefix>.volmeta`."""
    raw = np.clip(np.rint(volume.data), -32768, 32767).astype("<i2")
    with open(f"{path_prefix}.vol", "wb") as fh:
        fh.write(raw.tobytes(order="C"))
    with open(f"{path_prefix}.volmeta", "w", encoding="utf-8") as fh:
        d = volume.dims
        s = volume.spacing
        o = volume.origin
        fh.write(f"dims = {d[0]} {d[1]} {d[2]}\n")
        fh.write(f"spacing_mm = {s[0]:.9g} {s[1]:.9g} {s[2]:.9g}\n")
        fh.write(f"origin_mm = {o[0]:.9g} {o[1]:.9g} {o[2]:.9g}\n")
        fh.write("hu_offset = 0\n")


def load_volume(path_prefix):
    """Read a `<prefix>.vol`/`<prefix>.volmeta` pair."""
    meta = {}
    with open(f"{path_prefix}.volmeta", "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    try:
        dims = [int(x) for x in meta["dims"].split()]
        spacing = [float(x) for x in meta["spacing_mm"].split()]
        origin = [float(x) for x in meta["origin_mm"].split()]
    except KeyError as exc:
        raise InvalidInput(f"volmeta missing key: {exc}") from exc
    offset = float(meta.get("hu_offset", "0"))
    raw = np.fromfile(f"{path_prefix}.vol", dtype="<i2")
    if raw.size != dims[0] * dims[1] * dims[2]:
        raise InvalidInput(
            f".vol size {raw.size} does not match dims {dims} from .volmeta"
        )
    data = raw.reshape(dims).astype(float) + offset
    return Volume(data, spacing, origin)
