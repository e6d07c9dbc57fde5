"""Synthetic CT phantom generation with ground truth.

Phantoms are built from implicit shapes evaluated on the voxel grid:
an ellipsoidal soft-tissue body in air, spherical organs, capsule "ribs"
at bone density, and the steel-ball marker grid strapped onto the body
surface. HU priority: ball > bone > organ > body > air.
"""

import numpy as np

from .calibration import default_grid_model
from .errors import InvalidInput, InvalidSpec
from .geometry import RigidTransform, rotation_about_axis, rotation_from_euler_xyz
from .volume import Volume

HU_AIR = -1000.0
HU_SOFT_TISSUE = 40.0
HU_BONE = 1200.0
HU_STEEL = 3000.0


class Organ:
    __slots__ = ("name", "center", "radius", "hu")

    def __init__(self, name, center, radius, hu):
        self.name = str(name)
        self.center = np.asarray(center, dtype=float).reshape(3)
        self.radius = float(radius)
        self.hu = float(hu)


class BoneCapsule:
    __slots__ = ("p0", "p1", "radius", "hu")

    def __init__(self, p0, p1, radius, hu=HU_BONE):
        self.p0 = np.asarray(p0, dtype=float).reshape(3)
        self.p1 = np.asarray(p1, dtype=float).reshape(3)
        self.radius = float(radius)
        self.hu = float(hu)


class PhantomSpec:
    """Declarative phantom description; geometry in CT-frame mm.

    `grid_pose` is the CT->SB placement of the marker grid (its apply()
    maps grid-frame ball centers into CT coordinates).
    """

    def __init__(
        self,
        body_semi_axes,
        body_center=(0.0, 0.0, 0.0),
        body_hu=HU_SOFT_TISSUE,
        organs=(),
        ribs=(),
        grid=None,
        grid_pose=None,
        noise_sigma=0.0,
        ball_hu=HU_STEEL,
    ):
        self.body_semi_axes = np.asarray(body_semi_axes, dtype=float).reshape(3)
        if np.any(self.body_semi_axes <= 0):
            raise InvalidSpec("body semi-axes must be positive")
        self.body_center = np.asarray(body_center, dtype=float).reshape(3)
        self.body_hu = float(body_hu)
        self.organs = list(organs)
        self.ribs = list(ribs)
        self.grid = grid
        self.grid_pose = grid_pose
        if grid is not None and grid_pose is None:
            raise InvalidSpec("grid placement pose required when a grid is present")
        self.noise_sigma = float(noise_sigma)
        if self.noise_sigma < 0:
            raise InvalidSpec("noise sigma must be >= 0")
        self.ball_hu = float(ball_hu)
        for organ in self.organs:
            rel = (organ.center - self.body_center) / self.body_semi_axes
            margin = organ.radius / float(np.min(self.body_semi_axes))
            if np.linalg.norm(rel) + margin > 1.0:
                raise InvalidSpec(f"organ {organ.name!r} does not fit inside the body")


class GroundTruth:
    """What the generator knows: organ and grid-ball centers in CT mm."""

    def __init__(self, organ_centers, ball_centers_ct, grid_pose, body_center, body_semi_axes):
        self.organ_centers = dict(organ_centers)  # name -> (3,)
        self.ball_centers_ct = None if ball_centers_ct is None else np.asarray(ball_centers_ct, float)
        self.grid_pose = grid_pose
        self.body_center = np.asarray(body_center, float)
        self.body_semi_axes = np.asarray(body_semi_axes, float)


def synthesize_phantom(spec, dims, spacing, seed=0, origin=None):
    """Render a PhantomSpec into a Volume; deterministic for a fixed seed.

    The default origin centers the grid on the body center. Returns
    (Volume, GroundTruth).
    """
    dims = tuple(int(d) for d in dims)
    spacing = np.asarray(spacing, dtype=float).reshape(3)
    if origin is None:
        origin = spec.body_center - (np.array(dims) - 1) * spacing / 2.0
    origin = np.asarray(origin, dtype=float).reshape(3)

    xs = origin[0] + spacing[0] * np.arange(dims[0])
    ys = origin[1] + spacing[1] * np.arange(dims[1])
    zs = origin[2] + spacing[2] * np.arange(dims[2])
    gx = xs[:, None, None]
    gy = ys[None, :, None]
    gz = zs[None, None, :]

    data = np.full(dims, HU_AIR)

    cx, cy, cz = spec.body_center
    ax, ay, az = spec.body_semi_axes
    body = ((gx - cx) / ax) ** 2 + ((gy - cy) / ay) ** 2 + ((gz - cz) / az) ** 2 <= 1.0
    data[body] = spec.body_hu

    for organ in spec.organs:
        ox, oy, oz = organ.center
        mask = (gx - ox) ** 2 + (gy - oy) ** 2 + (gz - oz) ** 2 <= organ.radius**2
        data[mask] = organ.hu

    for rib in spec.ribs:
        _paint_capsule(data, xs, ys, zs, rib.p0, rib.p1, rib.radius, rib.hu)

    ball_centers_ct = None
    if spec.grid is not None:
        ball_centers_ct = spec.grid_pose.apply(spec.grid.ball_centers)
        for center, radius in zip(ball_centers_ct, spec.grid.ball_radii):
            _paint_sphere(data, xs, ys, zs, center, radius, spec.ball_hu)

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        data = data + rng.normal(0.0, spec.noise_sigma, size=dims)

    truth = GroundTruth(
        {o.name: o.center for o in spec.organs},
        ball_centers_ct,
        spec.grid_pose,
        spec.body_center,
        spec.body_semi_axes,
    )
    return Volume(data, spacing, origin), truth


def _subrange(coords, lo, hi):
    i0 = int(np.searchsorted(coords, lo))
    i1 = int(np.searchsorted(coords, hi, side="right"))
    return i0, max(i1, i0)


def _paint_sphere(data, xs, ys, zs, center, radius, hu):
    x0, x1 = _subrange(xs, center[0] - radius, center[0] + radius)
    y0, y1 = _subrange(ys, center[1] - radius, center[1] + radius)
    z0, z1 = _subrange(zs, center[2] - radius, center[2] + radius)
    if x0 >= x1 or y0 >= y1 or z0 >= z1:
        return
    sx = xs[x0:x1][:, None, None] - center[0]
    sy = ys[y0:y1][None, :, None] - center[1]
    sz = zs[z0:z1][None, None, :] - center[2]
    mask = sx**2 + sy**2 + sz**2 <= radius**2
    data[x0:x1, y0:y1, z0:z1][mask] = hu


def _paint_capsule(data, xs, ys, zs, p0, p1, radius, hu):
    lo = np.minimum(p0, p1) - radius
    hi = np.maximum(p0, p1) + radius
    x0, x1 = _subrange(xs, lo[0], hi[0])
    y0, y1 = _subrange(ys, lo[1], hi[1])
    z0, z1 = _subrange(zs, lo[2], hi[2])
    if x0 >= x1 or y0 >= y1 or z0 >= z1:
        return
    px, py, pz = np.meshgrid(xs[x0:x1], ys[y0:y1], zs[z0:z1], indexing="ij")
    pts = np.stack([px, py, pz], axis=-1)
    seg = p1 - p0
    ss = float(seg @ seg)
    if ss < 1e-12:
        t = np.zeros(pts.shape[:-1])
    else:
        t = np.clip((pts - p0) @ seg / ss, 0.0, 1.0)
    closest = p0 + t[..., None] * seg
    mask = np.sum((pts - closest) ** 2, axis=-1) <= radius**2
    data[x0:x1, y0:y1, z0:z1][mask] = hu


def default_grid_pose(body_center, body_semi_axes, clearance=8.0):
    """Strap the grid onto the anterior (+y) body surface, plane tangent."""
    y_top = body_center[1] + body_semi_axes[1] + clearance
    rot = rotation_about_axis([1.0, 0.0, 0.0], -90.0)  # SB z -> CT +y
    t = np.array([body_center[0], y_top, body_center[2]])
    return RigidTransform(rot, t, "CT", "SB")


def thorax_phantom(noise_sigma=0.0):
    """Desk-scale thorax phantom spec with grid and a documented organ set.

    The body size is tuned so 10 mm candidate spacing yields a count near
    the clinical average (~1650 insertion paths per target).
    """
    body_center = np.zeros(3)
    semi_axes = np.array([95.0, 75.0, 240.0])
    organs = [
        Organ("liver", (38.0, 12.0, 50.0), 32.0, 60.0),
        Organ("kidney_left", (-42.0, -20.0, -35.0), 20.0, 45.0),
        Organ("spleen", (-45.0, 8.0, 48.0), 18.0, 50.0),
        Organ("heart", (8.0, -12.0, 105.0), 28.0, 55.0),
        Organ("pancreas", (0.0, 10.0, 12.0), 14.0, 48.0),
        Organ("lymph_node", (18.0, 28.0, -65.0), 8.0, 42.0),
    ]
    ribs = [
        BoneCapsule((-55.0, 50.0, z), (55.0, 50.0, z), 5.0)
        for z in (-70.0, -42.0, -14.0, 14.0, 42.0, 70.0)
    ]
    grid = default_grid_model()
    return PhantomSpec(
        semi_axes,
        body_center,
        organs=organs,
        ribs=ribs,
        grid=grid,
        grid_pose=default_grid_pose(body_center, semi_axes),
        noise_sigma=noise_sigma,
    )


THORAX_DIMS = (84, 68, 180)
THORAX_SPACING = (2.8, 2.8, 3.0)


def small_phantom(noise_sigma=0.0, with_grid=True):
    """Compact phantom for fast tests: one organ, one rib, optional grid."""
    body_center = np.zeros(3)
    semi_axes = np.array([70.0, 60.0, 90.0])
    organs = [Organ("target_organ", (15.0, 5.0, 10.0), 12.0, 60.0)]
    ribs = [BoneCapsule((-40.0, 40.0, 0.0), (40.0, 40.0, 0.0), 4.0)]
    grid = default_grid_model() if with_grid else None
    pose = default_grid_pose(body_center, semi_axes) if with_grid else None
    return PhantomSpec(
        semi_axes,
        body_center,
        organs=organs,
        ribs=ribs,
        grid=grid,
        grid_pose=pose,
        noise_sigma=noise_sigma,
    )


def save_ground_truth(truth, path):
    """Ground-truth record: UTF-8 key=value groups (organs, balls, body)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("[body]\n")
        fh.write("center_mm = " + _fmt3(truth.body_center) + "\n")
        fh.write("semi_axes_mm = " + _fmt3(truth.body_semi_axes) + "\n")
        for name, center in sorted(truth.organ_centers.items()):
            fh.write("[organ]\n")
            fh.write(f"name = {name}\n")
            fh.write("center_mm = " + _fmt3(center) + "\n")
        if truth.ball_centers_ct is not None:
            for i, center in enumerate(truth.ball_centers_ct):
                fh.write("[ball]\n")
                fh.write(f"index = {i}\n")
                fh.write("center_mm = " + _fmt3(center) + "\n")


def load_ground_truth(path):
    organs = {}
    balls = {}
    body_center = np.zeros(3)
    body_axes = np.ones(3)
    section, fields = None, {}

    def flush():
        nonlocal body_center, body_axes
        if section == "organ":
            organs[fields["name"]] = _parse3(fields["center_mm"])
        elif section == "ball":
            balls[int(fields["index"])] = _parse3(fields["center_mm"])
        elif section == "body":
            body_center = _parse3(fields["center_mm"])
            body_axes = _parse3(fields["semi_axes_mm"])

    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("["):
                flush()
                section, fields = line.strip("[]"), {}
            else:
                key, _, value = line.partition("=")
                fields[key.strip()] = value.strip()
        flush()
    centers = None
    if balls:
        centers = np.array([balls[i] for i in sorted(balls)])
    return GroundTruth(organs, centers, None, body_center, body_axes)


def _fmt3(v):
    return " ".join(f"{x:.9g}" for x in np.asarray(v, float).reshape(3))


def _parse3(s):
    vals = [float(x) for x in s.split()]
    if len(vals) != 3:
        raise InvalidInput(f"expected 3 numbers, got {s!r}")
    return np.array(vals)


def save_phantom_spec(spec, path):
    """Phantom spec file: sectioned key=value text (see load_phantom_spec)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("[body]\n")
        fh.write("semi_axes_mm = " + _fmt3(spec.body_semi_axes) + "\n")
        fh.write("center_mm = " + _fmt3(spec.body_center) + "\n")
        fh.write(f"hu = {spec.body_hu:.9g}\n")
        for o in spec.organs:
            fh.write("[organ]\n")
            fh.write(f"name = {o.name}\n")
            fh.write("center_mm = " + _fmt3(o.center) + "\n")
            fh.write(f"radius_mm = {o.radius:.9g}\n")
            fh.write(f"hu = {o.hu:.9g}\n")
        for r in spec.ribs:
            fh.write("[rib]\n")
            fh.write("p0_mm = " + _fmt3(r.p0) + "\n")
            fh.write("p1_mm = " + _fmt3(r.p1) + "\n")
            fh.write(f"radius_mm = {r.radius:.9g}\n")
            fh.write(f"hu = {r.hu:.9g}\n")
        if spec.grid is not None:
            fh.write("[grid]\n")
            fh.write("translation_mm = " + _fmt3(spec.grid_pose.translation) + "\n")
            fh.write(
                "rotation_rows = "
                + " ".join(f"{x:.12g}" for x in spec.grid_pose.rotation.reshape(-1))
                + "\n"
            )
        fh.write("[noise]\n")
        fh.write(f"sigma_hu = {spec.noise_sigma:.9g}\n")


def load_phantom_spec(path):
    body = {"semi_axes_mm": "100 100 100", "center_mm": "0 0 0", "hu": str(HU_SOFT_TISSUE)}
    organs, ribs = [], []
    grid_pose = None
    noise = 0.0
    section, fields = None, {}

    def flush():
        nonlocal grid_pose, noise, body
        if section == "body":
            body = dict(fields)
        elif section == "organ":
            organs.append(
                Organ(
                    fields["name"],
                    _parse3(fields["center_mm"]),
                    float(fields["radius_mm"]),
                    float(fields.get("hu", HU_SOFT_TISSUE + 20)),
                )
            )
        elif section == "rib":
            ribs.append(
                BoneCapsule(
                    _parse3(fields["p0_mm"]),
                    _parse3(fields["p1_mm"]),
                    float(fields["radius_mm"]),
                    float(fields.get("hu", HU_BONE)),
                )
            )
        elif section == "grid":
            t = _parse3(fields["translation_mm"])
            if "rotation_rows" in fields:
                r = np.array([float(x) for x in fields["rotation_rows"].split()]).reshape(3, 3)
            else:
                rx, ry, rz = _parse3(fields.get("rotation_xyz_deg", "0 0 0"))
                r = rotation_from_euler_xyz(rx, ry, rz)
            grid_pose = RigidTransform(r, t, "CT", "SB")
        elif section == "noise":
            noise = float(fields.get("sigma_hu", "0"))

    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("["):
                flush()
                section, fields = line.strip("[]"), {}
            else:
                key, _, value = line.partition("=")
                fields[key.strip()] = value.strip()
        flush()
    grid = default_grid_model() if grid_pose is not None else None
    return PhantomSpec(
        _parse3(body["semi_axes_mm"]),
        _parse3(body["center_mm"]),
        float(body.get("hu", HU_SOFT_TISSUE)),
        organs=organs,
        ribs=ribs,
        grid=grid,
        grid_pose=grid_pose,
        noise_sigma=noise,
    )
