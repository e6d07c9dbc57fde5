"""Placement error metrics, synthetic end-to-end trials with a documented
noise budget, and aggregate statistics.

The three metrics mirror post-insertion CT annotation practice: the
observed tip is virtually extended by the punch offset before comparing
with the target (target error), the planned target is projected onto the
observed axis (off-axis error), and the axis/skin intersection is compared
with the planned insertion point (surface point error).
"""

import numpy as np

from .errors import InvalidInput, NoPuncture
from .geometry import (
    Ray,
    RigidTransform,
    invert,
    point_line_distance,
    ray_mesh_intersect,
    rotation_about_axis,
)
from .planner import (
    NeedleTrajectory,
    RobotContext,
    Target,
    build_colormap,
    default_robot_context,
    plan_insertion,
)
from .robot import CollisionScene, forward_kinematics
from .volume import extract_skin_mesh
from .phantom import synthesize_phantom

PUNCH_EXTENSION_MM = 15.0


class ObservedNeedle:
    """Manually annotated needle: tip and base points in CT mm."""

    __slots__ = ("tip", "base")

    def __init__(self, tip, base):
        tip = np.asarray(tip, dtype=float).reshape(3)
        base = np.asarray(base, dtype=float).reshape(3)
        if np.linalg.norm(tip - base) < 1e-9:
            raise InvalidInput("needle tip and base coincide")
        self.tip = tip
        self.base = base

    @property
    def axis(self):
        d = self.tip - self.base
        return d / np.linalg.norm(d)


class NoiseModel:
    """Synthetic stand-ins for physical error sources.

    Defaults are illustrative only (chosen to produce same-order errors as
    a cadaver workflow), never asserted against clinical values.
    """

    def __init__(
        self,
        detachment_tilt_sigma_deg=1.5,
        detachment_shift_sigma_mm=1.0,
        annotation_sigma_mm=0.5,
        registration_rot_sigma_deg=0.2,
        registration_trans_sigma_mm=0.3,
    ):
        for v in (
            detachment_tilt_sigma_deg,
            detachment_shift_sigma_mm,
            annotation_sigma_mm,
            registration_rot_sigma_deg,
            registration_trans_sigma_mm,
        ):
            if v < 0:
                raise InvalidInput("noise sigmas must be >= 0")
        self.detachment_tilt_sigma_deg = float(detachment_tilt_sigma_deg)
        self.detachment_shift_sigma_mm = float(detachment_shift_sigma_mm)
        self.annotation_sigma_mm = float(annotation_sigma_mm)
        self.registration_rot_sigma_deg = float(registration_rot_sigma_deg)
        self.registration_trans_sigma_mm = float(registration_trans_sigma_mm)

    @classmethod
    def zero(cls):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"detachment_tilt_sigma_deg = {self.detachment_tilt_sigma_deg:.9g}\n")
            fh.write(f"detachment_shift_sigma_mm = {self.detachment_shift_sigma_mm:.9g}\n")
            fh.write(f"annotation_sigma_mm = {self.annotation_sigma_mm:.9g}\n")
            fh.write(f"registration_rot_sigma_deg = {self.registration_rot_sigma_deg:.9g}\n")
            fh.write(f"registration_trans_sigma_mm = {self.registration_trans_sigma_mm:.9g}\n")

    @classmethod
    def load(cls, path):
        fields = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                fields[key.strip()] = float(value.strip())
        return cls(**fields)


class ErrorReport:
    """Per-needle error triple with trial metadata."""

    def __init__(
        self,
        target_error,
        off_axis_error,
        surface_point_error,
        organ="",
        seed=0,
        skipped=False,
        skip_reason="",
    ):
        if not skipped:
            if min(target_error, off_axis_error, surface_point_error) < 0:
                raise InvalidInput("errors must be >= 0")
            if off_axis_error > target_error + 1e-9:
                raise InvalidInput("off-axis error cannot exceed target error")
        self.target_error = float(target_error) if not skipped else float("nan")
        self.off_axis_error = float(off_axis_error) if not skipped else float("nan")
        self.surface_point_error = float(surface_point_error) if not skipped else float("nan")
        self.organ = str(organ)
        self.seed = int(seed)
        self.skipped = bool(skipped)
        self.skip_reason = str(skip_reason)


def target_error(observed, planned):
    """Distance from the virtually extended tip to the planned target."""
    extended = observed.tip + PUNCH_EXTENSION_MM * observed.axis
    return float(np.linalg.norm(extended - planned.target.position))


def off_axis_error(observed, planned):
    """Shortest distance between the observed needle axis and the target."""
    return point_line_distance(planned.target.position, observed.base, observed.axis)


def surface_point_error(observed, planned, skin):
    """Distance between the observed axis/skin intersection and the planned
    insertion point; NoPuncture when the axis misses the mesh."""
    hit = ray_mesh_intersect(Ray(observed.base, observed.axis), skin)
    if hit is None:
        raise NoPuncture("observed needle axis does not intersect the skin mesh")
    return float(np.linalg.norm(hit.point - planned.insertion_point))


def _perturb_transform(t, rot_sigma_deg, trans_sigma_mm, rng):
    if rot_sigma_deg == 0 and trans_sigma_mm == 0:
        return t
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.normal(0.0, rot_sigma_deg)
    dr = rotation_about_axis(axis, angle)
    dt = rng.normal(0.0, trans_sigma_mm, size=3) if trans_sigma_mm > 0 else np.zeros(3)
    return RigidTransform(dr @ t.rotation, t.translation + dt, t.from_frame, t.to_frame)


def _select_candidate(colormap, target, context):
    """Deterministic auto-pick: the feasible candidate whose insertion
    direction best aligns with the fixed target-to-robot-base reference."""
    feasible = [c for c in colormap.candidates if c.feasible]
    if not feasible:
        return None
    base_ct = invert(context.b_to_ct).apply(np.zeros(3))
    ref = base_ct - target.position
    ref = ref / np.linalg.norm(ref)
    best, best_dot = None, -np.inf
    for c in feasible:
        d = c.surface_point - target.position
        d = d / np.linalg.norm(d)
        dot = float(d @ ref)
        if dot > best_dot:
            best, best_dot = c, dot
    return best


def run_synthetic_trial(spec, dims, spacing, targets, noise, seed, workers=1, context=None):
    """Full-pipeline synthetic trial; deterministic per seed.

    Synthesizes the phantom, perturbs the believed base-to-CT registration
    per the noise model, builds a colormap per target, plans and "executes"
    the nearest feasible candidate to the robot-facing reference direction,
    applies detachment + annotation noise, and scores all three metrics.
    Targets without a feasible candidate are recorded as skipped.
    """
    rng = np.random.default_rng(seed)
    volume, truth = synthesize_phantom(spec, dims, spacing, seed=seed)
    skin = extract_skin_mesh(volume)
    if context is None:
        context = default_robot_context(skin)
    gt_b_to_ct = context.b_to_ct
    believed = _perturb_transform(
        gt_b_to_ct, noise.registration_rot_sigma_deg, noise.registration_trans_sigma_mm, rng
    )
    scene = CollisionScene(
        skin,
        gantry=context.scene.gantry,
        static_boxes=context.scene.static_boxes,
        b_to_ct=believed,
    )
    planning_context = RobotContext(context.chain, context.mount, scene, believed, context.idle_q)

    reports = []
    for target in targets:
        colormap = build_colormap(target, volume, skin, planning_context, workers=workers)
        candidate = _select_candidate(colormap, target, planning_context)
        if candidate is None:
            reports.append(
                ErrorReport(0, 0, 0, organ=target.label, seed=seed, skipped=True, skip_reason="no_feasible_candidate")
            )
            continue
        trajectory = NeedleTrajectory(target, candidate.surface_point, candidate.max_hu)
        plan = plan_insertion(trajectory, planning_context)
        end = plan.stages["stroke"][1] - 1
        q_final = plan.waypoints[end]

        # physical needle pose: executed joints mapped through the TRUE chain
        eef = forward_kinematics(planning_context.chain, q_final)
        tip_ct = invert(gt_b_to_ct).apply(eef.apply(planning_context.mount.tip_in_eef()))
        base_ct = invert(gt_b_to_ct).apply(eef.apply(planning_context.mount.base_in_eef()))

        axis = tip_ct - base_ct
        axis /= np.linalg.norm(axis)
        pivot_hit = ray_mesh_intersect(Ray(base_ct, axis), skin)
        pivot = pivot_hit.point if pivot_hit is not None else trajectory.insertion_point

        tilt = rng.normal(0.0, noise.detachment_tilt_sigma_deg) if noise.detachment_tilt_sigma_deg > 0 else 0.0
        tilt_axis = rng.normal(size=3)
        tilt_axis -= (tilt_axis @ axis) * axis
        tilt_axis /= max(np.linalg.norm(tilt_axis), 1e-12)
        rot = rotation_about_axis(tilt_axis, tilt)
        shift = (
            rng.normal(0.0, noise.detachment_shift_sigma_mm, size=3)
            if noise.detachment_shift_sigma_mm > 0
            else np.zeros(3)
        )
        tip_obs = rot @ (tip_ct - pivot) + pivot + shift
        base_obs = rot @ (base_ct - pivot) + pivot + shift
        if noise.annotation_sigma_mm > 0:
            tip_obs = tip_obs + rng.normal(0.0, noise.annotation_sigma_mm, size=3)
            base_obs = base_obs + rng.normal(0.0, noise.annotation_sigma_mm, size=3)

        observed = ObservedNeedle(tip_obs, base_obs)
        try:
            sp_err = surface_point_error(observed, trajectory, skin)
        except NoPuncture:
            reports.append(
                ErrorReport(0, 0, 0, organ=target.label, seed=seed, skipped=True, skip_reason="no_puncture")
            )
            continue
        reports.append(
            ErrorReport(
                target_error(observed, trajectory),
                off_axis_error(observed, trajectory),
                sp_err,
                organ=target.label,
                seed=seed,
            )
        )
    return reports


METRIC_NAMES = ("target_error", "off_axis_error", "surface_point_error")


class AggregateReport:
    """Population mean and sample std per metric, overall and per organ."""

    def __init__(self, overall, per_organ, n, n_skipped):
        self.overall = overall  # metric -> (mean, std)
        self.per_organ = per_organ  # organ -> metric -> (mean, std, n)
        self.n = n
        self.n_skipped = n_skipped

    def table(self):
        lines = []
        lines.append(f"{'metric':<22}{'mean_mm':>10}{'std_mm':>10}{'n':>6}")
        for metric in METRIC_NAMES:
            mean, std = self.overall[metric]
            lines.append(f"{metric:<22}{mean:>10.3f}{std:>10.3f}{self.n:>6d}")
        lines.append("")
        lines.append(f"{'organ':<22}{'target_mean':>12}{'target_std':>12}{'n':>6}")
        for organ in sorted(self.per_organ):
            mean, std, n = self.per_organ[organ]["target_error"]
            lines.append(f"{organ:<22}{mean:>12.3f}{std:>12.3f}{n:>6d}")
        lines.append("")
        lines.append(f"skipped: {self.n_skipped}")
        return "\n".join(lines) + "\n"


def _mean_std(values):
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return mean, std


def aggregate_report(reports):
    """Aggregate ErrorReports; skipped entries are counted, never imputed."""
    if not reports:
        raise InvalidInput("no reports to aggregate")
    usable = [r for r in reports if not r.skipped]
    n_skipped = len(reports) - len(usable)
    if not usable:
        raise InvalidInput("all reports are skipped")
    overall = {}
    for metric in METRIC_NAMES:
        overall[metric] = _mean_std([getattr(r, metric) for r in usable])
    per_organ = {}
    for organ in sorted({r.organ for r in usable}):
        rows = [r for r in usable if r.organ == organ]
        per_organ[organ] = {
            metric: _mean_std([getattr(r, metric) for r in rows]) + (len(rows),)
            for metric in METRIC_NAMES
        }
    return AggregateReport(overall, per_organ, len(usable), n_skipped)


def save_observed_needles(needles, path):
    """One needle per line: id tip_xyz base_xyz."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# id tip_x tip_y tip_z base_x base_y base_z\n")
        for needle_id, n in needles:
            vals = " ".join(f"{x:.6f}" for x in np.concatenate([n.tip, n.base]))
            fh.write(f"{needle_id} {vals}\n")


def load_observed_needles(path):
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            vals = [float(x) for x in parts[1:7]]
            out.append((parts[0], ObservedNeedle(vals[0:3], vals[3:6])))
    return out


def save_planned_trajectories(rows, path):
    """One trajectory per line: id target_xyz insertion_xyz label."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# id target_x target_y target_z insertion_x insertion_y insertion_z label\n")
        for traj_id, traj in rows:
            vals = " ".join(
                f"{x:.6f}" for x in np.concatenate([traj.target.position, traj.insertion_point])
            )
            fh.write(f"{traj_id} {vals} {traj.target.label or '-'}\n")


def load_planned_trajectories(path):
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            vals = [float(x) for x in parts[1:7]]
            label = parts[7] if len(parts) > 7 and parts[7] != "-" else ""
            target = Target(parts[0], vals[0:3], label)
            out.append((parts[0], NeedleTrajectory(target, vals[3:6])))
    return out


def load_targets(path):
    """Targets file: one per line, `id label x y z`."""
    targets = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 5:
                raise InvalidInput(f"bad target line {line!r}; expected 'id label x y z'")
            targets.append(Target(parts[0], [float(x) for x in parts[2:5]], parts[1]))
    return targets


def save_targets(targets, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# id label x_mm y_mm z_mm\n")
        for t in targets:
            p = t.position
            fh.write(f"{t.id} {t.label or '-'} {p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")
