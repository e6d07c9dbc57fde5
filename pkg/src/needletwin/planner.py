"""Target-driven insertion planning: candidate points on the skin, max-HU +
feasibility colormaps, trajectory verdicts, and executable joint plans.

Feasibility means a full collision-free plan exists: straight-line approach
from the idle configuration to a pre-insertion pose (needle tip 5 mm off the
skin), then a linear insertion stroke. Bone (high max-HU) never hard-rejects
a candidate; the value is advisory and rendered by the UI.
"""

import os
import time
import multiprocessing

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    ContextMissing,
    InvalidInput,
    InvalidTrajectory,
    NoCandidates,
    PlanningFailed,
)
from .geometry import RigidTransform, invert
from .robot import (
    check_collision,
    forward_kinematics,
    linear_cartesian_path,
    needle_pose_to_eef,
    needle_rotation_for_config,
)
from .volume import max_hu_along_segment

PUNCH_OFFSET_MM = 15.0
DEFAULT_CANDIDATE_SPACING_MM = 10.0
PRE_INSERTION_STANDOFF_MM = 5.0
APPROACH_WAYPOINT_SPACING_MM = 40.0
STROKE_WAYPOINT_SPACING_MM = 8.0
NEEDLE_PENETRATION_SLACK_MM = 1.0
APPROACH_PENETRATION_ALLOWANCE_MM = 1.0
MAX_JOINT_SPEED_DEG_S = 10.0
_PATH_IK_ITERATIONS = 140  # per-waypoint cap; seeds are warm along a path

FAIL_REASONS = ("none", "ik_failure", "collision", "joint_jump", "out_of_reach")

# default idle configuration (deg): needle ~60 deg down-forward, slightly
# off-plane (avoids the in-plane wrist singularity), elbow off its limit
IDLE_Q = np.array([-4.26, 20.28, 11.89, -102.83, -0.38, 26.81, 4.25])


class Target:
    """Named biopsy target in CT coordinates."""

    __slots__ = ("id", "position", "label")

    def __init__(self, target_id, position, label=""):
        self.id = str(target_id)
        self.position = np.asarray(position, dtype=float).reshape(3)
        self.label = str(label)


class InsertionCandidate:
    """One skin point scored with max path HU and robot feasibility."""

    __slots__ = ("surface_point", "max_hu", "feasible", "fail_reason")

    def __init__(self, surface_point, max_hu, feasible, fail_reason):
        if fail_reason not in FAIL_REASONS:
            raise InvalidInput(f"unknown fail reason {fail_reason!r}")
        if feasible != (fail_reason == "none"):
            raise InvalidInput("feasible flag must match fail_reason == 'none'")
        self.surface_point = np.asarray(surface_point, dtype=float).reshape(3)
        self.max_hu = float(max_hu)
        self.feasible = bool(feasible)
        self.fail_reason = fail_reason


class Colormap:
    """All scored candidates for one target."""

    def __init__(self, target_id, candidates, spacing, generation_time):
        self.target_id = str(target_id)
        self.candidates = list(candidates)
        self.spacing = float(spacing)
        self.generation_time = float(generation_time)


class NeedleTrajectory:
    """Planned insertion: the needle tip stops `punch_offset` short of the
    target so the biopsy punch window sits on it."""

    __slots__ = ("target", "insertion_point", "insertion_depth", "punch_offset", "max_hu")

    def __init__(self, target, insertion_point, max_hu=0.0, punch_offset=PUNCH_OFFSET_MM):
        insertion_point = np.asarray(insertion_point, dtype=float).reshape(3)
        depth = float(np.linalg.norm(target.position - insertion_point)) - punch_offset
        if depth <= 0:
            raise InvalidTrajectory(
                f"insertion point is within the {punch_offset} mm punch offset of the target"
            )
        self.target = target
        self.insertion_point = insertion_point
        self.insertion_depth = depth
        self.punch_offset = float(punch_offset)
        self.max_hu = float(max_hu)

    @property
    def direction(self):
        d = self.target.position - self.insertion_point
        return d / np.linalg.norm(d)

    def commanded_tip(self):
        return self.insertion_point + self.insertion_depth * self.direction


class RobotContext:
    """Immutable robot-side planning context shared by all candidates."""

    __slots__ = ("chain", "mount", "scene", "b_to_ct", "idle_q")

    def __init__(self, chain, mount, scene, b_to_ct, idle_q=None):
        self.chain = chain
        self.mount = mount
        self.scene = scene
        self.b_to_ct = b_to_ct
        self.idle_q = IDLE_Q.copy() if idle_q is None else np.asarray(idle_q, float).reshape(7)


def candidate_insertion_points(skin, target, spacing=DEFAULT_CANDIDATE_SPACING_MM):
    """Poisson-disk-style subsample of skin vertices facing the target.

    Vertices whose outward normal points toward the target (a surface patch
    facing away from it) are excluded; the greedy pass over vertex order
    guarantees pairwise distances >= spacing and determinism.
    """
    if skin is None or skin.n_vertices == 0:
        raise NoCandidates("skin mesh is empty")
    verts = skin.vertices
    normals = skin.vertex_normals()
    to_target = target.position - verts
    keep = np.einsum("ij,ij->i", normals, to_target) <= 0.0
    eligible = np.flatnonzero(keep)
    if len(eligible) == 0:
        raise NoCandidates("no skin vertex faces the target")
    tree = cKDTree(verts[eligible])
    blocked = np.zeros(len(eligible), dtype=bool)
    chosen = []
    for local in range(len(eligible)):
        if blocked[local]:
            continue
        chosen.append(eligible[local])
        for other in tree.query_ball_point(verts[eligible[local]], spacing):
            blocked[other] = True
    if not chosen:
        raise NoCandidates("candidate subsampling left no points")
    return verts[np.array(chosen, dtype=np.int64)]


def check_trajectory(trajectory, context):
    """Full-pipeline feasibility verdict for a trajectory.

    Returns (feasible, reason, joint_path): approach from idle to the
    pre-insertion pose plus the insertion stroke, collision-checked with
    the needle penetration allowance. Needle roll is resolved nearest the
    idle configuration.
    """
    if context is None:
        raise ContextMissing("planning requires a robot context")
    chain, mount, scene = context.chain, context.mount, context.scene
    direction = trajectory.direction
    seed_rot = needle_rotation_for_config(chain, context.idle_q, context.b_to_ct, mount)
    pre_tip = trajectory.insertion_point - PRE_INSERTION_STANDOFF_MM * direction
    pre_pose = needle_pose_to_eef(pre_tip, direction, context.b_to_ct, mount, seed_rotation_ct=seed_rot)
    end_tip = trajectory.commanded_tip()
    end_pose = needle_pose_to_eef(end_tip, direction, context.b_to_ct, mount, seed_rotation_ct=seed_rot)

    reach = chain.max_reach_mm
    if (
        np.linalg.norm(pre_pose.translation) > reach
        or np.linalg.norm(end_pose.translation) > reach
    ):
        return False, "out_of_reach", None

    idle_pose = forward_kinematics(chain, context.idle_q)
    approach_len = float(np.linalg.norm(pre_pose.translation - idle_pose.translation))
    n_approach = max(2, int(np.ceil(approach_len / APPROACH_WAYPOINT_SPACING_MM)) + 1)
    approach = linear_cartesian_path(
        chain,
        context.idle_q,
        pre_pose,
        n_approach,
        scene=scene,
        mount=mount,
        allowed_needle_penetration=APPROACH_PENETRATION_ALLOWANCE_MM,
        ik_iterations=_PATH_IK_ITERATIONS,
    )
    if not approach.ok:
        return False, approach.reason, None

    stroke_len = trajectory.insertion_depth + PRE_INSERTION_STANDOFF_MM
    n_stroke = max(2, int(np.ceil(stroke_len / STROKE_WAYPOINT_SPACING_MM)) + 1)
    stroke = linear_cartesian_path(
        chain,
        approach.waypoints[-1],
        end_pose,
        n_stroke,
        scene=scene,
        mount=mount,
        allowed_needle_penetration=trajectory.insertion_depth + NEEDLE_PENETRATION_SLACK_MM,
        ik_iterations=_PATH_IK_ITERATIONS,
    )
    if not stroke.ok:
        return False, stroke.reason, None
    return True, "none", (approach.waypoints, stroke.waypoints)


def evaluate_candidate(point, target, volume, context):
    """Score one candidate: max HU along the path plus robot feasibility."""
    if context is None:
        raise ContextMissing("candidate evaluation requires a robot context")
    point = np.asarray(point, dtype=float).reshape(3)
    hu = max_hu_along_segment(volume, point, target.position)
    try:
        trajectory = NeedleTrajectory(target, point, max_hu=hu)
    except InvalidTrajectory:
        # closer to the target than the punch offset: nothing to command
        return InsertionCandidate(point, hu, False, "out_of_reach")
    feasible, reason, _ = check_trajectory(trajectory, context)
    return InsertionCandidate(point, hu, feasible, reason if not feasible else "none")


_JOB = None  # (points, target, volume, context) inherited by forked workers


def _eval_chunk(bounds):
    lo, hi = bounds
    points, target, volume, context = _JOB
    return [evaluate_candidate(points[i], target, volume, context) for i in range(lo, hi)]


def build_colormap(
    target,
    volume,
    skin,
    context,
    workers=1,
    spacing=DEFAULT_CANDIDATE_SPACING_MM,
    progress=None,
):
    """Evaluate every candidate for a target, optionally in parallel.

    The result is bitwise identical for any worker count (each candidate is
    scored independently and merged in index order); generation_time is the
    wall-clock duration.
    """
    global _JOB
    if context is None:
        raise ContextMissing("colormap generation requires a robot context")
    if workers < 1:
        raise InvalidInput("workers must be >= 1")
    started = time.perf_counter()
    points = candidate_insertion_points(skin, target, spacing)
    if context.scene is not None:
        context.scene.skin_index()  # build before forking so workers share it

    n = len(points)
    results = [None] * n
    if workers == 1:
        done = 0
        for i in range(n):
            results[i] = evaluate_candidate(points[i], target, volume, context)
            done += 1
            if progress is not None and (done % 16 == 0 or done == n):
                progress(done / n)
    else:
        _JOB = (points, target, volume, context)
        try:
            chunk = max(1, min(16, n // (workers * 4) or 1))
            bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(processes=min(workers, os.cpu_count() or 1)) as pool:
                done = 0
                for (lo, hi), chunk_result in zip(bounds, pool.imap(_eval_chunk, bounds)):
                    results[lo:hi] = chunk_result
                    done = hi
                    if progress is not None:
                        progress(done / n)
        finally:
            _JOB = None
    return Colormap(target.id, results, spacing, time.perf_counter() - started)


class ExecutablePlan:
    """Timed joint-space plan: approach, insertion stroke, retreat to idle.

    `waypoints` is (n, 7) degrees; `times_s` the cumulative schedule at the
    joint speed limit; `stages` maps stage name -> (start, end) indices
    (end exclusive).
    """

    def __init__(self, waypoints, times_s, stages):
        self.waypoints = np.asarray(waypoints, dtype=float)
        self.times_s = np.asarray(times_s, dtype=float)
        self.stages = dict(stages)

    @property
    def duration_s(self):
        return float(self.times_s[-1])

    def sample(self, t_s):
        """Joint vector at a simulation time (linear interpolation)."""
        t = np.clip(t_s, 0.0, self.duration_s)
        return np.array(
            [np.interp(t, self.times_s, self.waypoints[:, j]) for j in range(7)]
        )


def plan_insertion(trajectory, context):
    """Executable plan for a feasible trajectory.

    Approach (idle -> pre-insertion), stroke (to commanded depth), retreat
    (reverse back through the same waypoints to idle), time-parameterized at
    <= 10 deg/s per joint. Deterministic; replaying the same trajectory
    returns an identical plan.
    """
    feasible, reason, paths = check_trajectory(trajectory, context)
    if not feasible:
        stage = "approach" if reason in ("ik_failure", "out_of_reach", "joint_jump") else "stroke"
        raise PlanningFailed(f"trajectory infeasible: {reason}", stage=reason)
    approach, stroke = paths
    forward = list(approach) + list(stroke[1:])
    retreat = list(reversed(forward))[1:]
    waypoints = np.array(forward + retreat)
    times = np.zeros(len(waypoints))
    for k in range(1, len(waypoints)):
        jump = float(np.max(np.abs(waypoints[k] - waypoints[k - 1])))
        times[k] = times[k - 1] + max(jump / MAX_JOINT_SPEED_DEG_S, 1e-3)
    n_app, n_fwd = len(approach), len(forward)
    stages = {
        "approach": (0, n_app),
        "stroke": (n_app, n_fwd),
        "retreat": (n_fwd, len(waypoints)),
    }
    return ExecutablePlan(waypoints, times, stages)


def needle_tip_in_ct(q_deg, context):
    """Needle tip position in CT for a joint vector, via FK and the mount."""
    eef = forward_kinematics(context.chain, q_deg)
    tip_b = eef.apply(context.mount.tip_in_eef())
    return invert(context.b_to_ct).apply(tip_b)


def default_base_placement(skin):
    """Robot base pose in CT derived from the skin bounds: the mobile
    platform stands on the +x side of the table, below table level, base z
    up (+y in CT). The 550 mm lateral clearance keeps near-side EEF poses
    away from the robot's own column."""
    lo = skin.vertices.min(axis=0)
    hi = skin.vertices.max(axis=0)
    center = (lo + hi) / 2.0
    base_pos = np.array([hi[0] + 740.0, lo[1] - 150.0, center[2]])
    # base x faces the body (-x in CT), base z points up (+y in CT)
    r_ct_b = np.column_stack([[-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    return invert(RigidTransform(r_ct_b, base_pos, "CT", "B"))


def default_robot_context(skin, chain=None, mount=None, b_to_ct=None, with_gantry=True):
    """Planning context with documented default scene geometry.

    The gantry slab sits past the +z end of the body; a table box lies
    under it (-y). Both give the colormap realistic infeasible regions.
    """
    from .robot import CollisionScene, default_chain, default_needle_mount

    chain = chain or default_chain()
    mount = mount or default_needle_mount()
    if b_to_ct is None:
        b_to_ct = default_base_placement(skin)
    lo = skin.vertices.min(axis=0)
    hi = skin.vertices.max(axis=0)
    gantry = None
    if with_gantry:
        # the table is withdrawn from the bore for insertion; the gantry
        # housing sits past the +z end of the body
        gantry = (
            np.array([lo[0] - 400.0, lo[1] - 150.0, hi[2] + 200.0]),
            np.array([hi[0] + 400.0, hi[1] + 350.0, hi[2] + 400.0]),
        )
    table = (
        np.array([lo[0] - 80.0, lo[1] - 100.0, lo[2] - 100.0]),
        np.array([hi[0] + 80.0, lo[1] - 25.0, hi[2] + 100.0]),
    )
    scene = CollisionScene(skin, gantry=gantry, static_boxes=[table], b_to_ct=b_to_ct)
    return RobotContext(chain, mount, scene, b_to_ct)


def save_colormap(colormap, path):
    """Colormap export: one candidate per line (xyz, max_hu, feasible, reason)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"# colormap target={colormap.target_id} spacing_mm={colormap.spacing:.9g}\n"
        )
        fh.write("# columns: x_mm y_mm z_mm max_hu feasible reason\n")
        for c in colormap.candidates:
            p = c.surface_point
            fh.write(
                f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c.max_hu:.4f} "
                f"{1 if c.feasible else 0} {c.fail_reason}\n"
            )


def load_colormap(path):
    target_id, spacing = "", DEFAULT_CANDIDATE_SPACING_MM
    candidates = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# colormap"):
                for tok in line.split()[2:]:
                    key, _, value = tok.partition("=")
                    if key == "target":
                        target_id = value
                    elif key == "spacing_mm":
                        spacing = float(value)
                continue
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            candidates.append(
                InsertionCandidate(
                    [float(parts[0]), float(parts[1]), float(parts[2])],
                    float(parts[3]),
                    parts[4] == "1",
                    parts[5],
                )
            )
    return Colormap(target_id, candidates, spacing, 0.0)
