"""Digital twin of a 7-DOF serial arm: forward/inverse kinematics, joint
limits, a capsule collision model, the needle mount transform, and
straight-line Cartesian path generation.

Joint angles are degrees at every public boundary. DH rows follow the
modified convention: T_i = RotX(alpha_i) * TransX(a_i) * RotZ(theta_i +
offset_i) * TransZ(d_i), so a row's (a, alpha) belong to the preceding
link and the joint axis is the local z after the (alpha, a) pre-transform.
"""

import importlib.resources

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .collision import (
    MeshDistanceIndex,
    capsule_box_penetration,
    segment_pairs_distance,
)
from .errors import InvalidInput
from .geometry import RigidTransform, compose, invert, rotation_about_axis

N_JOINTS = 7

IK_POSITION_TOL_MM = 0.1
IK_ORIENTATION_TOL_DEG = 0.05
IK_MAX_ITERATIONS = 500
IK_DAMPING = 0.05
IK_STEP_CLAMP_DEG = 5.0
_IK_ROT_WEIGHT = 100.0  # balances mm position rows against rad rotation rows

PATH_MAX_JOINT_JUMP_DEG = 10.0
_PATH_MAX_DENSIFY = 4

EEF_BODY_RADIUS_MM = 30.0

# fixed fallback seeds for IK retries, degrees
AUX_IK_SEEDS = np.array(
    [
        [0, 30, 0, -60, 0, 60, 0],
        [0, -30, 0, 60, 0, -60, 0],
        [45, 45, 0, -90, 0, 45, 0],
        [-45, 45, 0, -90, 0, 45, 0],
        [90, 30, 0, -60, 0, 90, 0],
        [-90, 30, 0, -60, 0, 90, 0],
        [0, 60, 30, -100, -30, 70, 0],
        [0, -60, -30, 100, 30, -70, 0],
    ],
    dtype=float,
)


class LinkCapsule:
    """Collision capsule rigidly attached to a link frame (0 = base)."""

    __slots__ = ("link", "p0", "p1", "radius")

    def __init__(self, link, p0, p1, radius):
        self.link = int(link)
        self.p0 = np.asarray(p0, dtype=float).reshape(3)
        self.p1 = np.asarray(p1, dtype=float).reshape(3)
        self.radius = float(radius)
        if self.radius <= 0:
            raise InvalidInput("capsule radius must be positive")
        if not 0 <= self.link <= N_JOINTS:
            raise InvalidInput("capsule link index out of range")


class KinematicChain:
    """7-joint modified-DH chain with limits and link collision capsules."""

    def __init__(self, dh_rows, limits_deg, capsules):
        dh = np.asarray(dh_rows, dtype=float).reshape(-1, 4)
        if len(dh) != N_JOINTS:
            raise InvalidInput(f"expected {N_JOINTS} DH rows, got {len(dh)}")
        limits = np.asarray(limits_deg, dtype=float).reshape(-1, 2)
        if len(limits) != N_JOINTS:
            raise InvalidInput(f"expected {N_JOINTS} joint limits")
        if np.any(limits[:, 0] >= limits[:, 1]):
            raise InvalidInput("joint limit min must be below max")
        self.dh = dh
        self.limits_deg = limits
        self.capsules = list(capsules)
        # constants per joint: pre-transform RotX(alpha)*TransX(a), offset, d
        self._pre = np.zeros((N_JOINTS, 4, 4))
        for i, (a, alpha, d, off) in enumerate(dh):
            al = np.radians(alpha)
            ca, sa = np.cos(al), np.sin(al)
            self._pre[i] = np.array(
                [
                    [1.0, 0.0, 0.0, a],
                    [0.0, ca, -sa, 0.0],
                    [0.0, sa, ca, 0.0],
                    [0.0, 0.0, 0.0, 1.0],
                ]
            )
        self._d = dh[:, 2].copy()
        self._offset_rad = np.radians(dh[:, 3])
        self._zero_length_link = {
            c.link: bool(np.linalg.norm(c.p1 - c.p0) < 1e-9) for c in self.capsules
        }

    def link_pair_excluded(self, la, lb):
        """Self-collision exclusion: adjacent links, or links whose
        intermediates are all zero-length (their capsules share an endpoint
        structurally, e.g. across a spherical shoulder/elbow/wrist)."""
        la, lb = min(la, lb), max(la, lb)
        if lb - la <= 1:
            return True
        return all(self._zero_length_link.get(mid, False) for mid in range(la + 1, lb))

    @property
    def max_reach_mm(self):
        return float(np.sum(np.abs(self.dh[:, 0])) + np.sum(np.abs(self.dh[:, 2])))

    def clamp_to_limits(self, q_deg):
        return np.clip(q_deg, self.limits_deg[:, 0], self.limits_deg[:, 1])

    def within_limits(self, q_deg, tol_deg=1e-9):
        q = np.asarray(q_deg, dtype=float)
        return bool(
            np.all(q >= self.limits_deg[:, 0] - tol_deg)
            and np.all(q <= self.limits_deg[:, 1] + tol_deg)
        )


def validate_joints(chain, q_deg):
    """NaN and limit check; raises InvalidInput on NaN, returns limit flag."""
    q = np.asarray(q_deg, dtype=float).reshape(-1)
    if len(q) != N_JOINTS:
        raise InvalidInput(f"joint vector must have {N_JOINTS} entries")
    if np.any(np.isnan(q)):
        raise InvalidInput("joint vector contains NaN")
    return chain.within_limits(q)


def _fk_pass(chain, q_rad):
    """Joint frames A (before RotZ) and cumulative frames C (after each link).

    Returns (A, C): A[i] carries joint i's axis (local z) and origin, C has
    8 entries with C[0] = identity (base) and C[7] = B->EEF.
    """
    a_frames = np.empty((N_JOINTS, 4, 4))
    c_frames = np.empty((N_JOINTS + 1, 4, 4))
    c_frames[0] = np.eye(4)
    cur = c_frames[0]
    for i in range(N_JOINTS):
        a_i = cur @ chain._pre[i]
        a_frames[i] = a_i
        th = q_rad[i] + chain._offset_rad[i]
        c, s = np.cos(th), np.sin(th)
        link = np.array(
            [
                [c, -s, 0.0, 0.0],
                [s, c, 0.0, 0.0],
                [0.0, 0.0, 1.0, chain._d[i]],
                [0.0, 0.0, 0.0, 1.0],
            ]
        )
        cur = a_i @ link
        c_frames[i + 1] = cur
    return a_frames, c_frames


def fk_matrices(chain, q_deg):
    """Cumulative base->frame matrices, (8, 4, 4); last entry is B->EEF."""
    q = np.asarray(q_deg, dtype=float).reshape(N_JOINTS)
    if np.any(np.isnan(q)):
        raise InvalidInput("joint vector contains NaN")
    _, c_frames = _fk_pass(chain, np.radians(q))
    return c_frames


def forward_kinematics(chain, q_deg):
    """Flange pose for a joint vector (deterministic; no limit checks)."""
    m = fk_matrices(chain, q_deg)[-1]
    return RigidTransform(m[:3, :3], m[:3, 3], "B", "EEF")


def _rotation_error_vector(r_target, r_current):
    """Rotation difference as a base-frame rotation vector (radians)."""
    re = r_target @ r_current.T
    cos_angle = np.clip((np.trace(re) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    axis_raw = np.array([re[2, 1] - re[1, 2], re[0, 2] - re[2, 0], re[1, 0] - re[0, 1]])
    if angle < 1e-7:
        return 0.5 * axis_raw
    n = np.linalg.norm(axis_raw)
    if n < 1e-12:
        # angle near pi: extract axis from the symmetric part
        w, v = np.linalg.eigh(re)
        axis = v[:, np.argmax(w)]
        return angle * axis
    return angle * (axis_raw / n)


_IK_POS_ERR_CLAMP_MM = 60.0
_IK_ROT_ERR_CLAMP_RAD = 0.35
_IK_NULLSPACE_GAIN = 0.05


def _ik_single(chain, target_r, target_p, seed_deg, pos_tol, ori_tol_deg, max_iterations, damping, step_clamp_deg):
    q = np.radians(chain.clamp_to_limits(np.asarray(seed_deg, dtype=float)))
    lim_lo = np.radians(chain.limits_deg[:, 0])
    lim_hi = np.radians(chain.limits_deg[:, 1])
    q_mid = 0.5 * (lim_lo + lim_hi)
    step_clamp = np.radians(step_clamp_deg)
    ori_tol = np.radians(ori_tol_deg)
    lam2 = damping * damping
    eye6 = np.eye(6)
    eye7 = np.eye(N_JOINTS)
    for _ in range(max_iterations):
        a_frames, c_frames = _fk_pass(chain, q)
        eef = c_frames[-1]
        p = eef[:3, 3]
        pos_err = target_p - p
        rot_err = _rotation_error_vector(target_r, eef[:3, :3])
        if np.linalg.norm(pos_err) < pos_tol and np.linalg.norm(rot_err) < ori_tol:
            return np.degrees(q)
        jac = np.empty((6, N_JOINTS))
        for i in range(N_JOINTS):
            z = a_frames[i][:3, 2]
            jac[:3, i] = np.cross(z, p - a_frames[i][:3, 3])
            jac[3:, i] = z
        # clamped-error step keeps far targets from slamming into limits
        pe = pos_err
        pn = np.linalg.norm(pe)
        if pn > _IK_POS_ERR_CLAMP_MM:
            pe = pe * (_IK_POS_ERR_CLAMP_MM / pn)
        re = rot_err
        rn = np.linalg.norm(re)
        if rn > _IK_ROT_ERR_CLAMP_RAD:
            re = re * (_IK_ROT_ERR_CLAMP_RAD / rn)
        err = np.concatenate([pe, _IK_ROT_WEIGHT * re])
        jw = jac.copy()
        jw[3:, :] *= _IK_ROT_WEIGHT
        jt_inv = jw.T @ np.linalg.inv(jw @ jw.T + lam2 * eye6)
        dq = jt_inv @ err
        # damped nullspace pull toward joint-range centers (redundancy + limit escape)
        dq += _IK_NULLSPACE_GAIN * (eye7 - jt_inv @ jw) @ (q_mid - q)
        dq = np.clip(dq, -step_clamp, step_clamp)
        q = np.clip(q + dq, lim_lo, lim_hi)
    return None


def inverse_kinematics(
    chain,
    target,
    seed,
    pos_tol=IK_POSITION_TOL_MM,
    ori_tol_deg=IK_ORIENTATION_TOL_DEG,
    max_iterations=IK_MAX_ITERATIONS,
    damping=IK_DAMPING,
    step_clamp_deg=IK_STEP_CLAMP_DEG,
    aux_seeds=True,
):
    """Damped least-squares IK; returns a joint vector (deg) or None.

    Success requires position error < pos_tol and orientation error <
    ori_tol within max_iterations, with limits satisfied (enforced by
    clamping). On failure, retries from 8 fixed auxiliary seeds.
    Deterministic for identical (target, seed).
    """
    target_r = target.rotation
    target_p = target.translation
    if np.linalg.norm(target_p) > chain.max_reach_mm:
        return None
    seeds = [np.asarray(seed, dtype=float)]
    if aux_seeds:
        seeds.extend(AUX_IK_SEEDS)
    for s in seeds:
        q = _ik_single(
            chain, target_r, target_p, s, pos_tol, ori_tol_deg, max_iterations, damping, step_clamp_deg
        )
        if q is not None:
            return q
    return None


class NeedleMount:
    """Rigid EEF->needle transform plus needle geometry.

    The needle runs from the N-frame origin along its +z axis; the tip sits
    at (0, 0, needle_length) in N coordinates.
    """

    def __init__(self, eef_to_needle, needle_length, needle_radius):
        if (eef_to_needle.from_frame, eef_to_needle.to_frame) != ("EEF", "N"):
            raise InvalidInput("mount transform must be EEF->N")
        if needle_length <= 0:
            raise InvalidInput("needle_length must be positive")
        if needle_radius <= 0:
            raise InvalidInput("needle_radius must be positive")
        self.eef_to_needle = eef_to_needle
        self.needle_length = float(needle_length)
        self.needle_radius = float(needle_radius)

    def tip_in_eef(self):
        return self.eef_to_needle.apply([0.0, 0.0, self.needle_length])

    def base_in_eef(self):
        return self.eef_to_needle.apply([0.0, 0.0, 0.0])


def default_needle_mount(needle_length=130.0, needle_radius=1.2, standoff=60.0):
    """Needle clamped `standoff` mm ahead of the flange, along flange z."""
    mount_t = RigidTransform(np.eye(3), [0.0, 0.0, standoff], "EEF", "N")
    return NeedleMount(mount_t, needle_length, needle_radius)


def needle_pose_to_eef(tip_ct, direction_ct, chain_b_to_ct, mount, seed_rotation_ct=None):
    """Flange pose placing the needle tip at a CT point along a CT direction.

    Roll about the needle axis is free. With `seed_rotation_ct` (a CT->N
    rotation, typically from the seed configuration's FK) the roll nearest
    that orientation is chosen; otherwise a fixed world reference (x,
    falling back to y near alignment) makes the result deterministic.
    """
    d = np.asarray(direction_ct, dtype=float).reshape(3)
    n = np.linalg.norm(d)
    if abs(n - 1.0) > 1e-6:
        raise InvalidInput("insertion direction must be unit length")
    d = d / n
    tip = np.asarray(tip_ct, dtype=float).reshape(3)
    if seed_rotation_ct is not None:
        # swing-only: the minimal rotation carrying the seed needle axis
        # onto d, applied to the seed frame (zero twist = nearest roll)
        rs = np.asarray(seed_rotation_ct, dtype=float).reshape(3, 3)
        zs = rs[:, 2]
        axis = np.cross(zs, d)
        s = np.linalg.norm(axis)
        c = float(zs @ d)
        if s < 1e-12:
            if c > 0:
                r_ct_n = rs
            else:
                # antipodal: flip about the seed x-axis (deterministic)
                flip = rotation_about_axis(rs[:, 0], 180.0)
                r_ct_n = flip @ rs
        else:
            swing = rotation_about_axis(axis / s, np.degrees(np.arctan2(s, c)))
            r_ct_n = swing @ rs
    else:
        ref = np.array([1.0, 0.0, 0.0])
        if abs(ref @ d) > 0.999:
            ref = np.array([0.0, 1.0, 0.0])
        x_axis = ref - (ref @ d) * d
        x_axis /= np.linalg.norm(x_axis)
        y_axis = np.cross(d, x_axis)
        r_ct_n = np.column_stack([x_axis, y_axis, d])
    origin = tip - mount.needle_length * d
    ct_to_n = RigidTransform(r_ct_n, origin, "CT", "N")
    return compose(compose(chain_b_to_ct, ct_to_n), invert(mount.eef_to_needle))


def needle_rotation_for_config(chain, q_deg, chain_b_to_ct, mount):
    """CT->N rotation realized by a configuration; used as a roll seed."""
    eef = fk_matrices(chain, q_deg)[-1]
    r_b_n = eef[:3, :3] @ mount.eef_to_needle.rotation
    return chain_b_to_ct.rotation.T @ r_b_n


class CollisionScene:
    """Static collision geometry in the CT frame.

    `gantry` and `static_boxes` are (lo, hi) axis-aligned boxes; `b_to_ct`
    expresses where the robot base stands relative to the scene.
    """

    def __init__(self, skin, gantry=None, static_boxes=(), b_to_ct=None):
        if skin is None and gantry is None and not static_boxes:
            raise InvalidInput("collision scene is empty")
        self.skin = skin
        self.gantry = None if gantry is None else (np.asarray(gantry[0], float), np.asarray(gantry[1], float))
        self.static_boxes = [(np.asarray(lo, float), np.asarray(hi, float)) for lo, hi in static_boxes]
        self.b_to_ct = b_to_ct
        self._skin_index = None

    def skin_index(self):
        if self._skin_index is None and self.skin is not None:
            self._skin_index = MeshDistanceIndex(self.skin)
        return self._skin_index


class CollisionPair:
    __slots__ = ("name_a", "name_b", "penetration")

    def __init__(self, name_a, name_b, penetration):
        self.name_a = name_a
        self.name_b = name_b
        self.penetration = float(penetration)

    def __repr__(self):
        return f"CollisionPair({self.name_a}/{self.name_b}, {self.penetration:.2f}mm)"


class CollisionReport:
    """Colliding pairs with penetration depths; needle/skin contact within
    the allowance is reported separately, not as a collision."""

    def __init__(self, pairs, needle_skin_penetration, allowed_needle_penetration):
        self.pairs = pairs
        self.needle_skin_penetration = float(needle_skin_penetration)
        self.allowed_needle_penetration = float(allowed_needle_penetration)

    @property
    def colliding(self):
        return len(self.pairs) > 0

    def __repr__(self):
        return f"CollisionReport(pairs={self.pairs}, needle_skin={self.needle_skin_penetration:.2f}mm)"


def _capsule_mesh_contact(index, p0, p1, radius):
    """(penetration, axis_inside_depth): surface-proximity penetration and
    the deepest axis travel inside the mesh (both 0 when clear)."""
    d_surf = index.segment_distance(p0, p1, cutoff=radius)
    pen_surface = max(0.0, radius - d_surf) if np.isfinite(d_surf) else 0.0
    crossings = index.segment_crossings(p0, p1)
    length = float(np.linalg.norm(p1 - p0))
    inside_depth = 0.0
    if len(crossings) or pen_surface > 0.0:
        p0_inside = index.contains(p0)
        ts = [0.0] + list(crossings) + [1.0]
        inside = p0_inside
        for k in range(len(ts) - 1):
            if inside:
                inside_depth = max(inside_depth, (ts[k + 1] - ts[k]) * length)
            inside = not inside
    elif length > 0 and index.contains(p0):
        inside_depth = length  # fully inside, no surface crossing
    return pen_surface, inside_depth


def check_collision(chain, q_deg, mount, scene, allowed_needle_penetration=0.0):
    """Capsule-vs-mesh and capsule-vs-box tests for every link + EEF + needle.

    The needle capsule alone may penetrate the skin mesh up to
    allowed_needle_penetration (measured along its axis); every other pair
    with positive penetration is reported as a collision.
    """
    frames = fk_matrices(chain, q_deg)
    b_to_ct = scene.b_to_ct if scene.b_to_ct is not None else RigidTransform.identity("B", "CT")
    ct_from_b = invert(b_to_ct)

    capsules = [(f"link{c.link}", c.p0, c.p1, c.radius, c.link) for c in chain.capsules]
    needle_base = mount.base_in_eef()
    needle_tip = mount.tip_in_eef()
    capsules.append(("eef", np.zeros(3), needle_base, EEF_BODY_RADIUS_MM, N_JOINTS))
    capsules.append(("needle", needle_base, needle_tip, mount.needle_radius, N_JOINTS))

    world = []
    for name, p0, p1, radius, link in capsules:
        m = frames[link]
        w0 = ct_from_b.apply(m[:3, :3] @ p0 + m[:3, 3])
        w1 = ct_from_b.apply(m[:3, :3] @ p1 + m[:3, 3])
        world.append((name, w0, w1, radius, link))

    pairs = []
    needle_skin_pen = 0.0
    index = scene.skin_index()
    boxes = []
    if scene.gantry is not None:
        boxes.append(("gantry", scene.gantry))
    boxes.extend((f"box{i}", b) for i, b in enumerate(scene.static_boxes))

    for name, p0, p1, radius, _ in world:
        if index is not None:
            pen_surface, inside_depth = _capsule_mesh_contact(index, p0, p1, radius)
            if name == "needle":
                needle_skin_pen = max(inside_depth, pen_surface)
                if needle_skin_pen > allowed_needle_penetration:
                    pairs.append(CollisionPair("needle", "skin", needle_skin_pen))
            else:
                pen = max(pen_surface, inside_depth + radius if inside_depth > 0 else 0.0)
                if pen > 0.0:
                    pairs.append(CollisionPair(name, "skin", pen))
        for bname, (lo, hi) in boxes:
            pen = capsule_box_penetration(p0, p1, radius, lo, hi)
            if pen > 0.0:
                pairs.append(CollisionPair(name, bname, pen))

    # self collision: capsule pairs, structurally adjacent links excluded
    pair_idx = [
        (i, j)
        for i in range(len(world))
        for j in range(i + 1, len(world))
        if not chain.link_pair_excluded(world[i][4], world[j][4])
    ]
    if pair_idx:
        a0 = np.array([world[i][1] for i, _ in pair_idx])
        a1 = np.array([world[i][2] for i, _ in pair_idx])
        b0 = np.array([world[j][1] for _, j in pair_idx])
        b1 = np.array([world[j][2] for _, j in pair_idx])
        dists = segment_pairs_distance(a0, a1, b0, b1)
        for (i, j), d in zip(pair_idx, dists):
            ra, rb = world[i][3], world[j][3]
            if d < ra + rb:
                pairs.append(CollisionPair(world[i][0], world[j][0], ra + rb - d))

    return CollisionReport(pairs, needle_skin_pen, allowed_needle_penetration)


class PathResult:
    """Joint-space path or a failure reason (ik_failure|collision|joint_jump)."""

    __slots__ = ("waypoints", "reason")

    def __init__(self, waypoints, reason):
        self.waypoints = waypoints
        self.reason = reason

    @property
    def ok(self):
        return self.waypoints is not None


def _interpolate_poses(start_pose, goal_pose, n):
    rots = Rotation.from_matrix(np.stack([start_pose.rotation, goal_pose.rotation]))
    slerp = Slerp([0.0, 1.0], rots)
    ts = np.linspace(0.0, 1.0, n)
    rs = slerp(ts).as_matrix()
    ps = start_pose.translation + ts[:, None] * (goal_pose.translation - start_pose.translation)
    return [
        RigidTransform(rs[k], ps[k], start_pose.from_frame, start_pose.to_frame)
        for k in range(n)
    ]


def linear_cartesian_path(
    chain,
    start_q,
    goal_pose,
    waypoints,
    scene=None,
    mount=None,
    allowed_needle_penetration=0.0,
    max_jump_deg=PATH_MAX_JOINT_JUMP_DEG,
    ik_iterations=IK_MAX_ITERATIONS,
):
    """Straight-line Cartesian path from a start configuration to a goal pose.

    EEF position interpolates linearly, orientation along the shortest arc;
    each waypoint is solved by IK seeded with the previous one. Fails with a
    reason code when any waypoint misses IK, collides, or the joint-space
    jump stays above max_jump_deg after densifying up to 4x.
    """
    if waypoints < 2:
        raise InvalidInput("need at least 2 waypoints")
    start_q = np.asarray(start_q, dtype=float).reshape(N_JOINTS)
    start_pose = forward_kinematics(chain, start_q)

    densify = 1
    while True:
        n = (waypoints - 1) * densify + 1
        poses = _interpolate_poses(start_pose, goal_pose, n)
        qs = [start_q]
        failed = None
        for pose in poses[1:]:
            q = inverse_kinematics(
                chain, pose, qs[-1], max_iterations=ik_iterations, aux_seeds=False
            )
            if q is None:
                failed = "ik_failure"
                break
            jump = np.max(np.abs(q - qs[-1]))
            if jump > max_jump_deg:
                failed = "joint_jump"
                # a 4x densify shrinks jumps ~4x; configuration flips beyond
                # that can never come down within the allowed budget
                if jump > max_jump_deg * (_PATH_MAX_DENSIFY + 0.5):
                    densify = _PATH_MAX_DENSIFY
                break
            qs.append(q)
        if failed == "joint_jump" and densify < _PATH_MAX_DENSIFY:
            densify *= 2
            continue
        if failed is not None:
            return PathResult(None, failed)
        break

    if scene is not None and mount is not None:
        for q in qs:
            report = check_collision(chain, q, mount, scene, allowed_needle_penetration)
            if report.colliding:
                return PathResult(None, "collision")
    return PathResult(qs, "")


# published LBR Med 14 R820-style link offsets; limits alternate 170/120 deg
_LBR_D = (360.0, 0.0, 420.0, 0.0, 400.0, 0.0, 126.0)
_LBR_ALPHA = (0.0, -90.0, 90.0, 90.0, -90.0, -90.0, 90.0)
_LBR_CAPSULE_RADII = (75.0, 75.0, 65.0, 60.0, 55.0, 50.0, 45.0, 40.0)


def lbr_like_chain():
    """Default 7-DOF chain approximating a medical lightweight arm."""
    dh = [[0.0, _LBR_ALPHA[i], _LBR_D[i], 0.0] for i in range(N_JOINTS)]
    limits = [[-170.0, 170.0] if i % 2 == 0 else [-120.0, 120.0] for i in range(N_JOINTS)]
    capsules = []
    for link in range(N_JOINTS + 1):
        # capsule spans this frame's origin to the next joint origin, which
        # for modified DH is RotX(alpha) @ (a, 0, d) of the next row
        if link < N_JOINTS:
            a, alpha, d, _ = dh[link]
            al = np.radians(alpha)
            p1 = np.array([a, -np.sin(al) * d, np.cos(al) * d])
        else:
            p1 = np.zeros(3)
        capsules.append(LinkCapsule(link, np.zeros(3), p1, _LBR_CAPSULE_RADII[link]))
    return KinematicChain(dh, limits, capsules)


def save_chain(chain, path):
    """Chain definition file: DH rows, limits, capsules (UTF-8 table)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# dh a_mm alpha_deg d_mm theta_offset_deg\n")
        for row in chain.dh:
            fh.write("dh " + " ".join(f"{x:.9g}" for x in row) + "\n")
        fh.write("# limit min_deg max_deg (one line per joint)\n")
        for lo, hi in chain.limits_deg:
            fh.write(f"limit {lo:.9g} {hi:.9g}\n")
        fh.write("# capsule link p0x p0y p0z p1x p1y p1z radius_mm\n")
        for c in chain.capsules:
            nums = " ".join(f"{x:.9g}" for x in np.concatenate([c.p0, c.p1]))
            fh.write(f"capsule {c.link} {nums} {c.radius:.9g}\n")


def load_chain(path):
    dh, limits, capsules = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            kind, vals = parts[0], [float(x) for x in parts[1:]]
            if kind == "dh" and len(vals) == 4:
                dh.append(vals)
            elif kind == "limit" and len(vals) == 2:
                limits.append(vals)
            elif kind == "capsule" and len(vals) == 8:
                capsules.append(LinkCapsule(int(vals[0]), vals[1:4], vals[4:7], vals[7]))
            else:
                raise InvalidInput(f"{path}:{line_no}: bad chain record {line.strip()!r}")
    return KinematicChain(dh, limits, capsules)


def default_chain():
    """Chain from the packaged `lbr_like.chain` definition file."""
    ref = importlib.resources.files("needletwin") / "data" / "lbr_like.chain"
    with importlib.resources.as_file(ref) as path:
        return load_chain(path)
