"""Calibration solvers producing every edge of the base-to-CT transform chain:
AX=ZB hand-eye (24-parameter linear least squares), pivot calibration,
rigid point-set ICP, and steel-ball grid pose detection in CT volumes.
"""

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateInput,
    DegenerateMotion,
    FrameError,
    InsufficientMarkers,
    InvalidInput,
)
from .geometry import RigidTransform, compose, nearest_rotation
from .volume import (
    DEFAULT_BALL_THRESHOLD_HU,
    DEFAULT_MIN_BLOB_VOXELS,
    segment_high_density_blobs,
)

GRID_ROWS = 5
GRID_COLS = 4
GRID_SPACING_MM = (25.0, 30.0)
BALL_RADII_MM = (2.0, 5.0)

ICP_MAX_ITERATIONS = 200
ICP_CONVERGENCE_MM = 1e-6
_KDTREE_MIN_POINTS = 50  # brute-force correspondence below this


class PoseSample:
    """One static capture: robot flange pose + tracked marker pose."""

    __slots__ = ("robot_pose", "tracker_pose")

    def __init__(self, robot_pose, tracker_pose):
        if (robot_pose.from_frame, robot_pose.to_frame) != ("B", "EEF"):
            raise FrameError("robot_pose must be B->EEF")
        self.robot_pose = robot_pose
        self.tracker_pose = tracker_pose


class GridModel:
    """CNC-machined 5x4 steel-ball grid in its own (SB) frame.

    Ball radii mix 2 mm and 5 mm spheres; the asymmetric placement of the
    5 mm balls breaks the four planar symmetries of the rectangle.
    """

    def __init__(self, ball_centers, ball_radii):
        centers = np.asarray(ball_centers, dtype=float).reshape(-1, 3)
        radii = np.asarray(ball_radii, dtype=float).reshape(-1)
        if len(centers) != GRID_ROWS * GRID_COLS:
            raise InvalidInput(f"grid must have exactly {GRID_ROWS * GRID_COLS} balls")
        if len(radii) != len(centers):
            raise InvalidInput("one radius per ball required")
        if not np.all(np.isin(radii, BALL_RADII_MM)):
            raise InvalidInput(f"ball radii must be in {BALL_RADII_MM}")
        if not np.any(radii == max(BALL_RADII_MM)):
            raise InvalidInput("at least one large ball is needed to break symmetry")
        self._check_spacing(centers)
        self.ball_centers = centers
        self.ball_radii = radii

    @staticmethod
    def _check_spacing(centers):
        grid = centers.reshape(GRID_ROWS, GRID_COLS, 3)
        du = np.diff(grid, axis=0)[..., :]
        dv = np.diff(grid, axis=1)[..., :]
        if not (
            np.allclose(np.linalg.norm(du, axis=2), GRID_SPACING_MM[0], atol=1e-9)
            and np.allclose(np.linalg.norm(dv, axis=2), GRID_SPACING_MM[1], atol=1e-9)
        ):
            raise InvalidInput("grid spacing must be exactly 25 x 30 mm")

    @property
    def large_ball_indices(self):
        return np.flatnonzero(self.ball_radii == max(BALL_RADII_MM))


def default_grid_model():
    """Grid centered on the SB origin in the z=0 plane.

    Three 5 mm balls form an L in one corner; every planar symmetry moves
    at least one of them, so orientation is unambiguous.
    """
    su, sv = GRID_SPACING_MM
    centers = []
    for i in range(GRID_ROWS):
        for j in range(GRID_COLS):
            centers.append(
                [
                    (i - (GRID_ROWS - 1) / 2.0) * su,
                    (j - (GRID_COLS - 1) / 2.0) * sv,
                    0.0,
                ]
            )
    radii = np.full(GRID_ROWS * GRID_COLS, min(BALL_RADII_MM))
    for i, j in ((0, 0), (1, 0), (0, 1)):
        radii[i * GRID_COLS + j] = max(BALL_RADII_MM)
    return GridModel(np.array(centers), radii)


def _pose_deltas_rank(samples):
    """Rank-3 check on relative rotation axes; single-axis motion is rank 1."""
    axes = []
    base = samples[0].robot_pose.rotation
    for s in samples[1:]:
        rel = base.T @ s.robot_pose.rotation
        angle = np.arccos(np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0))
        if angle < 1e-9:
            continue
        axis = np.array(
            [rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]]
        )
        n = np.linalg.norm(axis)
        if n > 1e-12:
            axes.append(axis / n)
    if not axes:
        return 0
    return np.linalg.matrix_rank(np.array(axes), tol=1e-6)


def qr24_hand_eye(samples):
    """Solve A_i X = Z B_i for all samples in one linear least-squares pass.

    A_i are robot poses (B->EEF), B_i tracker poses (C->marker); X is the
    EEF->marker unknown and Z the B->C unknown. The 24 unknowns are stacked
    as [vec(Rx), tx, vec(Rz), tz] (column-major vecs); rotation rows come
    from Ra Rx - Rz Rb = 0 via Kronecker identities, translation rows from
    Ra tx - Rz tb - tz = -ta. Both rotation blocks are projected to SO(3)
    afterwards, then the residual is recomputed on the projected solution.
    """
    if len(samples) < 3:
        raise DegenerateMotion(f"need at least 3 pose samples, got {len(samples)}")
    if _pose_deltas_rank(samples) < 2:
        raise DegenerateMotion(
            "robot rotations share a single axis; hand-eye translation along "
            "that axis is unobservable"
        )
    n = len(samples)
    m = np.zeros((12 * n, 24))
    rhs = np.zeros(12 * n)
    eye3 = np.eye(3)
    for k, s in enumerate(samples):
        ra, ta = s.robot_pose.rotation, s.robot_pose.translation
        rb, tb = s.tracker_pose.rotation, s.tracker_pose.translation
        r0 = 12 * k
        # vec(Ra Rx) = (I kron Ra) vec(Rx); vec(Rz Rb) = (Rb^T kron I) vec(Rz)
        m[r0 : r0 + 9, 0:9] = np.kron(eye3, ra)
        m[r0 : r0 + 9, 12:21] = -np.kron(rb.T, eye3)
        m[r0 + 9 : r0 + 12, 9:12] = ra
        m[r0 + 9 : r0 + 12, 12:21] = -np.kron(tb.reshape(1, 3), eye3)
        m[r0 + 9 : r0 + 12, 21:24] = -eye3
        rhs[r0 + 9 : r0 + 12] = -ta
    sol, _, rank, _ = np.linalg.lstsq(m, rhs, rcond=None)
    if rank < 24:
        raise DegenerateMotion(
            f"hand-eye system is rank deficient ({rank}/24); pose set does not "
            "constrain all unknowns"
        )
    rx = nearest_rotation(sol[0:9].reshape(3, 3, order="F"))
    tx = sol[9:12]
    rz = nearest_rotation(sol[12:21].reshape(3, 3, order="F"))
    tz = sol[21:24]
    x = RigidTransform(rx, tx, "EEF", samples[0].tracker_pose.to_frame)
    z = RigidTransform(rz, tz, "B", samples[0].tracker_pose.from_frame)
    sq = 0.0
    for s in samples:
        lhs = compose(s.robot_pose, x)
        rhs_t = compose(z, s.tracker_pose)
        sq += float(np.sum((lhs.translation - rhs_t.translation) ** 2))
    residual = float(np.sqrt(sq / n))
    return x, z, residual


def pivot_calibrate(poses):
    """Tool-tip offset from poses rotating about a fixed physical point.

    Solves R_i t + p_i = c for (t, c) by least squares; returns
    (tip_offset in EEF frame, pivot point in B frame, RMS residual).
    """
    if len(poses) < 4:
        raise DegenerateMotion(f"need at least 4 poses, got {len(poses)}")
    n = len(poses)
    m = np.zeros((3 * n, 6))
    rhs = np.zeros(3 * n)
    for k, pose in enumerate(poses):
        m[3 * k : 3 * k + 3, 0:3] = pose.rotation
        m[3 * k : 3 * k + 3, 3:6] = -np.eye(3)
        rhs[3 * k : 3 * k + 3] = -pose.translation
    s = np.linalg.svd(m, compute_uv=False)
    if s[-1] < 1e-6 * s[0]:
        raise DegenerateMotion(
            "pivot poses rotate about at most one axis; tip offset unobservable"
        )
    sol, _, _, _ = np.linalg.lstsq(m, rhs, rcond=None)
    tip, pivot = sol[0:3], sol[3:6]
    errs = [pose.rotation @ tip + pose.translation - pivot for pose in poses]
    residual = float(np.sqrt(np.mean(np.sum(np.square(errs), axis=1))))
    return tip, pivot, residual


def _kabsch(source, target):
    """Closed-form rigid fit mapping source onto target (same-length pairs)."""
    cs = source.mean(axis=0)
    ct = target.mean(axis=0)
    h = (source - cs).T @ (target - ct)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = ct - r @ cs
    return r, t


def icp_rigid(source, target, init, rms_history=None):
    """Iterative closest point: source points onto target points.

    Alternates nearest-neighbor correspondence with a closed-form rigid fit
    until the RMS improves by less than 1e-6 mm or 200 iterations; returns
    (RigidTransform with init's frames, rms, iterations). Pass a list as
    rms_history to record the per-iteration RMS (non-increasing).
    """
    source = np.asarray(source, dtype=float).reshape(-1, 3)
    target = np.asarray(target, dtype=float).reshape(-1, 3)
    if len(source) < 3:
        raise DegenerateInput("ICP needs at least 3 source points")
    sv = np.linalg.svd(source - source.mean(axis=0), compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1.0):
        raise DegenerateInput("source points are collinear")
    tree = cKDTree(target) if len(target) >= _KDTREE_MIN_POINTS else None
    r = init.rotation.copy()
    t = init.translation.copy()
    best = (r, t, np.inf)
    prev_rms = np.inf
    iterations = 0
    for iterations in range(1, ICP_MAX_ITERATIONS + 1):
        moved = source @ r.T + t
        if tree is not None:
            dists, idx = tree.query(moved)
        else:
            d2 = np.sum((moved[:, None, :] - target[None, :, :]) ** 2, axis=2)
            idx = np.argmin(d2, axis=1)
            dists = np.sqrt(d2[np.arange(len(moved)), idx])
        rms = float(np.sqrt(np.mean(dists**2)))
        if rms_history is not None:
            rms_history.append(rms)
        if rms < best[2]:
            best = (r.copy(), t.copy(), rms)
        if prev_rms - rms < ICP_CONVERGENCE_MM:
            break
        prev_rms = rms
        r, t = _kabsch(source, target[idx])
    r, t, rms = best
    return RigidTransform(r, t, init.from_frame, init.to_frame), rms, iterations


class GridMatchReport:
    """Per-ball matching outcome of a grid pose detection."""

    def __init__(self, matched, missing, rms):
        self.matched = matched  # list of (ball_index, detected_centroid, distance_mm)
        self.missing = list(missing)  # ball indices with no detected partner
        self.rms = float(rms)


def _orientation_seeds(det_centers, grid):
    """Initial SB->CT guesses from PCA axes of the detected centroids.

    The four planar symmetries of a rectangular grid appear as sign flips
    of the in-plane axes; each right-handed combination is one seed.
    """
    centroid = det_centers.mean(axis=0)
    _, _, vt = np.linalg.svd(det_centers - centroid)
    u_axis, v_axis, n_axis = vt  # descending extent: rows (25mm*4) > cols? depends
    # grid u extent: (rows-1)*25 = 100, v extent: (cols-1)*30 = 90 -> u first
    seeds = []
    for su, sv in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        a = su * u_axis
        b = sv * v_axis
        c = np.cross(a, b)
        r_ct_sb = np.column_stack([a, b, c])  # SB axes expressed in CT
        t = centroid - r_ct_sb @ grid.ball_centers.mean(axis=0)
        # SB->CT maps CT points into SB coords: inverse of the placement
        seeds.append((r_ct_sb.T, -r_ct_sb.T @ t))
    return seeds


def detect_grid_pose(
    volume,
    grid,
    threshold=DEFAULT_BALL_THRESHOLD_HU,
    min_blob_voxels=DEFAULT_MIN_BLOB_VOXELS,
    radius_split_mm=3.5,
):
    """Locate the steel-ball grid in a CT volume.

    Thresholds and segments ball blobs, seeds ICP from the four planar grid
    symmetries (disambiguated by the 5 mm balls when their blob radii are
    distinguishable), and returns (SB->CT transform, GridMatchReport).
    """
    blobs = segment_high_density_blobs(volume, threshold, min_blob_voxels)
    if len(blobs) < 4:
        raise InsufficientMarkers(
            f"only {len(blobs)} ball blobs above {threshold} HU; need at least 4"
        )
    det_centers = np.array([b.centroid for b in blobs])
    det_large = np.array([b.equivalent_radius >= radius_split_mm for b in blobs])
    seeds = _orientation_seeds(det_centers, grid)

    model_large = grid.ball_centers[grid.large_ball_indices]
    scored = []
    for r, t in seeds:
        init = RigidTransform(r, t, "SB", "CT")
        if det_large.any():
            # map detected-large centroids into SB and compare to model-large
            mapped = init.apply(det_centers[det_large])
            d2 = np.sum((mapped[:, None, :] - model_large[None, :, :]) ** 2, axis=2)
            score = float(np.sqrt(d2.min(axis=1)).sum())
        else:
            score = 0.0  # radii indistinguishable: all four seeds tie
        scored.append((score, init))
    best_score = min(s for s, _ in scored)
    candidates = [init for s, init in scored if s <= best_score + 1e-9]
    if not det_large.any():
        candidates = [init for _, init in scored]

    best = None
    for init in candidates:
        transform, rms, iters = icp_rigid(det_centers, grid.ball_centers, init)
        if best is None or rms < best[1]:
            best = (transform, rms, iters)
    transform, rms, _ = best

    mapped = transform.apply(det_centers)
    d2 = np.sum((mapped[:, None, :] - grid.ball_centers[None, :, :]) ** 2, axis=2)
    nearest = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(len(mapped)), nearest])
    matched = [
        (int(nearest[i]), det_centers[i], float(dist[i])) for i in range(len(mapped))
    ]
    missing = sorted(set(range(len(grid.ball_centers))) - set(nearest.tolist()))
    return transform, GridMatchReport(matched, missing, rms)


class CalibrationChain:
    """The five calibrated edges linking robot base to CT, plus residuals."""

    EDGE_FRAMES = (("B", "TB"), ("TB", "C"), ("C", "RM"), ("RM", "SB"), ("SB", "CT"))

    def __init__(self, b_to_tb, tb_to_c, c_to_rm, rm_to_sb, sb_to_ct, residuals=None):
        edges = (b_to_tb, tb_to_c, c_to_rm, rm_to_sb, sb_to_ct)
        for edge, (f, t) in zip(edges, self.EDGE_FRAMES):
            if (edge.from_frame, edge.to_frame) != (f, t):
                raise FrameError(
                    f"chain edge must be {f}->{t}, got "
                    f"{edge.from_frame}->{edge.to_frame}"
                )
        self.b_to_tb = b_to_tb
        self.tb_to_c = tb_to_c
        self.c_to_rm = c_to_rm
        self.rm_to_sb = rm_to_sb
        self.sb_to_ct = sb_to_ct
        self.residuals = dict(residuals or {})
        for v in self.residuals.values():
            if not np.isfinite(v):
                raise InvalidInput("chain residuals must be finite")


def chain_base_to_ct(chain):
    """Compose the five edges left-to-right into the B->CT transform."""
    out = chain.b_to_tb
    for edge in (chain.tb_to_c, chain.c_to_rm, chain.rm_to_sb, chain.sb_to_ct):
        out = compose(out, edge)
    return out


def save_pose_samples(samples, path):
    """Pose-sample capture file: one line per sample, 12 robot numbers
    (row-major R | t) then 12 tracker numbers."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            nums = []
            for pose in (s.robot_pose, s.tracker_pose):
                m = np.hstack([pose.rotation, pose.translation.reshape(3, 1)])
                nums.extend(m.reshape(-1).tolist())
            fh.write(" ".join(f"{x:.12g}" for x in nums) + "\n")


def load_pose_samples(path, tracker_from="C", tracker_to="RM"):
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            nums = [float(x) for x in line.split()]
            if len(nums) != 24:
                raise InvalidInput(
                    f"{path}:{line_no}: expected 24 numbers, got {len(nums)}"
                )
            rob = np.array(nums[:12]).reshape(3, 4)
            trk = np.array(nums[12:]).reshape(3, 4)
            samples.append(
                PoseSample(
                    RigidTransform(rob[:, :3], rob[:, 3], "B", "EEF"),
                    RigidTransform(trk[:, :3], trk[:, 3], tracker_from, tracker_to),
                )
            )
    return samples
