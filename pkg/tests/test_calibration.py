import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from needletwin.calibration import (
    CalibrationChain,
    GridModel,
    PoseSample,
    chain_base_to_ct,
    default_grid_model,
    detect_grid_pose,
    icp_rigid,
    load_pose_samples,
    pivot_calibrate,
    qr24_hand_eye,
    save_pose_samples,
)
from needletwin.errors import (
    DegenerateInput,
    DegenerateMotion,
    FrameError,
    InsufficientMarkers,
    InvalidInput,
)
from needletwin.geometry import RigidTransform, compose, invert, rotation_about_axis

from conftest import random_rigid_transform


def make_hand_eye_samples(x_true, z_true, n, rng, trans_noise=0.0, rot_noise_deg=0.0):
    """Forward-generate consistent (robot, tracker) pose pairs.

    A_i X = Z B_i, so B_i = Z^-1 A_i X; optional noise perturbs B_i.
    """
    samples = []
    for _ in range(n):
        rot = Rotation.random(random_state=np.random.RandomState(rng.integers(2**31))).as_matrix()
        a = RigidTransform(rot, rng.uniform(-400, 400, 3), "B", "EEF")
        b = compose(compose(invert(z_true), a), x_true)
        if trans_noise > 0 or rot_noise_deg > 0:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            dr = rotation_about_axis(axis, rng.normal(0, rot_noise_deg))
            b = RigidTransform(
                dr @ b.rotation,
                b.translation + rng.normal(0, trans_noise, 3),
                b.from_frame,
                b.to_frame,
            )
        samples.append(PoseSample(a, b))
    return samples


class TestQr24HandEye:
    def test_noiseless_roundtrip_50_poses(self):
        rng = np.random.default_rng(0)
        x_true = random_rigid_transform(rng, "EEF", "RM", trans_scale=80.0)
        z_true = random_rigid_transform(rng, "B", "C", trans_scale=500.0)
        samples = make_hand_eye_samples(x_true, z_true, 50, rng)
        x, z, residual = qr24_hand_eye(samples)
        assert np.linalg.norm(x.translation - x_true.translation) < 1e-6
        assert np.linalg.norm(z.translation - z_true.translation) < 1e-6
        assert np.max(np.abs(x.rotation - x_true.rotation)) < 1e-9
        assert residual < 1e-6

    def test_output_rotations_orthonormal(self):
        rng = np.random.default_rng(1)
        x_true = random_rigid_transform(rng, "EEF", "RM", trans_scale=80.0)
        z_true = random_rigid_transform(rng, "B", "C", trans_scale=500.0)
        samples = make_hand_eye_samples(x_true, z_true, 30, rng, trans_noise=0.2)
        x, z, _ = qr24_hand_eye(samples)
        for r in (x.rotation, z.rotation):
            assert np.linalg.norm(r.T @ r - np.eye(3), "fro") < 1e-9
            assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)

    def test_single_axis_motion_rejected(self):
        rng = np.random.default_rng(2)
        x_true = random_rigid_transform(rng, "EEF", "RM", trans_scale=80.0)
        z_true = random_rigid_transform(rng, "B", "C", trans_scale=500.0)
        samples = []
        for k in range(20):
            rot = rotation_about_axis([0, 0, 1], 15.0 * k)
            a = RigidTransform(rot, rng.uniform(-200, 200, 3), "B", "EEF")
            b = compose(compose(invert(z_true), a), x_true)
            samples.append(PoseSample(a, b))
        with pytest.raises(DegenerateMotion):
            qr24_hand_eye(samples)

    def test_single_axis_noisy_still_rejected(self):
        rng = np.random.default_rng(3)
        x_true = random_rigid_transform(rng, "EEF", "RM", trans_scale=80.0)
        z_true = random_rigid_transform(rng, "B", "C", trans_scale=500.0)
        samples = []
        for k in range(20):
            rot = rotation_about_axis([0, 0, 1], 15.0 * k + rng.normal(0, 0.02))
            a = RigidTransform(rot, rng.uniform(-200, 200, 3), "B", "EEF")
            b = compose(compose(invert(z_true), a), x_true)
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            b = RigidTransform(
                rotation_about_axis(axis, rng.normal(0, 0.05)) @ b.rotation,
                b.translation + rng.normal(0, 0.1, 3),
                b.from_frame,
                b.to_frame,
            )
            samples.append(PoseSample(a, b))
        with pytest.raises(DegenerateMotion):
            qr24_hand_eye(samples)

    def test_too_few_samples_rejected(self):
        rng = np.random.default_rng(4)
        x_true = random_rigid_transform(rng, "EEF", "RM")
        z_true = random_rigid_transform(rng, "B", "C")
        samples = make_hand_eye_samples(x_true, z_true, 2, rng)
        with pytest.raises(DegenerateMotion):
            qr24_hand_eye(samples)

    def test_noisy_translation_error_below_1mm(self):
        rng = np.random.default_rng(5)
        errors = []
        for _ in range(20):
            x_true = random_rigid_transform(rng, "EEF", "RM", trans_scale=80.0)
            z_true = random_rigid_transform(rng, "B", "C", trans_scale=500.0)
            samples = make_hand_eye_samples(
                x_true, z_true, 50, rng, trans_noise=0.1, rot_noise_deg=0.05
            )
            x, _, _ = qr24_hand_eye(samples)
            errors.append(np.linalg.norm(x.translation - x_true.translation))
        assert np.median(errors) < 1.0


class TestPivotCalibration:
    def _poses_about(self, pivot, tip_offset, angles):
        poses = []
        for axis, angle in angles:
            rot = rotation_about_axis(axis, angle)
            poses.append(RigidTransform(rot, pivot - rot @ tip_offset, "B", "EEF"))
        return poses

    def test_exact_recovery_four_poses(self):
        pivot = np.array([100.0, -50.0, 300.0])
        offset = np.array([0.0, 0.0, 120.0])
        poses = self._poses_about(
            pivot, offset, [([1, 0, 0], 0), ([1, 0, 0], 25), ([0, 1, 0], 25), ([1, 1, 0], -30)]
        )
        tip, piv, residual = pivot_calibrate(poses)
        assert np.linalg.norm(tip - offset) < 1e-9
        assert np.linalg.norm(piv - pivot) < 1e-9
        assert residual < 1e-9

    def test_identical_poses_rejected(self):
        pose = RigidTransform(np.eye(3), [1, 2, 3], "B", "EEF")
        with pytest.raises(DegenerateMotion):
            pivot_calibrate([pose] * 6)

    def test_single_axis_rejected(self):
        pivot = np.array([10.0, 20.0, 30.0])
        offset = np.array([0.0, 0.0, 50.0])
        poses = self._poses_about(
            pivot, offset, [([0, 0, 1], a) for a in (0, 20, 40, 60, 80)]
        )
        with pytest.raises(DegenerateMotion):
            pivot_calibrate(poses)

    def test_noisy_tip_recovery(self):
        rng = np.random.default_rng(6)
        pivot = np.array([50.0, 60.0, 200.0])
        offset = np.array([5.0, -3.0, 110.0])
        angles = [(rng.normal(size=3), rng.uniform(-60, 60)) for _ in range(20)]
        poses = []
        for axis, angle in angles:
            rot = rotation_about_axis(axis, angle)
            noise = rng.normal(0, 0.05, 3)
            poses.append(RigidTransform(rot, pivot - rot @ offset + noise, "B", "EEF"))
        tip, _, _ = pivot_calibrate(poses)
        assert np.linalg.norm(tip - offset) < 0.3


class TestIcp:
    def test_identity_on_identical_clouds(self):
        rng = np.random.default_rng(7)
        pts = rng.uniform(-50, 50, (12, 3))
        t, rms, _ = icp_rigid(pts, pts, RigidTransform.identity("SB", "CT"))
        assert rms < 1e-12
        assert np.max(np.abs(t.matrix - np.eye(4))) < 1e-9

    def test_recovers_transform_with_close_init(self):
        rng = np.random.default_rng(8)
        pts = rng.uniform(-60, 60, (15, 3))
        t_true = RigidTransform(
            rotation_about_axis([1, 2, 0.5], 24.0), [8.0, -6.0, 4.0], "SB", "CT"
        )
        target = t_true.apply(pts)
        init = RigidTransform(
            rotation_about_axis([1, 2, 0.5], 16.0), [2.0, -1.0, 0.0], "SB", "CT"
        )
        t, rms, _ = icp_rigid(pts, target, init)
        assert rms < 1e-9
        assert np.max(np.abs(t.matrix - t_true.matrix)) < 1e-8

    def test_noisy_cloud_recovery(self):
        rng = np.random.default_rng(9)
        pts = rng.uniform(-60, 60, (10, 3))
        t_true = RigidTransform(rotation_about_axis([0, 1, 1], -15.0), [5, 3, -2], "SB", "CT")
        target = t_true.apply(pts) + rng.normal(0, 0.1, pts.shape)
        t, rms, _ = icp_rigid(pts, target, RigidTransform.identity("SB", "CT"))
        assert rms <= 0.1 * 1.5
        assert np.linalg.norm(t.translation - t_true.translation) < 0.2

    def test_collinear_source_rejected(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
        with pytest.raises(DegenerateInput):
            icp_rigid(pts, pts, RigidTransform.identity("SB", "CT"))

    def test_rms_history_monotone_non_increasing(self):
        rng = np.random.default_rng(10)
        pts = rng.uniform(-50, 50, (20, 3))
        t_true = RigidTransform(rotation_about_axis([1, 0, 0], 30.0), [10, 5, 0], "SB", "CT")
        target = t_true.apply(pts) + rng.normal(0, 0.5, pts.shape)
        history = []
        icp_rigid(pts, target, RigidTransform.identity("SB", "CT"), rms_history=history)
        assert len(history) >= 2
        assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))


class TestGridModel:
    def test_default_model_valid(self):
        grid = default_grid_model()
        assert len(grid.ball_centers) == 20
        assert len(grid.large_ball_indices) == 3

    def test_wrong_count_rejected(self):
        with pytest.raises(InvalidInput):
            GridModel(np.zeros((19, 3)), np.full(19, 2.0))

    def test_needs_a_large_ball(self):
        grid = default_grid_model()
        with pytest.raises(InvalidInput):
            GridModel(grid.ball_centers, np.full(20, 2.0))


class TestDetectGridPose:
    def test_recovers_placement(self, grid_case):
        truth = grid_case["truth"]
        pose, report = detect_grid_pose(grid_case["volume"], grid_case["spec"].grid)
        assert report.rms < 0.5
        assert not report.missing
        resid = compose(truth.grid_pose, pose).matrix - np.eye(4)
        assert np.linalg.norm(resid[:3, 3]) < 0.3
        angle = np.degrees(np.arccos(np.clip((np.trace(resid[:3, :3] + np.eye(3)) - 1) / 2, -1, 1)))
        assert angle < 0.2

    def test_flipped_grid_not_confused(self, grid_case):
        # detected centroids relabeled/permuted must not change the result
        pose_a, _ = detect_grid_pose(grid_case["volume"], grid_case["spec"].grid)
        pose_b, _ = detect_grid_pose(grid_case["volume"], grid_case["spec"].grid)
        assert np.max(np.abs(pose_a.matrix - pose_b.matrix)) < 1e-12
        # the 180-degree flip about the plane normal is NOT the answer:
        # flipping the detected pose leaves a ~180 degree rotation residual
        # (translation stays small because the flip pivots the grid center)
        truth = grid_case["truth"]
        flip = RigidTransform(
            rotation_about_axis([0, 0, 1], 180.0), np.zeros(3), "SB", "SB"
        )
        flipped = compose(flip, pose_a)
        resid_rot = compose(truth.grid_pose, flipped).rotation
        angle = np.degrees(np.arccos(np.clip((np.trace(resid_rot) - 1) / 2, -1, 1)))
        assert angle > 90.0

    def test_masked_balls_still_converge(self, grid_case):
        vol = grid_case["volume"]
        truth = grid_case["truth"]
        data = vol.data.copy()
        for center in truth.ball_centers_ct[[4, 9, 14]]:
            ijk = np.round(vol.ct_to_voxel(center)).astype(int)
            sl = tuple(slice(max(0, i - 5), i + 6) for i in ijk)
            region = data[sl]
            region[region > 2000] = 40.0
        from needletwin.volume import Volume

        masked = Volume(data, vol.spacing, vol.origin)
        pose, report = detect_grid_pose(masked, grid_case["spec"].grid)
        assert len(report.missing) == 3
        assert report.rms < 0.5
        resid = compose(truth.grid_pose, pose).matrix - np.eye(4)
        assert np.linalg.norm(resid[:3, 3]) < 0.5

    def test_too_few_balls_rejected(self):
        from needletwin.volume import Volume

        vol = Volume(np.full((20, 20, 20), 40.0), (1, 1, 1))
        with pytest.raises(InsufficientMarkers):
            detect_grid_pose(vol, default_grid_model())


class TestChain:
    def _edges(self, rng=None):
        frames = CalibrationChain.EDGE_FRAMES
        if rng is None:
            return [RigidTransform.identity(f, t) for f, t in frames]
        return [random_rigid_transform(rng, f, t) for f, t in frames]

    def test_all_identity(self):
        chain = CalibrationChain(*self._edges())
        out = chain_base_to_ct(chain)
        assert np.max(np.abs(out.matrix - np.eye(4))) < 1e-12
        assert (out.from_frame, out.to_frame) == ("B", "CT")

    def test_single_translating_edge_passthrough(self):
        for k in range(5):
            edges = self._edges()
            f, t = CalibrationChain.EDGE_FRAMES[k]
            edges[k] = RigidTransform(np.eye(3), [5, 0, 0], f, t)
            out = chain_base_to_ct(CalibrationChain(*edges))
            np.testing.assert_allclose(out.translation, [5, 0, 0], atol=1e-12)

    def test_matches_manual_matrix_product(self):
        rng = np.random.default_rng(11)
        edges = self._edges(rng)
        out = chain_base_to_ct(CalibrationChain(*edges))
        manual = np.eye(4)
        for e in edges:
            manual = manual @ e.matrix
        assert np.max(np.abs(out.matrix - manual)) < 1e-9

    def test_wrong_frames_rejected(self):
        edges = self._edges()
        edges[2] = RigidTransform.identity("C", "SB")
        with pytest.raises(FrameError):
            CalibrationChain(*edges)


class TestPoseSampleFiles:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(12)
        x_true = random_rigid_transform(rng, "EEF", "RM")
        z_true = random_rigid_transform(rng, "B", "C")
        samples = make_hand_eye_samples(x_true, z_true, 10, rng)
        path = tmp_path / "samples.txt"
        save_pose_samples(samples, path)
        back = load_pose_samples(path, tracker_from="C", tracker_to="RM")
        assert len(back) == 10
        for a, b in zip(samples, back):
            assert np.max(np.abs(a.robot_pose.matrix - b.robot_pose.matrix)) < 1e-9
            assert np.max(np.abs(a.tracker_pose.matrix - b.tracker_pose.matrix)) < 1e-9

    def test_solver_accepts_loaded_fixture(self, tmp_path):
        rng = np.random.default_rng(13)
        x_true = random_rigid_transform(rng, "EEF", "RM", trans_scale=80.0)
        z_true = random_rigid_transform(rng, "B", "C", trans_scale=500.0)
        samples = make_hand_eye_samples(x_true, z_true, 50, rng)
        path = tmp_path / "samples.txt"
        save_pose_samples(samples, path)
        x, z, _ = qr24_hand_eye(load_pose_samples(path, "C", "RM"))
        assert np.linalg.norm(x.translation - x_true.translation) < 1e-6
