import numpy as np
import pytest

from needletwin.errors import InvalidSpec
from needletwin.phantom import (
    HU_AIR,
    HU_SOFT_TISSUE,
    Organ,
    PhantomSpec,
    load_ground_truth,
    load_phantom_spec,
    save_ground_truth,
    save_phantom_spec,
    small_phantom,
    synthesize_phantom,
    thorax_phantom,
)
from needletwin.volume import segment_high_density_blobs


class TestSpecValidation:
    def test_organ_outside_body_rejected(self):
        with pytest.raises(InvalidSpec):
            PhantomSpec(
                (50, 50, 50),
                organs=[Organ("way_out", (80, 0, 0), 10, 60)],
            )

    def test_grid_without_pose_rejected(self):
        from needletwin.calibration import default_grid_model

        with pytest.raises(InvalidSpec):
            PhantomSpec((50, 50, 50), grid=default_grid_model())


class TestSynthesis:
    def test_plain_body_is_two_valued(self):
        spec = PhantomSpec((30, 25, 35))
        vol, _ = synthesize_phantom(spec, (24, 24, 24), (3, 3, 3), seed=0)
        values = np.unique(vol.data)
        assert set(values) == {HU_AIR, HU_SOFT_TISSUE}

    def test_same_seed_bit_identical(self):
        spec = small_phantom(noise_sigma=15.0)
        a, _ = synthesize_phantom(spec, (40, 48, 44), (3, 3, 3), seed=5)
        b, _ = synthesize_phantom(spec, (40, 48, 44), (3, 3, 3), seed=5)
        assert np.array_equal(a.data, b.data)

    def test_different_seed_differs(self):
        spec = small_phantom(noise_sigma=15.0)
        a, _ = synthesize_phantom(spec, (40, 48, 44), (3, 3, 3), seed=5)
        b, _ = synthesize_phantom(spec, (40, 48, 44), (3, 3, 3), seed=6)
        assert not np.array_equal(a.data, b.data)

    def test_ball_centers_recoverable_by_segmentation(self, grid_case):
        vol = grid_case["volume"]
        truth = grid_case["truth"]
        blobs = segment_high_density_blobs(vol, 2000.0)
        assert len(blobs) == 20
        spacing = vol.spacing
        for center in truth.ball_centers_ct:
            nearest = min(np.linalg.norm(b.centroid - center) for b in blobs)
            assert nearest < 0.5 * max(spacing)

    def test_big_balls_have_cubed_radius_ratio_voxel_counts(self, grid_case):
        blobs = segment_high_density_blobs(grid_case["volume"], 2000.0)
        assert len(blobs) == 20
        counts = sorted(b.voxel_count for b in blobs)
        small_counts = counts[:17]
        big_counts = counts[17:]
        ratio = np.mean(big_counts) / np.mean(small_counts)
        assert ratio == pytest.approx((5.0 / 2.0) ** 3, rel=0.30)

    def test_priority_ball_over_bone_over_organ(self):
        spec = small_phantom()
        vol, truth = synthesize_phantom(spec, (72, 80, 88), (2, 2, 2.2), seed=2)
        assert vol.data.max() == pytest.approx(3000.0)  # steel wins
        assert (vol.data == 1200.0).any()  # bone present
        assert (vol.data == 60.0).any()  # organ present


class TestFiles:
    def test_phantom_spec_roundtrip(self, tmp_path):
        spec = thorax_phantom(noise_sigma=7.0)
        path = tmp_path / "t.phantom"
        save_phantom_spec(spec, path)
        back = load_phantom_spec(path)
        np.testing.assert_allclose(back.body_semi_axes, spec.body_semi_axes)
        assert [o.name for o in back.organs] == [o.name for o in spec.organs]
        assert len(back.ribs) == len(spec.ribs)
        assert back.noise_sigma == spec.noise_sigma
        np.testing.assert_allclose(
            back.grid_pose.matrix, spec.grid_pose.matrix, atol=1e-9
        )

    def test_ground_truth_roundtrip(self, tmp_path):
        spec = small_phantom()
        _, truth = synthesize_phantom(spec, (40, 48, 44), (3, 3, 3.2), seed=1)
        path = tmp_path / "t.truth"
        save_ground_truth(truth, path)
        back = load_ground_truth(path)
        assert set(back.organ_centers) == set(truth.organ_centers)
        for name in truth.organ_centers:
            np.testing.assert_allclose(
                back.organ_centers[name], truth.organ_centers[name], atol=1e-6
            )
        np.testing.assert_allclose(back.ball_centers_ct, truth.ball_centers_ct, atol=1e-6)
