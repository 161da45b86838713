"""Cameras, the analytic box scene and the dataset format."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate

from splitfield import scene
from splitfield.nerf import ContractError
from splitfield.scene import CameraPose, DatasetError, DimensionMismatchError, ManifestError, MissingFileError

# Frozen from a reference run: pose_ring(5)[2] rendered at 8x8.
ORACLE_DEPTH_GOLDEN = np.array([
    [1.3551487043478954, 1.493489558526003, 1.6341107534001489],
    [0.0, 1.6498847185597494, 1.826426716931861],
    [1.6299655257499195, 1.3680518716062644, 1.0388266304531437],
])


class TestCamera:
    """Pinhole ray generation."""

    def test_view_direction_axes(self):
        assert_allclose(scene.view_direction(0.0, math.pi / 2), [1, 0, 0], atol=1e-15)
        assert_allclose(scene.view_direction(math.pi / 2, math.pi / 2), [0, 0, 1], atol=1e-15)
        assert_allclose(scene.view_direction(1.3, 0.0), [0, 1, 0], atol=1e-15)

    def test_corner_and_centre_angles(self):
        pose = CameraPose([0, 0, 0], 0.3, 1.2)
        _, d = scene.generate_rays(pose, 5, 3)
        f, right, up = pose.basis()
        assert_allclose(np.linalg.norm(d, axis=1), 1.0)
        assert_allclose(d[7], f, atol=1e-15)
        assert_allclose(math.atan2(d[9] @ right, d[9] @ f), pose.hfov / 2)
        assert_allclose(math.atan2(d[2] @ up, d[2] @ f), pose.vfov / 2)

    def test_basis_orthonormal(self):
        for phi, theta in [(0.0, 0.0), (2.0, 1.0), (5.0, math.pi)]:
            b = np.stack(CameraPose([0, 0, 0], phi, theta).basis())
            assert_allclose(b @ b.T, np.eye(3), atol=1e-12)

    def test_look_at_round_trip(self):
        pose = scene.look_at([0.1, 0.2, -0.7], scene.default_target())
        target_dir = scene.default_target() - pose.position
        assert_allclose(pose.forward(), target_dir / np.linalg.norm(target_dir), atol=1e-12)

    def test_contracts(self):
        with pytest.raises(ContractError):
            CameraPose([0, 1.5, 0], 0, 1)
        with pytest.raises(ContractError):
            CameraPose([0, 0, 0], 0, 1, hfov=4.0)
        with pytest.raises(ContractError):
            scene.generate_rays(CameraPose([0, 0, 0], 0, 1), 4, 4, [16])


class TestOracle:
    """The analytic renderer."""

    def test_straight_ray_into_back_wall(self):
        pose = CameraPose([0, 0, 0], math.pi / 2, math.pi / 2)
        o, d = scene.generate_rays(pose, 3, 3, [4])
        c, dep = scene.render_field(scene.default_scene(), o, d)
        assert_allclose(c[0], np.array([0.35, 0.45, 0.75]) * (1 - math.exp(-10.0)), rtol=1e-12)
        expected, _ = integrate.quad(lambda s: (0.8 + s) * 50 * math.exp(-50 * s), 0, 0.2)
        assert abs(dep[0] - expected) < 1e-3

    def test_empty_ray(self):
        o, d = np.zeros((1, 3)), np.array([[0.0, 1.0, 0.0]])
        c, dep = scene.render_field(scene.default_scene(), o, d)
        assert_allclose(c, 0.0)
        assert_allclose(dep, 0.0)

    def test_golden_depth(self):
        pose = scene.pose_ring(5)[2]
        _, dep = scene.oracle_render(pose, scene.default_scene(), 8, 8)
        assert_allclose(dep[::3, ::3], ORACLE_DEPTH_GOLDEN, rtol=1e-10)

    def test_smallest_box_wins(self):
        s, c = scene.scene_field([-0.45, -0.6, 0.2], scene.default_scene())
        assert s == 50.0
        assert_allclose(c, [0.9, 0.15, 0.1])

    def test_point_outside_every_box(self):
        s, c = scene.scene_field([0.0, 0.0, 0.0], scene.default_scene())
        assert s == 0.0
        assert_allclose(c, 0.0)

    def test_camera_inside_opaque_box(self):
        pose = CameraPose([-0.45, -0.6, 0.2], 0.3, 1.2)
        img, _ = scene.oracle_render(pose, scene.default_scene(), 6, 6)
        # at least 0.15 of density 50 in front of every pixel before leaving the cube
        assert_allclose(img, np.broadcast_to([0.9, 0.15, 0.1], img.shape), atol=1e-3)

    def test_empty_scene_is_black(self):
        img, dep = scene.oracle_render(scene.pose_ring(3)[1], scene.SyntheticScene(), 5, 4)
        assert img.shape == (4, 5, 3)
        assert np.all(img == 0) and np.all(dep == 0)

    def test_box_contract(self):
        with pytest.raises(ContractError):
            scene.Box([0, 0, 0], [0, 1, 1], [1, 1, 1], 1.0)


class TestDatasetIO:
    """PPM images plus a JSON manifest."""

    def test_round_trip(self, tmp_path, tiny_dataset):
        scene.save_dataset(tmp_path, tiny_dataset)
        back = scene.load_dataset(tmp_path)
        assert len(back) == len(tiny_dataset)
        for a, b in zip(back.images, tiny_dataset.images):
            assert_allclose(a, b)
        for a, b in zip(back.poses, tiny_dataset.poses):
            assert a.position.tolist() == b.position.tolist()
            assert (a.phi, a.theta, a.hfov, a.vfov) == (b.phi, b.theta, b.hfov, b.vfov)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFileError):
            scene.load_dataset(tmp_path)

    def test_missing_image(self, tmp_path, tiny_dataset):
        scene.save_dataset(tmp_path, tiny_dataset)
        (tmp_path / tiny_dataset.names[0]).unlink()
        with pytest.raises(MissingFileError):
            scene.load_dataset(tmp_path)

    def test_dimension_mismatch(self, tmp_path, tiny_dataset):
        scene.save_dataset(tmp_path, tiny_dataset)
        scene.write_ppm(tmp_path / tiny_dataset.names[1], np.zeros((4, 4, 3)))
        with pytest.raises(DimensionMismatchError):
            scene.load_dataset(tmp_path)

    def test_malformed_manifest(self, tmp_path, tiny_dataset):
        scene.save_dataset(tmp_path, tiny_dataset)
        (tmp_path / "manifest.json").write_text('{"images": []}')
        with pytest.raises(ManifestError):
            scene.load_dataset(tmp_path)

    def test_errors_share_base(self):
        assert issubclass(MissingFileError, DatasetError) and issubclass(ManifestError, DatasetError)

    def test_ppm_comment_header(self, tmp_path):
        (tmp_path / "a.ppm").write_bytes(b"P6\n# hi\n1 1\n255\n" + bytes([1, 2, 3]))
        assert scene.read_ppm(tmp_path / "a.ppm").tolist() == [[[1, 2, 3]]]
