"""Splat initialization: subgrid partition, weighted moments, color sampling."""

import numpy as np
import pytest

from voxsplat import Camera, PipelineConfig
from voxsplat.errors import ContractViolationError
from voxsplat.splat_init import (SH0_BASIS, GaussianMap, Subgrid, init_color,
                                 init_covariance, init_gaussians_for_voxel,
                                 init_position, partition_subgrids, rgb_to_sh0,
                                 sh0_to_rgb)
from voxsplat.voxel_map import VoxelKey, VoxelPrediction

from _oracles import weighted_covariance_oracle, weighted_mean_oracle


def make_prediction(rng, n_s=3, n_r=3, key=(0, 0, 0)):
    m = (n_s * n_r) ** 2
    return VoxelPrediction(VoxelKey(*key),
                           rng.uniform(0, 0.2, size=(m, 3)),
                           rng.uniform(0, 1, size=(m, 3)),
                           rng.uniform(1e-4, 0.3, size=m))


def random_subgrid(rng, n=9):
    return Subgrid(points=rng.uniform(-1, 1, size=(n, 3)),
                   weights=rng.uniform(0.1, 10.0, size=n),
                   colors=rng.uniform(0, 1, size=(n, 3)))


class TestPartitionSubgrids:
    def test_default_partition_counts(self):
        rng = np.random.default_rng(0)
        grids = partition_subgrids(make_prediction(rng), 3, 3)
        assert len(grids) == 9
        assert all(len(g.points) == 9 for g in grids)

    def test_single_subgrid(self):
        rng = np.random.default_rng(1)
        pred = make_prediction(rng, n_s=1, n_r=3)
        grids = partition_subgrids(pred, 1, 3)
        assert len(grids) == 1
        np.testing.assert_array_equal(grids[0].points, pred.positions)

    def test_union_is_exact_partition(self):
        rng = np.random.default_rng(2)
        pred = make_prediction(rng)
        grids = partition_subgrids(pred, 3, 3)
        stacked = np.concatenate([g.points for g in grids])
        np.testing.assert_array_equal(stacked, pred.positions)

    def test_count_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ContractViolationError):
            partition_subgrids(make_prediction(rng), 4, 3)

    def test_weights_clamped(self):
        pred = VoxelPrediction(VoxelKey(0, 0, 0), np.zeros((1, 3)),
                               np.full((1, 3), 0.5), np.zeros(1))
        grids = partition_subgrids(pred, 1, 1, weight_floor=1e-8)
        assert grids[0].weights[0] == 1e8


class TestInitPosition:
    def test_equal_weight_centroid(self):
        g = Subgrid(points=np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]],
                                    dtype=float),
                    weights=np.ones(4), colors=np.full((4, 3), 0.5))
        np.testing.assert_allclose(init_position(g), [0.5, 0.5, 0.0])

    def test_weighted_mean(self):
        g = Subgrid(points=np.array([[0, 0, 0], [1, 0, 0]], dtype=float),
                    weights=np.array([1.0, 3.0]), colors=np.full((2, 3), 0.5))
        np.testing.assert_allclose(init_position(g), [0.75, 0.0, 0.0])

    def test_matches_summation_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            g = random_subgrid(rng)
            np.testing.assert_allclose(init_position(g),
                                       weighted_mean_oracle(g.points, g.weights),
                                       atol=1e-12)

    def test_inside_convex_hull(self):
        rng = np.random.default_rng(5)
        g = random_subgrid(rng)
        p = init_position(g)
        assert np.all(p >= g.points.min(axis=0) - 1e-12)
        assert np.all(p <= g.points.max(axis=0) + 1e-12)


class TestInitCovariance:
    def test_two_point_hand_case(self):
        g = Subgrid(points=np.array([[1, 0, 0], [-1, 0, 0]], dtype=float),
                    weights=np.ones(2), colors=np.full((2, 3), 0.5))
        phi, scale, quat = init_covariance(g, np.zeros(3), scale_floor=1e-4)
        np.testing.assert_allclose(phi, np.diag([1.0, 0.0, 0.0]), atol=1e-15)
        np.testing.assert_allclose(scale, [1.0, 1e-4, 1e-4])
        np.testing.assert_array_equal(quat, [1.0, 0.0, 0.0, 0.0])

    def test_coincident_points_floor(self):
        g = Subgrid(points=np.full((5, 3), 0.3), weights=np.ones(5),
                    colors=np.full((5, 3), 0.5))
        p = init_position(g)
        phi, scale, _ = init_covariance(g, p)
        np.testing.assert_allclose(phi, np.zeros((3, 3)), atol=1e-15)
        np.testing.assert_allclose(scale, [1e-4, 1e-4, 1e-4])

    def test_matches_covariance_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            g = random_subgrid(rng)
            p = init_position(g)
            phi, _, _ = init_covariance(g, p)
            oracle = weighted_covariance_oracle(g.points, g.weights, p)
            assert np.abs(phi - oracle).max() <= 1e-12

    def test_symmetric_psd(self):
        rng = np.random.default_rng(7)
        g = random_subgrid(rng, n=16)
        phi, _, _ = init_covariance(g, init_position(g))
        assert np.abs(phi - phi.T).max() <= 1e-12
        assert np.linalg.eigvalsh(phi).min() >= -1e-7


class TestInvariances:
    def test_weight_rescaling(self):
        rng = np.random.default_rng(8)
        g = random_subgrid(rng)
        scaled = Subgrid(points=g.points, weights=g.weights * 37.5, colors=g.colors)
        np.testing.assert_allclose(init_position(g), init_position(scaled),
                                   atol=1e-12)
        p = init_position(g)
        phi_a, _, _ = init_covariance(g, p)
        phi_b, _, _ = init_covariance(scaled, p)
        np.testing.assert_allclose(phi_a, phi_b, atol=1e-12)

    def test_translation_equivariance(self):
        rng = np.random.default_rng(9)
        g = random_subgrid(rng)
        t = np.array([3.0, -2.0, 0.5])
        moved = Subgrid(points=g.points + t, weights=g.weights, colors=g.colors)
        p = init_position(g)
        np.testing.assert_allclose(init_position(moved), p + t, atol=1e-12)
        phi_a, _, _ = init_covariance(g, p)
        phi_b, _, _ = init_covariance(moved, p + t)
        np.testing.assert_allclose(phi_a, phi_b, atol=1e-12)


class TestInitColor:
    def camera(self):
        return Camera(fx=100, fy=100, cx=50, cy=50, width=100, height=100)

    def test_white_pixel(self):
        image = np.ones((100, 100, 3))
        y = init_color(np.array([0.0, 0.0, 1.0]), self.camera(), image,
                       fallback_rgb=np.zeros(3))
        np.testing.assert_allclose(y, np.full(3, 0.5 / SH0_BASIS), rtol=1e-9)

    def test_behind_camera_falls_back(self):
        image = np.ones((100, 100, 3))
        fallback = np.array([0.2, 0.4, 0.6])
        y = init_color(np.array([0.0, 0.0, -1.0]), self.camera(), image, fallback)
        np.testing.assert_allclose(y, rgb_to_sh0(fallback), atol=1e-15)

    def test_roundtrip_stable(self):
        rng = np.random.default_rng(10)
        c = rng.uniform(0, 1, size=(100, 3))
        np.testing.assert_allclose(sh0_to_rgb(rgb_to_sh0(c)), c, atol=1e-12)
        y = rng.normal(size=(100, 3))
        np.testing.assert_allclose(rgb_to_sh0(sh0_to_rgb(y)), y, atol=1e-12)


class TestInitGaussiansForVoxel:
    def setup_scene(self, seed=11):
        rng = np.random.default_rng(seed)
        config = PipelineConfig()
        pred = make_prediction(rng)
        camera = Camera(fx=100, fy=100, cx=50, cy=50, width=100, height=100,
                        rotation=np.eye(3), translation=np.array([0, 0, 2.0]))
        image = rng.uniform(0, 1, size=(100, 100, 3))
        return pred, camera, image, config

    def test_nine_primitives(self):
        pred, camera, image, config = self.setup_scene()
        prims = init_gaussians_for_voxel(pred, camera, image, config)
        assert len(prims) == 9
        assert all(p.opacity == config.initial_opacity for p in prims)
        assert all(p.source_key == pred.key for p in prims)

    def test_positions_near_voxel(self):
        pred, camera, image, config = self.setup_scene()
        prims = init_gaussians_for_voxel(pred, camera, image, config)
        lo = np.zeros(3)
        hi = np.full(3, config.voxel_size)
        for p in prims:
            pad = 3 * p.scale.max()
            assert np.all(p.position >= lo - pad)
            assert np.all(p.position <= hi + pad)

    def test_deterministic(self):
        pred, camera, image, config = self.setup_scene()
        a = init_gaussians_for_voxel(pred, camera, image, config)
        b = init_gaussians_for_voxel(pred, camera, image, config)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.position, pb.position)
            assert np.array_equal(pa.scale, pb.scale)
            assert np.array_equal(pa.color, pb.color)


class TestGaussianMap:
    def test_extend_and_roundtrip(self):
        rng = np.random.default_rng(12)
        pred, camera, image, config = TestInitGaussiansForVoxel().setup_scene()
        prims = init_gaussians_for_voxel(pred, camera, image, config)
        gmap = GaussianMap()
        gmap.extend(prims)
        assert len(gmap) == 9
        back = gmap.primitive(3)
        np.testing.assert_array_equal(back.position, prims[3].position)
        assert back.source_key == prims[3].source_key
