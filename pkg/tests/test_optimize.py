"""The regional central-difference machinery against brute-force oracles.

The optimizer re-blends only affected rectangles; these tests pin it to the
naive route: render the whole scene, evaluate the whole objective.
"""

import numpy as np

from voxsplat import Camera, PipelineConfig
from voxsplat.geometry import IDENTITY_QUATERNION
from voxsplat.losses import FrameCamera, total_loss
from voxsplat.optimize import (_build_frame_state, _evaluate_primitive,
                               _Objective, _structure_cache)
from voxsplat.renderer import render
from voxsplat.splat_init import GaussianMap, GaussianPrimitive, rgb_to_sh0


def make_scene(rng, n=12, two_frames=False):
    cams = [Camera(fx=50, fy=50, cx=23.5, cy=23.5, width=48, height=48)]
    if two_frames:
        cams.append(cams[0].with_pose(np.eye(3), np.array([0.05, 0.0, 0.0])))
    prims = []
    for _ in range(n):
        prims.append(GaussianPrimitive(
            position=rng.uniform([-0.4, -0.4, 1.1], [0.4, 0.4, 1.9]),
            scale=np.full(3, float(rng.uniform(0.02, 0.06))),
            rotation=IDENTITY_QUATERNION.copy(),
            opacity=float(rng.uniform(0.4, 0.9)),
            color=rgb_to_sh0(rng.uniform(0.2, 0.8, 3))))
    gmap = GaussianMap()
    gmap.extend(prims)
    observed = [rng.uniform(0, 1, (48, 48, 3)) for _ in cams]
    points = rng.uniform([-0.4, -0.4, 1.1], [0.4, 0.4, 1.9], size=(150, 3))
    return gmap, cams, observed, points


def full_loss(gmap, cams, observed, points, config):
    frames = [FrameCamera(cam, obs, render(gmap, cam, config.near_plane))
              for cam, obs in zip(cams, observed)]
    return total_loss(frames, points, gmap, config.lambda_ssim,
                      config.lambda_d, config.lambda_p,
                      config.silhouette_threshold).total


def build_objective(gmap, cams, observed, points, config):
    states = [_build_frame_state(gmap, cam, obs, config.near_plane)
              for cam, obs in zip(cams, observed)]
    lp = _structure_cache(points, gmap) if config.lambda_p > 0 else None
    return _Objective(states, config, lp)


class TestAgainstFullRecompute:
    def test_base_matches_public_loss(self):
        rng = np.random.default_rng(0)
        config = PipelineConfig()
        gmap, cams, observed, points = make_scene(rng, two_frames=True)
        obj = build_objective(gmap, cams, observed, points, config)
        base = obj.base_breakdown()
        ref = full_loss(gmap, cams, observed, points, config)
        assert abs(base.total - ref) <= 1e-12

    def brute_force_gradient(self, gmap, cams, observed, points, config,
                             mutate):
        h = config.fd_step
        gp = gmap.copy()
        mutate(gp, +h)
        plus = full_loss(gp, cams, observed, points, config)
        gm = gmap.copy()
        mutate(gm, -h)
        minus = full_loss(gm, cams, observed, points, config)
        return (plus - minus) / (2 * h)

    def check_gradients(self, two_frames):
        rng = np.random.default_rng(1 + two_frames)
        config = PipelineConfig()
        gmap, cams, observed, points = make_scene(rng, two_frames=two_frames)
        obj = build_objective(gmap, cams, observed, points, config)
        h = config.fd_step
        for k in (0, 5, 11):
            totals = _evaluate_primitive(obj, gmap, k, config)
            diffs = (totals[0::2] - totals[1::2]) / (2 * h)
            checks = [
                (diffs[0], lambda g, d: g.positions.__setitem__(
                    (k, 0), g.positions[k, 0] + d)),
                (diffs[2], lambda g, d: g.positions.__setitem__(
                    (k, 2), g.positions[k, 2] + d)),
                (diffs[4], lambda g, d: g.scales.__setitem__(
                    (k, 1), g.scales[k, 1] + d)),
                (diffs[6], lambda g, d: g.rotations.__setitem__(
                    (k, 0), g.rotations[k, 0] + d)),
                (diffs[10], lambda g, d: g.opacities.__setitem__(
                    k, g.opacities[k] + d)),
                (diffs[12], lambda g, d: g.colors.__setitem__(
                    (k, 1), g.colors[k, 1] + d)),
            ]
            for got, mutate in checks:
                ref = self.brute_force_gradient(gmap, cams, observed, points,
                                                config, mutate)
                assert abs(got - ref) <= 1e-6 + 1e-4 * abs(ref), \
                    f"k={k}: {got} vs {ref}"

    def test_gradients_single_frame(self):
        self.check_gradients(two_frames=False)

    def test_gradients_two_frames_with_depth_loss(self):
        # two frames activate the warped-depth term and its patching path
        self.check_gradients(two_frames=True)
