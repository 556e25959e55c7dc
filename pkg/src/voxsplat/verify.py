"""Built-in oracle self-checks, runnable from the CLI.

Each check re-derives its expected values through an independent route
(explicit inverses, plain summation, exhaustive scans) and compares the fast
implementation against it. Exit status of the `verify` subcommand reflects
the outcome.
"""

from __future__ import annotations

import sys

import numpy as np

from .camera import Camera
from .config import PipelineConfig
from .geometry import IDENTITY_QUATERNION
from .gpr import GprProblem, densify_frame, gpr_solve, gpr_solve_batch
from .losses import FrameCamera, delta_depth_loss, structure_similarity_loss
from .renderer import RenderBuffers, render
from .splat_init import (GaussianPrimitive, Subgrid, init_covariance,
                         init_position, rgb_to_sh0)
from .voxel_map import PointCloud, VoxelMap, VoxelState


def _check_gpr_closed_form(rng):
    r = gpr_solve(GprProblem(x=[[0, 0]], f=[2.0], noise_diag=[0.25],
                             x_star=[[0, 0]]))
    assert abs(r.mu_star[0] - 1.6) <= 1e-12, r.mu_star
    assert abs(r.sigma_star_diag[0] - 0.2) <= 1e-12, r.sigma_star_diag


def _check_gpr_against_dense_inverse(rng):
    for _ in range(25):
        n = int(rng.integers(3, 48))
        m = int(rng.integers(1, 60))
        x = rng.uniform(0, 0.2, size=(n, 2))
        f = rng.normal(0, 0.2, size=n)
        noise = rng.uniform(1e-4, 0.3, size=n)
        xs = rng.uniform(0, 0.2, size=(m, 2))
        lam = float(rng.uniform(0.5, 3.0))
        got = gpr_solve(GprProblem(x, f, noise, xs, lam))

        def kern(a, b):
            d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
            return np.exp(-lam * d2)

        A_inv = np.linalg.inv(kern(x, x) + np.diag(noise))
        Ks = kern(x, xs)
        mu = Ks.T @ A_inv @ f
        diag = np.diag(kern(xs, xs) - Ks.T @ A_inv @ Ks)
        np.testing.assert_allclose(got.mu_star, mu, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(got.sigma_star_diag, diag, rtol=1e-9,
                                   atol=1e-12)


def _check_batch_matches_sequential(rng):
    problems = []
    for _ in range(50):
        n = int(rng.integers(3, 24))
        problems.append(GprProblem(rng.uniform(0, 0.2, (n, 2)),
                                   rng.normal(0, 0.1, n),
                                   rng.uniform(1e-4, 0.2, n),
                                   rng.uniform(0, 0.2, (9, 2))))
    batch = gpr_solve_batch(problems, workers=4)
    assert batch.ok
    for problem, got in zip(problems, batch.results):
        ref = gpr_solve(problem)
        np.testing.assert_allclose(got.mu_star, ref.mu_star, atol=1e-12)


def _check_moment_oracles(rng):
    for _ in range(200):
        pts = rng.uniform(-1, 1, size=(9, 3))
        w = rng.uniform(0.1, 5.0, size=9)
        g = Subgrid(points=pts, weights=w, colors=np.full((9, 3), 0.5))
        p = init_position(g)
        num = np.zeros(3)
        for point, weight in zip(pts, w):
            num += weight * point
        np.testing.assert_allclose(p, num / w.sum(), atol=1e-12)
        phi, _, _ = init_covariance(g, p)
        acc = np.zeros((3, 3))
        for point, weight in zip(pts, w):
            d = point - p
            acc += weight * np.outer(d, d)
        np.testing.assert_allclose(phi, acc / w.sum(), atol=1e-12)


def _check_renderer_identities(rng):
    cam = Camera(fx=100, fy=100, cx=50, cy=50, width=100, height=100)

    def splat(z, rgb, opacity, scale):
        return GaussianPrimitive(position=np.array([0.0, 0.0, z]),
                                 scale=np.full(3, scale),
                                 rotation=IDENTITY_QUATERNION.copy(),
                                 opacity=opacity, color=rgb_to_sh0(np.array(rgb)))

    buf = render([splat(1.0, (1, 0, 0), 0.5, 0.2),
                  splat(2.0, (0, 0, 1), 0.5, 0.4)], cam)
    np.testing.assert_allclose(buf.color[50, 50], [0.5, 0.0, 0.25], atol=1e-6)
    np.testing.assert_allclose(buf.silhouette[50, 50], 0.75, atol=1e-6)
    np.testing.assert_allclose(buf.depth[50, 50], 1.0, atol=1e-6)


def _check_structure_loss_index(rng):
    pts = rng.uniform(-2, 2, size=(100, 3))
    pos = rng.uniform(-2, 2, size=(50, 3))
    scl = rng.uniform(0.01, 0.5, size=(50, 3))
    got = structure_similarity_loss(pts, pos, scl)
    sbar = scl.mean(axis=1)
    best = np.inf * np.ones(100)
    for j in range(100):
        for k in range(50):
            v = np.linalg.norm(pts[j] - pos[k]) - sbar[k]
            best[j] = min(best[j], v)
    assert abs(got - best.mean()) <= 1e-12


def _check_self_warp_zero(rng):
    cam = Camera(fx=50, fy=50, cx=15.5, cy=15.5, width=32, height=32)
    D = rng.uniform(1, 3, size=(32, 32))
    S = np.ones((32, 32))
    fc = FrameCamera(cam, np.zeros((32, 32, 3)),
                     RenderBuffers(np.zeros((32, 32, 3)), D, S))
    assert delta_depth_loss(fc, fc) == 0.0


def _check_state_machine(rng):
    config = PipelineConfig(sensor_var=0.25, kernel_lambda=40.0)
    vmap = VoxelMap.from_config(config)
    for _ in range(6):
        n = 30
        xy = rng.uniform(0.01, 0.19, size=(n, 2))
        z = 0.1 + 0.05 * xy[:, 0] + 0.01 * rng.normal(size=n)
        cloud = PointCloud(np.column_stack([xy, z]), np.full((n, 3), 0.5),
                           np.zeros(n))
        update = vmap.store_frame(cloud)
        densify_frame(update, vmap, config)
    assert vmap.audit_transitions() == []
    assert vmap.audit_converged_resolves() == []
    assert vmap.audit_hash_consistency() == []
    assert any(c.state in (VoxelState.ACTIVE, VoxelState.CONVERGED)
               for c in vmap.cells.values())


CHECKS = [
    ("gpr closed form", _check_gpr_closed_form),
    ("gpr vs dense inverse oracle", _check_gpr_against_dense_inverse),
    ("batch vs sequential solver", _check_batch_matches_sequential),
    ("weighted moment oracles", _check_moment_oracles),
    ("renderer blending identities", _check_renderer_identities),
    ("structure loss vs exhaustive", _check_structure_loss_index),
    ("self-warp depth loss is zero", _check_self_warp_zero),
    ("voxel state machine audit", _check_state_machine),
]


def run_checks(seed: int = 0, stream=None) -> int:
    """Run every check; returns the number of failures."""
    stream = stream or sys.stdout
    failures = 0
    for name, check in CHECKS:
        rng = np.random.default_rng(seed)
        try:
            check(rng)
        except Exception as exc:
            failures += 1
            print(f"[FAIL] {name}: {exc}", file=stream)
        else:
            print(f"[ok]   {name}", file=stream)
    print(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed", file=stream)
    return failures
