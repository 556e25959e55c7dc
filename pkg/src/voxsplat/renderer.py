"""Forward software splatter: perspective projection and alpha blending.

Primitives are projected to 2D Gaussians (world covariance R S S^T R^T taken
through the camera rotation and the perspective Jacobian at the mean, plus a
small isotropic dilation), globally sorted front to back, and blended per
pixel:

    C = sum_i c_i a_i prod_{j<i} (1 - a_j)

with a_i = min(0.99, opacity_i * exp(-0.5 d^T cov2d^-1 d)). Depth and the
silhouette use the same blending weights, so S is exactly the accumulated
opacity 1 - prod(1 - a_i) over the contributing splats. Contributions below
1/255 are skipped entirely; a pixel stops accepting contributions once its
transmittance falls under 1e-4. Color is composited over black and depth is
zero wherever nothing contributed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .geometry import quaternions_to_rotations
from .splat_init import GaussianMap, GaussianPrimitive, sh0_to_rgb

ALPHA_CEILING = 0.99
ALPHA_SKIP = 1.0 / 255.0
TRANSMITTANCE_EPS = 1e-4
COV_DILATION = 0.3          # pixels^2, added to the 2D covariance diagonal
RADIUS_SIGMAS = 3.0
DEFAULT_NEAR = 0.01


@dataclass
class SplatProjection:
    """One primitive seen by one camera."""

    mean2d: np.ndarray   # (2,) pixels
    cov2d: np.ndarray    # (2, 2) pixels^2, includes dilation
    depth: float         # camera-space z, meters
    radius: float        # bounding radius, pixels


@dataclass
class RenderBuffers:
    """Rasterization output: color C, depth D and silhouette S images."""

    color: np.ndarray       # (H, W, 3)
    depth: np.ndarray       # (H, W) meters
    silhouette: np.ndarray  # (H, W) in [0, 1]


@dataclass
class ProjectionSet:
    """Vectorized projections of a whole map for one camera."""

    mean2d: np.ndarray   # (n, 2)
    cov2d: np.ndarray    # (n, 2, 2)
    depth: np.ndarray    # (n,)
    radius: np.ndarray   # (n,)
    valid: np.ndarray    # (n,) bool
    bbox: np.ndarray     # (n, 4) int: x0, x1, y0, y1 half-open pixel ranges

    def projection(self, i: int) -> SplatProjection | None:
        if not self.valid[i]:
            return None
        return SplatProjection(mean2d=self.mean2d[i].copy(),
                               cov2d=self.cov2d[i].copy(),
                               depth=float(self.depth[i]),
                               radius=float(self.radius[i]))


def _as_arrays(primitives):
    if isinstance(primitives, GaussianMap):
        return (primitives.positions, primitives.scales, primitives.rotations,
                primitives.opacities, primitives.colors)
    prims = list(primitives)
    if not prims:
        z = np.empty((0, 3))
        return z, z.copy(), np.empty((0, 4)), np.empty(0), z.copy()
    return (np.stack([p.position for p in prims]),
            np.stack([p.scale for p in prims]),
            np.stack([p.rotation for p in prims]),
            np.array([p.opacity for p in prims]),
            np.stack([p.color for p in prims]))


def project_points(positions, scales, rotations, cam: Camera,
                   near: float = DEFAULT_NEAR) -> ProjectionSet:
    """Project every primitive; invalid entries are behind the near plane or
    have a bounding box that misses the image."""
    n = len(positions)
    if n == 0:
        return ProjectionSet(np.empty((0, 2)), np.empty((0, 2, 2)), np.empty(0),
                             np.empty(0), np.zeros(0, dtype=bool),
                             np.zeros((0, 4), dtype=np.int64))
    cam_pts = cam.world_to_camera(positions)
    x, y, z = cam_pts[:, 0], cam_pts[:, 1], cam_pts[:, 2]
    valid = z > near

    zs = np.where(valid, z, 1.0)  # placeholder depth avoids divide warnings
    u = cam.fx * x / zs + cam.cx
    v = cam.fy * y / zs + cam.cy
    mean2d = np.stack([u, v], axis=1)

    # World covariance Phi = R diag(S^2) R^T, then cov2d = J W Phi W^T J^T
    R = quaternions_to_rotations(rotations) if n else np.empty((0, 3, 3))
    S2 = np.asarray(scales, dtype=float) ** 2
    phi = np.einsum("nij,nj,nkj->nik", R, S2, R)
    W = cam.rotation
    M = np.einsum("ij,njk,lk->nil", W, phi, W)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs**2
    cov2d = np.einsum("nij,njk,nlk->nil", J, M, J)
    cov2d[:, 0, 0] += COV_DILATION
    cov2d[:, 1, 1] += COV_DILATION
    cov2d = 0.5 * (cov2d + np.transpose(cov2d, (0, 2, 1)))

    # Largest eigenvalue of each symmetric 2x2, closed form
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.clip((0.5 * (a - c)) ** 2 + b**2, 0.0, None))
    radius = RADIUS_SIGMAS * np.sqrt(np.clip(mid + disc, 0.0, None))

    on_image = ((u + radius >= 0) & (u - radius <= cam.width - 1)
                & (v + radius >= 0) & (v - radius <= cam.height - 1))
    valid = valid & on_image & np.isfinite(u) & np.isfinite(v)

    x0 = np.clip(np.ceil(u - radius), 0, cam.width).astype(np.int64)
    x1 = np.clip(np.floor(u + radius) + 1, 0, cam.width).astype(np.int64)
    y0 = np.clip(np.ceil(v - radius), 0, cam.height).astype(np.int64)
    y1 = np.clip(np.floor(v + radius) + 1, 0, cam.height).astype(np.int64)
    valid = valid & (x1 > x0) & (y1 > y0)
    bbox = np.stack([x0, x1, y0, y1], axis=1)
    bbox[~valid] = 0
    return ProjectionSet(mean2d=mean2d, cov2d=cov2d, depth=z, radius=radius,
                         valid=valid, bbox=bbox)


def project_gaussian(g: GaussianPrimitive, cam: Camera,
                     near: float = DEFAULT_NEAR) -> SplatProjection | None:
    """Scalar projection of one primitive; None when culled."""
    ps = project_points(g.position[None, :], g.scale[None, :],
                        g.rotation[None, :], cam, near)
    return ps.projection(0)


def gaussian_patch(mean2d, cov2d, x0, x1, y0, y1) -> np.ndarray:
    """Raw Gaussian density exp(-0.5 d^T cov^-1 d) over a pixel rectangle."""
    xs = np.arange(x0, x1, dtype=float) - mean2d[0]
    ys = np.arange(y0, y1, dtype=float) - mean2d[1]
    a, b, c = cov2d[0, 0], cov2d[0, 1], cov2d[1, 1]
    det = a * c - b * b
    dx = xs[None, :]
    dy = ys[:, None]
    power = -0.5 * (c * dx**2 - 2.0 * b * dx * dy + a * dy**2) / det
    return np.exp(power)


def alpha_patch(mean2d, cov2d, opacity, x0, x1, y0, y1) -> np.ndarray:
    """Blending alpha of one splat over a pixel rectangle.

    Values below the skip threshold are zeroed (the splat contributes
    nothing there and leaves transmittance untouched); values above the
    ceiling are clamped to it.
    """
    alpha = opacity * gaussian_patch(mean2d, cov2d, x0, x1, y0, y1)
    alpha = np.minimum(alpha, ALPHA_CEILING)
    alpha[alpha < ALPHA_SKIP] = 0.0
    return alpha


def depth_order(depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Front-to-back ordering of the valid indices, ties broken by index."""
    idx = np.flatnonzero(valid)
    return idx[np.argsort(depth[idx], kind="stable")]


def render(primitives, cam: Camera, near: float = DEFAULT_NEAR) -> RenderBuffers:
    """Rasterize a whole map into color, depth and silhouette buffers."""
    positions, scales, rotations, opacities, sh0 = _as_arrays(primitives)
    proj = project_points(positions, scales, rotations, cam, near)
    rgb = sh0_to_rgb(sh0) if len(sh0) else sh0

    H, W = cam.height, cam.width
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    sil = np.zeros((H, W))
    transmittance = np.ones((H, W))

    for i in depth_order(proj.depth, proj.valid):
        x0, x1, y0, y1 = proj.bbox[i]
        alpha = alpha_patch(proj.mean2d[i], proj.cov2d[i], opacities[i],
                            x0, x1, y0, y1)
        T = transmittance[y0:y1, x0:x1]
        live = T >= TRANSMITTANCE_EPS
        w = np.where(live, alpha * T, 0.0)
        color[y0:y1, x0:x1] += w[:, :, None] * rgb[i]
        depth[y0:y1, x0:x1] += w * proj.depth[i]
        sil[y0:y1, x0:x1] += w
        transmittance[y0:y1, x0:x1] = np.where(live, T * (1.0 - alpha), T)
    return RenderBuffers(color=color, depth=depth, silhouette=sil)
