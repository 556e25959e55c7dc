"""Training objective and evaluation metrics.

The total objective combines a photometric L1 term, an SSIM term, a
delta-depth consistency term between consecutive selected cameras, and a
structure term tying the splat map to the latest scanned points:

    L = (1 - ls) * l1 + ls * (1 - ssim) + ld * sum_pairs L_d + lp * L_p
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .camera import Camera, relative_transform, same_view
from .errors import InputDomainError, UndefinedLossError
from .renderer import RenderBuffers

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 100.0
DEFAULT_SILHOUETTE_THRESHOLD = 0.5


@dataclass
class FrameCamera:
    """A camera with its observed image and the rendered buffers."""

    camera: Camera
    observed: np.ndarray        # (H, W, 3) ground-truth image in [0, 1]
    buffers: RenderBuffers

    def __post_init__(self):
        H, W = self.camera.height, self.camera.width
        if self.observed.shape != (H, W, 3):
            raise InputDomainError("observed image does not match camera dimensions")
        if self.buffers.color.shape != (H, W, 3):
            raise InputDomainError("render buffers do not match camera dimensions")


@dataclass
class LossBreakdown:
    """Components of one objective evaluation.

    ``ssim_term`` holds the mean SSIM similarity value; the total uses
    ``1 - ssim_term``. ``l_d`` is already summed over consecutive pairs.
    """

    l1: float
    ssim_term: float
    l_d: float
    l_p: float
    total: float

    @staticmethod
    def combine(l1, ssim_term, l_d, l_p, lambda_ssim, lambda_d, lambda_p) -> "LossBreakdown":
        total = ((1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - ssim_term)
                 + lambda_d * l_d + lambda_p * l_p)
        return LossBreakdown(l1=l1, ssim_term=ssim_term, l_d=l_d, l_p=l_p, total=total)


# ---------------------------------------------------------------------------
# Photometric terms
# ---------------------------------------------------------------------------

def l1_photometric(image: np.ndarray, reference: np.ndarray) -> float:
    """Mean absolute difference over all pixels and channels."""
    if image.shape != reference.shape:
        raise InputDomainError("image dimensions differ")
    return float(np.abs(image - reference).mean())


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2D Gaussian window (separable, returned as the 2D kernel)."""
    g = _gaussian_1d(size, sigma)
    return np.outer(g, g)


@lru_cache(maxsize=None)
def _gaussian_1d_cached(size: int, sigma: float):
    r = np.arange(size, dtype=float) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    g.flags.writeable = False
    return g


def _gaussian_1d(size: int, sigma: float) -> np.ndarray:
    return _gaussian_1d_cached(int(size), float(sigma))


@lru_cache(maxsize=None)
def _valid_filter_matrix(length: int, size: int, sigma: float):
    """Banded (length - size + 1, length) matrix applying the 1D window, 'valid'."""
    g = _gaussian_1d(size, sigma)
    out_len = length - size + 1
    M = np.zeros((out_len, length))
    for i in range(out_len):
        M[i, i:i + size] = g
    M.flags.writeable = False
    return M


def filter_valid(image2d: np.ndarray, size: int = SSIM_WINDOW,
                 sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Separable Gaussian filtering with 'valid' boundaries.

    The same routine serves the full-image SSIM and the optimizer's regional
    SSIM patches, so both see identical filtered values.
    """
    H, W = image2d.shape
    if H < size or W < size:
        raise InputDomainError(f"image smaller than the {size}x{size} window")
    Mr = _valid_filter_matrix(H, size, sigma)
    Mc = _valid_filter_matrix(W, size, sigma)
    return Mr @ image2d @ Mc.T


def ssim_map(image: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Per-entry SSIM averaged over channels, 'valid' window placement.

    Output shape is (H - 10, W - 10) for the 11x11 window.
    """
    if image.shape != reference.shape:
        raise InputDomainError("image dimensions differ")
    a = np.atleast_3d(np.asarray(image, dtype=float))
    b = np.atleast_3d(np.asarray(reference, dtype=float))
    acc = None
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = filter_valid(x)
        mu_y = filter_valid(y)
        var_x = filter_valid(x * x) - mu_x ** 2
        var_y = filter_valid(y * y) - mu_y ** 2
        cov = filter_valid(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
        m = num / den
        acc = m if acc is None else acc + m
    return acc / a.shape[2]


def ssim(image: np.ndarray, reference: np.ndarray) -> float:
    """Mean structural similarity (11x11 Gaussian window, sigma 1.5)."""
    return float(ssim_map(image, reference).mean())


def psnr(image: np.ndarray, reference: np.ndarray, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1], capped."""
    if image.shape != reference.shape:
        raise InputDomainError("image dimensions differ")
    mse = float(np.mean((np.asarray(image, dtype=float)
                         - np.asarray(reference, dtype=float)) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# Delta depth similarity
# ---------------------------------------------------------------------------

def delta_depth_loss(fc: FrameCamera, fc1: FrameCamera,
                     s_thresh: float = DEFAULT_SILHOUETTE_THRESHOLD) -> float:
    """Depth consistency between two cameras under the rigid reprojection.

    Pixels of ``fc`` with silhouette above the threshold are back-projected
    with their rendered depth, moved through the relative transform, and
    projected into ``fc1``; pixels that land in bounds on a silhouette-valid
    pixel accumulate the absolute difference between the warped depth and the
    target's rendered depth. Returns the mean over accumulated pixels, 0 when
    none accumulate. A bit-identical camera pair short-circuits to the exact
    identity warp.
    """
    return _delta_depth(fc.camera, fc.buffers.depth, fc.buffers.silhouette,
                        fc1.camera, fc1.buffers.depth, fc1.buffers.silhouette,
                        s_thresh)


def _delta_depth(cam0: Camera, D0, S0, cam1: Camera, D1, S1, s_thresh) -> float:
    mask = S0 > s_thresh
    if not np.any(mask):
        return 0.0
    vs, us = np.nonzero(mask)
    d = D0[vs, us]
    x = (us - cam0.cx) / cam0.fx * d
    y = (vs - cam0.cy) / cam0.fy * d
    if same_view(cam0, cam1):
        x1, y1, z1 = x, y, d
    else:
        R, t = relative_transform(cam0, cam1)
        pts = np.stack([x, y, d], axis=1) @ R.T + t
        x1, y1, z1 = pts[:, 0], pts[:, 1], pts[:, 2]
    front = z1 > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u1 = np.floor(cam1.fx * x1 / z1 + cam1.cx + 0.5).astype(np.int64)
        v1 = np.floor(cam1.fy * y1 / z1 + cam1.cy + 0.5).astype(np.int64)
    inb = front & (u1 >= 0) & (u1 < cam1.width) & (v1 >= 0) & (v1 < cam1.height)
    if not np.any(inb):
        return 0.0
    u1, v1, z1 = u1[inb], v1[inb], z1[inb]
    hit = S1[v1, u1] > s_thresh
    if not np.any(hit):
        return 0.0
    return float(np.abs(z1[hit] - D1[v1[hit], u1[hit]]).mean())


# ---------------------------------------------------------------------------
# Structure similarity
# ---------------------------------------------------------------------------

def structure_similarity_loss(points: np.ndarray, positions: np.ndarray,
                              scales: np.ndarray, hinge: bool = False) -> float:
    """Mean over points of min_k (||p - center_k|| - mean_scale_k).

    The minimum is taken over the full expression, not plain distance. A
    KD-tree bounds the candidate set exactly: any competitor of the
    nearest-by-distance candidate must lie within (d_nn - sbar_nn) + max(sbar),
    so searching that ball and falling back to the guaranteed candidate is
    equivalent to exhaustive search. ``hinge=True`` clamps each per-point
    term at zero; the default keeps the signed value.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    scales = np.asarray(scales, dtype=float).reshape(-1, 3)
    if len(points) == 0 or len(positions) == 0:
        raise UndefinedLossError("structure loss needs nonempty points and map")
    sbar = scales.mean(axis=1)
    smax = float(sbar.max())
    tree = cKDTree(positions)
    d_nn, i_nn = tree.query(points, k=1)
    upper = d_nn - sbar[i_nn]             # achievable value, bounds the minimum
    radii = upper + smax + 1e-9
    neighborhoods = tree.query_ball_point(points, radii)
    terms = np.empty(len(points))
    for j, cand in enumerate(neighborhoods):
        if not cand:                       # numerically possible, fall back
            terms[j] = upper[j]
            continue
        cand = np.asarray(cand)
        d = np.linalg.norm(positions[cand] - points[j], axis=1)
        terms[j] = (d - sbar[cand]).min()
    if hinge:
        terms = np.maximum(terms, 0.0)
    return float(terms.mean())


# ---------------------------------------------------------------------------
# Total objective
# ---------------------------------------------------------------------------

def total_loss(frames: list[FrameCamera], points, gmap,
               lambda_ssim: float = 0.2, lambda_d: float = 0.1,
               lambda_p: float = 0.1,
               s_thresh: float = DEFAULT_SILHOUETTE_THRESHOLD) -> LossBreakdown:
    """Combine the objective over the selected frames.

    Photometric and SSIM terms are averaged over frames, the delta-depth term
    is summed over consecutive frame pairs (zero for single-frame
    selections), and the structure term uses the provided scanned points
    (skipped when the points or the map are empty).
    """
    if not frames:
        raise InputDomainError("need at least one frame")
    l1 = float(np.mean([l1_photometric(f.buffers.color, f.observed) for f in frames]))
    ssim_val = float(np.mean([ssim(f.buffers.color, f.observed) for f in frames]))
    l_d = 0.0
    for a, b in zip(frames[:-1], frames[1:]):
        l_d += delta_depth_loss(a, b, s_thresh)
    l_p = 0.0
    if points is not None and len(points) and gmap is not None and len(gmap):
        l_p = structure_similarity_loss(points, gmap.positions, gmap.scales)
    return LossBreakdown.combine(l1, ssim_val, l_d, l_p,
                                 lambda_ssim, lambda_d, lambda_p)
