"""Turn solved voxel prediction grids into 3D Gaussian primitives.

Each voxel contributes n_s x n_s primitives, one per prediction subgrid.
Position is the inverse-variance weighted mean of the subgrid points, the
covariance is the matching weighted second moment about it, scale is the
square root of the covariance diagonal (floored), rotation is the identity
quaternion and color is sampled from the current camera image at the
projected position, stored as a zero-degree spherical-harmonic coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .errors import ContractViolationError, InputDomainError
from .geometry import IDENTITY_QUATERNION
from .voxel_map import VoxelKey, VoxelPrediction

SH0_BASIS = 0.28209479177  # zero-degree spherical harmonic basis constant
DEFAULT_SCALE_FLOOR = 1e-4
DEFAULT_WEIGHT_FLOOR = 1e-8


def rgb_to_sh0(color: np.ndarray) -> np.ndarray:
    """RGB in [0, 1] to zero-degree SH coefficients: (c - 0.5) / basis."""
    return (np.asarray(color, dtype=float) - 0.5) / SH0_BASIS


def sh0_to_rgb(coeff: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_sh0`; unclamped."""
    return np.asarray(coeff, dtype=float) * SH0_BASIS + 0.5


@dataclass
class GaussianPrimitive:
    """One splat: position, axis standard deviations, rotation, opacity, SH0 color."""

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray
    source_key: VoxelKey | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.scale = np.asarray(self.scale, dtype=float).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(4)
        self.color = np.asarray(self.color, dtype=float).reshape(3)
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-9:
            raise InputDomainError("rotation quaternion must be normalized")
        if np.any(self.scale <= 0):
            raise InputDomainError("scale components must be positive")
        if not 0.0 < self.opacity <= 1.0:
            raise InputDomainError("opacity must lie in (0, 1]")


@dataclass
class Subgrid:
    """One prediction subgrid: points, inverse-variance weights and colors."""

    points: np.ndarray   # (n_r^2, 3)
    weights: np.ndarray  # (n_r^2,), positive
    colors: np.ndarray   # (n_r^2, 3)


def partition_subgrids(prediction: VoxelPrediction, n_s: int, n_r: int,
                       weight_floor: float = DEFAULT_WEIGHT_FLOOR) -> list[Subgrid]:
    """Split a prediction grid into its n_s^2 subgrids of n_r^2 points.

    Relies on the mesh-grid ordering contract: points of one subgrid are
    contiguous. Weights are 1 / max(variance, weight_floor).
    """
    block = n_r * n_r
    expected = n_s * n_s * block
    if len(prediction) != expected:
        raise ContractViolationError(
            f"prediction has {len(prediction)} points, expected {expected}")
    weights = 1.0 / np.maximum(prediction.variances, weight_floor)
    out = []
    for b in range(n_s * n_s):
        sl = slice(b * block, (b + 1) * block)
        out.append(Subgrid(points=prediction.positions[sl],
                           weights=weights[sl],
                           colors=prediction.colors[sl]))
    return out


def init_position(grid: Subgrid) -> np.ndarray:
    """Weighted mean of the subgrid points; lies in their convex hull."""
    wsum = grid.weights.sum()
    if wsum <= 0:
        raise InputDomainError("subgrid weights must sum to a positive value")
    return (grid.points * grid.weights[:, None]).sum(axis=0) / wsum


def init_covariance(grid: Subgrid, position: np.ndarray,
                    scale_floor: float = DEFAULT_SCALE_FLOOR):
    """Weighted covariance about ``position``, and the derived shape parameters.

    Returns (Phi, scale, quaternion) where Phi = Q^T diag(w) Q / sum(w) with
    Q the centered points, scale is sqrt of the clamped diagonal floored at
    ``scale_floor`` (axis standard deviations) and the rotation is the
    identity quaternion.
    """
    Q = grid.points - np.asarray(position, dtype=float)
    wsum = grid.weights.sum()
    phi = (Q * grid.weights[:, None]).T @ Q / wsum
    scale = np.sqrt(np.clip(np.diag(phi), 0.0, None))
    scale = np.maximum(scale, scale_floor)
    return phi, scale, IDENTITY_QUATERNION.copy()


def init_color(position: np.ndarray, camera: Camera, image: np.ndarray,
               fallback_rgb: np.ndarray) -> np.ndarray:
    """SH0 color sampled from the image at the projected position.

    Nearest-neighbor pixel lookup; positions behind the camera or projecting
    off the image fall back to ``fallback_rgb``.
    """
    uv, z = camera.project(np.asarray(position, dtype=float).reshape(1, 3))
    rgb = np.asarray(fallback_rgb, dtype=float)
    if z[0] > 0 and np.all(np.isfinite(uv[0])):
        iu = int(np.floor(uv[0, 0] + 0.5))
        iv = int(np.floor(uv[0, 1] + 0.5))
        if 0 <= iu < camera.width and 0 <= iv < camera.height:
            rgb = np.asarray(image[iv, iu], dtype=float)
    return rgb_to_sh0(rgb)


def init_gaussians_for_voxel(prediction: VoxelPrediction, camera: Camera,
                             image: np.ndarray, config) -> list["GaussianPrimitive"]:
    """All n_s^2 primitives of a solved voxel."""
    prims = []
    for grid in partition_subgrids(prediction, config.n_s, config.n_r,
                                   config.weight_floor):
        p = init_position(grid)
        _, scale, quat = init_covariance(grid, p, config.scale_floor)
        wsum = grid.weights.sum()
        fallback = (grid.colors * grid.weights[:, None]).sum(axis=0) / wsum
        color = init_color(p, camera, image, fallback)
        prims.append(GaussianPrimitive(position=p, scale=scale, rotation=quat,
                                       opacity=config.initial_opacity, color=color,
                                       source_key=prediction.key))
    return prims


class GaussianMap:
    """Struct-of-arrays container for the splat map.

    Arrays are the mutable optimization state; ``source_keys`` keeps the
    back-reference from every primitive to the voxel that spawned it.
    """

    def __init__(self):
        self.positions = np.empty((0, 3))
        self.scales = np.empty((0, 3))
        self.rotations = np.empty((0, 4))
        self.opacities = np.empty(0)
        self.colors = np.empty((0, 3))       # SH0 coefficients
        self.source_keys = np.empty((0, 3), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.positions)

    def extend(self, primitives: list[GaussianPrimitive]) -> None:
        if not primitives:
            return
        self.positions = np.concatenate(
            [self.positions, np.stack([p.position for p in primitives])])
        self.scales = np.concatenate(
            [self.scales, np.stack([p.scale for p in primitives])])
        self.rotations = np.concatenate(
            [self.rotations, np.stack([p.rotation for p in primitives])])
        self.opacities = np.concatenate(
            [self.opacities, np.array([p.opacity for p in primitives])])
        self.colors = np.concatenate(
            [self.colors, np.stack([p.color for p in primitives])])
        keys = np.array([p.source_key if p.source_key is not None else (0, 0, 0)
                         for p in primitives], dtype=np.int64).reshape(-1, 3)
        self.source_keys = np.concatenate([self.source_keys, keys])

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            position=self.positions[i].copy(), scale=self.scales[i].copy(),
            rotation=self.rotations[i].copy(), opacity=float(self.opacities[i]),
            color=self.colors[i].copy(),
            source_key=VoxelKey(*(int(v) for v in self.source_keys[i])))

    def copy(self) -> "GaussianMap":
        out = GaussianMap()
        out.positions = self.positions.copy()
        out.scales = self.scales.copy()
        out.rotations = self.rotations.copy()
        out.opacities = self.opacities.copy()
        out.colors = self.colors.copy()
        out.source_keys = self.source_keys.copy()
        return out

    @classmethod
    def from_arrays(cls, positions, scales, rotations, opacities, colors,
                    source_keys=None) -> "GaussianMap":
        out = cls()
        out.positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        n = len(out.positions)
        out.scales = np.asarray(scales, dtype=float).reshape(n, 3)
        out.rotations = np.asarray(rotations, dtype=float).reshape(n, 4)
        out.opacities = np.asarray(opacities, dtype=float).reshape(n)
        out.colors = np.asarray(colors, dtype=float).reshape(n, 3)
        if source_keys is None:
            out.source_keys = np.zeros((n, 3), dtype=np.int64)
        else:
            out.source_keys = np.asarray(source_keys, dtype=np.int64).reshape(n, 3)
        return out
