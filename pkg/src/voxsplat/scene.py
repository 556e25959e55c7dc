"""Deterministic synthetic scenes: parametric surfaces, simulated LiDAR
sampling, ground-truth pinhole images and analytic depth.

This is the oracle factory for the test suites: everything intersects in
closed form, so sampled points sit on their surfaces exactly (up to the
requested range noise) and depth images have no discretization error beyond
the pixel grid itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .errors import InputDomainError, ParseError
from .voxel_map import PointCloud

RAY_EPS = 1e-9


# ---------------------------------------------------------------------------
# Color functions
# ---------------------------------------------------------------------------

@dataclass
class UniformColor:
    rgb: tuple

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return np.tile(np.asarray(self.rgb, dtype=float), (len(points), 1))


@dataclass
class CheckerColor:
    period: float
    rgb_a: tuple = (0.9, 0.9, 0.9)
    rgb_b: tuple = (0.1, 0.1, 0.1)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        cells = np.floor(np.asarray(points, dtype=float) / self.period).sum(axis=1)
        parity = (cells.astype(np.int64) % 2 == 0)
        out = np.where(parity[:, None], np.asarray(self.rgb_a, dtype=float),
                       np.asarray(self.rgb_b, dtype=float))
        return out


@dataclass
class GradientColor:
    axis: int
    lo: float = -1.0
    hi: float = 1.0
    rgb_lo: tuple = (0.1, 0.2, 0.8)
    rgb_hi: tuple = (0.9, 0.7, 0.2)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        t = (np.asarray(points, dtype=float)[:, self.axis] - self.lo) / (self.hi - self.lo)
        t = np.clip(t, 0.0, 1.0)[:, None]
        return (1 - t) * np.asarray(self.rgb_lo, dtype=float) + t * np.asarray(
            self.rgb_hi, dtype=float)


# ---------------------------------------------------------------------------
# Surfaces
# ---------------------------------------------------------------------------

@dataclass
class Plane:
    """Infinite plane normal . p = offset, optionally bounded in-plane."""

    normal: np.ndarray
    offset: float
    color: object = field(default_factory=lambda: UniformColor((0.5, 0.5, 0.5)))
    half_extent: float | None = None  # in-plane bound around the foot point

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=float).reshape(3)
        n = np.linalg.norm(self.normal)
        if n == 0:
            raise InputDomainError("plane normal must be nonzero")
        self.normal = self.normal / n

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        denom = dirs @ self.normal
        num = self.offset - origins @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        t = np.where(np.abs(denom) < 1e-15, np.inf, t)
        t = np.where(t > RAY_EPS, t, np.inf)
        if self.half_extent is not None:
            hits = origins + t[:, None] * dirs
            local = hits - self.offset * self.normal
            in_plane = local - (local @ self.normal)[:, None] * self.normal
            t = np.where(np.abs(in_plane).max(axis=1) <= self.half_extent, t, np.inf)
        return t

    def color_at(self, points: np.ndarray) -> np.ndarray:
        return self.color(points)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: object = field(default_factory=lambda: UniformColor((0.5, 0.5, 0.5)))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        if self.radius <= 0:
            raise InputDomainError("sphere radius must be positive")

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origins - self.center
        a = (dirs * dirs).sum(axis=1)
        b = 2.0 * (oc * dirs).sum(axis=1)
        c = (oc * oc).sum(axis=1) - self.radius ** 2
        disc = b * b - 4 * a * c
        t = np.full(len(origins), np.inf)
        ok = disc >= 0
        sq = np.sqrt(np.clip(disc, 0, None))
        t1 = (-b - sq) / (2 * a)
        t2 = (-b + sq) / (2 * a)
        near = np.where(t1 > RAY_EPS, t1, t2)
        t[ok & (near > RAY_EPS)] = near[ok & (near > RAY_EPS)]
        return t

    def color_at(self, points: np.ndarray) -> np.ndarray:
        return self.color(points)


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    color: object = field(default_factory=lambda: UniformColor((0.5, 0.5, 0.5)))

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float).reshape(3)
        self.hi = np.asarray(self.hi, dtype=float).reshape(3)
        if np.any(self.hi <= self.lo):
            raise InputDomainError("box hi must exceed lo componentwise")

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        # slab method, vectorized over rays; zero components handled via inf
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        t1 = (self.lo - origins) * inv
        t2 = (self.hi - origins) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        parallel_outside = (np.abs(dirs) < 1e-15) & ((origins < self.lo) | (origins > self.hi))
        tmin = np.where(np.abs(dirs) < 1e-15, -np.inf, tmin)
        tmax = np.where(np.abs(dirs) < 1e-15, np.inf, tmax)
        enter = tmin.max(axis=1)
        leave = tmax.min(axis=1)
        hit = (enter <= leave) & (leave > RAY_EPS) & ~parallel_outside.any(axis=1)
        t = np.where(enter > RAY_EPS, enter, leave)
        return np.where(hit & (t > RAY_EPS), t, np.inf)

    def color_at(self, points: np.ndarray) -> np.ndarray:
        return self.color(points)


# ---------------------------------------------------------------------------
# LiDAR patterns and the scene spec
# ---------------------------------------------------------------------------

@dataclass
class LidarSpec:
    rays_per_frame: int = 2000
    pattern: str = "line-scan"     # uniform | line-scan | rosette
    noise_sigma: float = 0.0       # range noise, meters
    fov_az: float = math.radians(70.0)
    fov_el: float = math.radians(50.0)
    rows: int = 8                  # elevation rows of the line-scan pattern

    def __post_init__(self):
        if self.pattern not in ("uniform", "line-scan", "rosette"):
            raise InputDomainError(f"unknown lidar pattern {self.pattern!r}")
        if self.noise_sigma < 0:
            raise InputDomainError("noise_sigma must be nonnegative")
        if self.rays_per_frame < 1:
            raise InputDomainError("rays_per_frame must be positive")


@dataclass
class SceneSpec:
    surfaces: list
    cameras: list[Camera]          # trajectory; LiDAR rides the camera pose
    lidar: LidarSpec = field(default_factory=LidarSpec)
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.surfaces:
            raise InputDomainError("scene needs at least one surface")
        if not self.cameras:
            raise InputDomainError("scene needs at least one pose")


def _dirs_from_angles(az: np.ndarray, el: np.ndarray) -> np.ndarray:
    """Camera-frame unit rays from azimuth/elevation (z forward, y down)."""
    ce = np.cos(el)
    return np.stack([ce * np.sin(az), np.sin(el), ce * np.cos(az)], axis=1)


def ray_directions(lidar: LidarSpec, rng) -> np.ndarray:
    """Unit ray directions of one frame, camera frame."""
    n = lidar.rays_per_frame
    if lidar.pattern == "uniform":
        az = rng.uniform(-lidar.fov_az / 2, lidar.fov_az / 2, n)
        el = rng.uniform(-lidar.fov_el / 2, lidar.fov_el / 2, n)
    elif lidar.pattern == "line-scan":
        rows = max(2, lidar.rows)
        cols = max(2, n // rows)
        el_rows = np.linspace(-lidar.fov_el / 2, lidar.fov_el / 2, rows)
        az_cols = np.linspace(-lidar.fov_az / 2, lidar.fov_az / 2, cols)
        az, el = [v.ravel() for v in np.meshgrid(az_cols, el_rows)]
        # small azimuth phase wobble per row keeps repeated frames distinct
        az = az + rng.uniform(-0.5, 0.5) * (az_cols[1] - az_cols[0])
    else:  # rosette: two incommensurate angular frequencies
        t = np.arange(n) / n
        phase = rng.uniform(0, 2 * np.pi)
        az = 0.5 * lidar.fov_az * np.sin(2 * np.pi * 13.0 * t + phase)
        el = 0.5 * lidar.fov_el * np.sin(2 * np.pi * 13.0 * (1 + np.sqrt(5)) / 2 * t)
    return _dirs_from_angles(np.asarray(az), np.asarray(el))


def cast_rays(surfaces, origins: np.ndarray, dirs: np.ndarray):
    """Nearest-hit parameter and surface index per ray; misses get inf / -1."""
    best_t = np.full(len(origins), np.inf)
    best_i = np.full(len(origins), -1, dtype=np.int64)
    for i, surf in enumerate(surfaces):
        t = surf.intersect(origins, dirs)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_i[closer] = i
    return best_t, best_i


def simulate_scan(spec: SceneSpec, pose_index: int) -> PointCloud:
    """One LiDAR frame: cast the pattern from the pose, perturb ranges, color.

    Colors come from the surface color function at the true hit point; range
    noise moves the reported point along the ray. Deterministic per
    (seed, pose_index). Rays that miss every surface are omitted.
    """
    cam = spec.cameras[pose_index]
    rng = np.random.default_rng([spec.seed, pose_index])
    dirs_cam = ray_directions(spec.lidar, rng)
    dirs_world = dirs_cam @ cam.rotation  # R^T applied row-wise
    origin = cam.center()
    origins = np.tile(origin, (len(dirs_world), 1))
    t, idx = cast_rays(spec.surfaces, origins, dirs_world)
    hit = np.isfinite(t)
    t, idx, dirs_world = t[hit], idx[hit], dirs_world[hit]
    true_points = origin + t[:, None] * dirs_world
    colors = np.empty((len(t), 3))
    for i, surf in enumerate(spec.surfaces):
        m = idx == i
        if np.any(m):
            colors[m] = np.clip(surf.color_at(true_points[m]), 0.0, 1.0)
    if spec.lidar.noise_sigma > 0:
        t = t + rng.normal(0.0, spec.lidar.noise_sigma, size=len(t))
    points = origin + t[:, None] * dirs_world
    return PointCloud(points, colors,
                      np.full(len(t), spec.lidar.noise_sigma ** 2))


def simulate_frame(spec: SceneSpec, pose_index: int):
    """One full input frame at a trajectory pose.

    Combines the simulated scan with the exact ground-truth image of the
    same camera; deterministic under (seed, pose_index).
    """
    from .pipeline import FrameSample  # local import avoids a cycle

    camera = spec.cameras[pose_index]
    return FrameSample(timestamp=float(pose_index),
                       points=simulate_scan(spec, pose_index),
                       image=ground_truth_image(spec, camera),
                       camera=camera)


def analytic_depth(spec: SceneSpec, camera: Camera) -> np.ndarray:
    """Exact per-pixel camera-space depth; 0 where no surface is hit.

    Pixel rays carry z = 1 in the camera frame, so the hit parameter along
    them is the depth itself.
    """
    dirs_cam = camera.pixel_rays().reshape(-1, 3)
    dirs_world = dirs_cam @ camera.rotation
    origin = camera.center()
    origins = np.tile(origin, (len(dirs_world), 1))
    t, _ = cast_rays(spec.surfaces, origins, dirs_world)
    depth = np.where(np.isfinite(t), t, 0.0)
    return depth.reshape(camera.height, camera.width)


def ground_truth_image(spec: SceneSpec, camera: Camera) -> np.ndarray:
    """Exact per-pixel ray-cast color image; background where nothing is hit."""
    dirs_cam = camera.pixel_rays().reshape(-1, 3)
    dirs_world = dirs_cam @ camera.rotation
    origin = camera.center()
    origins = np.tile(origin, (len(dirs_world), 1))
    t, idx = cast_rays(spec.surfaces, origins, dirs_world)
    img = np.tile(np.asarray(spec.background, dtype=float),
                  (len(dirs_world), 1))
    hit = np.isfinite(t)
    pts = origin + t[hit, None] * dirs_world[hit]
    hit_idx = idx[hit]
    hit_colors = np.empty((int(hit.sum()), 3))
    for i, surf in enumerate(spec.surfaces):
        m = hit_idx == i
        if np.any(m):
            hit_colors[m] = np.clip(surf.color_at(pts[m]), 0.0, 1.0)
    img[hit] = hit_colors
    return img.reshape(camera.height, camera.width, 3)


# ---------------------------------------------------------------------------
# Config-file grammar
# ---------------------------------------------------------------------------

def _parse_color(tokens, path, lineno):
    kind = tokens[0]
    if kind == "uniform" and len(tokens) == 4:
        return UniformColor(tuple(float(v) for v in tokens[1:4]))
    if kind == "checker" and len(tokens) in (2, 8):
        period = float(tokens[1])
        if len(tokens) == 8:
            return CheckerColor(period, tuple(float(v) for v in tokens[2:5]),
                                tuple(float(v) for v in tokens[5:8]))
        return CheckerColor(period)
    if kind == "gradient" and len(tokens) == 4:
        return GradientColor(axis="xyz".index(tokens[1]),
                             lo=float(tokens[2]), hi=float(tokens[3]))
    raise ParseError(path, f"line {lineno}", f"bad color spec {' '.join(tokens)!r}")


def _parse_surface(value, path, lineno):
    tokens = value.split()
    try:
        if tokens[0] == "plane":
            color = _parse_color(tokens[5:], path, lineno) if len(tokens) > 5 \
                else UniformColor((0.5, 0.5, 0.5))
            return Plane(normal=[float(v) for v in tokens[1:4]],
                         offset=float(tokens[4]), color=color)
        if tokens[0] == "sphere":
            color = _parse_color(tokens[5:], path, lineno) if len(tokens) > 5 \
                else UniformColor((0.5, 0.5, 0.5))
            return Sphere(center=[float(v) for v in tokens[1:4]],
                          radius=float(tokens[4]), color=color)
        if tokens[0] == "box":
            color = _parse_color(tokens[7:], path, lineno) if len(tokens) > 7 \
                else UniformColor((0.5, 0.5, 0.5))
            return Box(lo=[float(v) for v in tokens[1:4]],
                       hi=[float(v) for v in tokens[4:7]], color=color)
    except (ValueError, IndexError) as exc:
        raise ParseError(path, f"line {lineno}", f"bad surface spec: {exc}") from exc
    raise ParseError(path, f"line {lineno}", f"unknown surface type {tokens[0]!r}")


def scene_from_pairs(pairs, path="<config>") -> SceneSpec:
    """Build a SceneSpec from (lineno, key, value) config pairs.

    Recognized keys: repeated ``surface`` and ``pose`` lines, ``camera``
    (fx fy cx cy width height), lidar settings (``rays``, ``pattern``,
    ``noise_sigma``, ``fov_az``/``fov_el`` in degrees, ``rows``) and ``seed``.
    Pose lines are ``tx ty tz qx qy qz qw`` giving the sensor pose in the
    world frame.
    """
    from .formats import camera_from_pose  # local import avoids a cycle

    surfaces = []
    poses = []
    intrinsics = None
    lidar_kwargs = {}
    seed = 0
    for lineno, key, value in pairs:
        if key == "surface":
            surfaces.append(_parse_surface(value, path, lineno))
        elif key == "pose":
            tokens = value.split()
            if len(tokens) != 7:
                raise ParseError(path, f"line {lineno}",
                                 "pose needs tx ty tz qx qy qz qw")
            poses.append([float(v) for v in tokens])
        elif key == "camera":
            tokens = value.split()
            if len(tokens) != 6:
                raise ParseError(path, f"line {lineno}",
                                 "camera needs fx fy cx cy width height")
            intrinsics = dict(fx=float(tokens[0]), fy=float(tokens[1]),
                              cx=float(tokens[2]), cy=float(tokens[3]),
                              width=int(tokens[4]), height=int(tokens[5]))
        elif key == "rays":
            lidar_kwargs["rays_per_frame"] = int(value)
        elif key == "pattern":
            lidar_kwargs["pattern"] = value.strip()
        elif key == "noise_sigma":
            lidar_kwargs["noise_sigma"] = float(value)
        elif key == "fov_az":
            lidar_kwargs["fov_az"] = math.radians(float(value))
        elif key == "fov_el":
            lidar_kwargs["fov_el"] = math.radians(float(value))
        elif key == "rows":
            lidar_kwargs["rows"] = int(value)
        elif key == "seed":
            seed = int(value)
        else:
            raise ParseError(path, f"line {lineno}", f"unknown scene key {key!r}")
    if intrinsics is None:
        raise ParseError(path, "end of file", "scene config lacks a camera line")
    if not poses:
        raise ParseError(path, "end of file", "scene config lacks pose lines")
    cameras = [camera_from_pose(intrinsics, row[0:3], row[3:7], path=path)
               for row in poses]
    return SceneSpec(surfaces=surfaces, cameras=cameras,
                     lidar=LidarSpec(**lidar_kwargs), seed=seed)
