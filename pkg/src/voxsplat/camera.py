"""Pinhole camera with a camera-from-world rigid pose."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputDomainError
from .geometry import look_at_rotation

ORTHONORMAL_TOL = 1e-9


@dataclass
class Camera:
    """Pinhole intrinsics plus a camera-from-world pose.

    A world point ``p`` maps to camera coordinates as ``rotation @ p +
    translation``; the camera looks along +z, x runs right and y down.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InputDomainError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InputDomainError("image dimensions must be at least 1")
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if self.rotation.shape != (3, 3):
            raise InputDomainError("rotation must be a 3x3 matrix")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise InputDomainError(f"rotation is not orthonormal (error {err:.2e})")

    @classmethod
    def looking_at(cls, eye, target, up=(0.0, 0.0, 1.0), **intrinsics) -> "Camera":
        R = look_at_rotation(eye, target, up)
        t = -R @ np.asarray(eye, dtype=float)
        return cls(rotation=R, translation=t, **intrinsics)

    # -- geometry ---------------------------------------------------------

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (pts - self.translation) @ self.rotation

    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def project(self, points: np.ndarray):
        """Project world points; returns pixel coordinates (n, 2) and depths (n,).

        No culling is applied; callers decide what to do with nonpositive depth.
        Pixel centers sit at integer coordinates.
        """
        cam = self.world_to_camera(points)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / z + self.cx
            v = self.fy * cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def pixel_rays(self) -> np.ndarray:
        """Unit-depth camera-frame ray directions, shape (height, width, 3).

        Directions have z = 1, so a hit at parameter t along them has
        camera-space depth exactly t.
        """
        us = np.arange(self.width, dtype=float)
        vs = np.arange(self.height, dtype=float)
        uu, vv = np.meshgrid(us, vs)
        return np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy,
                         np.ones_like(uu)], axis=-1)

    def with_pose(self, rotation, translation) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                      rotation, translation)


def same_view(a: Camera, b: Camera) -> bool:
    """True when two cameras share bit-identical pose and intrinsics."""
    return (a.fx == b.fx and a.fy == b.fy and a.cx == b.cx and a.cy == b.cy
            and a.width == b.width and a.height == b.height
            and np.array_equal(a.rotation, b.rotation)
            and np.array_equal(a.translation, b.translation))


def relative_transform(src: Camera, dst: Camera):
    """Rigid transform taking src-camera coordinates to dst-camera coordinates."""
    R = dst.rotation @ src.rotation.T
    t = dst.translation - R @ src.translation
    return R, t
