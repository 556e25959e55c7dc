"""Quaternion and rotation helpers.

Quaternions are stored w-first ``(w, x, y, z)``.
"""

from __future__ import annotations

import numpy as np

IDENTITY_QUATERNION = np.array([1.0, 0.0, 0.0, 0.0])


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a single (normalized internally) quaternion."""
    w, x, y, z = normalize_quaternion(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quaternions_to_rotations(q: np.ndarray) -> np.ndarray:
    """Batched (n, 4) -> (n, 3, 3) version of :func:`quaternion_to_rotation`."""
    q = normalize_quaternion(np.asarray(q, dtype=float))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quaternion_to_rotation` (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return normalize_quaternion(q)


def look_at_rotation(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-from-world rotation for a camera at ``eye`` looking at ``target``.

    Camera axes follow the pinhole convention: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=float)
    target = np.asarray(target, dtype=float)
    forward = target - eye
    n = np.linalg.norm(forward)
    if n == 0:
        raise ValueError("eye and target coincide")
    forward = forward / n
    up = np.asarray(up, dtype=float)
    right = np.cross(forward, up)
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        # forward parallel to up: pick an arbitrary orthogonal right axis
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
            rn = np.linalg.norm(right)
    right = right / rn
    down = np.cross(forward, right)
    return np.stack([right, down, forward])
