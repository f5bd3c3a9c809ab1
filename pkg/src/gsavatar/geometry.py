"""Rotation utilities: quaternions, 6D encodings, polar projection."""

from __future__ import annotations

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) [w, x, y, z] -> rotation matrix/matrices."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def axis_angle_quat(axis, angle) -> np.ndarray:
    """Rotation(s) about unit axis by angle (radians); broadcasts over angle."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, dtype=np.float64)
    half = angle / 2.0
    s = np.sin(half)
    return np.concatenate(
        [np.cos(half)[..., None], s[..., None] * np.broadcast_to(axis, angle.shape + (3,))], axis=-1
    )


def matrix_to_6d(R: np.ndarray) -> np.ndarray:
    """First two columns of R, column stacked: [R00,R10,R20, R01,R11,R21]."""
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def quat_to_6d(q: np.ndarray) -> np.ndarray:
    return matrix_to_6d(quat_to_matrix(q))


def random_quat(rng: np.random.Generator, n=None) -> np.ndarray:
    shape = (4,) if n is None else (n, 4)
    return quat_normalize(rng.standard_normal(shape))


def polar_rotation(M: np.ndarray) -> np.ndarray:
    """Nearest rotation (polar factor) of 3x3 matrices, det forced to +1."""
    M = np.asarray(M, dtype=np.float64)
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    det = np.linalg.det(R)
    # flip the last singular direction where the product reflected
    flip = det < 0
    if np.ndim(flip) == 0:
        if flip:
            U = U.copy()
            U[:, -1] *= -1
            R = U @ Vt
    elif flip.any():
        U = U.copy()
        U[flip, :, -1] *= -1
        R = U @ Vt
    return R


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """World-to-camera rotation/translation for a camera at ``eye``.

    Camera convention: +x right, +y down, +z forward (into the scene).
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    t = -R @ eye
    return R, t
